import { MeasureResponse } from "../src/types.js";

export function fakeResponse(): MeasureResponse {
  return {
    contour: [[40, 30], [60, 30], [60, 50], [40, 50]],
    recist: {
      long: [{ x: 40.25, y: 40.5 }, { x: 60.75, y: 40.5 }],
      short: [{ x: 50.5, y: 31.0 }, { x: 50.5, y: 49.75 }],
    },
    lengths_mm: { long: 16.4, short: 15.0 },
    initial: {
      contour: [[42, 32], [58, 32], [58, 48], [42, 48]],
      recist: {
        long: [{ x: 42.0, y: 41.0 }, { x: 58.0, y: 41.0 }],
        short: [{ x: 50.0, y: 33.0 }, { x: 50.0, y: 47.0 }],
      },
      lengths_mm: { long: 12.8, short: 11.2 },
    },
    candidate: { score: 0.93, box: [38, 28, 62, 52] },
    timing_ms: 120.5,
  };
}
