import { describe, expect, it } from "vitest";

import { buildOverlay, LONG_COLOR, SHORT_COLOR, stageBody } from "../src/overlay.js";
import { imageToCanvas, ViewState } from "../src/view.js";
import { fakeResponse } from "./fixtures.js";

describe("overlay geometry", () => {
  const views: ViewState[] = [
    { zoom: 1, panX: 0, panY: 0 },
    { zoom: 2.5, panX: -20, panY: 14 },
  ];

  it("endpoint markers land within 1 display px of the API coordinates", () => {
    const res = fakeResponse();
    for (const view of views) {
      const data = buildOverlay(res, "refined", view);
      const apiPts = [
        res.recist.long[0], res.recist.long[1],
        res.recist.short[0], res.recist.short[1],
      ];
      expect(data.markers.length).toBe(4);
      data.markers.forEach((m, i) => {
        const [ex, ey] = imageToCanvas(view, apiPts[i].x, apiPts[i].y);
        expect(Math.hypot(m.x - ex, m.y - ey)).toBeLessThan(1.0);
      });
    }
  });

  it("long markers are red, short markers green", () => {
    const data = buildOverlay(fakeResponse(), "refined", views[0]);
    expect(data.markers[0].color).toBe(LONG_COLOR);
    expect(data.markers[1].color).toBe(LONG_COLOR);
    expect(data.markers[2].color).toBe(SHORT_COLOR);
    expect(data.markers[3].color).toBe(SHORT_COLOR);
  });

  it("stage toggle switches between refined and initial payloads", () => {
    const res = fakeResponse();
    expect(stageBody(res, "refined").lengths_mm.long).toBe(16.4);
    expect(stageBody(res, "initial").lengths_mm.long).toBe(12.8);
    const refined = buildOverlay(res, "refined", views[0]);
    const initial = buildOverlay(res, "initial", views[0]);
    expect(refined.lengthsMm.long).toBe(16.4);
    expect(initial.lengthsMm.long).toBe(12.8);
    expect(refined.contour).not.toEqual(initial.contour);
  });

  it("contour vertices follow the view transform", () => {
    const res = fakeResponse();
    const view = views[1];
    const data = buildOverlay(res, "refined", view);
    const [ex, ey] = imageToCanvas(view, 40, 30);
    expect(data.contour[0][0]).toBeCloseTo(ex, 9);
    expect(data.contour[0][1]).toBeCloseTo(ey, 9);
  });
});
