export interface SliceInfo {
  id: string;
  height: number;
  width: number;
  spacing_mm_per_px: number;
}

export interface SliceImage extends SliceInfo {
  image_png_base64: string;
}

export interface ApiPoint {
  x: number;
  y: number;
}

export interface RecistOut {
  long: [ApiPoint, ApiPoint];
  short: [ApiPoint, ApiPoint];
}

export interface MeasurementBody {
  contour: [number, number][];
  recist: RecistOut;
  lengths_mm: { long: number; short: number };
}

export interface MeasureResponse extends MeasurementBody {
  initial: MeasurementBody;
  candidate: { score: number; box: number[] };
  timing_ms: number;
}

export type OverlayStage = "refined" | "initial";
