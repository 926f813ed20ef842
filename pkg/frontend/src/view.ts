/** View transform between image pixels and canvas coordinates.
 *
 * Image pixel (ix, iy) renders as the square
 * [ix*zoom + panX, (ix+1)*zoom + panX) x [...y...); its center sits at
 * (ix + 0.5) * zoom + panX. The inverse floors back to the integer pixel,
 * so center-of-pixel clicks round-trip exactly at every zoom level.
 */

export interface ViewState {
  zoom: number;
  panX: number;
  panY: number;
}

export function defaultView(): ViewState {
  return { zoom: 1, panX: 0, panY: 0 };
}

/** Canvas position of the center of an (integer or fractional) image pixel. */
export function imageToCanvas(v: ViewState, ix: number, iy: number): [number, number] {
  return [(ix + 0.5) * v.zoom + v.panX, (iy + 0.5) * v.zoom + v.panY];
}

/** Integer image pixel under a canvas position. */
export function canvasToImage(v: ViewState, cx: number, cy: number): [number, number] {
  return [Math.floor((cx - v.panX) / v.zoom), Math.floor((cy - v.panY) / v.zoom)];
}

export function insideImage(x: number, y: number, width: number, height: number): boolean {
  return x >= 0 && y >= 0 && x < width && y < height;
}

/** Zoom by `factor` keeping the canvas point (cx, cy) anchored. */
export function zoomAt(v: ViewState, factor: number, cx: number, cy: number): ViewState {
  const zoom = Math.min(32, Math.max(0.25, v.zoom * factor));
  const scale = zoom / v.zoom;
  return {
    zoom,
    panX: cx - (cx - v.panX) * scale,
    panY: cy - (cy - v.panY) * scale,
  };
}

export function pan(v: ViewState, dx: number, dy: number): ViewState {
  return { ...v, panX: v.panX + dx, panY: v.panY + dy };
}

/** Display-only window/level: map an 8-bit stored value to a display byte. */
export function windowLevel(value: number, center: number, width: number): number {
  const lo = center - width / 2;
  const t = ((value - lo) / Math.max(width, 1e-6)) * 255;
  return Math.max(0, Math.min(255, Math.round(t)));
}

export function buildWindowLut(center: number, width: number): Uint8ClampedArray {
  const lut = new Uint8ClampedArray(256);
  for (let i = 0; i < 256; i++) lut[i] = windowLevel(i, center, width);
  return lut;
}
