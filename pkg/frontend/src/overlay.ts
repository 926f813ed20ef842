/** Overlay geometry: measurement graphics in canvas coordinates.
 *
 * Convention for markers: long-axis endpoints red, short-axis endpoints
 * green; the segmentation boundary is a closed yellow polyline.
 */

import { MeasurementBody, MeasureResponse, OverlayStage } from "./types.js";
import { imageToCanvas, ViewState } from "./view.js";

export const CONTOUR_COLOR = "#ffd400";
export const LONG_COLOR = "#ff3b30";
export const SHORT_COLOR = "#34c759";

export interface Marker {
  x: number;
  y: number;
  color: string;
}

export interface Segment {
  from: [number, number];
  to: [number, number];
  color: string;
}

export interface OverlayData {
  stage: OverlayStage;
  contour: [number, number][];
  segments: Segment[];
  markers: Marker[];
  lengthsMm: { long: number; short: number };
}

export function stageBody(res: MeasureResponse, stage: OverlayStage): MeasurementBody {
  return stage === "refined" ? res : res.initial;
}

export function buildOverlay(res: MeasureResponse, stage: OverlayStage,
                             view: ViewState): OverlayData {
  const body = stageBody(res, stage);
  const contour = body.contour.map(([x, y]) => imageToCanvas(view, x, y));
  const segs: Segment[] = [];
  const markers: Marker[] = [];
  const axes: [keyof typeof body.recist, string][] = [
    ["long", LONG_COLOR],
    ["short", SHORT_COLOR],
  ];
  for (const [axis, color] of axes) {
    const [a, b] = body.recist[axis];
    const pa = imageToCanvas(view, a.x, a.y);
    const pb = imageToCanvas(view, b.x, b.y);
    segs.push({ from: pa, to: pb, color });
    markers.push({ x: pa[0], y: pa[1], color });
    markers.push({ x: pb[0], y: pb[1], color });
  }
  return {
    stage,
    contour,
    segments: segs,
    markers,
    lengthsMm: body.lengths_mm,
  };
}

export function drawOverlay(ctx: CanvasRenderingContext2D, data: OverlayData): void {
  if (data.contour.length > 1) {
    ctx.strokeStyle = CONTOUR_COLOR;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.moveTo(data.contour[0][0], data.contour[0][1]);
    for (const [x, y] of data.contour.slice(1)) ctx.lineTo(x, y);
    ctx.closePath();
    ctx.stroke();
  }
  for (const seg of data.segments) {
    ctx.strokeStyle = seg.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.moveTo(seg.from[0], seg.from[1]);
    ctx.lineTo(seg.to[0], seg.to[1]);
    ctx.stroke();
  }
  for (const m of data.markers) {
    ctx.fillStyle = m.color;
    ctx.beginPath();
    ctx.arc(m.x, m.y, 3, 0, Math.PI * 2);
    ctx.fill();
  }
}
