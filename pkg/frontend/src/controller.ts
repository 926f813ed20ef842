/** Headless viewer logic: owns the view transform, the overlay stage, the
 * in-flight measurement request (later clicks cancel the pending one), and
 * the session history. Rendering and toasts are injected so tests can drive
 * clicks without a browser canvas. */

import { ApiClient, ApiError } from "./api.js";
import { buildOverlay, OverlayData } from "./overlay.js";
import { HistoryStore } from "./history.js";
import { MeasureResponse, OverlayStage, SliceInfo } from "./types.js";
import { canvasToImage, defaultView, insideImage, pan, ViewState, zoomAt } from "./view.js";

export interface ControllerHooks {
  render: () => void;
  toast: (message: string) => void;
}

export class ViewerController {
  view: ViewState = defaultView();
  stage: OverlayStage = "refined";
  slice: SliceInfo | null = null;
  current: MeasureResponse | null = null;
  history = new HistoryStore();
  pending: AbortController | null = null;

  constructor(private api: ApiClient, private hooks: ControllerHooks) {}

  setSlice(slice: SliceInfo): void {
    this.slice = slice;
    this.current = null;
    this.view = defaultView();
    this.hooks.render();
  }

  setStage(stage: OverlayStage): void {
    this.stage = stage;
    this.hooks.render();
  }

  toggleStage(): void {
    this.setStage(this.stage === "refined" ? "initial" : "refined");
  }

  wheel(factor: number, cx: number, cy: number): void {
    this.view = zoomAt(this.view, factor, cx, cy);
    this.hooks.render();
  }

  drag(dx: number, dy: number): void {
    this.view = pan(this.view, dx, dy);
    this.hooks.render();
  }

  /** Canvas click -> integer image pixel -> POST /api/measure. */
  async click(canvasX: number, canvasY: number): Promise<MeasureResponse | null> {
    if (!this.slice) return null;
    const [ix, iy] = canvasToImage(this.view, canvasX, canvasY);
    if (!insideImage(ix, iy, this.slice.width, this.slice.height)) {
      this.hooks.toast("click outside the image");
      return null;
    }
    this.pending?.abort();
    const ctrl = new AbortController();
    this.pending = ctrl;
    try {
      const res = await this.api.measure(this.slice.id, ix, iy, ctrl.signal);
      if (ctrl.signal.aborted) return null;
      this.current = res;
      this.history.add({
        sliceId: this.slice.id,
        click: { x: ix, y: iy },
        response: res,
        at: Date.now(),
      });
      this.hooks.render();
      return res;
    } catch (err) {
      if ((err as Error).name === "AbortError") return null;
      if (err instanceof ApiError) {
        this.hooks.toast(`measure failed (${err.status}): ${err.message}`);
      } else {
        this.hooks.toast(`measure failed: ${(err as Error).message}`);
      }
      return null;
    } finally {
      if (this.pending === ctrl) this.pending = null;
    }
  }

  selectHistory(index: number): void {
    const entry = this.history.select(index);
    if (entry) {
      this.current = entry.response;
      this.hooks.render();
    }
  }

  overlay(): OverlayData | null {
    if (!this.current) return null;
    return buildOverlay(this.current, this.stage, this.view);
  }
}
