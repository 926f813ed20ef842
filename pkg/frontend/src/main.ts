/** Browser entry point: wires the controller to the canvas, sliders, and
 * history panel. The slice image is decoded once; window/level is a
 * display-only lookup applied when blitting. */

import { ApiClient } from "./api.js";
import { ViewerController } from "./controller.js";
import { drawOverlay } from "./overlay.js";
import { buildWindowLut, imageToCanvas } from "./view.js";

const api = new ApiClient("");
const canvas = document.getElementById("viewer") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const sliceSelect = document.getElementById("slice-select") as HTMLSelectElement;
const centerSlider = document.getElementById("wl-center") as HTMLInputElement;
const widthSlider = document.getElementById("wl-width") as HTMLInputElement;
const stageToggle = document.getElementById("stage-toggle") as HTMLButtonElement;
const lengthPanel = document.getElementById("lengths") as HTMLDivElement;
const historyList = document.getElementById("history") as HTMLUListElement;
const toastBox = document.getElementById("toasts") as HTMLDivElement;

let rawPixels: ImageData | null = null;

function toast(message: string): void {
  const el = document.createElement("div");
  el.className = "toast";
  el.textContent = message;
  toastBox.appendChild(el);
  setTimeout(() => el.remove(), 4000);
}

const controller = new ViewerController(api, { render, toast });

function render(): void {
  ctx.fillStyle = "#101418";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (rawPixels && controller.slice) {
    const lut = buildWindowLut(Number(centerSlider.value), Number(widthSlider.value));
    const shown = new ImageData(rawPixels.width, rawPixels.height);
    for (let i = 0; i < rawPixels.data.length; i += 4) {
      const v = lut[rawPixels.data[i]];
      shown.data[i] = shown.data[i + 1] = shown.data[i + 2] = v;
      shown.data[i + 3] = 255;
    }
    const off = new OffscreenCanvas(shown.width, shown.height);
    off.getContext("2d")!.putImageData(shown, 0, 0);
    ctx.imageSmoothingEnabled = controller.view.zoom < 1;
    const origin = imageToCanvas(controller.view, -0.5, -0.5);
    ctx.drawImage(off, origin[0], origin[1],
                  shown.width * controller.view.zoom,
                  shown.height * controller.view.zoom);
  }
  const overlay = controller.overlay();
  if (overlay) {
    drawOverlay(ctx, overlay);
    lengthPanel.textContent =
      `${overlay.stage}: long ${overlay.lengthsMm.long.toFixed(1)} mm, ` +
      `short ${overlay.lengthsMm.short.toFixed(1)} mm`;
  } else {
    lengthPanel.textContent = "click a lesion to measure";
  }
  stageToggle.textContent = `showing: ${controller.stage}`;
  renderHistory();
}

function renderHistory(): void {
  historyList.replaceChildren();
  controller.history.list().forEach((entry, i) => {
    const li = document.createElement("li");
    li.textContent = `#${i + 1} ${entry.sliceId} @ (${entry.click.x}, ${entry.click.y}) ` +
      `long ${entry.response.lengths_mm.long.toFixed(1)} mm`;
    if (i === controller.history.selection) li.classList.add("selected");
    li.onclick = () => controller.selectHistory(i);
    historyList.appendChild(li);
  });
}

async function loadSlice(id: string): Promise<void> {
  const body = await api.getSlice(id);
  controller.setSlice(body);
  const img = new Image();
  img.onload = () => {
    const probe = document.createElement("canvas");
    probe.width = img.width;
    probe.height = img.height;
    const pctx = probe.getContext("2d")!;
    pctx.drawImage(img, 0, 0);
    rawPixels = pctx.getImageData(0, 0, img.width, img.height);
    render();
  };
  img.src = `data:image/png;base64,${body.image_png_base64}`;
}

async function boot(): Promise<void> {
  const slices = await api.listSlices();
  sliceSelect.replaceChildren();
  for (const s of slices) {
    const opt = document.createElement("option");
    opt.value = s.id;
    opt.textContent = `${s.id} (${s.width}x${s.height})`;
    sliceSelect.appendChild(opt);
  }
  sliceSelect.onchange = () => void loadSlice(sliceSelect.value);
  if (slices.length) await loadSlice(slices[0].id);
}

canvas.addEventListener("click", (ev) => {
  void controller.click(ev.offsetX, ev.offsetY);
});
canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  controller.wheel(ev.deltaY < 0 ? 1.25 : 0.8, ev.offsetX, ev.offsetY);
});
let dragging = false;
let last: [number, number] = [0, 0];
canvas.addEventListener("mousedown", (ev) => {
  if (ev.button === 1 || ev.button === 2 || ev.shiftKey) {
    dragging = true;
    last = [ev.offsetX, ev.offsetY];
    ev.preventDefault();
  }
});
canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
window.addEventListener("mouseup", () => (dragging = false));
canvas.addEventListener("mousemove", (ev) => {
  if (dragging) {
    controller.drag(ev.offsetX - last[0], ev.offsetY - last[1]);
    last = [ev.offsetX, ev.offsetY];
  }
});
stageToggle.onclick = () => controller.toggleStage();
centerSlider.oninput = render;
widthSlider.oninput = render;

void boot().catch((err) => toast(`failed to load slices: ${err.message}`));
