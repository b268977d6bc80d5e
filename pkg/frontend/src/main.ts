/**
 * Page bootstrap: wires the session to the DOM, maps pointer events to
 * native mask pixels (zoom is a CSS transform, so authorship stays exact),
 * and drives queue/job polling.
 */

import { ApiClient } from "./api.js";
import { renderEditorCanvas, renderJobPanel, renderQueue } from "./dom.js";
import { RectificationSession } from "./session.js";

function requireElement<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
}

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? "http://127.0.0.1:8742";
const session = new RectificationSession(new ApiClient(baseUrl));

const queueEl = requireElement<HTMLElement>("queue");
const canvas = requireElement<HTMLCanvasElement>("editor-canvas");
const editorPanel = requireElement<HTMLElement>("editor-panel");
const editorTitle = requireElement<HTMLElement>("editor-title");
const jobEl = requireElement<HTMLElement>("job-panel");
const brushSizeInput = requireElement<HTMLInputElement>("brush-size");
const opacityInput = requireElement<HTMLInputElement>("overlay-opacity");
const modeButton = requireElement<HTMLButtonElement>("brush-mode");
const undoButton = requireElement<HTMLButtonElement>("undo");
const submitButton = requireElement<HTMLButtonElement>("submit");
const finetuneButton = requireElement<HTMLButtonElement>("finetune");
const zoomInput = requireElement<HTMLInputElement>("zoom");

function redraw(): void {
  renderQueue(queueEl, session.queue.items, session.queue.error,
              session.queue.isEmpty, openEditor, () => void refreshQueue());
  renderJobPanel(jobEl, session);
  finetuneButton.disabled = !session.canTriggerFineTune;
  if (session.current) {
    editorPanel.style.display = "";
    editorTitle.textContent = session.current.imageId;
    renderEditorCanvas(canvas, session);
  } else {
    editorPanel.style.display = "none";
  }
}

async function refreshQueue(): Promise<void> {
  await session.queue.refresh();
  redraw();
}

async function openEditor(imageId: string): Promise<void> {
  try {
    await session.openEditor(imageId);
  } catch (err) {
    session.lastError = err instanceof Error ? err.message : String(err);
  }
  redraw();
}

// pointer-to-native-pixel mapping: invert the view scale only
function nativePoint(event: PointerEvent): [number, number] {
  const rect = canvas.getBoundingClientRect();
  const x = ((event.clientX - rect.left) / rect.width) * canvas.width;
  const y = ((event.clientY - rect.top) / rect.height) * canvas.height;
  return [x - 0.5, y - 0.5];
}

let lastPoint: [number, number] | null = null;

canvas.addEventListener("pointerdown", (event) => {
  const current = session.current;
  if (!current) return;
  canvas.setPointerCapture(event.pointerId);
  current.editor.beginStroke();
  const p = nativePoint(event);
  current.editor.stamp(p[0], p[1]);
  lastPoint = p;
  renderEditorCanvas(canvas, session);
});

canvas.addEventListener("pointermove", (event) => {
  const current = session.current;
  if (!current || !lastPoint) return;
  const p = nativePoint(event);
  current.editor.strokeTo(lastPoint[0], lastPoint[1], p[0], p[1]);
  lastPoint = p;
  renderEditorCanvas(canvas, session);
});

const endStroke = () => {
  session.current?.editor.endStroke();
  lastPoint = null;
};
canvas.addEventListener("pointerup", endStroke);
canvas.addEventListener("pointercancel", endStroke);

brushSizeInput.addEventListener("input", () => {
  if (session.current) session.current.editor.brushSize = Number(brushSizeInput.value);
});

opacityInput.addEventListener("input", () => {
  if (session.current) {
    session.current.overlayOpacity = Number(opacityInput.value);
    renderEditorCanvas(canvas, session);
  }
});

modeButton.addEventListener("click", () => {
  const editor = session.current?.editor;
  if (!editor) return;
  editor.mode = editor.mode === "draw" ? "erase" : "draw";
  modeButton.textContent = editor.mode;
});

undoButton.addEventListener("click", () => {
  session.current?.editor.undo();
  renderEditorCanvas(canvas, session);
});

zoomInput.addEventListener("input", () => {
  canvas.style.transform = `scale(${zoomInput.value})`;
});

submitButton.addEventListener("click", async () => {
  try {
    await session.submitCurrent();
    session.closeEditor();
  } catch {
    /* session.lastError carries the message */
  }
  redraw();
});

finetuneButton.addEventListener("click", async () => {
  try {
    await session.triggerFineTune();
    redraw();
    await session.waitForJob(500, 30 * 60 * 1000);
  } catch (err) {
    session.lastError = err instanceof Error ? err.message : String(err);
  }
  redraw();
});

void refreshQueue();
setInterval(() => {
  if (!session.current) void refreshQueue();
}, 5000);
