/**
 * DOM rendering layer. Pixel composition is a pure function over the
 * decoded image and the binary overlay so it can be verified directly;
 * the canvas write is a thin putImageData on top.
 */

import { QueueItem } from "./api.js";
import { DecodedImage } from "./png.js";
import { RectificationSession } from "./session.js";

/** Compose base image + red overlay tint into RGBA; never mutates inputs. */
export function composePixels(image: DecodedImage, overlay: Uint8Array,
                              opacity: number): Uint8ClampedArray {
  const { width, height, channels, data } = image;
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    const r = channels === 3 ? data[i * 3] : data[i];
    const g = channels === 3 ? data[i * 3 + 1] : data[i];
    const b = channels === 3 ? data[i * 3 + 2] : data[i];
    if (overlay[i]) {
      out[i * 4] = r + (255 - r) * opacity;
      out[i * 4 + 1] = g * (1 - opacity);
      out[i * 4 + 2] = b * (1 - opacity);
    } else {
      out[i * 4] = r;
      out[i * 4 + 1] = g;
      out[i * 4 + 2] = b;
    }
    out[i * 4 + 3] = 255;
  }
  return out;
}

export function renderEditorCanvas(canvas: HTMLCanvasElement,
                                   session: RectificationSession): void {
  const current = session.current;
  if (!current) return;
  canvas.width = current.image.width;
  canvas.height = current.image.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const rgba = composePixels(current.image, current.editor.data,
                             current.overlayOpacity);
  ctx.putImageData(new ImageData(rgba, canvas.width, canvas.height), 0, 0);
}

export function renderQueue(container: HTMLElement, items: QueueItem[],
                            error: string | null, isEmpty: boolean,
                            onOpen: (imageId: string) => void,
                            onRetry: () => void): void {
  container.textContent = "";
  const doc = container.ownerDocument;
  if (error) {
    const banner = doc.createElement("div");
    banner.className = "error-banner";
    banner.textContent = `queue unavailable: ${error}`;
    const retry = doc.createElement("button");
    retry.textContent = "retry";
    retry.addEventListener("click", onRetry);
    banner.appendChild(retry);
    container.appendChild(banner);
  }
  if (isEmpty && !error) {
    const empty = doc.createElement("p");
    empty.className = "empty-state";
    empty.textContent = "nothing to rectify";
    container.appendChild(empty);
    return;
  }
  for (const item of items) {
    const card = doc.createElement("div");
    card.className = `queue-card ${item.status}`;
    card.dataset.imageId = item.image_id;
    const title = doc.createElement("strong");
    title.textContent = item.image_id;
    const score = doc.createElement("span");
    score.className = "score";
    score.textContent = `confidence ${item.score.toFixed(4)}`;
    const status = doc.createElement("span");
    status.className = "status";
    status.textContent = item.status;
    const open = doc.createElement("button");
    open.textContent = "edit";
    open.addEventListener("click", () => onOpen(item.image_id));
    card.append(title, score, status, open);
    container.appendChild(card);
  }
}

export function renderJobPanel(container: HTMLElement,
                               session: RectificationSession): void {
  container.textContent = "";
  const doc = container.ownerDocument;
  const job = session.job;
  if (!job) {
    const hint = doc.createElement("p");
    hint.textContent = session.canTriggerFineTune
      ? "all rectifications submitted; fine-tune is ready"
      : "rectify every queued image to enable fine-tuning";
    container.appendChild(hint);
    return;
  }
  const status = doc.createElement("p");
  status.className = "job-status";
  status.textContent = `fine-tune: ${job.status}`;
  container.appendChild(status);
  if (job.status === "done" && job.before && job.after) {
    const table = doc.createElement("table");
    table.className = "metrics";
    const header = doc.createElement("tr");
    for (const cell of ["", "Dice", "IoU"]) {
      const th = doc.createElement("th");
      th.textContent = cell;
      header.appendChild(th);
    }
    table.appendChild(header);
    for (const [label, phase] of [["before", job.before],
                                  ["after", job.after]] as const) {
      const row = doc.createElement("tr");
      row.className = `phase-${label}`;
      const name = doc.createElement("td");
      name.textContent = label;
      const dice = doc.createElement("td");
      dice.textContent = (100 * phase.mean_dice).toFixed(2) + "%";
      const iou = doc.createElement("td");
      iou.textContent = (100 * phase.mean_iou).toFixed(2) + "%";
      row.append(name, dice, iou);
      table.appendChild(row);
    }
    container.appendChild(table);
  }
  if (job.status === "failed" && job.error) {
    const err = doc.createElement("p");
    err.className = "error-banner";
    err.textContent = job.error;
    container.appendChild(err);
  }
}
