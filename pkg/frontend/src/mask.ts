/**
 * Mask editing state: a strictly binary overlay at native mask resolution
 * with a round brush, draw/erase modes, and a bounded undo stack. All
 * geometry is in native mask pixels; zoom is a pure view transform applied
 * elsewhere, so authorship stays bit-exact.
 */

export type BrushMode = "draw" | "erase";

const UNDO_LIMIT = 32; // comfortably above the guaranteed 20 levels

export class MaskEditor {
  readonly width: number;
  readonly height: number;
  brushSize = 8;
  mode: BrushMode = "draw";

  private overlay: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private strokeOpen = false;

  constructor(width: number, height: number, overlay?: Uint8Array) {
    this.width = width;
    this.height = height;
    if (overlay) {
      if (overlay.length !== width * height) {
        throw new Error(`overlay length ${overlay.length} != ${width}x${height}`);
      }
      this.overlay = new Uint8Array(overlay.length);
      for (let i = 0; i < overlay.length; i++) {
        this.overlay[i] = overlay[i] ? 1 : 0;
      }
    } else {
      this.overlay = new Uint8Array(width * height);
    }
  }

  /** Initial overlay = the predicted soft mask binarized at 128/255. */
  static fromPrediction(width: number, height: number, gray: Uint8Array): MaskEditor {
    const overlay = new Uint8Array(width * height);
    for (let i = 0; i < overlay.length; i++) {
      overlay[i] = gray[i] > 127 ? 1 : 0;
    }
    return new MaskEditor(width, height, overlay);
  }

  /** Read-only view of the binary overlay (values 0/1). */
  get data(): Uint8Array {
    return this.overlay;
  }

  snapshot(): Uint8Array {
    return this.overlay.slice();
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  beginStroke(): void {
    if (this.strokeOpen) return;
    this.strokeOpen = true;
    this.undoStack.push(this.overlay.slice());
    if (this.undoStack.length > UNDO_LIMIT) {
      this.undoStack.shift();
    }
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  /** Stamp the round brush at native pixel (x, y). */
  stamp(x: number, y: number): void {
    const radius = Math.max(0.5, this.brushSize / 2);
    const value = this.mode === "draw" ? 1 : 0;
    const x0 = Math.max(0, Math.floor(x - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(x + radius));
    const y0 = Math.max(0, Math.floor(y - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(y + radius));
    const r2 = radius * radius;
    for (let py = y0; py <= y1; py++) {
      for (let px = x0; px <= x1; px++) {
        const dx = px - x;
        const dy = py - y;
        if (dx * dx + dy * dy <= r2) {
          this.overlay[py * this.width + px] = value;
        }
      }
    }
  }

  /** Stamp along the segment from (x0, y0) to (x1, y1) without gaps. */
  strokeTo(x0: number, y0: number, x1: number, y1: number): void {
    const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
    for (let s = 0; s <= steps; s++) {
      const t = s / steps;
      this.stamp(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
    }
  }

  /** Restore the overlay exactly as it was before the last stroke. */
  undo(): boolean {
    const prior = this.undoStack.pop();
    if (!prior) return false;
    this.overlay = prior;
    this.strokeOpen = false;
    return true;
  }
}
