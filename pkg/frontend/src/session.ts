/**
 * Session state machine wiring the queue, the mask editor, and the
 * fine-tune job. The service is the source of truth: every submission is
 * reconciled by re-fetching the queue, and nothing is persisted client-side.
 */

import { ApiClient, ApiError, JobInfo, QueueItem } from "./api.js";
import { MaskEditor } from "./mask.js";
import { DecodedImage } from "./png.js";

export class QueueState {
  items: QueueItem[] = [];
  error: string | null = null;
  loaded = false;

  constructor(private readonly api: ApiClient) {}

  /** Refresh from the service; on failure keep the current items. */
  async refresh(): Promise<void> {
    try {
      this.items = await this.api.fetchQueue();
      this.error = null;
      this.loaded = true;
    } catch (err) {
      this.error = err instanceof Error ? err.message : String(err);
    }
  }

  get isEmpty(): boolean {
    return this.loaded && this.items.length === 0;
  }

  get allRectified(): boolean {
    return this.items.length > 0 && this.items.every((i) => i.status === "rectified");
  }

  item(imageId: string): QueueItem | undefined {
    return this.items.find((i) => i.image_id === imageId);
  }
}

export interface EditorSession {
  imageId: string;
  image: DecodedImage;
  editor: MaskEditor;
  /** Overlay rendering opacity; pure view state, never touches mask data. */
  overlayOpacity: number;
}

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class RectificationSession {
  readonly queue: QueueState;
  current: EditorSession | null = null;
  jobId: string | null = null;
  job: JobInfo | null = null;
  lastError: string | null = null;

  constructor(private readonly api: ApiClient) {
    this.queue = new QueueState(api);
  }

  /** Open an editor on a queued image; on fetch failure no session opens. */
  async openEditor(imageId: string): Promise<EditorSession> {
    if (!this.queue.item(imageId)) {
      throw new Error(`image ${imageId} is not in the queue`);
    }
    const [image, prediction] = await Promise.all([
      this.api.fetchImage(imageId),
      this.api.fetchPrediction(imageId),
    ]);
    if (prediction.width !== image.width || prediction.height !== image.height) {
      throw new Error("prediction extents do not match the image");
    }
    const editor = MaskEditor.fromPrediction(
      prediction.width, prediction.height, prediction.data);
    this.current = { imageId, image, editor, overlayOpacity: 0.5 };
    return this.current;
  }

  closeEditor(): void {
    this.current = null;
  }

  /** Upload the current overlay, then reconcile with the service. */
  async submitCurrent(): Promise<void> {
    const session = this.current;
    if (!session) throw new Error("no editor session open");
    try {
      await this.api.submitRectification(
        session.imageId, session.editor.width, session.editor.height,
        session.editor.data);
      this.lastError = null;
    } catch (err) {
      if (err instanceof ApiError && err.isStaleQueue) {
        this.lastError = "queue changed on the server; refresh and retry";
      } else {
        this.lastError = err instanceof Error ? err.message : String(err);
      }
      throw err;
    } finally {
      await this.queue.refresh();
    }
  }

  get canTriggerFineTune(): boolean {
    return this.queue.allRectified && this.jobId === null;
  }

  async triggerFineTune(): Promise<string> {
    const jobId = await this.api.triggerFineTune();
    this.jobId = jobId;
    this.job = { status: "pending" };
    return jobId;
  }

  async pollJobOnce(): Promise<JobInfo> {
    if (!this.jobId) throw new Error("no fine-tune job started");
    this.job = await this.api.fetchJob(this.jobId);
    return this.job;
  }

  /** Poll until the job finishes; resolves with the terminal job info. */
  async waitForJob(intervalMs = 250, timeoutMs = 120000,
                   sleeper: (ms: number) => Promise<void> = sleep): Promise<JobInfo> {
    const deadline = Date.now() + timeoutMs;
    while (true) {
      const job = await this.pollJobOnce();
      if (job.status === "done" || job.status === "failed") {
        return job;
      }
      if (Date.now() > deadline) {
        throw new Error("fine-tune job did not finish in time");
      }
      await sleeper(intervalMs);
    }
  }
}
