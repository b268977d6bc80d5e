/**
 * Typed client for the rectification service. The only mutating calls the
 * UI ever makes are PUT /api/rectifications/{id} and POST /api/fine-tune.
 */

import { DecodedImage, decodePng, encodeGrayPng } from "./png.js";

export interface QueueItem {
  image_id: string;
  score: number;
  detected_pixel_count: number;
  status: "pending" | "rectified";
}

export interface PhaseMetrics {
  mean_dice: number;
  mean_iou: number;
  n_images: number;
}

export interface JobInfo {
  status: "pending" | "running" | "done" | "failed";
  rectified_ids?: string[];
  finetune_lr?: number;
  before?: PhaseMetrics | null;
  after?: PhaseMetrics | null;
  error?: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }

  get isStaleQueue(): boolean {
    return this.status === 409;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function errorFrom(response: Response): Promise<ApiError> {
  let message = `${response.status}`;
  try {
    const body = await response.json();
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    /* non-JSON error body */
  }
  return new ApiError(response.status, message);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async fetchQueue(): Promise<QueueItem[]> {
    const response = await this.fetchFn(this.url("/api/queue"));
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as QueueItem[];
  }

  async fetchImage(imageId: string): Promise<DecodedImage> {
    const response = await this.fetchFn(this.url(`/api/images/${imageId}`));
    if (!response.ok) throw await errorFrom(response);
    return decodePng(new Uint8Array(await response.arrayBuffer()));
  }

  async fetchPrediction(imageId: string): Promise<DecodedImage> {
    const response = await this.fetchFn(this.url(`/api/predictions/${imageId}`));
    if (!response.ok) throw await errorFrom(response);
    const image = decodePng(new Uint8Array(await response.arrayBuffer()));
    if (image.channels !== 1) {
      throw new Error("prediction mask is not grayscale");
    }
    return image;
  }

  /** Upload a strictly binary overlay (values 0/1) as a 0/255 gray PNG. */
  async submitRectification(imageId: string, width: number, height: number,
                            overlay: Uint8Array): Promise<void> {
    const gray = new Uint8Array(overlay.length);
    for (let i = 0; i < overlay.length; i++) {
      gray[i] = overlay[i] ? 255 : 0;
    }
    const body = encodeGrayPng(width, height, gray);
    const response = await this.fetchFn(this.url(`/api/rectifications/${imageId}`), {
      method: "PUT",
      headers: { "Content-Type": "image/png" },
      body,
    });
    if (!response.ok) throw await errorFrom(response);
  }

  async triggerFineTune(): Promise<string> {
    const response = await this.fetchFn(this.url("/api/fine-tune"), { method: "POST" });
    if (!response.ok) throw await errorFrom(response);
    const payload = await response.json();
    return payload.job_id as string;
  }

  async fetchJob(jobId: string): Promise<JobInfo> {
    const response = await this.fetchFn(this.url(`/api/jobs/${jobId}`));
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as JobInfo;
  }
}
