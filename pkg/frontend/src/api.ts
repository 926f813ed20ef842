/** Typed client for the measurement HTTP API. */

import { MeasureResponse, SliceImage, SliceInfo } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public body: { error?: string }) {
    super(body.error ?? `HTTP ${status}`);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = "",
              private fetchFn: typeof fetch = fetch) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, init);
    let body: unknown = null;
    try {
      body = await res.json();
    } catch {
      body = {};
    }
    if (!res.ok) {
      throw new ApiError(res.status, (body ?? {}) as { error?: string });
    }
    return body as T;
  }

  listSlices(): Promise<SliceInfo[]> {
    return this.request<SliceInfo[]>("/api/slices");
  }

  getSlice(id: string): Promise<SliceImage> {
    return this.request<SliceImage>(`/api/slices/${encodeURIComponent(id)}`);
  }

  measure(sliceId: string, x: number, y: number,
          signal?: AbortSignal): Promise<MeasureResponse> {
    return this.request<MeasureResponse>("/api/measure", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ slice_id: sliceId, click: { x, y } }),
      signal,
    });
  }
}
