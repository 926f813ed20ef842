import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { fakeResponse } from "./fixtures.js";

function jsonResponse(status: number, body: unknown): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: () => Promise.resolve(body),
  } as unknown as Response;
}

describe("api client", () => {
  it("posts exact integer coordinates", async () => {
    const fetchFn = vi.fn(async () => jsonResponse(200, fakeResponse()));
    const api = new ApiClient("", fetchFn as unknown as typeof fetch);
    await api.measure("slice_7", 83, 41);
    expect(fetchFn).toHaveBeenCalledOnce();
    const [url, init] = fetchFn.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/api/measure");
    expect(JSON.parse(init.body as string)).toEqual({
      slice_id: "slice_7",
      click: { x: 83, y: 41 },
    });
  });

  it("raises ApiError with the server's error body", async () => {
    const fetchFn = vi.fn(async () => jsonResponse(422, { error: "OutOfBounds" }));
    const api = new ApiClient("", fetchFn as unknown as typeof fetch);
    await expect(api.measure("s", 1e6, 0)).rejects.toMatchObject({
      status: 422,
      body: { error: "OutOfBounds" },
    });
    await expect(api.measure("s", 1e6, 0)).rejects.toBeInstanceOf(ApiError);
  });

  it("lists and fetches slices", async () => {
    const fetchFn = vi.fn(async (url: string) =>
      url.endsWith("/api/slices")
        ? jsonResponse(200, [{ id: "a", height: 96, width: 96, spacing_mm_per_px: 0.8 }])
        : jsonResponse(200, { id: "a", image_png_base64: "deadbeef" }));
    const api = new ApiClient("", fetchFn as unknown as typeof fetch);
    const slices = await api.listSlices();
    expect(slices[0].id).toBe("a");
    const img = await api.getSlice("a");
    expect(img.image_png_base64).toBe("deadbeef");
  });
});
