import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import type { PreviewParams } from "../src/api.js";
import { DEBOUNCE_MS, PreviewLoop } from "../src/preview.js";

function params(lambda: number): PreviewParams {
  return { tile: "t0", channel: "m1", lambda, b: 0 };
}

function blobFor(lambda: number): Blob {
  return new Blob([`frame-${lambda}`]);
}

interface Deferred {
  params: PreviewParams;
  resolve(blob: Blob): void;
  reject(err: Error): void;
}

/** Fetcher whose responses are resolved by the test, in any order. */
function manualFetcher() {
  const calls: Deferred[] = [];
  return {
    calls,
    fetchPreview(p: PreviewParams): Promise<Blob> {
      return new Promise((resolve, reject) => {
        calls.push({ params: p, resolve, reject });
      });
    },
  };
}

describe("PreviewLoop debounce", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("waits the debounce interval before fetching", () => {
    const fetcher = manualFetcher();
    const loop = new PreviewLoop(fetcher, { onImage: vi.fn(), onError: vi.fn() });
    loop.request(params(0.5));
    expect(fetcher.calls).toHaveLength(0);
    vi.advanceTimersByTime(DEBOUNCE_MS - 1);
    expect(fetcher.calls).toHaveLength(0);
    vi.advanceTimersByTime(1);
    expect(fetcher.calls).toHaveLength(1);
    expect(fetcher.calls[0].params.lambda).toBe(0.5);
  });

  it("coalesces a rapid drag into one request for the final value", () => {
    const fetcher = manualFetcher();
    const loop = new PreviewLoop(fetcher, { onImage: vi.fn(), onError: vi.fn() });
    for (let i = 0; i <= 100; i++) {
      loop.request(params(i / 100));
      vi.advanceTimersByTime(10);
    }
    vi.advanceTimersByTime(DEBOUNCE_MS);
    expect(fetcher.calls).toHaveLength(1);
    expect(fetcher.calls[0].params.lambda).toBe(1.0);
  });

  it("never exceeds four requests per second under constant dragging", () => {
    const fetcher = manualFetcher();
    const loop = new PreviewLoop(fetcher, { onImage: vi.fn(), onError: vi.fn() });
    // new slider value every 300 ms for 3 s: each change settles before the next
    for (let t = 0; t < 3000; t += 300) {
      loop.request(params(t / 1000));
      vi.advanceTimersByTime(300);
    }
    vi.advanceTimersByTime(DEBOUNCE_MS);
    expect(fetcher.calls.length).toBeLessThanOrEqual(Math.ceil(3000 / 250));
  });

  it("requestNow bypasses the debounce and cancels a pending request", () => {
    const fetcher = manualFetcher();
    const loop = new PreviewLoop(fetcher, { onImage: vi.fn(), onError: vi.fn() });
    loop.request(params(0.1));
    loop.requestNow(params(0.9));
    expect(fetcher.calls).toHaveLength(1);
    expect(fetcher.calls[0].params.lambda).toBe(0.9);
    vi.advanceTimersByTime(DEBOUNCE_MS * 2);
    expect(fetcher.calls).toHaveLength(1);
  });
});

describe("PreviewLoop stale-response discarding", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("drops an out-of-order response from an earlier request", async () => {
    const fetcher = manualFetcher();
    const shown: string[] = [];
    const loop = new PreviewLoop(fetcher, {
      onImage: (_blob, p) => shown.push(`l=${p.lambda}`),
      onError: vi.fn(),
    });

    loop.requestNow(params(0.1));
    loop.requestNow(params(0.2));
    loop.requestNow(params(0.3));
    expect(fetcher.calls).toHaveLength(3);

    // responses arrive newest first, then the stale ones straggle in
    fetcher.calls[2].resolve(blobFor(0.3));
    await vi.runAllTimersAsync();
    fetcher.calls[0].resolve(blobFor(0.1));
    fetcher.calls[1].resolve(blobFor(0.2));
    await vi.runAllTimersAsync();

    expect(shown).toEqual(["l=0.3"]);
  });

  it("shows only the final frame of a simulated rapid drag", async () => {
    const fetcher = manualFetcher();
    const shown: number[] = [];
    const loop = new PreviewLoop(fetcher, {
      onImage: (_blob, p) => shown.push(p.lambda),
      onError: vi.fn(),
    });

    // drag pauses long enough at 0.3 and 0.7 for the debounce to fire,
    // then settles at 1.0
    for (const stop of [0.3, 0.7, 1.0]) {
      loop.request(params(stop));
      vi.advanceTimersByTime(DEBOUNCE_MS);
    }
    expect(fetcher.calls).toHaveLength(3);

    // server answers slowest-first: worst-case reordering
    fetcher.calls[1].resolve(blobFor(0.7));
    fetcher.calls[2].resolve(blobFor(1.0));
    fetcher.calls[0].resolve(blobFor(0.3));
    await vi.runAllTimersAsync();

    expect(shown).toEqual([1.0]);
  });

  it("ignores a stale error but reports one from the newest request", async () => {
    const fetcher = manualFetcher();
    const errors: string[] = [];
    const loop = new PreviewLoop(fetcher, {
      onImage: vi.fn(),
      onError: (m) => errors.push(m),
    });

    loop.requestNow(params(0.1));
    loop.requestNow(params(0.2));
    fetcher.calls[0].reject(new Error("old failure"));
    await vi.runAllTimersAsync();
    expect(errors).toEqual([]);

    fetcher.calls[1].reject(new Error("fresh failure"));
    await vi.runAllTimersAsync();
    expect(errors).toEqual(["fresh failure"]);
  });

  it("keeps the last good frame when a later request fails", async () => {
    const fetcher = manualFetcher();
    const shown: number[] = [];
    const errors: string[] = [];
    const loop = new PreviewLoop(fetcher, {
      onImage: (_blob, p) => shown.push(p.lambda),
      onError: (m) => errors.push(m),
    });

    loop.requestNow(params(0.5));
    fetcher.calls[0].resolve(blobFor(0.5));
    await vi.runAllTimersAsync();
    expect(shown).toEqual([0.5]);

    loop.requestNow(params(0.6));
    fetcher.calls[1].reject(new Error("service unreachable"));
    await vi.runAllTimersAsync();

    // the frame list is untouched; only the error callback fired
    expect(shown).toEqual([0.5]);
    expect(errors).toEqual(["service unreachable"]);
  });
});
