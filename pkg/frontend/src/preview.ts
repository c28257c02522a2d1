/** Debounced live-preview loop with stale-response discarding.
 *
 * Slider changes are settled with a trailing-edge debounce (250 ms, which
 * also caps the request rate at 4/s). Every issued request carries a
 * sequence number; a response is applied only if no newer request has been
 * applied, so rapid drags can never paint a stale frame.
 */

import type { PreviewParams } from "./api.js";

export interface PreviewFetcher {
  fetchPreview(p: PreviewParams): Promise<Blob>;
}

export interface PreviewEvents {
  onImage(blob: Blob, params: PreviewParams): void;
  onError(message: string): void;
}

export const DEBOUNCE_MS = 250;

export class PreviewLoop {
  private seq = 0;
  private appliedSeq = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private pending: PreviewParams | null = null;

  constructor(
    private readonly fetcher: PreviewFetcher,
    private readonly events: PreviewEvents,
    private readonly debounceMs: number = DEBOUNCE_MS,
  ) {}

  /** Schedule a preview for the given parameters, superseding any pending one. */
  request(params: PreviewParams): void {
    this.pending = { ...params };
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      if (this.pending) this.issue(this.pending);
    }, this.debounceMs);
  }

  /** Fetch immediately, bypassing the debounce (initial load, tile switch). */
  requestNow(params: PreviewParams): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.issue({ ...params });
  }

  get inFlightSeq(): number {
    return this.seq;
  }

  private issue(params: PreviewParams): void {
    this.pending = null;
    const seq = ++this.seq;
    this.fetcher.fetchPreview(params).then(
      (blob) => {
        // apply only the newest request; anything else is a stale frame
        if (seq !== this.seq || seq <= this.appliedSeq) return;
        this.appliedSeq = seq;
        this.events.onImage(blob, params);
      },
      (err: unknown) => {
        if (seq !== this.seq) return;
        // keep the last good frame; only surface the error
        this.events.onError(err instanceof Error ? err.message : String(err));
      },
    );
  }
}
