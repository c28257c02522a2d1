/** Tuning-session state: selected tile/channel, slider values, dirty flag.
 *
 * Slider ranges mirror the server validation: lambda in [0, 5] step 0.01,
 * b in [-50, 50] step 0.5. Values are clamped and snapped on every set, so
 * the client can never issue an out-of-range request.
 */

export const LAMBDA_MIN = 0;
export const LAMBDA_MAX = 5;
export const LAMBDA_STEP = 0.01;
export const B_MIN = -50;
export const B_MAX = 50;
export const B_STEP = 0.5;

function snap(value: number, min: number, max: number, step: number): number {
  if (!Number.isFinite(value)) return min;
  const clamped = Math.min(max, Math.max(min, value));
  const snapped = min + Math.round((clamped - min) / step) * step;
  // re-clamp: rounding at the upper edge can overshoot by one step
  const result = Math.min(max, Math.max(min, snapped));
  // avoid float dust like 0.30000000000000004 from repeated step arithmetic
  return Number(result.toFixed(6));
}

export function clampLambda(value: number): number {
  return snap(value, LAMBDA_MIN, LAMBDA_MAX, LAMBDA_STEP);
}

export function clampB(value: number): number {
  return snap(value, B_MIN, B_MAX, B_STEP);
}

export interface SavedParams {
  lambda: number;
  b: number;
}

export class TuningSession {
  tile = "";
  channel = "";
  lambda = 0;
  b = 0;
  private saved: SavedParams = { lambda: 0, b: 0 };

  get dirty(): boolean {
    return this.lambda !== this.saved.lambda || this.b !== this.saved.b;
  }

  get lastSaved(): SavedParams {
    return { ...this.saved };
  }

  /** Adopt the server-side values for a channel (fresh page or channel switch). */
  loadChannel(name: string, lambda: number, b: number): void {
    this.channel = name;
    this.lambda = clampLambda(lambda);
    this.b = clampB(b);
    this.saved = { lambda: this.lambda, b: this.b };
  }

  selectTile(tile: string): void {
    this.tile = tile;
  }

  setLambda(value: number): void {
    this.lambda = clampLambda(value);
  }

  setB(value: number): void {
    this.b = clampB(value);
  }

  /** Record a successful save; the current sliders become the baseline. */
  markSaved(): void {
    this.saved = { lambda: this.lambda, b: this.b };
  }
}
