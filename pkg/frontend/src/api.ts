/** Typed client for the AF-tuning HTTP API. */

export interface ChannelInfo {
  name: string;
  lambda: number;
  b: number;
}

export interface ChannelListing {
  channels: ChannelInfo[];
  af_channel: string | null;
  tiles: string[];
}

export interface PreviewParams {
  tile: string;
  channel: string;
  lambda: number;
  b: number;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function raise(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  previewUrl(p: PreviewParams): string {
    const q = new URLSearchParams({
      tile: p.tile,
      channel: p.channel,
      lambda: p.lambda.toString(),
      b: p.b.toString(),
    });
    return `${this.base}/api/preview?${q.toString()}`;
  }

  rawChannelUrl(tile: string, channel: string): string {
    return `${this.base}/api/tile/${encodeURIComponent(tile)}/channel/${encodeURIComponent(channel)}`;
  }

  heUrl(tile: string): string {
    return `${this.base}/api/tile/${encodeURIComponent(tile)}/he`;
  }

  async listChannels(): Promise<ChannelListing> {
    const resp = await fetch(`${this.base}/api/channels`);
    if (!resp.ok) await raise(resp);
    return (await resp.json()) as ChannelListing;
  }

  async fetchPreview(p: PreviewParams): Promise<Blob> {
    const resp = await fetch(this.previewUrl(p));
    if (!resp.ok) await raise(resp);
    return resp.blob();
  }

  async saveParams(channel: string, lambda: number, b: number): Promise<void> {
    const resp = await fetch(`${this.base}/api/params`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ channel, lambda, b }),
    });
    if (!resp.ok) await raise(resp);
  }
}
