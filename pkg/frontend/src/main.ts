/** DOM wiring for the AF-tuning single-page app. */

import { ApiClient, ApiError } from "./api.js";
import { PreviewLoop } from "./preview.js";
import {
  B_MAX,
  B_MIN,
  B_STEP,
  LAMBDA_MAX,
  LAMBDA_MIN,
  LAMBDA_STEP,
  TuningSession,
} from "./session.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

export function mount(root: HTMLElement, api: ApiClient = new ApiClient()): void {
  const session = new TuningSession();

  const banner = el("div", { class: "banner", hidden: "" });
  const tileSelect = el("select", { class: "tile-select" });
  const channelSelect = el("select", { class: "channel-select" });
  const heImg = el("img", { class: "he", alt: "H&E tile" });
  const rawImg = el("img", { class: "raw", alt: "raw channel" });
  const previewImg = el("img", { class: "preview", alt: "corrected preview" });

  const lambdaSlider = el("input", {
    type: "range",
    min: String(LAMBDA_MIN),
    max: String(LAMBDA_MAX),
    step: String(LAMBDA_STEP),
    class: "lambda",
  });
  const lambdaValue = el("span", { class: "lambda-value" });
  const bSlider = el("input", {
    type: "range",
    min: String(B_MIN),
    max: String(B_MAX),
    step: String(B_STEP),
    class: "b",
  });
  const bValue = el("span", { class: "b-value" });
  const saveButton = el("button", { class: "save", disabled: "" }, "Save");

  const controls = el("div", { class: "controls" });
  controls.append(
    el("label", {}, "Tile "),
    tileSelect,
    el("label", {}, " Channel "),
    channelSelect,
    el("label", {}, " λ "),
    lambdaSlider,
    lambdaValue,
    el("label", {}, " b "),
    bSlider,
    bValue,
    saveButton,
  );
  const images = el("div", { class: "images" });
  images.append(heImg, rawImg, previewImg);
  root.append(banner, controls, images);

  let previewObjectUrl = "";
  const loop = new PreviewLoop(api, {
    onImage(blob) {
      if (previewObjectUrl) URL.revokeObjectURL(previewObjectUrl);
      previewObjectUrl = URL.createObjectURL(blob);
      previewImg.src = previewObjectUrl;
      hideBanner();
    },
    onError(message) {
      showBanner(`preview failed: ${message}`);
    },
  });

  function showBanner(message: string): void {
    banner.textContent = message;
    banner.removeAttribute("hidden");
  }

  function hideBanner(): void {
    banner.setAttribute("hidden", "");
  }

  function syncControls(): void {
    lambdaSlider.value = String(session.lambda);
    bSlider.value = String(session.b);
    lambdaValue.textContent = session.lambda.toFixed(2);
    bValue.textContent = session.b.toFixed(1);
    if (session.dirty) saveButton.removeAttribute("disabled");
    else saveButton.setAttribute("disabled", "");
  }

  function currentParams() {
    return {
      tile: session.tile,
      channel: session.channel,
      lambda: session.lambda,
      b: session.b,
    };
  }

  function refreshStaticImages(): void {
    heImg.src = api.heUrl(session.tile);
    rawImg.src = api.rawChannelUrl(session.tile, session.channel);
  }

  lambdaSlider.addEventListener("input", () => {
    session.setLambda(Number(lambdaSlider.value));
    syncControls();
    loop.request(currentParams());
  });
  bSlider.addEventListener("input", () => {
    session.setB(Number(bSlider.value));
    syncControls();
    loop.request(currentParams());
  });
  tileSelect.addEventListener("change", () => {
    session.selectTile(tileSelect.value);
    refreshStaticImages();
    loop.requestNow(currentParams());
  });

  let listing: { name: string; lambda: number; b: number }[] = [];
  channelSelect.addEventListener("change", () => {
    const info = listing.find((c) => c.name === channelSelect.value);
    if (!info) return;
    session.loadChannel(info.name, info.lambda, info.b);
    syncControls();
    refreshStaticImages();
    loop.requestNow(currentParams());
  });

  saveButton.addEventListener("click", () => {
    void api
      .saveParams(session.channel, session.lambda, session.b)
      .then(async () => {
        session.markSaved();
        // read-your-writes: reflect the server's view of the saved values
        const chans = await api.listChannels();
        listing = chans.channels;
        syncControls();
        showBanner(`saved ${session.channel}`);
      })
      .catch((err: unknown) => {
        const msg =
          err instanceof ApiError ? `${err.status}: ${err.message}` : String(err);
        showBanner(`save failed: ${msg}`);
      });
  });

  void api
    .listChannels()
    .then((chans) => {
      listing = chans.channels;
      for (const t of chans.tiles) tileSelect.append(el("option", { value: t }, t));
      for (const c of chans.channels)
        channelSelect.append(el("option", { value: c.name }, c.name));
      if (!chans.tiles.length || !chans.channels.length) {
        showBanner("no tiles or channels available");
        return;
      }
      session.selectTile(chans.tiles[0]);
      const first = chans.channels[0];
      session.loadChannel(first.name, first.lambda, first.b);
      syncControls();
      refreshStaticImages();
      loop.requestNow(currentParams());
    })
    .catch((err: unknown) => {
      showBanner(`service unreachable: ${String(err)}`);
      for (const control of [tileSelect, channelSelect, lambdaSlider, bSlider, saveButton])
        control.setAttribute("disabled", "");
    });
}

if (typeof document !== "undefined") {
  const root = document.getElementById("app");
  if (root) mount(root);
}
