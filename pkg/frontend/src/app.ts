// DOM wiring for the annotation surface. All project state round-trips
// through the API; a reload rebuilds the page purely from server state.

import { ApiClient, ApiError } from "./api.js";
import { NextRoundConfig, OverlayState } from "./overlay.js";
import { AcceptBudget, CanvasSession, SessionError } from "./session.js";
import type { RoundDoc, SchemaDoc } from "./types.js";

const api = new ApiClient("");
const overlay = new OverlayState();
const nextRound = new NextRoundConfig();

let schema: SchemaDoc;
let currentRound: RoundDoc | null = null;
let session: CanvasSession | null = null;
let budget: AcceptBudget | null = null;
let baseImage: HTMLImageElement | null = null;
let overlayImage: HTMLImageElement | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string, isError = false): void {
  const bar = el<HTMLDivElement>("status");
  bar.textContent = text;
  bar.className = isError ? "status error" : "status";
}

async function guard<T>(work: () => Promise<T>): Promise<T | undefined> {
  try {
    return await work();
  } catch (err) {
    if (err instanceof ApiError || err instanceof SessionError) {
      setStatus(err.message, true);
      return undefined;
    }
    throw err;
  }
}

function labelColor(name: string): string {
  const idx = schema.names.indexOf(name);
  const [r, g, b] = schema.palette[Math.max(idx, 0)];
  return `rgb(${r}, ${g}, ${b})`;
}

function renderLabelPicker(): void {
  const picker = el<HTMLDivElement>("labels");
  picker.innerHTML = "";
  for (const name of schema.names.slice(1)) {
    const button = document.createElement("button");
    button.textContent = name;
    button.style.borderColor = labelColor(name);
    button.onclick = () => {
      session?.selectLabel(name);
      renderCanvas();
      setStatus(`label: ${name}`);
    };
    picker.appendChild(button);
  }
}

function candidateRow(sampleId: number, status: string): HTMLElement {
  const row = document.createElement("div");
  row.className = `candidate ${status}`;
  const label = document.createElement("span");
  label.textContent = `#${sampleId} [${status}]`;
  row.appendChild(label);
  const open = document.createElement("button");
  open.textContent = "open";
  open.onclick = () => openSample(sampleId);
  row.appendChild(open);
  if (status === "proposed" && currentRound) {
    const accept = document.createElement("button");
    accept.textContent = "accept";
    accept.disabled = budget !== null && !budget.canAccept(sampleId);
    accept.onclick = () =>
      guard(async () => {
        const doc = await api.accept(currentRound!.id, sampleId);
        budget?.markAccepted(sampleId);
        applyRound(doc);
      });
    row.appendChild(accept);
    const skip = document.createElement("button");
    skip.textContent = "skip";
    skip.onclick = () =>
      guard(async () => applyRound(await api.skip(currentRound!.id, sampleId)));
    row.appendChild(skip);
  }
  return row;
}

function applyRound(doc: RoundDoc): void {
  currentRound = doc;
  budget = AcceptBudget.fromStatuses(doc.round.confirm_limit, doc.statuses);
  const list = el<HTMLDivElement>("candidates");
  list.innerHTML = "";
  const header = document.createElement("div");
  header.textContent =
    `round ${doc.id}: accepted ${budget.accepted}/${doc.round.confirm_limit}` +
    (doc.bootstrap ? " (bootstrap)" : "");
  list.appendChild(header);
  for (const sid of doc.round.chosen_ids) {
    list.appendChild(candidateRow(sid, doc.statuses[String(sid)] ?? "proposed"));
  }
}

async function openSample(sampleId: number): Promise<void> {
  await guard(async () => {
    baseImage = await loadImage(api.imageUrl(sampleId));
    overlayImage = null;
    session = new CanvasSession(sampleId, baseImage.width, baseImage.height, schema.names[1]);
    const canvas = el<HTMLCanvasElement>("canvas");
    canvas.width = baseImage.width * 8;
    canvas.height = baseImage.height * 8;
    session.setZoom(8);
    await refreshOverlay();
    renderCanvas();
    setStatus(`sample ${sampleId} opened`);
  });
}

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new ApiError(0, `cannot load ${url}`));
    img.src = `${url}?t=${Date.now()}`;
  });
}

async function refreshOverlay(): Promise<void> {
  if (!session) return;
  const sid = session.sampleId;
  overlayImage = null;
  const url =
    overlay.kind === "prediction"
      ? api.predictionUrl(sid)
      : overlay.kind === "uncertainty"
        ? api.uncertaintyUrl(sid)
        : overlay.kind === "mask"
          ? api.maskUrl(sid)
          : null;
  if (url) {
    try {
      overlayImage = await loadImage(url);
    } catch {
      setStatus(`${overlay.kind} layer unavailable`, true);
    }
  }
}

function renderCanvas(): void {
  const canvas = el<HTMLCanvasElement>("canvas");
  const ctx = canvas.getContext("2d");
  if (!ctx || !session) return;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.save();
  ctx.translate(session.panX, session.panY);
  ctx.scale(session.zoom, session.zoom);
  if (baseImage) ctx.drawImage(baseImage, 0, 0);
  if (overlayImage) {
    ctx.globalAlpha = overlay.opacity;
    ctx.drawImage(overlayImage, 0, 0);
    ctx.globalAlpha = 1;
  }
  const state = session.state();
  for (const poly of state.committed) {
    drawPolygon(ctx, poly.vertices, labelColor(poly.label), true);
  }
  if (state.inProgress.length) {
    drawPolygon(
      ctx,
      state.inProgress.map((v) => [v.x, v.y] as [number, number]),
      labelColor(state.selectedLabel),
      false,
    );
  }
  ctx.restore();
}

function drawPolygon(
  ctx: CanvasRenderingContext2D,
  vertices: [number, number][],
  color: string,
  closed: boolean,
): void {
  if (!vertices.length) return;
  ctx.strokeStyle = color;
  ctx.lineWidth = 2 / (session?.zoom ?? 1);
  ctx.beginPath();
  ctx.moveTo(vertices[0][0], vertices[0][1]);
  for (const [x, y] of vertices.slice(1)) ctx.lineTo(x, y);
  if (closed) ctx.closePath();
  ctx.stroke();
  for (const [x, y] of vertices) {
    ctx.fillStyle = color;
    ctx.fillRect(x - 0.15, y - 0.15, 0.3, 0.3);
  }
}

async function renderTrends(): Promise<void> {
  const records = await api.metrics();
  const panel = el<HTMLDivElement>("trends");
  panel.innerHTML = "";
  const series = records.filter((r) => r.metric === "miou");
  if (!series.length) {
    panel.textContent = "no metric history yet";
    return;
  }
  const width = 260;
  const height = 90;
  const svgNS = "http://www.w3.org/2000/svg";
  const svg = document.createElementNS(svgNS, "svg");
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(height));
  const points = series
    .map((r, i) => {
      const x = 10 + (i * (width - 20)) / Math.max(series.length - 1, 1);
      const y = height - 10 - r.value * (height - 20);
      return `${x},${y}`;
    })
    .join(" ");
  const line = document.createElementNS(svgNS, "polyline");
  line.setAttribute("points", points);
  line.setAttribute("fill", "none");
  line.setAttribute("stroke", "#4a7");
  line.setAttribute("stroke-width", "2");
  svg.appendChild(line);
  panel.appendChild(svg);
  const last = series[series.length - 1];
  const caption = document.createElement("div");
  caption.textContent = `held-out mIoU ${last.value.toFixed(4)} +- ${last.std.toFixed(4)} (${last.tag})`;
  panel.appendChild(caption);
}

async function pollRetrain(): Promise<void> {
  const status = await api.retrainStatus();
  el<HTMLSpanElement>("retrain-state").textContent = status.running
    ? `running: ${status.progress}`
    : status.last_error
      ? `failed: ${status.last_error}`
      : `idle (${status.checkpoints.length} checkpoints)`;
  if (status.running) {
    setTimeout(() => void pollRetrain(), 700);
  } else {
    await renderTrends();
  }
}

function wireCanvasEvents(): void {
  const canvas = el<HTMLCanvasElement>("canvas");
  canvas.addEventListener("click", (ev) => {
    if (!session) return;
    const rect = canvas.getBoundingClientRect();
    const point = session.toImage(ev.clientX - rect.left, ev.clientY - rect.top);
    guardSync(() => session!.addVertex(Math.round(point.x * 4) / 4, Math.round(point.y * 4) / 4));
    renderCanvas();
  });
  canvas.addEventListener("dblclick", (ev) => {
    ev.preventDefault();
    guardSync(() => session?.closePolygon());
    renderCanvas();
  });
  canvas.addEventListener("wheel", (ev) => {
    if (!session) return;
    ev.preventDefault();
    session.setZoom(session.zoom * (ev.deltaY < 0 ? 1.2 : 1 / 1.2));
    renderCanvas();
  });
  window.addEventListener("keydown", (ev) => {
    if (!session) return;
    if (ev.key === "z" && (ev.ctrlKey || ev.metaKey)) {
      session.undo();
      renderCanvas();
    } else if (ev.key === "Escape") {
      session.abortPolygon();
      renderCanvas();
    } else if (ev.key === "Enter") {
      guardSync(() => session?.closePolygon());
      renderCanvas();
    }
  });
}

function guardSync(work: () => void): void {
  try {
    work();
  } catch (err) {
    if (err instanceof SessionError) {
      setStatus(err.message, true);
      return;
    }
    throw err;
  }
}

function wireButtons(): void {
  el<HTMLButtonElement>("toggle-overlay").onclick = async () => {
    const kind = overlay.cycle();
    await refreshOverlay();
    renderCanvas();
    setStatus(`overlay: ${kind}`);
  };
  el<HTMLButtonElement>("submit").onclick = () =>
    guard(async () => {
      if (!session) throw new SessionError("open a candidate first");
      const receipt = await api.submitAnnotation(session.buildPayload("annotator"));
      setStatus(
        `stored mask ${receipt.mask_sha256.slice(0, 12)}; ` +
          `labels: ${JSON.stringify(receipt.pixels_per_label)}`,
      );
      overlay.set("mask");
      await refreshOverlay();
      renderCanvas();
      if (currentRound) applyRound(await api.getRound(currentRound.id));
    });
  el<HTMLButtonElement>("retrain").onclick = () =>
    guard(async () => {
      await api.retrain();
      setStatus("retrain started");
      await pollRetrain();
    });
  el<HTMLButtonElement>("new-round").onclick = () =>
    guard(async () => {
      const doc = await api.createRound(nextRound.take());
      applyRound(doc);
      setStatus(`round ${doc.id} proposed`);
    });
  el<HTMLInputElement>("filter-k").onchange = (ev) => {
    const value = Number((ev.target as HTMLInputElement).value);
    guardSync(() => nextRound.setFilterPercent(value));
    setStatus(`next round will discard the top ${value}%`);
  };
  el<HTMLInputElement>("centers").onchange = (ev) => {
    const value = Number((ev.target as HTMLInputElement).value);
    guardSync(() => nextRound.setCenters(value));
    setStatus(`next round proposes ${value} candidates`);
  };
}

export async function boot(): Promise<void> {
  schema = await api.getSchema();
  renderLabelPicker();
  wireCanvasEvents();
  wireButtons();
  const rounds = await api.listRounds();
  if (rounds.length) {
    applyRound(rounds[rounds.length - 1]);
  }
  await renderTrends();
  void pollRetrain();
  setStatus("ready");
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  void boot();
}
