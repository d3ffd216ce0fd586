// Client-side annotation session: the in-progress polygon, committed
// polygons (z-ordered), zoom/pan, and an undo stack that REPLAYS the
// action log, so undone state is consistent by construction. Geometry
// here is limited to bounds checks and hit radii; rasterization is the
// server's job alone.

import type { PolygonPayload } from "./types.js";

export interface Vertex {
  x: number;
  y: number;
}

type Action =
  | { kind: "vertex"; x: number; y: number }
  | { kind: "close" }
  | { kind: "abort" }
  | { kind: "label"; label: string };

export interface SessionState {
  selectedLabel: string;
  inProgress: Vertex[];
  committed: PolygonPayload[];
}

export class SessionError extends Error {}

export class CanvasSession {
  readonly sampleId: number;
  readonly width: number;
  readonly height: number;
  zoom = 1;
  panX = 0;
  panY = 0;
  private actions: Action[] = [];
  private initialLabel: string;

  constructor(sampleId: number, width: number, height: number, initialLabel: string) {
    this.sampleId = sampleId;
    this.width = width;
    this.height = height;
    this.initialLabel = initialLabel;
  }

  /** Replay the full action log into a state; single source of truth. */
  state(): SessionState {
    const s: SessionState = {
      selectedLabel: this.initialLabel,
      inProgress: [],
      committed: [],
    };
    for (const a of this.actions) {
      switch (a.kind) {
        case "label":
          s.selectedLabel = a.label;
          break;
        case "vertex":
          s.inProgress.push({ x: a.x, y: a.y });
          break;
        case "close":
          s.committed.push({
            label: s.selectedLabel,
            vertices: s.inProgress.map((v) => [v.x, v.y] as [number, number]),
          });
          s.inProgress = [];
          break;
        case "abort":
          s.inProgress = [];
          break;
      }
    }
    return s;
  }

  selectLabel(label: string): void {
    this.actions.push({ kind: "label", label });
  }

  addVertex(x: number, y: number): void {
    if (!(x >= 0 && x <= this.width && y >= 0 && y <= this.height)) {
      throw new SessionError(
        `vertex (${x}, ${y}) outside the ${this.width}x${this.height} image`,
      );
    }
    this.actions.push({ kind: "vertex", x, y });
  }

  /** Commits the in-progress polygon; blocked below three vertices. */
  closePolygon(): void {
    const n = this.state().inProgress.length;
    if (n < 3) {
      throw new SessionError(`polygon needs at least 3 vertices, has ${n}`);
    }
    this.actions.push({ kind: "close" });
  }

  abortPolygon(): void {
    this.actions.push({ kind: "abort" });
  }

  undo(): void {
    this.actions.pop();
  }

  canUndo(): boolean {
    return this.actions.length > 0;
  }

  setZoom(zoom: number): void {
    this.zoom = Math.min(16, Math.max(0.25, zoom));
  }

  setPan(x: number, y: number): void {
    this.panX = x;
    this.panY = y;
  }

  /** Screen to image coordinates under the current zoom/pan. */
  toImage(sx: number, sy: number): Vertex {
    return { x: (sx - this.panX) / this.zoom, y: (sy - this.panY) / this.zoom };
  }

  buildPayload(annotator: string): {
    sample_id: number;
    annotator: string;
    polygons: PolygonPayload[];
    keypoints: [string, number, number][];
  } {
    const s = this.state();
    if (s.inProgress.length > 0) {
      throw new SessionError("close or abort the in-progress polygon before submitting");
    }
    if (s.committed.length === 0) {
      throw new SessionError("nothing to submit");
    }
    return {
      sample_id: this.sampleId,
      annotator,
      polygons: s.committed,
      keypoints: [],
    };
  }
}

/**
 * Local mirror of the server's accept limit so the UI can disable the
 * button before the request; the server stays the arbiter.
 */
export class AcceptBudget {
  constructor(
    public limit: number,
    private acceptedIds: Set<number> = new Set(),
  ) {}

  get accepted(): number {
    return this.acceptedIds.size;
  }

  canAccept(sampleId: number): boolean {
    return this.acceptedIds.has(sampleId) || this.acceptedIds.size < this.limit;
  }

  markAccepted(sampleId: number): void {
    if (!this.canAccept(sampleId)) {
      throw new SessionError(`accept limit of ${this.limit} reached`);
    }
    this.acceptedIds.add(sampleId);
  }

  static fromStatuses(limit: number, statuses: Record<string, string>): AcceptBudget {
    const accepted = new Set<number>();
    for (const [sid, status] of Object.entries(statuses)) {
      if (status === "accepted" || status === "annotated") {
        accepted.add(Number(sid));
      }
    }
    return new AcceptBudget(limit, accepted);
  }
}
