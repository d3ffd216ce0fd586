// Overlay layer selection for the canvas: base image plus one of the
// server-rendered layers. The client only composites bitmaps it fetched;
// it never derives masks or heat values itself.

export type OverlayKind = "none" | "prediction" | "uncertainty" | "mask";

const ORDER: OverlayKind[] = ["none", "prediction", "uncertainty", "mask"];

export class OverlayState {
  kind: OverlayKind = "none";
  opacity = 0.55;

  cycle(): OverlayKind {
    const next = ORDER[(ORDER.indexOf(this.kind) + 1) % ORDER.length];
    this.kind = next;
    return next;
  }

  set(kind: OverlayKind): void {
    this.kind = kind;
  }

  setOpacity(value: number): void {
    this.opacity = Math.min(1, Math.max(0, value));
  }
}

/** Pending parameters for the NEXT round only; never retroactive. */
export class NextRoundConfig {
  private overrides: { k_percent?: number; band_width?: number; n_centers?: number } = {};

  setFilterPercent(k: number): void {
    if (!(k >= 0 && k < 100)) {
      throw new RangeError(`k percent must be in [0, 100), got ${k}`);
    }
    this.overrides.k_percent = k;
  }

  setBandWidth(width: number): void {
    if (!(width > 0)) {
      throw new RangeError(`band width must be positive, got ${width}`);
    }
    this.overrides.band_width = width;
  }

  setCenters(n: number): void {
    if (!Number.isInteger(n) || n < 1) {
      throw new RangeError(`center count must be a positive integer, got ${n}`);
    }
    this.overrides.n_centers = n;
  }

  /** Consumed exactly once when the next round is created. */
  take(): { k_percent?: number; band_width?: number; n_centers?: number } | undefined {
    const out = Object.keys(this.overrides).length ? { ...this.overrides } : undefined;
    this.overrides = {};
    return out;
  }
}
