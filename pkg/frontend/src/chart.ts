// Fixed-capacity rolling series for the reward strip. Pure data + polyline
// math; the canvas just strokes whatever points() returns.

export class RollingSeries {
  readonly capacity: number;
  private values: number[] = [];

  constructor(capacity: number) {
    if (capacity < 2) {
      throw new Error("capacity must be >= 2");
    }
    this.capacity = capacity;
  }

  push(v: number): void {
    this.values.push(v);
    if (this.values.length > this.capacity) {
      this.values.shift();
    }
  }

  length(): number {
    return this.values.length;
  }

  last(): number | undefined {
    return this.values[this.values.length - 1];
  }

  clear(): void {
    this.values = [];
  }

  /** Polyline points for a w x h box; newest sample at the right edge,
      y range [lo, hi] clamped. */
  points(w: number, h: number, lo: number, hi: number): Array<[number, number]> {
    const n = this.values.length;
    const out: Array<[number, number]> = [];
    for (let i = 0; i < n; i++) {
      const frac = (this.capacity - n + i) / (this.capacity - 1);
      const v = Math.min(hi, Math.max(lo, this.values[i]));
      out.push([frac * w, h - ((v - lo) / (hi - lo)) * h]);
    }
    return out;
  }
}
