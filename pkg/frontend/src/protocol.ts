// Wire types for the steering service. The shapes mirror the server's JSON
// exactly; parse functions throw on anything malformed so a bad payload
// never reaches the render loop.

export const OMEGA_X_BOX: readonly [number, number] = [-2, 2];
export const OMEGA_THETA_BOX: readonly [number, number] = [0, 4];
export const X_LIMIT = 2.5;

export interface Frame {
  tick: number;
  s: [number, number, number, number]; // x, theta, x_dot, theta_dot
  a: number;
  r: number;
  omega: [number, number]; // omega_x, omega_theta
}

export interface SessionSnapshot {
  tick: number;
  state: [number, number, number, number];
  objective: [number, number];
  running: boolean;
  policy_id: string;
  tick_hz: number;
}

function num(v: unknown, where: string): number {
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new Error(`${where}: expected finite number, got ${JSON.stringify(v)}`);
  }
  return v;
}

function numArray<N extends number>(v: unknown, n: N, where: string): number[] {
  if (!Array.isArray(v) || v.length !== n) {
    throw new Error(`${where}: expected array of ${n} numbers`);
  }
  return v.map((x, i) => num(x, `${where}[${i}]`));
}

export function parseFrame(raw: unknown): Frame {
  if (typeof raw !== "object" || raw === null) {
    throw new Error("frame: expected object");
  }
  const o = raw as Record<string, unknown>;
  return {
    tick: num(o.tick, "frame.tick"),
    s: numArray(o.s, 4, "frame.s") as Frame["s"],
    a: num(o.a, "frame.a"),
    r: num(o.r, "frame.r"),
    omega: numArray(o.omega, 2, "frame.omega") as Frame["omega"],
  };
}

export function parseSession(raw: unknown): SessionSnapshot {
  if (typeof raw !== "object" || raw === null) {
    throw new Error("session: expected object");
  }
  const o = raw as Record<string, unknown>;
  if (typeof o.running !== "boolean") {
    throw new Error("session.running: expected boolean");
  }
  if (typeof o.policy_id !== "string") {
    throw new Error("session.policy_id: expected string");
  }
  return {
    tick: num(o.tick, "session.tick"),
    state: numArray(o.state, 4, "session.state") as SessionSnapshot["state"],
    objective: numArray(o.objective, 2, "session.objective") as [number, number],
    running: o.running,
    policy_id: o.policy_id,
    tick_hz: num(o.tick_hz, "session.tick_hz"),
  };
}

export function sameOmega(a: readonly [number, number],
                          b: readonly [number, number]): boolean {
  return a[0] === b[0] && a[1] === b[1];
}
