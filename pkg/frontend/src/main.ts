// Browser entry point: wires the steering client to the canvas, the two
// objective sliders and the transport buttons. Module scope holds the
// latest frame plus display state; the draw loop just paints it.

import { Frame, OMEGA_THETA_BOX, OMEGA_X_BOX } from "./protocol.js";
import { ConnectionState, SteerClient } from "./client.js";
import { Layout, defaultLayout, scenePose } from "./geometry.js";
import { RollingSeries } from "./chart.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function apiBase(): string {
  const override = new URLSearchParams(location.search).get("api");
  return override ?? `http://${location.hostname}:8000`;
}

const scene = el<HTMLCanvasElement>("scene");
const strip = el<HTMLCanvasElement>("reward-strip");
const sliderX = el<HTMLInputElement>("omega-x");
const sliderTheta = el<HTMLInputElement>("omega-theta");
const labelX = el<HTMLSpanElement>("omega-x-value");
const labelTheta = el<HTMLSpanElement>("omega-theta-value");
const badge = el<HTMLSpanElement>("connection");
const tickOut = el<HTMLSpanElement>("tick");
const rewardOut = el<HTMLSpanElement>("reward");
const roundTripOut = el<HTMLSpanElement>("round-trip");
const buttons = {
  pause: el<HTMLButtonElement>("pause"),
  resume: el<HTMLButtonElement>("resume"),
  step: el<HTMLButtonElement>("step"),
  reset: el<HTMLButtonElement>("reset"),
  hang: el<HTMLButtonElement>("reset-hang"),
};

let latest: Frame | null = null;
let connection: ConnectionState = "connecting";
// sliders the user is currently dragging must not be yanked by frames
const dragging = { x: false, theta: false };
const rewards = new RollingSeries(400);

const client = new SteerClient(apiBase(), {
  onFrame: (frame) => {
    latest = frame;
    rewards.push(frame.r);
    if (!dragging.x) {
      sliderX.value = String(frame.omega[0]);
      labelX.textContent = frame.omega[0].toFixed(1);
    }
    if (!dragging.theta) {
      sliderTheta.value = String(frame.omega[1]);
      labelTheta.textContent = frame.omega[1].toFixed(1);
    }
  },
  onConnection: (state) => {
    connection = state;
    badge.textContent = state;
    badge.className = `badge ${state}`;
    const disabled = state !== "open";
    for (const b of Object.values(buttons)) {
      b.disabled = disabled;
    }
    sliderX.disabled = disabled;
    sliderTheta.disabled = disabled;
  },
  onRoundTrip: (ms) => {
    roundTripOut.textContent = `${ms.toFixed(0)} ms`;
  },
});

function wireSlider(slider: HTMLInputElement, label: HTMLSpanElement,
                    key: "x" | "theta", field: "omega_x" | "omega_theta"): void {
  slider.addEventListener("input", () => {
    dragging[key] = true;
    label.textContent = Number(slider.value).toFixed(1);
    label.classList.add("pending");
  });
  slider.addEventListener("change", () => {
    void client.setObjective({ [field]: Number(slider.value) })
      .catch((err) => console.error("objective rejected:", err))
      .finally(() => {
        dragging[key] = false;
        label.classList.remove("pending");
      });
  });
}

wireSlider(sliderX, labelX, "x", "omega_x");
wireSlider(sliderTheta, labelTheta, "theta", "omega_theta");

buttons.pause.addEventListener("click", () => void client.pause());
buttons.resume.addEventListener("click", () => void client.resume());
buttons.step.addEventListener("click", () => void client.step(1));
buttons.reset.addEventListener("click", () => {
  rewards.clear();
  void client.reset();
});
buttons.hang.addEventListener("click", () => {
  rewards.clear();
  void client.reset({ x: 0, theta: Math.PI });
});

function drawScene(ctx: CanvasRenderingContext2D, layout: Layout, frame: Frame): void {
  const pose = scenePose(frame.s[0], frame.s[1], frame.omega[0], layout);
  ctx.clearRect(0, 0, layout.width, layout.height);

  // track and walls
  ctx.strokeStyle = "#555";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(pose.wallLeft, layout.groundY);
  ctx.lineTo(pose.wallRight, layout.groundY);
  ctx.stroke();
  for (const wx of [pose.wallLeft, pose.wallRight]) {
    ctx.beginPath();
    ctx.moveTo(wx, layout.groundY + 8);
    ctx.lineTo(wx, layout.groundY - layout.cartH - 14);
    ctx.stroke();
  }

  // target marker at omega_x
  ctx.strokeStyle = "#2a9d8f";
  ctx.setLineDash([4, 4]);
  ctx.beginPath();
  ctx.moveTo(pose.targetX, layout.groundY + 10);
  ctx.lineTo(pose.targetX, layout.groundY - layout.cartH - 26);
  ctx.stroke();
  ctx.setLineDash([]);

  // cart
  ctx.fillStyle = "#3b6ea5";
  ctx.fillRect(pose.cartX - layout.cartW / 2, pose.cartTop,
               layout.cartW, layout.cartH);

  // pole, hinged at the cart top
  ctx.strokeStyle = "#c1502e";
  ctx.lineWidth = 5;
  ctx.beginPath();
  ctx.moveTo(pose.pivot.x, pose.pivot.y);
  ctx.lineTo(pose.poleTip.x, pose.poleTip.y);
  ctx.stroke();
  ctx.fillStyle = "#c1502e";
  ctx.beginPath();
  ctx.arc(pose.poleTip.x, pose.poleTip.y, 5, 0, 2 * Math.PI);
  ctx.fill();
}

function drawStrip(ctx: CanvasRenderingContext2D, w: number, h: number): void {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
  const pts = rewards.points(w, h, -14, 0);
  if (pts.length < 2) {
    return;
  }
  ctx.strokeStyle = "#2a9d8f";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.moveTo(pts[0][0], pts[0][1]);
  for (const [px, py] of pts.slice(1)) {
    ctx.lineTo(px, py);
  }
  ctx.stroke();
}

function frameLoop(): void {
  const sceneCtx = scene.getContext("2d");
  const stripCtx = strip.getContext("2d");
  if (sceneCtx === null || stripCtx === null) {
    throw new Error("canvas 2d context unavailable");
  }
  const layout = defaultLayout(scene.width, scene.height);
  const tick = (): void => {
    if (latest !== null) {
      drawScene(sceneCtx, layout, latest);
      drawStrip(stripCtx, strip.width, strip.height);
      tickOut.textContent = String(latest.tick);
      rewardOut.textContent = latest.r.toFixed(2);
    } else if (connection !== "open") {
      sceneCtx.clearRect(0, 0, layout.width, layout.height);
    }
    requestAnimationFrame(tick);
  };
  requestAnimationFrame(tick);
}

async function start(): Promise<void> {
  sliderX.min = String(OMEGA_X_BOX[0]);
  sliderX.max = String(OMEGA_X_BOX[1]);
  sliderTheta.min = String(OMEGA_THETA_BOX[0]);
  sliderTheta.max = String(OMEGA_THETA_BOX[1]);
  try {
    const session = await client.session();
    sliderX.value = String(session.objective[0]);
    sliderTheta.value = String(session.objective[1]);
    labelX.textContent = session.objective[0].toFixed(1);
    labelTheta.textContent = session.objective[1].toFixed(1);
    el<HTMLSpanElement>("policy-id").textContent = session.policy_id;
  } catch (err) {
    console.error("session fetch failed:", err);
  }
  frameLoop();
  await client.run();
}

void start();
