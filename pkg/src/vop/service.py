"""Live steering service.

Runs the true-environment simulation closed-loop under a trained policy at
a fixed tick rate and exposes it over HTTP: query or stream the session,
move the objective at any time, reset or pause.  The objective can be
steered while the controller runs, which is the point of conditioning the
policy on it.

Exactly one thread (the tick loop) mutates the session.  Objective, reset,
pause and resume requests enqueue commands that the loop consumes at the
next tick boundary, so every streamed frame is a consistent snapshot and a
frame at tick t reflects the latest objective accepted before t.  Frames go
to every subscriber in the same order.

POST /step advances a chosen number of ticks synchronously (through the
same single-writer queue) regardless of the wall clock.  Together with
pause this gives deterministic replay over HTTP: the trajectory for a given
(start, objective schedule, policy) matches the evaluator's scenario runs
bit for bit, because both sides step the identical scalar simulator and
policy code path.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import queue
import threading
import time
from contextlib import asynccontextmanager
from typing import List, Optional

from fastapi import Body, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse

from .cartpole import (DEFAULT_PHYSICS, OMEGA_THETA_BOX, OMEGA_X_BOX, X_LIMIT,
                       EnvState, Objective, PhysicsParams, env_step, reward,
                       wrap_pi)
from .trainer import PolicyModel, load_policy, policy_action

DEFAULT_START = EnvState(0.0, -math.pi, 0.0, 0.0)


def _check_box(name: str, value: float, box) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise HTTPException(400, f"{name} must be a number")
    if not math.isfinite(value) or not box[0] <= value <= box[1]:
        raise HTTPException(400, f"{name} must lie in [{box[0]}, {box[1]}], "
                                 f"got {value}")
    return value


class SteerSession:
    """Single authoritative simulation session driven by one tick thread."""

    def __init__(self, policy: PolicyModel, objective: Objective,
                 start: EnvState = DEFAULT_START, tick_hz: float = 50.0,
                 params: PhysicsParams = DEFAULT_PHYSICS,
                 start_paused: bool = False, policy_id: str = ""):
        self.policy = policy
        self.params = params
        self.tick_hz = float(tick_hz)
        self.policy_id = policy_id
        self.start_state = start
        # owned by the tick thread after start(); snapshot lock guards reads
        self.state = start
        self.objective = objective
        self.tick = 0
        self.running = not start_paused
        self._accepted_objective = objective   # last validated request
        self._accept_lock = threading.Lock()
        self._snapshot_lock = threading.Lock()
        self._commands: "queue.Queue" = queue.Queue()
        self._subscribers: List[queue.Queue] = []
        self._sub_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # -- client side -------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="steer-tick")
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self._broadcast(None)

    def submit(self, command) -> None:
        self._commands.put(command)

    def step_sync(self, n: int, timeout: float = 60.0) -> None:
        """Advance n ticks via the tick thread and wait until done."""
        done = threading.Event()
        self.submit(("step", n, done))
        if not done.wait(timeout):
            raise HTTPException(503, "tick thread did not respond")

    def accept_objective(self, omega_x, omega_theta) -> Objective:
        """Validate a partial update against the training boxes and enqueue
        it; partial fields fall back to the last accepted value."""
        with self._accept_lock:
            base = self._accepted_objective
            obj = Objective(
                base.omega_x if omega_x is None else
                _check_box("omega_x", omega_x, OMEGA_X_BOX),
                base.omega_theta if omega_theta is None else
                _check_box("omega_theta", omega_theta, OMEGA_THETA_BOX))
            self._accepted_objective = obj
        self.submit(("objective", obj))
        return obj

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._sub_lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue):
        with self._sub_lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def snapshot(self) -> dict:
        with self._snapshot_lock:
            return {
                "tick": self.tick,
                "state": list(self.state.as_array()),
                "objective": [self.objective.omega_x, self.objective.omega_theta],
                "running": self.running,
                "policy_id": self.policy_id,
                "tick_hz": self.tick_hz,
            }

    # -- tick thread -------------------------------------------------------

    def _loop(self):
        period = 1.0 / self.tick_hz
        next_t = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now < next_t:
                self._stop.wait(min(next_t - now, period))
                continue
            self._apply_pending()
            if self.running:
                self._advance(1)
            next_t += period
            if next_t < time.monotonic() - 1.0:
                next_t = time.monotonic()   # fell behind; drop lost ticks

    def _apply_pending(self):
        while True:
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                return
            kind = cmd[0]
            if kind == "objective":
                with self._snapshot_lock:
                    self.objective = cmd[1]
            elif kind == "reset":
                with self._snapshot_lock:
                    self.state = cmd[1]
                    self.tick = 0
            elif kind == "pause":
                with self._snapshot_lock:
                    self.running = False
            elif kind == "resume":
                with self._snapshot_lock:
                    self.running = True
            elif kind == "step":
                self._advance(cmd[1])
                cmd[2].set()

    def _advance(self, n: int):
        for _ in range(n):
            obj = self.objective
            a = policy_action(self.policy, self.state, obj)
            s = env_step(self.state, a, self.params)
            r = reward(s, obj)
            with self._snapshot_lock:
                self.state = s
                self.tick += 1
                tick = self.tick
            self._broadcast({"tick": tick, "s": list(s.as_array()), "a": a,
                             "r": r, "omega": [obj.omega_x, obj.omega_theta]})

    def _broadcast(self, frame):
        with self._sub_lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put(frame)


def _frame_event(frame: dict) -> str:
    return f"data: {json.dumps(frame)}\n\n"


def create_app(policy: PolicyModel, objective: Objective = Objective(0.0, 2.0),
               start: EnvState = DEFAULT_START, tick_hz: float = 50.0,
               params: PhysicsParams = DEFAULT_PHYSICS,
               start_paused: bool = False, policy_id: str = "") -> FastAPI:
    session = SteerSession(policy, objective, start=start, tick_hz=tick_hz,
                           params=params, start_paused=start_paused,
                           policy_id=policy_id)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        session.start()
        yield
        session.stop()

    app = FastAPI(title="cart-pole steering service", lifespan=lifespan)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.session = session

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/session")
    def get_session():
        return session.snapshot()

    @app.post("/objective")
    def set_objective(payload: dict = Body(...)):
        unknown = set(payload) - {"omega_x", "omega_theta"}
        if unknown:
            raise HTTPException(400, f"unknown field(s) {sorted(unknown)}")
        if not payload:
            raise HTTPException(400, "provide omega_x and/or omega_theta")
        obj = session.accept_objective(payload.get("omega_x"),
                                       payload.get("omega_theta"))
        return {"status": "accepted",
                "omega": [obj.omega_x, obj.omega_theta]}

    @app.post("/reset")
    def reset(payload: Optional[dict] = Body(None)):
        payload = payload or {}
        unknown = set(payload) - {"x", "theta"}
        if unknown:
            raise HTTPException(400, f"unknown field(s) {sorted(unknown)}")
        x = payload.get("x", DEFAULT_START.x)
        theta = payload.get("theta", DEFAULT_START.theta)
        x = _check_box("x", x, (-X_LIMIT, X_LIMIT))
        try:
            theta = float(theta)
        except (TypeError, ValueError):
            raise HTTPException(400, "theta must be a number")
        if not math.isfinite(theta):
            raise HTTPException(400, "theta must be finite")
        state = EnvState(x, float(wrap_pi(theta)), 0.0, 0.0)
        session.submit(("reset", state))
        return {"status": "accepted", "state": list(state.as_array())}

    @app.post("/pause")
    def pause():
        session.submit(("pause",))
        return {"running": False}

    @app.post("/resume")
    def resume():
        session.submit(("resume",))
        return {"running": True}

    @app.post("/step")
    def step(payload: Optional[dict] = Body(None)):
        payload = payload or {}
        unknown = set(payload) - {"n"}
        if unknown:
            raise HTTPException(400, f"unknown field(s) {sorted(unknown)}")
        n = payload.get("n", 1)
        if not isinstance(n, int) or isinstance(n, bool) or not 1 <= n <= 100000:
            raise HTTPException(400, f"n must be an integer in [1, 100000], got {n!r}")
        session.step_sync(n)
        return session.snapshot()

    @app.get("/stream")
    def stream():
        q = session.subscribe()

        def gen():
            try:
                while True:
                    try:
                        frame = q.get(timeout=15.0)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    if frame is None:
                        return
                    yield _frame_event(frame)
            finally:
                session.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    return app


def policy_checkpoint_id(policy_dir) -> str:
    """Stable short id of a policy checkpoint (hash of its weight file)."""
    with open(os.path.join(policy_dir, "policy.json"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def run_service(policy_dir, host: str = "127.0.0.1", port: int = 8000,
                tick_hz: float = 50.0,
                objective: Objective = Objective(0.0, 2.0),
                params: PhysicsParams = DEFAULT_PHYSICS,
                start_paused: bool = False):
    """Load a policy checkpoint and serve it until interrupted."""
    import uvicorn
    policy, _ = load_policy(policy_dir)
    app = create_app(policy, objective=objective, tick_hz=tick_hz,
                     params=params, start_paused=start_paused,
                     policy_id=policy_checkpoint_id(policy_dir))
    uvicorn.run(app, host=host, port=port, log_level="info")
