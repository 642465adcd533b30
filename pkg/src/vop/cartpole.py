"""Full-angle cart-pole swing-up environment and its parameterized reward.

The simulator extends the classic cart-pole to the whole angular range
theta in [-pi, pi), theta = 0 upright, integrated with one explicit Euler
step per action.  The cart lives on a finite track: x is clamped to
[-2.5, 2.5] and the cart velocity drops to zero on wall contact.  Actions
a in [-2, 2] scale linearly to a horizontal force F = force_per_action * a.

The reward is objective-parameterized:

    r(s; omega) = -|x - omega_x| - omega_theta * |theta| - r~(theta_dot)
    r~(theta_dot) = |theta_dot / 2|  if |theta| < 0.4 else 0

omega_x in [-2, 2] is the target cart position, omega_theta in [0, 4]
weighs pole alignment, and the smoothing term r~ discourages jittery
balancing near upright.  `reward_batch` evaluates the same function on a
taped batch so rollout gradients can flow through it; the |theta| < 0.4
branch is constant in the reverse pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

X_LIMIT = 2.5
ACTION_LIMIT = 2.0
OMEGA_X_BOX = (-2.0, 2.0)
OMEGA_THETA_BOX = (0.0, 4.0)
SMOOTHING_ANGLE = 0.4


@dataclass(frozen=True)
class EnvState:
    x: float
    theta: float
    x_dot: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.theta, self.x_dot, self.theta_dot])


def state_from_array(a) -> EnvState:
    x, theta, x_dot, theta_dot = (float(v) for v in a)
    return EnvState(x, theta, x_dot, theta_dot)


@dataclass(frozen=True)
class Objective:
    omega_x: float
    omega_theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.omega_x, self.omega_theta])


@dataclass(frozen=True)
class PhysicsParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    dt: float = 0.02
    force_per_action: float = 10.0

    def __post_init__(self):
        for name in ("gravity", "cart_mass", "pole_mass", "pole_half_length",
                     "dt", "force_per_action"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")


DEFAULT_PHYSICS = PhysicsParams()


def wrap_pi(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return np.mod(theta + np.pi, 2.0 * np.pi) - np.pi


def env_step(state: EnvState, action: float, params: PhysicsParams = DEFAULT_PHYSICS) -> EnvState:
    """One explicit-Euler step of the cart-pole equations of motion."""
    vals = (state.x, state.theta, state.x_dot, state.theta_dot, action)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite state or action: state={state}, action={action}")
    force = params.force_per_action * action
    total_mass = params.cart_mass + params.pole_mass
    pml = params.pole_mass * params.pole_half_length
    sin = math.sin(state.theta)
    cos = math.cos(state.theta)
    temp = (force + pml * state.theta_dot ** 2 * sin) / total_mass
    theta_acc = (params.gravity * sin - cos * temp) / (
        params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos ** 2 / total_mass))
    x_acc = temp - pml * theta_acc * cos / total_mass

    dt = params.dt
    x = state.x + dt * state.x_dot
    x_dot = state.x_dot + dt * x_acc
    theta = float(wrap_pi(state.theta + dt * state.theta_dot))
    theta_dot = state.theta_dot + dt * theta_acc
    if x > X_LIMIT:
        x, x_dot = X_LIMIT, 0.0
    elif x < -X_LIMIT:
        x, x_dot = -X_LIMIT, 0.0
    return EnvState(x, theta, x_dot, theta_dot)


def env_step_array(states: np.ndarray, actions: np.ndarray,
                   params: PhysicsParams = DEFAULT_PHYSICS) -> np.ndarray:
    """Vectorized `env_step` over (N, 4) states and (N,) actions."""
    if not (np.isfinite(states).all() and np.isfinite(actions).all()):
        raise ValueError("non-finite state or action")
    x, theta, x_dot, theta_dot = states.T
    force = params.force_per_action * actions
    total_mass = params.cart_mass + params.pole_mass
    pml = params.pole_mass * params.pole_half_length
    sin = np.sin(theta)
    cos = np.cos(theta)
    temp = (force + pml * theta_dot ** 2 * sin) / total_mass
    theta_acc = (params.gravity * sin - cos * temp) / (
        params.pole_half_length * (4.0 / 3.0 - params.pole_mass * cos ** 2 / total_mass))
    x_acc = temp - pml * theta_acc * cos / total_mass

    dt = params.dt
    x_new = x + dt * x_dot
    x_dot_new = x_dot + dt * x_acc
    theta_new = wrap_pi(theta + dt * theta_dot)
    theta_dot_new = theta_dot + dt * theta_acc
    hit = np.abs(x_new) > X_LIMIT
    x_new = np.clip(x_new, -X_LIMIT, X_LIMIT)
    x_dot_new = np.where(hit, 0.0, x_dot_new)
    return np.stack([x_new, theta_new, x_dot_new, theta_dot_new], axis=1)


def reward_array(states: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Vectorized `reward` over (N, 4) states and (N, 2) objectives."""
    x, theta, theta_dot = states[:, 0], states[:, 1], states[:, 3]
    r = -np.abs(x - omegas[:, 0]) - omegas[:, 1] * np.abs(theta)
    smoothing = np.where(np.abs(theta) < SMOOTHING_ANGLE, np.abs(theta_dot / 2.0), 0.0)
    return r - smoothing


def reward(s: EnvState, obj: Objective) -> float:
    """r(s; omega) as defined in the module docstring; always <= 0."""
    r = -abs(s.x - obj.omega_x) - obj.omega_theta * abs(s.theta)
    if abs(s.theta) < SMOOTHING_ANGLE:
        r -= abs(s.theta_dot / 2.0)
    return r


def reward_batch(tape: Tape, s: Var, omega: np.ndarray) -> Var:
    """Taped batched reward: s is a (B, 4) Var, omega a constant (B, 2) array.

    Returns a (B, 1) Var.  Matches `reward` pointwise.
    """
    x = ad.slice_cols(tape, s, 0, 1)
    theta = ad.slice_cols(tape, s, 1, 2)
    theta_dot = ad.slice_cols(tape, s, 3, 4)
    pos_cost = ad.abs_(tape, ad.add_const(tape, x, -omega[:, 0:1]))
    ang_cost = ad.scale(tape, ad.abs_(tape, theta), omega[:, 1:2])
    balancing = np.abs(theta.data) < SMOOTHING_ANGLE  # branch constant in reverse pass
    smooth_cost = ad.gate(tape, balancing, ad.abs_(tape, ad.scale(tape, theta_dot, 0.5)))
    total = ad.add(tape, ad.add(tape, pos_cost, ang_cost), smooth_cost)
    return ad.neg(tape, total)


@dataclass
class Episode:
    states: List[EnvState]      # length steps + 1, includes the start state
    actions: List[float]
    rewards: List[float]        # reward of each successor state
    total_return: float         # undiscounted sum of rewards


def run_episode(policy: Callable[[EnvState, Objective], float], obj: Objective,
                start: EnvState, steps: int,
                params: PhysicsParams = DEFAULT_PHYSICS) -> Episode:
    """Apply `policy` closed-loop for `steps` environment steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    states = [start]
    actions: List[float] = []
    rewards: List[float] = []
    s = start
    for _ in range(steps):
        a = float(np.clip(policy(s, obj), -ACTION_LIMIT, ACTION_LIMIT))
        s = env_step(s, a, params)
        states.append(s)
        actions.append(a)
        rewards.append(reward(s, obj))
    return Episode(states=states, actions=actions, rewards=rewards,
                   total_return=float(sum(rewards)))


def sample_initial_state(rng: np.random.Generator) -> EnvState:
    """x ~ U[-2.5, 2.5], theta ~ U[-pi, pi), velocities start at rest."""
    x = rng.uniform(-X_LIMIT, X_LIMIT)
    theta = rng.uniform(-np.pi, np.pi)
    return EnvState(float(x), float(theta), 0.0, 0.0)


def sample_objective(rng: np.random.Generator) -> Objective:
    omega_x = rng.uniform(*OMEGA_X_BOX)
    omega_theta = rng.uniform(*OMEGA_THETA_BOX)
    return Objective(float(omega_x), float(omega_theta))


def mechanical_energy(s: EnvState, params: PhysicsParams = DEFAULT_PHYSICS) -> float:
    """Kinetic plus potential energy of cart and pole (potential zero at pivot
    height); used by sanity checks on the integrator."""
    l = params.pole_half_length
    v_pole_sq = (s.x_dot + l * s.theta_dot * math.cos(s.theta)) ** 2 + \
                (l * s.theta_dot * math.sin(s.theta)) ** 2
    kinetic = 0.5 * params.cart_mass * s.x_dot ** 2 + 0.5 * params.pole_mass * v_pole_sq
    potential = params.pole_mass * params.gravity * l * math.cos(s.theta)
    return kinetic + potential
