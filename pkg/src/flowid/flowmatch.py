"""Linear interpolant, conditional flow-matching loss, Euler and midpoint
probability-flow ODE solvers, and forward inversion with reference-trajectory
recording.

The schedule is a uniform grid t_i = i/S with sigma_t = t and alpha_t = 1 - t,
so the regression target for the velocity is eps - z0. Solvers evaluate the
model at the step's starting time and update z <- z + (sigma_next - sigma_cur) * v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

# full inversion stops this many grid steps short of pure noise
PURE_NOISE_GUARD = 2


@dataclass(frozen=True)
class Schedule:
    """Uniform discrete time grid 0 = t_0 < ... < t_S = 1."""

    steps: int = 50

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("schedule needs at least 2 steps")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1, dtype=np.float64)

    def time(self, index: int) -> float:
        if not 0 <= index <= self.steps:
            raise ValueError(f"index {index} outside schedule of {self.steps} steps")
        return index / self.steps

    def index_for(self, fraction: float) -> int:
        """Nearest grid index for a time fraction; ties break downward."""
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction {fraction} outside [0, 1]")
        scaled = fraction * self.steps
        lower = int(np.floor(scaled))
        return lower if scaled - lower <= 0.5 + 1e-9 else lower + 1

    @property
    def full_inversion_index(self) -> int:
        return self.steps - PURE_NOISE_GUARD


@dataclass
class Trajectory:
    """Ordered (index, state) pairs recorded by a solver run."""

    indices: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    strength_index: int | None = None

    def append(self, index: int, state: np.ndarray) -> None:
        if self.indices:
            if index == self.indices[-1]:
                raise ValueError("trajectory indices must be strictly monotone")
            if len(self.indices) >= 2:
                direction = 1 if self.indices[1] > self.indices[0] else -1
                if (index - self.indices[-1]) * direction <= 0:
                    raise ValueError("trajectory indices must be strictly monotone")
        if self.states and state.shape != self.states[0].shape:
            raise ValueError("trajectory states must be shape-uniform")
        self.indices.append(index)
        self.states.append(np.asarray(state, dtype=np.float32).copy())

    def state_at(self, index: int) -> np.ndarray:
        try:
            return self.states[self.indices.index(index)]
        except ValueError:
            raise KeyError(f"trajectory has no state at index {index}") from None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.indices)

    def dump(self, path) -> None:
        tc.save_tensors(path, {f"z_{i:04d}": s for i, s in zip(self.indices, self.states)})


def interpolate(z0: np.ndarray, eps: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """z_t = (1-t) z0 + t eps and the target velocity eps - z0."""
    z0 = np.asarray(z0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if z0.shape != eps.shape:
        raise ValueError(f"interpolate: shapes {z0.shape} and {eps.shape} differ")
    t32 = np.float32(t)
    return (1 - t32) * z0 + t32 * eps, eps - z0


def cfm_loss(model, z0: np.ndarray, prompt, rng: np.random.Generator | None = None,
             draw: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Conditional flow-matching loss on one image or a batch.

    Draws t ~ U(0,1) per sample and eps ~ N(0,I) from rng unless an explicit
    (t, eps) draw is injected. Returns (scalar loss Tensor, the draw used).
    """
    z0 = np.asarray(z0, dtype=np.float32)
    batched = z0.ndim == 4
    zb = z0 if batched else z0[None]
    n = zb.shape[0]
    if draw is None:
        if rng is None:
            raise ValueError("cfm_loss: need an rng when no draw is injected")
        t = rng.random(n).astype(np.float32)
        eps = rng.standard_normal(zb.shape).astype(np.float32)
    else:
        t, eps = draw
        t = np.broadcast_to(np.asarray(t, dtype=np.float32), (n,)).copy()
        eps = np.asarray(eps, dtype=np.float32).reshape(zb.shape)
    z_t = (1 - t[:, None, None, None]) * zb + t[:, None, None, None] * eps
    target = eps - zb
    v, _ = model.forward(z_t, prompt, t)
    loss = tc.mse(v, Tensor(target))
    return loss, (t, eps)


def _step_times(schedule: Schedule, from_index: int, to_index: int) -> list[int]:
    step = 1 if to_index > from_index else -1
    return list(range(from_index, to_index, step))


def solve(model, z_start: np.ndarray, prompt, schedule: Schedule, from_index: int,
          to_index: int, method: str = "euler", record: bool = False):
    """Integrate the flow ODE between two grid indices.

    Returns (final state, Trajectory or None). The trajectory stores every
    visited state including the start. Raises on a non-finite state, naming
    the step index.
    """
    if method not in ("euler", "midpoint"):
        raise ValueError(f"unknown solver method {method!r}")
    for idx in (from_index, to_index):
        if not 0 <= idx <= schedule.steps:
            raise ValueError(f"index {idx} outside schedule of {schedule.steps} steps")
    if from_index == to_index:
        raise ValueError("solve: from_index and to_index must differ")

    z = np.asarray(z_start, dtype=np.float32).copy()
    traj = Trajectory(strength_index=max(from_index, to_index)) if record else None
    if record:
        traj.append(from_index, z)

    step = 1 if to_index > from_index else -1
    times = schedule.times
    for idx in _step_times(schedule, from_index, to_index):
        nxt = idx + step
        dt = np.float32(times[nxt] - times[idx])
        t_cur = float(times[idx])
        if method == "euler":
            v, _ = model.velocity(z, prompt, t_cur)
            z = z + dt * v
        else:
            v1, _ = model.velocity(z, prompt, t_cur)
            z_mid = z + np.float32(0.5) * dt * v1
            t_mid = 0.5 * (times[idx] + times[nxt])
            v2, _ = model.velocity(z_mid, prompt, float(t_mid))
            z = z + dt * v2
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"solve: non-finite state at step index {nxt}")
        if record:
            traj.append(nxt, z)
    return z, traj


def invert(model, z0: np.ndarray, prompt, schedule: Schedule, strength_index: int,
           method: str = "euler", record: bool = True):
    """Forward-in-time inversion from z_0 up to the strength index.

    Returns the recorded Trajectory, or just the final state when record is
    off. Strength index 0 yields a single-state trajectory.
    """
    if strength_index > schedule.full_inversion_index:
        raise ValueError(
            f"strength index {strength_index} exceeds full-inversion cap "
            f"{schedule.full_inversion_index} ({PURE_NOISE_GUARD} steps short of pure noise)"
        )
    if strength_index < 0:
        raise ValueError("strength index must be >= 0")
    if strength_index == 0:
        traj = Trajectory(strength_index=0)
        traj.append(0, np.asarray(z0, dtype=np.float32))
        return traj if record else traj.states[0]
    final, traj = solve(model, z0, prompt, schedule, 0, strength_index, method=method, record=record)
    if not record:
        return final
    traj.strength_index = strength_index
    return traj
