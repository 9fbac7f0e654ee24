"""Reverse-time ODE and SDE sampling for flow-matching velocity fields.

Sampling runs from t=1 (pure noise) down to t=0 (data). The stochastic
variant adds a schedule-dependent drift correction and Gaussian noise so the
marginals match the deterministic flow; its per-step transition density is an
isotropic Gaussian whose log-probability feeds the policy-gradient ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "NoiseSchedule",
    "TransitionRecord",
    "TrajectoryRecord",
    "ode_step",
    "sde_step",
    "transition_logprob",
    "ode_rollout",
    "stochastic_drift_coeff",
    "logprob_scale_shift",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i/T for i = 0..T, traversed from t_T=1 down to t_0=0."""

    total: int

    def __post_init__(self):
        if self.total < 1:
            raise ValueError(f"grid needs at least one step, got total={self.total}")

    @property
    def dt(self) -> float:
        return 1.0 / self.total

    @property
    def t_max(self) -> float:
        # clamp bound keeping sigma finite at the t=1 singularity
        return 1.0 - 1.0 / (2.0 * self.total)

    def time(self, i: int) -> float:
        if not 0 <= i <= self.total:
            raise ValueError(f"grid index {i} outside 0..{self.total}")
        return i / self.total


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = eta * sqrt(t_c / (1 - t_c)) with t_c = min(t, t_max)."""

    eta: float
    t_max: float = 0.999

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError(f"noise level must be non-negative, got eta={self.eta}")
        if not 0.0 < self.t_max < 1.0:
            raise ValueError(f"t_max must lie in (0, 1), got {self.t_max}")

    @classmethod
    def bound(cls, eta: float, grid: TimeGrid) -> "NoiseSchedule":
        return cls(eta, grid.t_max)

    def clamp(self, t: float) -> float:
        return min(t, self.t_max)

    def sigmaja(self, t):  # pragma: no cover - typo guard, see sigma
        raise AttributeError("use sigma")

    def sigma(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {t}")
        tc = self.clamp(t)
        return self.eta * math.sqrt(tc / (1.0 - tc))


@dataclass
class TransitionRecord:
    """One reverse-time step x_t -> x_{t-dt}, batched over the leading axis.

    Deterministic steps have std == 0, destination == mean, and no
    log-probability. Stochastic steps carry the Gaussian transition's mean,
    scalar std, and the destination's log-density under N(mean, std^2 I).
    """

    t: float
    t_next: float
    source: np.ndarray
    mean: np.ndarray
    std: float
    destination: np.ndarray
    logprob: np.ndarray | None
    stochastic: bool
    sigma: float = 0.0
    t_clamped: float = 0.0


@dataclass
class TrajectoryRecord:
    """A full reverse-time rollout: initial state, per-step records, terminal sample."""

    condition: object
    x_init: np.ndarray
    records: list[TransitionRecord] = field(default_factory=list)
    x_terminal: np.ndarray | None = None

    def times(self) -> list[float]:
        return [r.t for r in self.records] + ([self.records[-1].t_next] if self.records else [])

    def validate(self) -> None:
        ts = self.times()
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"recorded times are not strictly decreasing: {ts}")
        for a, b in zip(self.records, self.records[1:]):
            if a.t_next != b.t:
                raise ValueError(f"records not contiguous: {a.t_next} != {b.t}")
        if self.records and self.records[-1].t_next != 0.0:
            raise ValueError(f"rollout must terminate at t=0, got {self.records[-1].t_next}")


def _require_finite_velocity(v: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"velocity field returned non-finite values at t={t}")


def ode_step(v_fn, x: np.ndarray, t: float, dt: float, c) -> np.ndarray:
    """Reverse-time Euler step x - v(x, t, c) * dt."""
    if dt <= 0.0:
        raise ValueError(f"step size must be positive, got {dt}")
    if t - dt < -1e-12:
        raise ValueError(f"step of size {dt} from t={t} would cross t=0")
    v = v_fn(x, t, c)
    _require_finite_velocity(v, t)
    return x - v * dt


def stochastic_drift_coeff(sigma: float, t_clamped: float) -> float:
    """Coefficient sigma^2 / (2 t_c) of the marginal-preserving drift correction."""
    return sigma * sigma / (2.0 * t_clamped)


def sde_step(
    v_fn,
    x: np.ndarray,
    t: float,
    dt: float,
    c,
    schedule: NoiseSchedule,
    noise: np.ndarray,
) -> TransitionRecord:
    """One Euler–Maruyama step of the marginal-matching SDE.

    mean = x - [v + (sigma^2 / 2 t_c) (x + (1 - t_c) v)] dt, destination =
    mean + sigma sqrt(dt) * noise. Schedule-dependent factors all use the
    clamped time t_c. With eta=0 this reduces bitwise to ode_step.
    """
    if dt <= 0.0:
        raise ValueError(f"step size must be positive, got {dt}")
    tc = schedule.clamp(t)
    if schedule.eta > 0.0 and tc <= 0.0:
        raise ValueError(f"no stochastic step at t={t}: clamped time is not positive")
    sig = schedule.sigma(t)
    v = v_fn(x, t, c)
    _require_finite_velocity(v, t)
    if sig == 0.0:
        mean = x - v * dt
        return TransitionRecord(
            t=t, t_next=t - dt, source=x, mean=mean, std=0.0,
            destination=mean, logprob=None, stochastic=False, sigma=0.0, t_clamped=tc,
        )
    mean = x - (v + stochastic_drift_coeff(sig, tc) * (x + (1.0 - tc) * v)) * dt
    std = sig * math.sqrt(dt)
    destination = mean + std * noise
    logprob = transition_logprob(destination, mean, std)
    return TransitionRecord(
        t=t, t_next=t - dt, source=x, mean=mean, std=std,
        destination=destination, logprob=logprob, stochastic=True, sigma=sig, t_clamped=tc,
    )


def logprob_scale_shift(std: float, dim: int) -> tuple[float, float]:
    """(scale, shift) of logp = scale * sum((x-m)^2, last axis) + shift."""
    scale = -1.0 / (2.0 * std * std)
    shift = -dim * (math.log(std) + 0.5 * math.log(2.0 * math.pi))
    return scale, shift


def transition_logprob(destination: np.ndarray, mean: np.ndarray, std: float):
    """Log-density of destination under N(mean, std^2 I), summed over the last axis."""
    if std <= 0.0:
        raise ValueError(f"transition std must be positive, got {std}")
    destination = np.asarray(destination, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    scale, shift = logprob_scale_shift(std, destination.shape[-1])
    diff = destination - mean
    return (diff * diff).sum(axis=-1) * scale + shift


def ode_rollout(
    v_fn,
    x_start: np.ndarray,
    t_start: float,
    c,
    step_size: float,
    keep_records: bool = True,
) -> tuple[np.ndarray, TrajectoryRecord]:
    """Deterministic rollout from t_start to exactly t=0 with a truncated final step."""
    if not 0.0 < t_start <= 1.0:
        raise ValueError(f"t_start must lie in (0, 1], got {t_start}")
    if step_size <= 0.0:
        raise ValueError(f"step size must be positive, got {step_size}")
    n_steps = max(1, int(math.ceil(t_start / step_size - 1e-12)))
    trajectory = TrajectoryRecord(condition=c, x_init=x_start)
    x, t = x_start, t_start
    for i in range(n_steps):
        dt = step_size if i < n_steps - 1 else t
        t_next = t - step_size if i < n_steps - 1 else 0.0
        x_next = ode_step(v_fn, x, t, dt, c)
        if keep_records:
            trajectory.records.append(TransitionRecord(
                t=t, t_next=t_next, source=x, mean=x_next, std=0.0,
                destination=x_next, logprob=None, stochastic=False,
            ))
        x, t = x_next, t_next
    trajectory.x_terminal = x
    return x, trajectory
