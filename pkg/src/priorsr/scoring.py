"""Score computations: MSE scores, island normalization, the annealed
constraint penalty, cluster softmax, NMSE and a Rademacher estimate."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PaceParams:
    beta: float = 0.6
    alpha: float = 1.2
    eta: float = 1.0
    base: float = 60.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.base <= 1.0:
            raise ValueError(f"base must exceed 1, got {self.base}")


@dataclass
class BudgetState:
    """Shared sample counter; ``t`` is the consumed fraction of the budget."""

    n_curr: int = 0
    n_max: int = 10000
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.n_max <= 0 or not 0 <= self.n_curr <= self.n_max:
            raise ValueError(f"invalid budget {self.n_curr}/{self.n_max}")

    @property
    def t(self) -> float:
        return self.n_curr / self.n_max

    @property
    def remaining(self) -> int:
        return self.n_max - self.n_curr

    @property
    def exhausted(self) -> bool:
        return self.n_curr >= self.n_max

    def advance(self, n: int = 1) -> int:
        """Consume ``n`` samples atomically; returns the new count."""
        with self._lock:
            if n < 0 or self.n_curr + n > self.n_max:
                raise ValueError(f"cannot advance {self.n_curr}/{self.n_max} by {n}")
            self.n_curr += n
            return self.n_curr


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_init: float = 0.1
    period: int = 30000


def _finite_vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def s_mse(pred, target) -> float:
    """Negative mean squared error (higher is better, 0 for an exact fit)."""
    p, y = _finite_vector(pred, "pred"), _finite_vector(target, "target")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} vs {y.size}")
    return -float(np.mean((y - p) ** 2))


def nmse(pred, target) -> float:
    """MSE divided by the population variance of ``target``."""
    y = _finite_vector(target, "target")
    var = float(np.var(y))
    if var == 0.0:
        raise ValueError("target variance is zero")
    return -s_mse(pred, y) / var


def normalize_scores(scores) -> np.ndarray:
    """Min-max scaling to [0, 1]; a degenerate range maps every entry to 0.5."""
    s = _finite_vector(scores, "scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def phi(t: float, base: float = 60.0) -> float:
    """Exponential annealing progress, 0 at t=0 and 1 at t=1."""
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return (base**t - 1.0) / (base - 1.0)


def pace_score(s_norm: float, valid: bool, budget: BudgetState | float, pp: PaceParams = PaceParams()) -> float:
    """Annealed score: valid candidates keep the reward range, invalid ones are
    shrunk toward zero and shifted down as the budget is spent.

    ``budget`` may be a :class:`BudgetState` or the ratio ``t`` directly.
    """
    if not 0.0 <= s_norm <= 1.0:
        raise ValueError(f"s_norm must lie in [0, 1], got {s_norm}")
    t = budget.t if isinstance(budget, BudgetState) else float(budget)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    reward = (1.0 - pp.beta) + 2.0 * pp.beta * s_norm
    if valid:
        return reward
    f = phi(t, pp.base)
    shrink = max(0.0, 1.0 - pp.eta * f)
    return shrink * reward - pp.alpha * f


def cluster_distribution(scores, tau: float) -> np.ndarray:
    s = _finite_vector(scores, "scores")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = (s - s.max()) / tau
    w = np.exp(z)
    return w / w.sum()


def temperature(n_samples: int, sched: TemperatureSchedule = TemperatureSchedule()) -> float:
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    frac = (n_samples % sched.period) / sched.period
    return max(sched.tau_init * (1.0 - frac), sched.tau_init / 100.0)


def rademacher_signs(n: int, trials: int, seed: int | None = 0, exhaustive: bool = False) -> np.ndarray:
    """Sign matrix of shape (trials, n); ``exhaustive`` enumerates all 2**n rows."""
    if exhaustive:
        return np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    rng = np.random.default_rng(seed)
    return rng.choice(np.array([-1.0, 1.0]), size=(trials, n))


def empirical_rademacher(
    outputs: Sequence[Sequence[float]],
    trials: int = 1000,
    seed: int | None = 0,
    exhaustive: bool = False,
    signs: np.ndarray | None = None,
) -> float:
    """Estimate E_sigma[max_f (1/N) sum_i sigma_i f(x_i)] over the candidate outputs.

    Passing the same ``signs`` (or the same seed and N) to a subset and its
    superset guarantees the subset estimate is never larger.
    """
    if len(outputs) == 0:
        raise ValueError("empty candidate set")
    vecs = [np.asarray(o, dtype=np.float64) for o in outputs]
    n = vecs[0].size
    if any(v.shape != (n,) for v in vecs):
        raise ValueError("all candidate vectors must share one length")
    if trials < 1 and signs is None and not exhaustive:
        raise ValueError("trials must be at least 1")
    if signs is None:
        signs = rademacher_signs(n, trials, seed, exhaustive)
    # one product per candidate keeps each correlation bitwise independent of
    # which other candidates are present
    corr = np.column_stack([signs @ v for v in vecs]) / n
    return float(np.mean(corr.max(axis=1)))
