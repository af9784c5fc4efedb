"""Sequential model-based hyperparameter search.

Two strategies share one interface: seeded random search, and SMBO with a
Gaussian-process surrogate (squared-exponential kernel) maximising expected
improvement over a seeded candidate pool after a random warm-up phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError

_KINDS = ("integer-range", "real-range", "real-range-log", "categorical")


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    bounds: tuple = ()      # (lo, hi) for ranges
    choices: tuple = ()     # for categorical

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if self.kind == "categorical":
            if not self.choices:
                raise ValueError("categorical dimension needs choices")
        else:
            lo, hi = self.bounds
            if not lo < hi:
                raise ValueError(f"bounds for {self.name!r} must be ordered")
            if self.kind == "real-range-log" and lo <= 0:
                raise ValueError("log range needs positive bounds")

    def sample(self, rng) -> object:
        if self.kind == "integer-range":
            return int(rng.integers(self.bounds[0], self.bounds[1] + 1))
        if self.kind == "real-range":
            return float(rng.uniform(*self.bounds))
        if self.kind == "real-range-log":
            return float(np.exp(rng.uniform(np.log(self.bounds[0]), np.log(self.bounds[1]))))
        return self.choices[int(rng.integers(len(self.choices)))]

    def to_unit(self, value) -> float:
        if self.kind == "integer-range" or self.kind == "real-range":
            lo, hi = self.bounds
            return (float(value) - lo) / (hi - lo)
        if self.kind == "real-range-log":
            lo, hi = np.log(self.bounds[0]), np.log(self.bounds[1])
            return (math.log(value) - lo) / (hi - lo)
        if len(self.choices) == 1:
            return 0.0
        return self.choices.index(value) / (len(self.choices) - 1)

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        return self.bounds[0] <= value <= self.bounds[1]


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        if not self.dimensions:
            raise ValueError("search space cannot be empty")
        object.__setattr__(self, "dimensions", tuple(self.dimensions))

    def sample(self, rng) -> dict:
        return {d.name: d.sample(rng) for d in self.dimensions}

    def to_unit(self, config: dict) -> np.ndarray:
        return np.array([d.to_unit(config[d.name]) for d in self.dimensions])


@dataclass(frozen=True)
class Trial:
    config: dict
    objective: float
    status: str = "ok"  # or "failed"


def _gp_posterior(x_train, y, x_query, length_scale=0.2, jitter=1e-6):
    """Zero-mean GP with unit-signal squared-exponential kernel."""
    def kern(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-0.5 * sq / length_scale ** 2)

    k = kern(x_train, x_train) + jitter * np.eye(len(x_train))
    l = np.linalg.cholesky(k)
    alpha = np.linalg.solve(l.T, np.linalg.solve(l, y))
    ks = kern(x_query, x_train)
    mu = ks @ alpha
    v = np.linalg.solve(l, ks.T)
    var = np.maximum(1.0 - (v ** 2).sum(axis=0), 1e-12)
    return mu, np.sqrt(var)


def _expected_improvement(mu, sigma, best):
    z = (best - mu) / sigma
    phi = np.exp(-0.5 * z ** 2) / np.sqrt(2 * np.pi)
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / np.sqrt(2)))
    return (best - mu) * cdf + sigma * phi


def optimize(space: SearchSpace, objective, budget: int, strategy: str = "smbo",
             seed: int = 0, n_candidates: int = 1024):
    """Minimize the objective callback over the space; returns (best, trials)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if strategy not in ("random", "smbo"):
        raise ValueError("strategy must be 'random' or 'smbo'")
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []

    def evaluate(config):
        try:
            val = float(objective(config))
            status = "ok" if np.isfinite(val) else "failed"
        except Exception:
            val, status = np.inf, "failed"
        trials.append(Trial(config=config, objective=val, status=status))

    warmup = budget if strategy == "random" else min(budget, max(5, budget // 4))
    for _ in range(warmup):
        evaluate(space.sample(rng))

    while len(trials) < budget:
        ok = [t for t in trials if t.status == "ok"]
        if not ok:
            evaluate(space.sample(rng))
            continue
        x = np.array([space.to_unit(t.config) for t in ok])
        y = np.array([t.objective for t in ok])
        y_std = y.std()
        y_norm = (y - y.mean()) / (y_std if y_std > 0 else 1.0)
        cand_configs = [space.sample(rng) for _ in range(n_candidates)]
        xq = np.array([space.to_unit(c) for c in cand_configs])
        mu, sigma = _gp_posterior(x, y_norm, xq)
        ei = _expected_improvement(mu, sigma, y_norm.min())
        evaluate(cand_configs[int(np.argmax(ei))])

    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise ConvergenceError("all trials failed")
    best = min(ok, key=lambda t: t.objective)
    return best, trials


def select_global_svr_params(per_point_params, eval_fn):
    """Pick the candidate parameter set with the lowest summed control-point
    error; ties break on (cost, gamma)."""
    candidates = list(per_point_params)
    if not candidates:
        raise ValueError("no candidate parameter sets")
    scored = [(float(eval_fn(p)), p.cost, p.gamma, p) for p in candidates]
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    return scored[0][3]


def trials_csv(trials) -> str:
    if not trials:
        return ""
    names = sorted(trials[0].config)
    lines = ["trial," + ",".join(names) + ",objective,status"]
    for i, t in enumerate(trials):
        vals = ",".join(str(t.config[n]) for n in names)
        lines.append(f"{i},{vals},{t.objective!r},{t.status}")
    return "\n".join(lines) + "\n"


def default_cnn_space() -> SearchSpace:
    """CNN search space anchored on the shipped architecture defaults."""
    return SearchSpace(dimensions=(
        Dimension("conv1", "categorical", choices=(16, 32, 64, 128)),
        Dimension("conv2", "categorical", choices=(16, 32, 64, 128)),
        Dimension("dense1", "categorical", choices=(32, 64, 128, 256, 512)),
        Dimension("dense2", "categorical", choices=(32, 64, 128, 256, 512)),
        Dimension("dense3", "categorical", choices=(32, 64, 128, 256, 512)),
        Dimension("batch_size", "categorical", choices=(10, 32)),
        Dimension("learning_rate", "real-range-log", bounds=(1e-4, 1e-2)),
    ))


def default_svr_space() -> SearchSpace:
    return SearchSpace(dimensions=(
        Dimension("cost", "real-range-log", bounds=(0.1, 100.0)),
        Dimension("epsilon", "real-range-log", bounds=(1e-3, 0.5)),
        Dimension("gamma", "real-range-log", bounds=(1e-3, 10.0)),
    ))
