"""Hyperparameter search over learning rate and batch size.

Bayesian optimisation with a Matern-5/2 Gaussian process on
(log10 lr, one-hot batch size) and expected-improvement acquisition, after
a quasi-random warm-up. ``mode="random"`` swaps the GP for seeded random
search.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from .nn.train import BATCH_CHOICES, LR_RANGE, DivergenceError, HyperParams

log = logging.getLogger(__name__)

WARMUP = 10


class SearchFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = LR_RANGE
    batch_choices: tuple[int, ...] = BATCH_CHOICES

    def __post_init__(self):
        lo, hi = self.lr_range
        if not (0 < lo < hi):
            raise ValueError("lr_range must satisfy 0 < lo < hi")
        if not self.batch_choices:
            raise ValueError("batch_choices must not be empty")

    @property
    def log_bounds(self) -> tuple[float, float]:
        return math.log10(self.lr_range[0]), math.log10(self.lr_range[1])

    def contains(self, hp: HyperParams) -> bool:
        lo, hi = self.lr_range
        return lo <= hp.learning_rate <= hi and hp.batch_size in self.batch_choices


@dataclass
class Trial:
    hp: HyperParams
    validation_mae: float
    train_seconds: float = 0.0
    status: str = "completed"  # "completed" | "diverged"

    def __post_init__(self):
        if self.status not in ("completed", "diverged"):
            raise ValueError(f"bad trial status {self.status!r}")
        if self.status == "completed" and not math.isfinite(self.validation_mae):
            raise ValueError("completed trials need a finite validation MAE")

    def to_json(self) -> str:
        return json.dumps(
            {
                "learning_rate": self.hp.learning_rate,
                "batch_size": self.hp.batch_size,
                "epochs": self.hp.epochs,
                "validation_mae": self.validation_mae if math.isfinite(self.validation_mae) else None,
                "train_seconds": self.train_seconds,
                "status": self.status,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        d = json.loads(line)
        mae = d["validation_mae"]
        return cls(
            HyperParams(d["learning_rate"], d["batch_size"], d["epochs"]),
            math.nan if mae is None else float(mae),
            float(d.get("train_seconds", 0.0)),
            d["status"],
        )


# -- Gaussian process ---------------------------------------------------------


def matern52(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.maximum(0.0, (((a[:, None, :] - b[None, :, :]) / lengthscales) ** 2).sum(-1)))
    s5 = math.sqrt(5.0) * d
    return (1.0 + s5 + 5.0 / 3.0 * d * d) * np.exp(-s5)


class GaussianProcess:
    """Zero-mean GP on standardised targets; length scale picked by marginal likelihood on a grid."""

    def __init__(self, noise: float = 1e-6):
        self.noise = noise

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        self.x = x
        self.mu = float(y.mean())
        self.sd = float(y.std()) or 1.0
        z = (y - self.mu) / self.sd
        best = None
        for ls_lr in (0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0):
            for ls_b in (0.5, 1.0, 2.0):
                ls = np.array([ls_lr] + [ls_b] * (x.shape[1] - 1))
                for noise in (self.noise, 1e-4, 1e-2):
                    k = matern52(x, x, ls) + noise * np.eye(len(x))
                    try:
                        c = cho_factor(k, lower=True)
                    except np.linalg.LinAlgError:
                        continue
                    alpha = cho_solve(c, z)
                    nll = 0.5 * z @ alpha + np.log(np.diag(c[0])).sum()
                    if best is None or nll < best[0] - 1e-12:
                        best = (nll, ls, noise, c, alpha)
        if best is None:
            raise np.linalg.LinAlgError("GP kernel matrix is not positive definite")
        _, self.ls, self.fit_noise, self.chol, self.alpha = best
        return self

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ks = matern52(xs, self.x, self.ls)
        mean = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = np.maximum(1.0 - (ks * v.T).sum(1), 1e-12)
        return self.mu + self.sd * mean, self.sd * np.sqrt(var)


def expected_improvement(mean, std, best):
    """EI for minimisation."""
    z = (best - mean) / std
    return (best - mean) * norm.cdf(z) + std * norm.pdf(z)


def _encode(lr: float, batch: int, space: SearchSpace) -> np.ndarray:
    lo, hi = space.log_bounds
    u = (math.log10(lr) - lo) / (hi - lo)
    onehot = [1.0 if batch == b else 0.0 for b in space.batch_choices]
    return np.array([u] + onehot)


def _warmup_point(i: int, space: SearchSpace, seed: int) -> HyperParams:
    # scrambled Sobol in log-lr; batch cycles round-robin
    sob = qmc.Sobol(d=1, scramble=True, seed=np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x50B]))))
    u = sob.random(16)[i % 16, 0]
    lo, hi = space.log_bounds
    lr = 10 ** (lo + u * (hi - lo))
    lr = min(max(lr, space.lr_range[0]), space.lr_range[1])
    return HyperParams(lr, space.batch_choices[i % len(space.batch_choices)], 60)


def _seen(history) -> set:
    return {(t.hp.learning_rate, t.hp.batch_size) for t in history}


def suggest(history, space: SearchSpace = SearchSpace(), seed: int = 0, mode: str = "bayes", epochs: int = 60) -> HyperParams:
    """Next hyperparameters to try; deterministic given ``(history, seed)``."""
    n = len(history)
    seen = _seen(history)
    lo, hi = space.log_bounds
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n, 0x7A1])))

    def finish(lr, batch):
        lr = float(min(max(lr, space.lr_range[0]), space.lr_range[1]))
        while (lr, batch) in seen:
            lr = float(np.nextafter(lr, space.lr_range[1] if lr < space.lr_range[1] else 0.0))
        return HyperParams(lr, batch, epochs)

    if mode == "random":
        return finish(10 ** rng.uniform(lo, hi), space.batch_choices[int(rng.integers(len(space.batch_choices)))])
    if n < WARMUP:
        hp = _warmup_point(n, space, seed)
        return finish(hp.learning_rate, hp.batch_size)

    done = [t for t in history if t.status == "completed"]
    if len(done) < 2:
        return finish(10 ** rng.uniform(lo, hi), space.batch_choices[int(rng.integers(len(space.batch_choices)))])
    x = np.stack([_encode(t.hp.learning_rate, t.hp.batch_size, space) for t in done])
    y = np.array([t.validation_mae for t in done])
    # diverged trials count as the worst observed value
    if len(done) < n:
        div = [t for t in history if t.status != "completed"]
        x = np.vstack([x] + [_encode(t.hp.learning_rate, t.hp.batch_size, space)[None] for t in div])
        y = np.concatenate([y, np.full(len(div), y.max())])
    gp = GaussianProcess().fit(x, y)

    grid = np.linspace(0.0, 1.0, 1001)
    cand_u = np.concatenate([grid, rng.random(256)])
    best_val = float(y.min())
    best = None
    for b in space.batch_choices:
        xs = np.stack([_encode(10 ** (lo + u * (hi - lo)), b, space) for u in cand_u])
        mean, std = gp.predict(xs)
        ei = expected_improvement(mean, std, best_val)
        for j in np.argsort(-ei, kind="stable")[:5]:
            lr = 10 ** (lo + cand_u[j] * (hi - lo))
            if (float(lr), b) in seen:
                continue
            if best is None or ei[j] > best[0]:
                best = (float(ei[j]), lr, b)
            break
    if best is None:
        return finish(10 ** rng.uniform(lo, hi), space.batch_choices[0])
    return finish(best[1], best[2])


def suggest_batch(history, k: int, space: SearchSpace = SearchSpace(), seed: int = 0, mode: str = "bayes", epochs: int = 60):
    """``k`` suggestions for concurrent evaluation (constant liar).

    Each pending suggestion is added to a copy of the history with the best
    observed MAE as its placeholder result, so the next one is pushed away
    from it. Deterministic given ``(history, seed, k)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hist = list(history)
    done = [t.validation_mae for t in hist if t.status == "completed"]
    out = []
    for _ in range(k):
        hp = suggest(hist, space, seed, mode, epochs)
        out.append(hp)
        if done:
            hist.append(Trial(hp, min(done)))
        else:
            hist.append(Trial(hp, math.nan, status="diverged"))
    return out


@dataclass
class SearchResult:
    trials: list = field(default_factory=list)
    best: HyperParams | None = None
    best_index: int = -1


def best_trial(trials) -> int:
    idx = -1
    for i, t in enumerate(trials):
        if t.status != "completed":
            continue
        if idx < 0 or t.validation_mae < trials[idx].validation_mae:
            idx = i
    return idx


def run_search(
    objective,
    space: SearchSpace = SearchSpace(),
    n_trials: int = 50,
    epochs: int = 60,
    seed: int = 0,
    mode: str = "bayes",
    prior: list | None = None,
    log_path=None,
    parallel: int = 1,
) -> SearchResult:
    """Search driven by ``objective(hp) -> validation MAE``.

    The objective may raise :class:`DivergenceError` or return a non-finite
    value; such trials are recorded as diverged. ``prior`` trials (e.g. from
    a resumed log) count towards ``n_trials``. ``parallel > 1`` evaluates
    that many constant-liar suggestions at once on a thread pool; results are
    recorded in suggestion order, so the trial sequence depends only on the
    seed and ``parallel``.
    """
    trials = list(prior or [])
    fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def evaluate(hp):
        t0 = time.perf_counter()
        try:
            mae = float(objective(hp))
            status = "completed" if math.isfinite(mae) else "diverged"
        except DivergenceError as exc:
            log.warning("trial lr=%g batch=%d diverged: %s", hp.learning_rate, hp.batch_size, exc)
            mae, status = math.nan, "diverged"
        return Trial(hp, mae if status == "completed" else math.nan, time.perf_counter() - t0, status)

    pool = ThreadPoolExecutor(parallel) if parallel > 1 else None
    try:
        while len(trials) < n_trials:
            k = min(parallel, n_trials - len(trials))
            if k == 1:
                batch = [evaluate(suggest(trials, space, seed, mode, epochs))]
            else:
                batch = list(pool.map(evaluate, suggest_batch(trials, k, space, seed, mode, epochs)))
            for trial in batch:
                trials.append(trial)
                if fh:
                    fh.write(trial.to_json() + "\n")
                    fh.flush()
    finally:
        if pool:
            pool.shutdown()
        if fh:
            fh.close()
    idx = best_trial(trials)
    if idx < 0:
        raise SearchFailure(f"all {len(trials)} trials diverged")
    return SearchResult(trials, trials[idx].hp, idx)


def read_search_log(path) -> list:
    p = Path(path)
    if not p.exists():
        return []
    return [Trial.from_json(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def nn_objective(dataset, splits, config, seed: int = 0):
    """Objective that trains a model and returns its best validation MAE."""
    from .nn.train import train

    if not splits.validation:
        raise ValueError("hyperparameter search needs a validation split")

    def objective(hp: HyperParams) -> float:
        _, report = train(dataset, splits, config, hp, seed)
        return report.best_val_mae

    return objective


def search_dataset(
    dataset,
    splits,
    config,
    space: SearchSpace = SearchSpace(),
    n_trials: int = 50,
    epochs: int = 60,
    seed: int = 0,
    **kw,
) -> SearchResult:
    """One search per (model config, dataset): trains a model per trial."""
    return run_search(nn_objective(dataset, splits, config, seed), space, n_trials, epochs, seed, **kw)
