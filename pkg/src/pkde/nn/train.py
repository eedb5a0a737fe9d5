"""Adam training loop, batch prediction and weight files."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..core import LayerImage, SplitAssignment, dump_json
from ..tensorio import load_tensor, save_tensor
from .layers import mae_loss
from .model import ModelConfig, NumericalError, backward_tape, check_input, forward, forward_tape, init_weights

log = logging.getLogger(__name__)

BATCH_CHOICES = (16, 32, 64)
LR_RANGE = (1e-6, 1e-3)


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, batch: int, msg: str = "loss is not finite"):
        super().__init__(f"epoch {epoch}, batch {batch}: {msg}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 60

    def __post_init__(self):
        lo, hi = LR_RANGE
        if not lo <= self.learning_rate <= hi:
            raise ValueError(f"learning_rate {self.learning_rate} outside [{lo}, {hi}]")
        if self.batch_size not in BATCH_CHOICES:
            raise ValueError(f"batch_size must be one of {BATCH_CHOICES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: OrderedDict
    v: OrderedDict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights) -> "AdamState":
        return cls(
            OrderedDict((k, np.zeros_like(w)) for k, w in weights.items()),
            OrderedDict((k, np.zeros_like(w)) for k, w in weights.items()),
        )

    def update(self, weights, grads, lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for k, w in weights.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            w -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype)


@dataclass
class Weights:
    config: ModelConfig
    params: OrderedDict
    optimizer: AdamState | None = None

    def copy(self) -> "Weights":
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = AdamState(
                OrderedDict((k, a.copy()) for k, a in o.m.items()),
                OrderedDict((k, a.copy()) for k, a in o.v.items()),
                o.step, o.beta1, o.beta2, o.eps,
            )
        return Weights(self.config, OrderedDict((k, a.copy()) for k, a in self.params.items()), opt)


@dataclass
class TrainReport:
    seed: int
    hyperparams: dict
    config: dict
    epochs: list = field(default_factory=list)  # {"epoch", "train_mae", "val_mae"}
    best_epoch: int = 0
    best_val_mae: float = math.inf
    zero_baseline_val_mae: float | None = None
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = False) -> dict:
        d = asdict(self)
        if not include_wall_time:
            d.pop("wall_time")
        return d


def stack_inputs(triplets) -> np.ndarray:
    """(B, 2, H, W) float32 tensor of HR and OT channels."""
    if not triplets:
        return np.zeros((0, 2, 0, 0), dtype=np.float32)
    return np.stack([np.stack([t.hr.data, t.ot.data]) for t in triplets]).astype(np.float32)


def stack_targets(triplets) -> np.ndarray:
    return np.stack([t.pp.data[None] for t in triplets]).astype(np.float32)


def prior_bias(params, targets, eps: float = 1e-3) -> None:
    """Set the head bias so the untrained output equals the mean target.

    Starting at 0.5 against mostly-low targets makes the first Adam steps
    all push the same way, which can drive the sigmoid into saturation.
    """
    m = float(np.clip(np.mean(targets, dtype=np.float64), eps, 1.0 - eps))
    params["head.b"][...] = math.log(m / (1.0 - m))


def _dataset_mae(weights, cfg, x, y, epoch: int, chunk: int = 32) -> float:
    if len(x) == 0:
        return math.nan
    total = 0.0
    for b, i in enumerate(range(0, len(x), chunk)):
        try:
            p = forward(weights, cfg, x[i:i + chunk])
        except NumericalError as exc:
            raise DivergenceError(epoch, b, f"evaluation: {exc}") from exc
        total += float(np.abs(p - y[i:i + chunk]).sum(dtype=np.float64))
    return total / y.size


def train(
    dataset,
    splits: SplitAssignment,
    config: ModelConfig,
    hp: HyperParams,
    seed: int = 0,
    init: Weights | None = None,
    on_epoch=None,
) -> tuple[Weights, TrainReport]:
    """Adam on per-pixel MAE; returns the weights of the best validation epoch.

    Epoch 0 in the report is the untrained model. Without a validation
    split the selection score is the train MAE of the weights as they stand
    after each epoch (not the running loss, which lags one update behind).
    """
    start = time.perf_counter()
    by_key = {t.key: t for t in dataset}
    train_keys = sorted(splits.train)
    val_keys = sorted(splits.validation)
    x_tr = stack_inputs([by_key[k] for k in train_keys])
    y_tr = stack_targets([by_key[k] for k in train_keys]) if train_keys else None
    x_va = stack_inputs([by_key[k] for k in val_keys])
    y_va = stack_targets([by_key[k] for k in val_keys]) if val_keys else None
    if len(x_tr):
        check_input(config, x_tr[:1])

    if init is not None:
        weights = init.copy()
    else:
        weights = Weights(config, init_weights(config, seed))
        if train_keys:
            prior_bias(weights.params, y_tr)
    if weights.optimizer is None:
        weights.optimizer = AdamState.zeros_like(weights.params)
    report = TrainReport(seed=seed, hyperparams=asdict(hp), config=config.to_dict())

    tr0 = _dataset_mae(weights.params, config, x_tr, y_tr, 0) if train_keys else math.nan
    va0 = _dataset_mae(weights.params, config, x_va, y_va, 0) if val_keys else math.nan
    report.epochs.append({"epoch": 0, "train_mae": tr0, "val_mae": va0})
    if val_keys:
        report.zero_baseline_val_mae = float(np.abs(y_va).mean(dtype=np.float64))
    best = weights.copy()
    report.best_epoch, report.best_val_mae = 0, (va0 if val_keys else tr0)

    n = len(x_tr)
    for epoch in range(1, hp.epochs + 1):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, 0xE90C])))
        order = rng.permutation(n)
        loss_sum = 0.0
        for b, i in enumerate(range(0, n, hp.batch_size)):
            idx = order[i:i + hp.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            try:
                pred, tape = forward_tape(weights.params, config, xb)
                loss, dpred = mae_loss(pred, yb)
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, b)
                grads = backward_tape(config, tape, dpred)
            except NumericalError as exc:
                if isinstance(exc, DivergenceError):
                    raise
                raise DivergenceError(epoch, b, str(exc)) from exc
            weights.optimizer.update(weights.params, grads, hp.learning_rate)
            loss_sum += loss * len(idx)
        tr = loss_sum / n if n else math.nan
        if val_keys:
            va = _dataset_mae(weights.params, config, x_va, y_va, epoch)
            score = va
        else:
            va = math.nan
            score = _dataset_mae(weights.params, config, x_tr, y_tr, epoch) if n else math.nan
        report.epochs.append({"epoch": epoch, "train_mae": tr, "val_mae": va})
        if score < report.best_val_mae:
            report.best_epoch, report.best_val_mae = epoch, score
            best = weights.copy()
        log.debug("epoch %d train %.5f val %.5f", epoch, tr, va)
        if on_epoch is not None:
            on_epoch(epoch, tr, va)
    report.wall_time = time.perf_counter() - start
    return best, report


@dataclass(frozen=True, eq=False)
class Prediction:
    part: int
    layer: int
    image: LayerImage

    @property
    def key(self):
        return (self.part, self.layer)


def predict_batch(weights: Weights, config: ModelConfig, triplets, chunk: int = 32) -> list[Prediction]:
    triplets = list(triplets)
    out = []
    for i in range(0, len(triplets), chunk):
        part = triplets[i:i + chunk]
        probs = forward(weights.params, config, stack_inputs(part))
        for t, p in zip(part, probs):
            out.append(Prediction(t.part, t.layer, LayerImage("PP", p[0].astype(np.float64))))
    return out


# -- weight files -------------------------------------------------------------


def _safe(name: str) -> str:
    return name.replace(".", "_")


def save_weights(weights: Weights, directory) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    header = {"config": weights.config.to_dict(), "params": {}, "optimizer": None}
    for name, arr in weights.params.items():
        rel = f"params/{_safe(name)}.pkt"
        save_tensor(d / rel, arr)
        header["params"][name] = rel
    opt = weights.optimizer
    if opt is not None:
        (d / "optimizer").mkdir(exist_ok=True)
        moments = {}
        for name in weights.params:
            m_rel, v_rel = f"optimizer/{_safe(name)}.m.pkt", f"optimizer/{_safe(name)}.v.pkt"
            save_tensor(d / m_rel, opt.m[name])
            save_tensor(d / v_rel, opt.v[name])
            moments[name] = [m_rel, v_rel]
        header["optimizer"] = {
            "kind": "adam", "step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "moments": moments,
        }
    dump_json(header, d / "weights.json")
    return d / "weights.json"


def load_weights(directory) -> Weights:
    d = Path(directory)
    header = json.loads((d / "weights.json").read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    params = OrderedDict((n, load_tensor(d / rel)) for n, rel in header["params"].items())
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        opt = AdamState(
            OrderedDict((n, load_tensor(d / mv[0])) for n, mv in o["moments"].items()),
            OrderedDict((n, load_tensor(d / mv[1])) for n, mv in o["moments"].items()),
            int(o["step"]), o["beta1"], o["beta2"], o["eps"],
        )
    return Weights(cfg, params, opt)
