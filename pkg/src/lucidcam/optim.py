"""SGD with decoupled weight decay, one-cycle schedule, LR finder, WD grid, two-phase training."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers as L
from .data import AugmentConfig, augment, stack_images
from .errors import ArgumentError, DataError, NumericError
from .model import ModelSpec, Parameters, Saved, backward, forward, predict_logits
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


def sgd_step(params: Parameters, grads: dict, lr: float, momentum: float, weight_decay: float,
             velocity: dict | None = None) -> dict:
    """In-place update of the trainable tensors; returns the velocity state.

    v <- momentum * v + g;  p <- p - lr * v - lr * weight_decay * p
    """
    if lr < 0:
        raise ArgumentError(f"lr must be >= 0, got {lr}")
    velocity = {} if velocity is None else velocity
    for name in params.trainable_names():
        if name not in grads:
            continue
        p, g = params.tensors[name], grads[name]
        if p.shape != g.shape:
            raise RuntimeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        velocity[name] = v
        p -= lr * v + (lr * weight_decay) * p
    return velocity


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    max_lr: float
    div_factor: float = 25.0
    final_div: float = 100.0
    pct_peak: float = 0.5
    mom_high: float = 0.95
    mom_low: float = 0.85

    @property
    def start_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / (self.div_factor * self.final_div)

    @property
    def peak_step(self) -> int:
        return int(math.floor(self.pct_peak * self.total_steps + 0.5))


def _cos_ramp(start: float, end: float, frac: float) -> float:
    if frac >= 1.0:
        return end
    return start + (end - start) * (1.0 - math.cos(math.pi * frac)) / 2.0


def one_cycle(step: int, schedule: OneCycleSchedule) -> tuple[float, float]:
    """(lr, momentum) at ``step`` with cosine warm-up to the peak and cosine annealing after."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ArgumentError(f"step {step} outside [0, {s.total_steps}]")
    peak = s.peak_step
    if step <= peak:
        frac = step / peak if peak else 1.0
        return _cos_ramp(s.start_lr, s.max_lr, frac), _cos_ramp(s.mom_high, s.mom_low, frac)
    frac = (step - peak) / (s.total_steps - peak)
    return _cos_ramp(s.max_lr, s.final_lr, frac), _cos_ramp(s.mom_low, s.mom_high, frac)


class LossSmoother:
    """Exponential moving average with bias correction."""

    def __init__(self, beta: float = 0.98):
        self.beta = beta
        self.avg = 0.0
        self.n = 0

    def update(self, loss: float) -> float:
        self.n += 1
        self.avg = self.beta * self.avg + (1.0 - self.beta) * loss
        return self.avg / (1.0 - self.beta ** self.n)


def lr_at(i: int, iters: int, lr_min: float, lr_max: float) -> float:
    if i == 0:
        return lr_min
    if i == iters - 1:
        return lr_max
    return lr_min * (lr_max / lr_min) ** (i / (iters - 1))


@dataclass
class LRCurve:
    lrs: list
    losses: list
    stopped_early: bool
    suggested_lr: float | None

    @property
    def divergence_lr(self) -> float:
        return self.lrs[-1]

    @property
    def min_loss(self) -> float:
        return min(self.losses)

    @property
    def min_loss_lr(self) -> float:
        """LR at the bottom of the smoothed curve (first occurrence)."""
        return self.lrs[int(np.argmin(self.losses))]


def suggest_lr(lrs, losses) -> float | None:
    """LR at the steepest descent of the smoothed loss against log(lr)."""
    if len(lrs) < 3:
        return None
    slope = np.gradient(np.asarray(losses, dtype=np.float64), np.log(np.asarray(lrs, dtype=np.float64)))
    return float(lrs[int(np.argmin(slope))])


def sweep_losses(loss_at, iters: int = 200, lr_min: float = 1e-6, lr_max: float = 1.0,
                 beta: float = 0.98, stop_factor: float = 4.0) -> LRCurve:
    """Drive ``loss_at(i, lr) -> raw loss`` over the geometric LR sweep."""
    if iters < 2:
        raise ArgumentError(f"iters must be >= 2, got {iters}")
    if not lr_max > lr_min > 0:
        raise ArgumentError(f"need lr_max > lr_min > 0, got {lr_min}, {lr_max}")
    smoother = LossSmoother(beta)
    best = math.inf
    lrs, losses = [], []
    stopped = False
    for i in range(iters):
        lr = lr_at(i, iters, lr_min, lr_max)
        raw = loss_at(i, lr)
        sm = smoother.update(raw) if math.isfinite(raw) else math.inf
        lrs.append(lr)
        losses.append(sm)
        if i > 0 and sm > stop_factor * best:
            stopped = True
            break
        best = min(best, sm)
    if stopped and len(losses) > 1:
        cut_lrs, cut_losses = lrs[:-1], losses[:-1]
    else:
        cut_lrs, cut_losses = lrs, losses
    return LRCurve(lrs, losses, stopped, suggest_lr(cut_lrs, cut_losses))


def _batches(n: int, batch_size: int, rng: SplitMix64):
    order = rng.shuffle(list(range(n)))
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _loss_and_grads(spec, params, x, y):
    logits, caches, _ = forward(spec, params, x)
    loss, dlogits = L.softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    grads, _ = backward(Saved(spec, params, caches, {}, logits), dlogits.astype(np.float32))
    return loss, grads


def lr_find(spec: ModelSpec, params: Parameters, data, lr_min=1e-6, lr_max=1.0, iters=200, wd=1e-4,
            batch_size=32, momentum=0.9, seed=0) -> LRCurve:
    """Exponential LR sweep on a copy of ``params``; the caller's tensors are untouched."""
    if not data:
        raise DataError("lr_find needs a non-empty dataset")
    work = params.copy()
    images = stack_images(data)
    labels = np.array([s.label for s in data])
    rng = SplitMix64(derive_seed(seed, 0x1F))
    state = {"batches": iter(()), "velocity": {}}

    def loss_at(i, lr):
        idx = next(state["batches"], None)
        if idx is None:
            state["batches"] = _batches(len(data), batch_size, rng)
            idx = next(state["batches"])
        try:
            loss, grads = _loss_and_grads(spec, work, images[idx], labels[idx])
        except NumericError:
            return math.inf
        sgd_step(work, grads, lr, momentum, wd, state["velocity"])
        return loss

    with np.errstate(over="ignore", invalid="ignore"):
        return sweep_losses(loss_at, iters, lr_min, lr_max)


def select_weight_decay(curves: dict, lr_band: float = 0.8, loss_band: float = 0.10) -> float:
    """Largest wd whose divergence LR and minimum loss are both near the grid's best."""
    if not curves:
        raise ArgumentError("empty weight-decay grid")
    best_div = max(c.divergence_lr for c in curves.values())
    best_min = min(c.min_loss for c in curves.values())
    ok = [wd for wd, c in curves.items()
          if c.divergence_lr >= lr_band * best_div and c.min_loss - best_min <= loss_band * abs(best_min)]
    return max(ok)


def wd_grid_search(spec, init_params, data, wds=(1e-2, 1e-4, 1e-6), finder=None, **finder_kw):
    """Runs lr_find once per wd from identical initial parameters.

    Returns ``(selected_wd, {wd: LRCurve})``. ``finder`` replaces lr_find,
    which lets crafted curves be injected.
    """
    wds = list(wds)
    if not wds or any(w < 0 for w in wds):
        raise ArgumentError(f"weight decays must be a non-empty list of values >= 0, got {wds}")
    finder = finder or lr_find
    curves = {wd: finder(spec, init_params, data, wd=wd, **finder_kw) for wd in wds}
    return select_weight_decay(curves), curves


def set_trainable(params: Parameters, selector: str, spec: ModelSpec) -> Parameters:
    if selector == "all":
        params.trainable = {n: True for n in params}
    elif selector == "head_only":
        head = set(spec.head_param_names())
        params.trainable = {n: n in head for n in params}
    else:
        raise ArgumentError(f"unknown selector {selector!r}")
    return params


def params_hash(params: Parameters, names=None) -> str:
    h = hashlib.sha256()
    for name in (names if names is not None else list(params)):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


@dataclass
class TrainConfig:
    epochs_phase1: int = 1
    epochs_phase2: int = 3
    max_lr: float = 2e-2
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 42
    capture_layer: int | None = None
    augment: bool = True
    pct_peak: float = 0.5

    def validate(self):
        if not self.max_lr > 0:
            raise ArgumentError(f"max_lr must be > 0, got {self.max_lr}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0 or self.epochs_phase1 + self.epochs_phase2 == 0:
            raise ArgumentError("phase epoch counts must be >= 0 and not both zero")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class StepRecord:
    step: int
    phase: int
    lr: float
    momentum: float
    train_loss: float


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> float | None:
        return self.epochs[-1].val_acc if self.epochs else None

    def train_val_gap(self) -> list[tuple[int, float, float]]:
        """(epoch, mean train loss over that epoch's steps, val loss) per epoch.

        Every epoch runs the same number of steps, so steps split evenly.
        """
        if not self.epochs:
            return []
        per = len(self.steps) // len(self.epochs)
        out = []
        for i, e in enumerate(self.epochs):
            chunk = self.steps[i * per:(i + 1) * per]
            out.append((e.epoch, float(np.mean([s.train_loss for s in chunk])), e.val_loss))
        return out

    def to_dict(self) -> dict:
        return {"steps": [asdict(s) for s in self.steps], "epochs": [asdict(e) for e in self.epochs],
                "final_accuracy": self.final_accuracy}


def evaluate(spec, params, data, batch_size=64, workers=1) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over ``data``."""
    if not data:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict_logits(spec, params, stack_images(data), batch_size, workers)
    labels = np.array([s.label for s in data])
    losses = L.per_sample_cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return float(np.mean(losses)), acc


def train(spec: ModelSpec, params: Parameters, data_train, data_valid, config: TrainConfig,
          on_record=None, aug: AugmentConfig | None = None):
    """Two-phase one-cycle training: head only, then everything.

    Each phase gets its own one-cycle schedule over its steps. ``on_record``
    is called with every StepRecord/EpochRecord as it is produced.
    Returns ``(params, TrainReport)``; ``params`` is updated in place.
    """
    config.validate()
    if not data_train or not data_valid:
        raise DataError("training and validation splits must be non-empty")
    aug = aug or AugmentConfig()
    labels = np.array([s.label for s in data_train])
    steps_per_epoch = math.ceil(len(data_train) / config.batch_size)
    rng = SplitMix64(derive_seed(config.seed, 0x7A))
    report = TrainReport()
    emit = on_record or (lambda r: None)
    step = 0
    epoch = 0
    for phase, n_epochs, selector in ((1, config.epochs_phase1, "head_only"), (2, config.epochs_phase2, "all")):
        if n_epochs == 0:
            continue
        set_trainable(params, selector, spec)
        sched = OneCycleSchedule(n_epochs * steps_per_epoch, config.max_lr, pct_peak=config.pct_peak)
        velocity = {}
        local = 0
        for _ in range(n_epochs):
            for idx in _batches(len(data_train), config.batch_size, rng):
                if config.augment:
                    batch = [augment(data_train[i], rng, aug) for i in idx]
                    x = stack_images(batch)
                else:
                    x = stack_images([data_train[i] for i in idx])
                lr, mom = one_cycle(local, sched)
                loss, grads = _loss_and_grads(spec, params, x, labels[idx])
                sgd_step(params, grads, lr, mom, config.weight_decay, velocity)
                rec = StepRecord(step, phase, lr, mom, loss)
                report.steps.append(rec)
                emit(rec)
                step += 1
                local += 1
            val_loss, val_acc = evaluate(spec, params, data_valid)
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            rec = EpochRecord(epoch, val_loss, val_acc)
            report.epochs.append(rec)
            emit(rec)
            log.info("phase %d epoch %d: val_loss %.4f val_acc %.4f", phase, epoch, val_loss, val_acc)
            epoch += 1
    set_trainable(params, "all", spec)
    return params, report
