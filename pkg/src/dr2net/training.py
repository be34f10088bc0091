"""Two-stage SGD training.

Stage 1 fits the linear mapping alone with a step learning-rate schedule.
Stage 2 trains linear mapping and residual blocks end to end at a small
fixed learning rate, logging both the linear-only and the full validation
loss so the two curves can be compared.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .model import Dr2Model, init_model, loss_and_grads, save_model
from .sensing import Dataset, operator_for, rng_for

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    max_iters: int = 1_000_000
    base_lr: float = 0.001
    step_size: int = 200_000
    gamma: float = 0.5


@dataclass
class Stage2Config:
    """Fixed-rate end-to-end stage.

    The rate ramps linearly from ``lr / warmup_iters`` to ``lr`` over the
    first ``warmup_iters`` iterations and then stays fixed. Freshly added
    blocks start with tiny conv weights ahead of batchnorm, so early steps
    change their features a lot; without the ramp two or more blocks
    diverge within a few dozen iterations at 1e-5.
    """
    max_iters: int = 100_000
    lr: float = 0.00001
    warmup_iters: int = 500


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.05
    eval_every: int = 1000
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = cls(stage1=Stage1Config(max_iters=20_000, step_size=4_000),
                   stage2=Stage2Config(max_iters=5_000), eval_every=250)
        return replace(base, **overrides)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise InvalidParameterError(f"unknown profile {name!r} (expected 'paper' or 'desk')")

    def validate(self) -> None:
        positive = {
            "stage1.max_iters": self.stage1.max_iters, "stage1.base_lr": self.stage1.base_lr,
            "stage1.step_size": self.stage1.step_size, "stage1.gamma": self.stage1.gamma,
            "stage2.max_iters": self.stage2.max_iters, "stage2.lr": self.stage2.lr,
            "batch_size": self.batch_size, "eval_every": self.eval_every,
        }
        for name, value in positive.items():
            if not value > 0:
                raise InvalidParameterError(f"{name} must be positive, got {value}")
        if not 0 <= self.val_fraction <= 0.5:
            raise InvalidParameterError(f"val_fraction must be in [0, 0.5], got {self.val_fraction}")
        if self.stage2.warmup_iters < 0:
            raise InvalidParameterError("stage2.warmup_iters must be >= 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise InvalidParameterError("momentum and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ logging

@dataclass
class LogRecord:
    iteration: int
    stage: int
    train_loss: float
    val_loss_fc: float
    val_loss_full: float
    lr: float
    seconds: float


class TrainLog:
    COLUMNS = ("iteration", "stage", "train_loss", "val_loss_fc", "val_loss_full", "lr", "seconds")

    def __init__(self, records=None):
        self.records: list[LogRecord] = list(records or [])

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("log iterations must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def concat(self, other: "TrainLog") -> "TrainLog":
        """Append ``other`` with its iterations shifted past this log's last one."""
        offset = self.records[-1].iteration if self.records else 0
        out = TrainLog(self.records)
        for r in other.records:
            shifted = replace(r, iteration=r.iteration + offset)
            if out.records and shifted.iteration <= out.records[-1].iteration:
                continue  # iteration 0 of the next stage repeats the last record
            out.append(shifted)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.iteration, r.stage] + [
                    "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)
                    for v in (r.train_loss, r.val_loss_fc, r.val_loss_full, r.lr, r.seconds)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        recs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (float(v) if v != "" else float("nan")) for k, v in row.items()}
                recs.append(LogRecord(int(vals["iteration"]), int(vals["stage"]),
                                      vals["train_loss"], vals["val_loss_fc"],
                                      vals["val_loss_full"], vals["lr"], vals["seconds"]))
        return cls(recs)


# ---------------------------------------------------------------- optimizer

def warmup_lr(iteration: int, lr: float, warmup_iters: int) -> float:
    """Linear ramp to ``lr`` over ``warmup_iters`` iterations, then ``lr``."""
    if iteration < 0:
        raise InvalidParameterError("iteration must be >= 0")
    if warmup_iters <= 0:
        return lr
    return lr * min(1.0, (iteration + 1) / warmup_iters)


def lr_schedule_step(iteration: int, base: float, step_size: int, gamma: float) -> float:
    """Step policy: base * gamma ** floor(iteration / step_size)."""
    if iteration < 0:
        raise InvalidParameterError("iteration must be >= 0")
    return base * gamma ** (iteration // step_size)


class SGD:
    """Momentum SGD with L2 weight decay:
    ``v = momentum*v + (grad + wd*param); param -= lr*v`` (in place)."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        for name, grad in grads.items():
            p = params[name]
            if p.shape != grad.shape:
                raise InvalidParameterError(f"gradient shape {grad.shape} != param {p.shape} for {name}")
            g = grad + self.weight_decay * p if self.weight_decay else grad
            v = self.velocity.get(name)
            v = g.astype(p.dtype, copy=True) if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Functional form of one SGD update; returns ``(new_params, new_velocity)``."""
    opt = SGD(momentum, weight_decay)
    if velocity:
        opt.velocity = {k: np.array(v, copy=True) for k, v in velocity.items()}
    new = {k: np.array(v, copy=True) for k, v in params.items()}
    opt.step(new, grads, lr)
    return new, opt.velocity


# ------------------------------------------------------------------ batching

def split_validation(n: int, fraction: float, seed: int):
    """Seeded (train_idx, val_idx) split; validation indices sorted."""
    perm = rng_for(seed ^ 0x5EED).permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class BatchSampler:
    """Endless mini-batches over ``indices``: a fresh seeded permutation per
    epoch, batches taken consecutively across epoch boundaries."""

    def __init__(self, indices, batch_size, seed):
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng_for(seed)
        self._order = np.empty(0, dtype=self.indices.dtype)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.indices)])
        batch, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return batch


def evaluate_loss(model: Dr2Model, Y, X, residual=True, batch_size=256) -> float:
    """Dataset-mean loss in inference mode (linear-only if ``residual=False``)."""
    if len(Y) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(Y), batch_size):
        sl = slice(start, start + batch_size)
        loss, _ = loss_and_grads(model, Y[sl], X[sl], mode="infer", residual=residual,
                                 need_grads=False)
        total += loss * len(Y[sl])
    return total / len(Y)


# ------------------------------------------------------------------ training

def _check_dataset(dataset: Dataset, model: Dr2Model | None):
    if len(dataset) == 0:
        raise InvalidParameterError("dataset is empty")
    if model is not None and model.m != dataset.m:
        raise InvalidParameterError(f"model m={model.m} but dataset m={dataset.m}")


def _run(model, dataset, config, seed, stage, max_iters, lr_at, residual):
    train_idx, val_idx = split_validation(len(dataset), config.val_fraction, config.seed)
    if len(train_idx) == 0:
        train_idx = val_idx
    Yv, Xv = dataset.measurements[val_idx], dataset.patches[val_idx]
    sampler = BatchSampler(train_idx, config.batch_size, seed * 1_000_003 + stage)
    opt = SGD(config.momentum, config.weight_decay)
    params = model.parameters() if residual else {
        k: v for k, v in model.parameters().items() if k.startswith("linear.")}
    tlog = TrainLog()
    last_good = model.copy()
    t0 = time.perf_counter()

    def record(it, train_loss, lr):
        val_fc = evaluate_loss(model, Yv, Xv, residual=False)
        val_full = evaluate_loss(model, Yv, Xv, residual=True) if residual else float("nan")
        tlog.append(LogRecord(it, stage, train_loss, val_fc, val_full, lr,
                              time.perf_counter() - t0))
        log.info("stage %d iter %d: train %.5f val_fc %.5f val_full %.5f lr %.2e",
                 stage, it, train_loss, val_fc, val_full, lr)

    if residual:
        _seed_bn_stats(model, dataset, train_idx[:config.batch_size])
    record(0, float("nan"), lr_at(0))
    running, count = 0.0, 0
    for it in range(max_iters):
        idx = sampler.next()
        lr = lr_at(it)
        loss, grads = loss_and_grads(model, dataset.measurements[idx], dataset.patches[idx],
                                     mode="train", residual=residual)
        if not math.isfinite(loss):
            _restore(model, last_good)
            raise DivergenceError(f"stage {stage}: non-finite loss at iteration {it}")
        try:
            opt.step(params, grads, lr)
        except DivergenceError:
            _restore(model, last_good)
            raise
        running += loss
        count += 1
        done = it + 1
        if done % config.eval_every == 0 or done == max_iters:
            record(done, running / count, lr)
            running, count = 0.0, 0
            last_good = model.copy()
        if (config.checkpoint_every and config.checkpoint_path
                and done % config.checkpoint_every == 0):
            save_model(model, config.checkpoint_path)
    return tlog


def _seed_bn_stats(model, dataset, idx):
    # running stats must exist before the first inference-mode validation pass
    for block in model.blocks:
        for bn in (block.bn1, block.bn2):
            if bn.stats.recorded:
                return
    loss_and_grads(model, dataset.measurements[idx], dataset.patches[idx], mode="train",
                   update_stats=True, need_grads=False)


def _restore(model, snapshot):
    for (k, v), (_, s) in zip(model.parameters().items(), snapshot.parameters().items()):
        v[...] = s
    for (k, v), (_, s) in zip(model.buffers().items(), snapshot.buffers().items()):
        v[...] = s


def train_stage1(dataset: Dataset, config: TrainConfig, seed: int | None = None,
                 model: Dr2Model | None = None, block_count: int = 0):
    """Fit the linear mapping with the step schedule. Returns ``(model, log)``.

    A fresh model (with ``block_count`` untrained blocks) is initialised
    unless one is passed in.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    if model is None:
        model = init_model(dataset.m, block_count, seed, operator_for(dataset))
    _check_dataset(dataset, model)
    s1 = config.stage1
    tlog = _run(model, dataset, config, seed, 1, s1.max_iters,
                lambda it: lr_schedule_step(it, s1.base_lr, s1.step_size, s1.gamma),
                residual=False)
    model.info["stage1_iters"] = s1.max_iters
    return model, tlog


def train_stage2(model: Dr2Model, dataset: Dataset, config: TrainConfig, seed: int | None = None):
    """End-to-end training of linear mapping and residual blocks at a fixed
    learning rate. The model is updated in place and returned with its log."""
    config.validate()
    seed = config.seed if seed is None else seed
    if model.block_count < 1:
        raise InvalidParameterError("stage 2 needs at least one residual block")
    _check_dataset(dataset, model)
    s2 = config.stage2
    tlog = _run(model, dataset, config, seed, 2, s2.max_iters,
                lambda it: warmup_lr(it, s2.lr, s2.warmup_iters), residual=True)
    model.info["stage2_iters"] = config.stage2.max_iters
    return model, tlog


def train(dataset: Dataset, config: TrainConfig, block_count: int = 4, stages="both",
          model: Dr2Model | None = None):
    """Run stage 1, stage 2 or both; returns ``(model, log)``.

    With ``block_count=0`` there is nothing for stage 2 to train, so "both"
    stops after stage 1.
    """
    tlog = TrainLog()
    if stages in ("1", "both"):
        model, log1 = train_stage1(dataset, config, model=model, block_count=block_count)
        tlog = log1
    if stages == "2" or (stages == "both" and block_count > 0):
        if model is None:
            raise InvalidParameterError("stage 2 alone needs a stage-1 model")
        if model.block_count != block_count:
            model = model.with_blocks(block_count, config.seed)
        model, log2 = train_stage2(model, dataset, config)
        tlog = tlog.concat(log2)
    return model, tlog
