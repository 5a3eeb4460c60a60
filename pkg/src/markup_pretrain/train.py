"""Optimizer, learning-rate schedule and training loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import MarkupModel, collate, collate_pretrain
from .objectives import PretrainInstance

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, instance_ids: Sequence[str]):
        super().__init__(f"non-finite loss at step {step}; instances {list(instance_ids)}")
        self.step = step
        self.instance_ids = list(instance_ids)


@dataclass
class OptimConfig:
    lr_peak: float = 5e-5
    eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    warmup_ratio: float = 0.06
    total_steps: int = 300_000
    batch_size: int = 256
    clip_norm: float | None = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")

    @property
    def warmup_steps(self) -> int:
        # at least one step so the schedule starts from 0
        return max(1, int(round(self.warmup_ratio * self.total_steps)))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    warm = cfg.warmup_steps
    total = cfg.total_steps
    if step < warm:
        return cfg.lr_peak * step / warm
    if total <= warm:
        return cfg.lr_peak
    return cfg.lr_peak * max(0.0, (total - step) / (total - warm))


def decays(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return not (name.endswith(".bias") or name.endswith(".gain"))


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimState,
    cfg: OptimConfig,
    step: int,
    lr: float | None = None,
) -> Mapping[str, np.ndarray]:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Parameters whose gradient is ``None`` are left untouched.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name):
            p -= lr * cfg.weight_decay * p
        p -= lr * update
    state.step = step
    return params


def clip_grad_norm(grads: Mapping[str, np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g *= factor
    return total


# ---------------------------------------------------------------- loops


@dataclass
class TrainConfig:
    optim: OptimConfig = field(default_factory=OptimConfig)
    steps: int | None = None  # defaults to optim.total_steps
    seed: int = 0
    log_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    freeze_encoder: bool = False

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.optim.total_steps


class BatchSampler:
    """Seeded per-epoch permutations; the last partial batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return self.n // self.bs

    def next(self) -> np.ndarray:
        if self._pos + self.bs > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.bs]
        self._pos += self.bs
        return idx


HEAD_PREFIXES = ("mlm.", "nrp.", "tpm.", "qa.", "tokcls.")


def _loop(
    model: MarkupModel,
    n_items: int,
    step_fn: Callable[[np.ndarray, np.random.Generator], tuple[T.Tensor, dict]],
    cfg: TrainConfig,
    ids: Sequence[str] | None = None,
) -> list[dict]:
    sampler = BatchSampler(n_items, cfg.optim.batch_size, np.random.default_rng([cfg.seed, 1]))
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    total = cfg.total_steps
    sched = OptimConfig(**{**asdict(cfg.optim), "total_steps": total})
    state = OptimState()
    history: list[dict] = []
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for step in range(1, total + 1):
            idx = sampler.next()
            model.params.zero_grad()
            loss, record = step_fn(idx, dropout_rng)
            if not np.isfinite(loss.data):
                bad = [ids[i] for i in idx] if ids is not None else [str(i) for i in idx]
                raise NonFiniteLoss(step, bad)
            if loss._backward is not None:
                loss.backward()
            names = list(model.params)
            if cfg.freeze_encoder:
                names = [n for n in names if n.startswith(HEAD_PREFIXES)]
            params = {n: model.params[n].data for n in names}
            grads = {n: model.params[n].grad for n in names}
            if sched.clip_norm:
                clip_grad_norm(grads, sched.clip_norm)
            lr = lr_at(step, sched)
            adamw_step(params, grads, state, sched, step, lr=lr)
            entry = {"step": step, "lr": lr, **record}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if cfg.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                model.save(Path(cfg.checkpoint_dir) / f"step-{step}")
    finally:
        if log_fh:
            log_fh.close()
    if cfg.checkpoint_dir:
        model.save(cfg.checkpoint_dir)
    return history


def train(dataset: Sequence[PretrainInstance], model: MarkupModel, cfg: TrainConfig) -> list[dict]:
    """Pre-train on fixed instances; returns the per-step metrics log.

    Objective switches live on ``model.config`` (mmlm / nrp / tpm).
    """
    dataset = list(dataset)

    def step_fn(idx, rng):
        batch = collate_pretrain([dataset[i] for i in idx])
        loss, parts = model.pretrain_forward(batch, rng=rng)
        rec = {
            "loss_total": parts["mmlm"] + parts["nrp"] + parts["tpm"],
            "loss_mmlm": parts["mmlm"],
            "loss_nrp": parts["nrp"],
            "loss_tpm": parts["tpm"],
        }
        return loss, rec

    return _loop(model, len(dataset), step_fn, cfg, [d.page_id for d in dataset])


def pretrain_accuracy(model: MarkupModel, dataset: Sequence[PretrainInstance], batch_size: int = 16) -> dict[str, float]:
    """Eval-mode accuracies of the three objectives over ``dataset``."""
    hits = {"mmlm": [0, 0], "nrp": [0, 0], "tpm": [0, 0]}
    for s in range(0, len(dataset), batch_size):
        batch = collate_pretrain(dataset[s : s + batch_size])
        pred = model.pretrain_predictions(batch)
        for k in hits:
            gold = pred[f"{k}_gold"]
            keep = gold != -100
            hits[k][0] += int((pred[f"{k}_pred"][keep] == gold[keep]).sum())
            hits[k][1] += int(keep.sum())
    return {k: (h / n if n else float("nan")) for k, (h, n) in hits.items()}


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int
    lr: float
    warmup_ratio: float = 0.1
    batch_size: int = 64
    max_seq_len: int = 384
    seed: int = 0
    freeze_encoder: bool = False
    log_path: str | None = None
    weight_decay: float = 0.01

    @classmethod
    def qa_defaults(cls, **kw) -> "FinetuneConfig":
        return cls(**{"epochs": 5, "lr": 1e-5, **kw})

    @classmethod
    def tokcls_defaults(cls, **kw) -> "FinetuneConfig":
        return cls(**{"epochs": 10, "lr": 2e-5, **kw})

    def train_config(self, n_items: int) -> TrainConfig:
        bs = min(self.batch_size, n_items)
        steps = max(1, self.epochs * (n_items // bs))
        optim = OptimConfig(
            lr_peak=self.lr,
            warmup_ratio=self.warmup_ratio,
            total_steps=steps,
            batch_size=bs,
            weight_decay=self.weight_decay,
        )
        return TrainConfig(optim=optim, steps=steps, seed=self.seed, log_path=self.log_path,
                           freeze_encoder=self.freeze_encoder)


@dataclass
class QAFeature:
    example: object  # EncodedExample
    start: int
    end: int
    record_id: str = ""


def finetune_qa(features: Sequence[QAFeature], model: MarkupModel, cfg: FinetuneConfig) -> list[dict]:
    if "qa.weight" not in model.params:
        model.add_qa_head(seed=cfg.seed)
    features = list(features)

    def step_fn(idx, rng):
        feats = [features[i] for i in idx]
        batch = collate([f.example for f in feats])
        starts = np.array([f.start for f in feats])
        ends = np.array([f.end for f in feats])
        loss = model.qa_loss(batch, starts, ends, rng=rng)
        return loss, {"loss_total": float(loss.data)}

    return _loop(model, len(features), step_fn, cfg.train_config(len(features)), [f.record_id for f in features])


@dataclass
class TokclsFeature:
    example: object  # EncodedExample
    labels: np.ndarray  # [S], -100 where ignored
    record_id: str = ""


def finetune_tokcls(
    features: Sequence[TokclsFeature], model: MarkupModel, cfg: FinetuneConfig, n_attrs: int
) -> list[dict]:
    if "tokcls.weight" not in model.params:
        model.add_tokcls_head(n_attrs, seed=cfg.seed)
    elif model.config.n_attrs != n_attrs:
        raise ValueError(f"head has {model.config.n_attrs} attributes, data has {n_attrs}")
    features = list(features)

    def step_fn(idx, rng):
        feats = [features[i] for i in idx]
        batch = collate([f.example for f in feats])
        logits = model.tokcls_logits(batch, rng=rng)
        B, S, C = logits.shape
        loss, _ = T.softmax_cross_entropy(T.reshape(logits, (B * S, C)), np.concatenate([f.labels for f in feats]))
        return loss, {"loss_total": float(loss.data)}

    return _loop(model, len(features), step_fn, cfg.train_config(len(features)), [f.record_id for f in features])
