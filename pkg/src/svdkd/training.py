"""Losses, adaptive transfer-gradient clipping and the training mechanisms.

Two student mechanisms are provided:

* ``two_stage``: stage 1 minimises the transfer loss only (initialisation),
  stage 2 minimises the classification loss only, each for ``epochs``.
* ``one_stage``: both tasks at once; the transfer gradient is rescaled by a
  sigmoid gate driven by the ratio of the two gradient norms and the epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autograd import ops
from .autograd.optim import SGD
from .autograd.tensor import Tensor, grad, no_grad
from .data import Dataset, augment, AugmentConfig, iterate_batches
from .distill import DFV, distill_knowledge, teacher_reference

log = logging.getLogger(__name__)

CLIP_MODES = ("literal", "inverted", "off")
MECHANISMS = ("two_stage", "one_stage")

METRIC_COLUMNS = (
    "epoch", "stage", "lr", "main_loss", "transfer_loss", "clip_factor_mean",
    "train_acc", "test_acc", "train_transfer_loss", "n_unlabeled",
)


@dataclass
class TrainConfig:
    mechanism: str = "one_stage"
    k: int = 1
    beta: float = 8.0
    lr: float = 1e-2
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 200
    lr_drop_every: int = 50
    lr_drop_factor: float = 0.1
    label_fraction: float = 1.0
    clip_mode: str = "literal"
    transfer_weight: float = 1.0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.validate()

    def validate(self) -> None:
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_drop_every < 1:
            raise ValueError("batch_size, lr_drop_every must be >= 1 and epochs >= 0")
        if self.transfer_weight < 0:
            raise ValueError("transfer_weight must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_drop_factor ** (epoch // self.lr_drop_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    epoch: int = 0
    optimizer: Optional[SGD] = None
    history: List[dict] = field(default_factory=list)


@dataclass
class ClipInfo:
    tau: float
    scale: float
    main_norm: float
    trans_norm: float


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------- losses

def _values(d) -> Tensor:
    if isinstance(d, DFV):
        return d.values
    return d if isinstance(d, Tensor) else Tensor(d)


def transfer_loss(teacher_dfvs: Sequence, student_dfvs: Sequence, batch_size: int = 1) -> Tensor:
    """``sum_g ||DFV_T^(g) - DFV_S^(g)||^2 / 2``, divided by ``batch_size``.

    Teacher DFVs are treated as constants.
    """
    if len(teacher_dfvs) != len(student_dfvs):
        raise ValueError(f"transfer_loss: {len(teacher_dfvs)} teacher vs {len(student_dfvs)} student groups")
    total = None
    for g, (t, s) in enumerate(zip(teacher_dfvs, student_dfvs), start=1):
        tv, sv = _values(t), _values(s)
        if tv.shape != sv.shape:
            raise ValueError(f"transfer_loss: shape mismatch at group g={g}: {tv.shape} vs {sv.shape}")
        diff = ops.sub(sv, Tensor(tv.data))
        term = ops.scale(ops.sum(ops.mul(diff, diff)), 0.5 / batch_size)
        total = term if total is None else ops.add(total, term)
    return total if total is not None else Tensor(0.0)


def total_loss(main: Tensor, transfer: Tensor) -> Tensor:
    """Unit-weighted multi-task objective; aborts on non-finite inputs."""
    for name, v in (("main", main), ("transfer", transfer)):
        if not np.all(np.isfinite(v.data)):
            raise NumericalError(f"total_loss: non-finite {name} loss {v.data!r}")
    return ops.add(main, transfer)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_transfer_gradient(grad_main: Sequence[np.ndarray], grad_trans: Sequence[np.ndarray],
                           p: int, mode: str = "literal"):
    """Adaptive sigmoid gate on the transfer gradient.

    ``tau = ||grad_main|| / ||grad_trans||`` over all parameters. In
    ``literal`` mode the transfer gradient is multiplied by
    ``1 / (1 + exp(p - tau))`` when ``||grad_trans|| < ||grad_main||``;
    ``inverted`` gates the opposite case; ``off`` never gates. Ungated
    gradients are returned unchanged (same arrays).
    """
    if mode not in CLIP_MODES:
        raise ValueError(f"clip mode must be one of {CLIP_MODES}, got {mode!r}")
    if len(grad_main) != len(grad_trans):
        raise ValueError("clip_transfer_gradient: gradient sets cover different parameters")
    main_norm, trans_norm = global_norm(grad_main), global_norm(grad_trans)
    tau = math.inf if trans_norm == 0 else main_norm / trans_norm
    gate = False
    if mode == "literal":
        gate = trans_norm < main_norm
    elif mode == "inverted":
        gate = trans_norm >= main_norm
    if trans_norm == 0 or not gate:
        return list(grad_trans), ClipInfo(tau, 1.0, main_norm, trans_norm)
    scale = gate_factor(tau, p)
    return [g * np.float32(scale) for g in grad_trans], ClipInfo(tau, scale, main_norm, trans_norm)


def gate_factor(tau: float, p: int) -> float:
    """``1 / (1 + exp(-tau + p))``, kept strictly positive."""
    z = p - tau
    if z > 700:
        return float(np.finfo(float).tiny)
    return max(1.0 / (1.0 + math.exp(z)), float(np.finfo(float).tiny))


# ---------------------------------------------------------------- loops

def _prepare(model, images: np.ndarray) -> np.ndarray:
    return model.normalize(images)


def _accuracy(logits: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple:
    hit = logits.argmax(axis=1) == labels
    if mask is not None:
        hit = hit[mask]
    return int(hit.sum()), int(hit.size)


def evaluate(model, data: Dataset, batch_size: int = 256) -> dict:
    """Accuracy and mean cross-entropy of ``model`` on all of ``data``."""
    correct = total = 0
    loss_sum = 0.0
    with no_grad():
        for idx in iterate_batches(len(data), batch_size):
            x = _prepare(model, data.images[idx])
            logits, _ = model.forward(x, with_taps=False)
            loss = ops.softmax_cross_entropy(logits, data.labels[idx]).item()
            c, n = _accuracy(logits.data, data.labels[idx])
            correct += c
            total += n
            loss_sum += loss * n
    return {"acc": 100.0 * correct / max(total, 1), "loss": loss_sum / max(total, 1)}


class TeacherCache:
    """Teacher references for a fixed (non-augmented) split, computed once."""

    def __init__(self, teacher, data: Dataset, k: int, beta: float, batch_size: int = 256):
        self.batch_size = batch_size
        self.refs = []
        with no_grad():
            for idx in iterate_batches(len(data), batch_size):
                x = _prepare(teacher, data.images[idx])
                _, taps = teacher.forward(x)
                self.refs.append([teacher_reference(t, k, beta) for t in taps])


def evaluate_transfer(student, data: Dataset, cache: TeacherCache, k: int, beta: float) -> float:
    """Mean per-sample transfer loss of ``student`` against cached teacher knowledge."""
    total = 0.0
    with no_grad():
        for refs, idx in zip(cache.refs, iterate_batches(len(data), cache.batch_size)):
            x = _prepare(student, data.images[idx])
            _, taps = student.forward(x)
            s = [distill_knowledge(t, k, beta, "student", r) for t, r in zip(taps, refs)]
            total += transfer_loss([r.dfv for r in refs], s, batch_size=1).item()
    return total / max(len(data), 1)


def check_tap_compatibility(teacher, student, sample: np.ndarray, k: int) -> None:
    """Abort before training when the taps cannot be paired or decomposed."""
    with no_grad():
        x = _prepare(teacher, sample[:1])
        _, ttaps = teacher.forward(x)
        _, staps = student.forward(_prepare(student, sample[:1]))
    if len(ttaps) != len(staps):
        raise ValueError(f"tap count mismatch: teacher G={len(ttaps)}, student G={len(staps)}")
    for t, s in zip(ttaps, staps):
        for where, a, b in (("FFM", t.ffm, s.ffm), ("BFM", t.bfm, s.bfm)):
            if a.shape[-1] != b.shape[-1]:
                raise ValueError(f"tap g={t.group} {where} depth mismatch: teacher {a.shape[1:]}, "
                                 f"student {b.shape[1:]}")
        for where, fmap, rank in (("teacher FFM", t.ffm, k), ("teacher BFM", t.bfm, k),
                                  ("student FFM", s.ffm, k + 1), ("student BFM", s.bfm, k + 1)):
            h, w, d = fmap.shape[-3:]
            if rank > min(h * w, d):
                raise ValueError(f"tap g={t.group} {where} {h}x{w}x{d} cannot hold rank {rank}")


@dataclass
class StepResult:
    main: float
    transfer: float
    clip: float
    correct: int
    counted: int


class _Trainer:
    """Shared epoch machinery for teacher, scratch and distillation runs."""

    def __init__(self, model, cfg: TrainConfig, train: Dataset, test: Dataset,
                 teacher=None, on_epoch: Optional[Callable[[dict], None]] = None):
        self.model = model
        self.cfg = cfg
        self.train = train
        self.test = test
        self.teacher = teacher
        self.on_epoch = on_epoch
        self.params = list(model.parameters().values())
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.test_cache = (TeacherCache(teacher, test, cfg.k, cfg.beta) if teacher is not None else None)
        self.history: List[dict] = []

    def _batch(self, idx: np.ndarray):
        images = self.train.images[idx]
        if self.cfg.augment.enabled:
            images = augment(images, self.rng, self.cfg.augment)
        return _prepare(self.model, images), self.train.labels[idx], self.train.labeled_mask[idx]

    def _forward(self, x, labels, mask, need_transfer: bool):
        cfg = self.cfg
        logits, staps = self.model.forward(x, with_taps=need_transfer)
        main = ops.softmax_cross_entropy(logits, labels, mask=mask)
        trans = None
        if need_transfer:
            with no_grad():
                _, ttaps = self.teacher.forward(x)
                refs = [teacher_reference(t, cfg.k, cfg.beta) for t in ttaps]
            sdfv = [distill_knowledge(t, cfg.k, cfg.beta, "student", r) for t, r in zip(staps, refs)]
            trans = transfer_loss([r.dfv for r in refs], sdfv, batch_size=x.shape[0])
            trans = ops.scale(trans, cfg.transfer_weight)
        return logits, main, trans

    def run_stage(self, stage: str, objective: str, state: TrainState) -> None:
        """Train for ``cfg.epochs`` epochs on ``objective`` in {main, transfer, both}."""
        cfg = self.cfg
        opt = SGD(self.params, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov,
                  weight_decay=cfg.weight_decay)
        state.optimizer = opt
        uses_teacher = self.teacher is not None and cfg.transfer_weight > 0
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            opt.lr = cfg.lr_at(epoch)
            steps: List[StepResult] = []
            for idx in iterate_batches(len(self.train), cfg.batch_size, self.rng):
                x, labels, mask = self._batch(idx)
                steps.append(self._step(objective, x, labels, mask, epoch, opt, uses_teacher))
            self._record(stage, epoch, opt.lr, steps, state)

    def _step(self, objective, x, labels, mask, epoch, opt, uses_teacher) -> StepResult:
        need_transfer = uses_teacher and objective in ("transfer", "both")
        logits, main, trans = self._forward(x, labels, mask, need_transfer)
        tval = trans.item() if trans is not None else math.nan
        total_loss(main, trans if trans is not None else Tensor(0.0))
        clip = 1.0
        if objective == "main" or not need_transfer:
            if objective == "transfer":
                grads = [np.zeros_like(p.data) for p in self.params]
            else:
                grads = grad(main, self.params)
        elif objective == "transfer":
            grads = grad(trans, self.params)
        else:
            g_main = grad(main, self.params)
            g_trans = grad(trans, self.params)
            clipped, info = clip_transfer_gradient(g_main, g_trans, epoch, self.cfg.clip_mode)
            clip = info.scale
            grads = [a + b for a, b in zip(g_main, clipped)]
        opt.step(grads)
        c, n = _accuracy(logits.data, labels, mask)
        return StepResult(main.item(), tval, clip, c, n)

    def _record(self, stage, epoch, lr, steps: List[StepResult], state: TrainState) -> None:
        test = evaluate(self.model, self.test)
        tl = (evaluate_transfer(self.model, self.test, self.test_cache, self.cfg.k, self.cfg.beta)
              if self.test_cache is not None else math.nan)
        counted = sum(s.counted for s in steps)
        row = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "main_loss": float(np.mean([s.main for s in steps])) if steps else math.nan,
            "transfer_loss": tl,
            "clip_factor_mean": float(np.mean([s.clip for s in steps])) if steps else 1.0,
            "train_acc": 100.0 * sum(s.correct for s in steps) / counted if counted else math.nan,
            "test_acc": test["acc"],
            "train_transfer_loss": float(np.mean([s.transfer for s in steps])) if steps else math.nan,
            "n_unlabeled": int((~self.train.labeled_mask).sum()),
        }
        self.history.append(row)
        state.history.append(row)
        log.info("%s epoch %d lr %.4g main %.4f transfer %.5g clip %.3f train %.2f test %.2f",
                 stage, epoch, lr, row["main_loss"], tl, row["clip_factor_mean"],
                 row["train_acc"], row["test_acc"])
        if self.on_epoch is not None:
            self.on_epoch(row)


@dataclass
class RunResult:
    model: object
    history: List[dict]
    final_test_acc: float
    final_transfer_loss: float


def _finish(trainer: _Trainer) -> RunResult:
    last = trainer.history[-1] if trainer.history else {}
    return RunResult(trainer.model, trainer.history, last.get("test_acc", math.nan),
                     last.get("transfer_loss", math.nan))


def train_teacher(model, cfg: TrainConfig, train: Dataset, test: Dataset, on_epoch=None) -> RunResult:
    trainer = _Trainer(model, cfg, train, test, teacher=None, on_epoch=on_epoch)
    trainer.run_stage("teacher", "main", TrainState())
    return _finish(trainer)


def run_two_stage(teacher, student, cfg: TrainConfig, train: Dataset, test: Dataset,
                  on_epoch=None) -> RunResult:
    """Transfer-only initialisation followed by main-task-only training."""
    check_tap_compatibility(teacher, student, train.images, cfg.k)
    trainer = _Trainer(student, cfg, train, test, teacher=teacher, on_epoch=on_epoch)
    state = TrainState()
    trainer.run_stage("stage1", "transfer", state)
    trainer.run_stage("stage2", "main", state)
    return _finish(trainer)


def run_one_stage(teacher, student, cfg: TrainConfig, train: Dataset, test: Dataset,
                  on_epoch=None) -> RunResult:
    """Main and transfer tasks trained together with the adaptive gate.

    With ``transfer_weight == 0`` this is plain supervised training of the
    student (the scratch baseline); the teacher is then only used to report
    the transfer loss.
    """
    if teacher is not None:
        check_tap_compatibility(teacher, student, train.images, cfg.k)
    trainer = _Trainer(student, cfg, train, test, teacher=teacher, on_epoch=on_epoch)
    trainer.run_stage("one_stage", "both", TrainState())
    return _finish(trainer)


def run_mechanism(teacher, student, cfg: TrainConfig, train: Dataset, test: Dataset,
                  on_epoch=None) -> RunResult:
    if cfg.mechanism == "two_stage":
        return run_two_stage(teacher, student, cfg, train, test, on_epoch)
    return run_one_stage(teacher, student, cfg, train, test, on_epoch)
