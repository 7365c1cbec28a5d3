"""Second-stage training: the student learns from labels, teacher features and profile alignment."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .distill import DistillConfig, TeacherFeatureStore, align_loss, combined_loss, kd_loss
from .ehr import DatasetSplit, Sample
from .metrics import mean_prauc
from .model import StudentConfig, StudentModel, bce_loss
from .ndgrad import NonFiniteError, Tensor
from .optim import Adam
from .teacher import fit_teacher_head, teacher_predict

logger = logging.getLogger(__name__)

ABLATIONS = ("no-kd", "output-kd", "no-align", "split-visit-encoder")
_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 4
    max_epochs: int = 30
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    ablation: frozenset = frozenset()
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)
        self.betas = tuple(self.betas)
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}; choose from {ABLATIONS}")
        if {"no-kd", "output-kd"} <= self.ablation:
            raise ValueError("no-kd and output-kd are mutually exclusive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (alignment needs pairs)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def uses_teacher(self) -> bool:
        return "no-kd" not in self.ablation and self.distill.alpha > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)       # per epoch: {bce, kd, align, total}
    val_prauc: list = field(default_factory=list)
    initial_val_prauc: float = float("nan")
    best_epoch: int = -1
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"losses": self.losses, "val_prauc": self.val_prauc,
             "initial_val_prauc": self.initial_val_prauc, "best_epoch": self.best_epoch}
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


def output_kd_loss(student_probs, teacher_probs) -> Tensor:
    """Mean Bernoulli KL(teacher || student) over medications and batch."""
    s = nd.clamp(nd.as_tensor(student_probs), _CLAMP, 1.0 - _CLAMP)
    t = np.clip(np.asarray(teacher_probs, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    if t.shape != s.shape:
        raise nd.ShapeError(f"output_kd_loss: student {s.shape} vs teacher {t.shape}")
    one = np.ones_like(t)
    const = (t * np.log(t) + (1 - t) * np.log(1 - t)).sum()
    cross = nd.add(nd.dot(nd.log(s), t), nd.dot(nd.log(nd.sub(one, s)), 1 - t))
    return nd.scale(nd.add(nd.scale(cross, -1.0), np.array(const)), 1.0 / t.size)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one is dropped."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def train_student(split: DatasetSplit, store: Optional[TeacherFeatureStore],
                  student_config: StudentConfig, config: TrainConfig,
                  model: Optional[StudentModel] = None) -> tuple[StudentModel, TrainReport]:
    """Optimise the student; returns the model restored to its best validation epoch."""
    t0 = time.perf_counter()
    if "split-visit-encoder" in config.ablation and student_config.shared_visit_encoder:
        raise ValueError("split-visit-encoder ablation requires shared_visit_encoder=False")
    train = list(split.train)
    if len(train) < 2:
        raise TrainingError("need at least two training samples")
    kd_mode = None
    if "no-kd" not in config.ablation and config.distill.alpha > 0:
        kd_mode = "output" if "output-kd" in config.ablation else "feature"
        if store is None:
            raise TrainingError("knowledge distillation enabled but no teacher features given")
        missing = [s.sample_id for s in train if s.sample_id not in store]
        if missing:
            raise TrainingError(f"{len(missing)} training samples lack teacher features, "
                                f"e.g. {missing[0]!r}")
        if store.d_h != student_config.d_h:
            raise TrainingError(f"teacher d_h={store.d_h} but student expects {student_config.d_h}")
    use_align = "no-align" not in config.ablation and config.distill.beta > 0

    teacher_h = teacher_p = None
    if kd_mode is not None:
        teacher_h = store.matrix(s.sample_id for s in train)
    if kd_mode == "output":
        head = store.head
        if head is None:
            head, head_loss = fit_teacher_head(store, train, seed=config.seed)
            logger.info("fitted a teacher head for output-level KD (loss %.4f)", head_loss)
        teacher_p = teacher_predict(teacher_h, head)

    model = model or StudentModel(student_config)
    params = model.params.tensors()
    opt = Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)
    labels = np.stack([s.label for s in train])
    val = list(split.validation)
    report = TrainReport()
    report.initial_val_prauc = _val_prauc(model, val)
    best = (-np.inf, None)
    dc = config.distill

    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch])
        sums = {"bce": 0.0, "kd": 0.0, "align": 0.0, "total": 0.0}
        n_batches = 0
        for b, idx in enumerate(iter_batches(len(train), config.batch_size, rng)):
            batch = [train[i] for i in idx]
            stage = "forward"
            try:
                with nd.Tape() as tape:
                    out = model.forward(batch, "train")
                    stage = "bce"
                    bce = bce_loss(out.probs, labels[idx])
                    stage, kd = "kd", None
                    if kd_mode == "feature":
                        kd = kd_loss(out.fused_pre, teacher_h[idx], model.params["W_proj"])
                    elif kd_mode == "output":
                        kd = output_kd_loss(out.probs, teacher_p[idx])
                    stage = "align"
                    al = align_loss(out.z_p, out.z_m, dc.tau, dc.denominator) if use_align else None
                    stage = "total"
                    total = combined_loss(bce, kd, al, dc.alpha if kd is not None else 0.0,
                                          dc.beta if al is not None else 0.0)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite {stage} loss at epoch {epoch}, batch {b}: {exc}") from exc
            parts = {"bce": bce.item(), "kd": kd.item() if kd is not None else 0.0,
                     "align": al.item() if al is not None else 0.0, "total": total.item()}
            bad = [k for k, v in parts.items() if not np.isfinite(v)]
            if bad:
                raise NonFiniteError(f"non-finite {bad[0]} loss at epoch {epoch}, batch {b}")
            opt.step(nd.backward(tape, total, params))
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        report.losses.append({k: v / max(n_batches, 1) for k, v in sums.items()})
        score = _val_prauc(model, val)
        report.val_prauc.append(score)
        logger.info("epoch %d loss %.4f val PRAUC %.4f", epoch, report.losses[-1]["total"], score)
        if score > best[0]:
            best = (score, model.params.arrays())
            report.best_epoch = epoch
    if best[1] is not None:
        model.params.assign(best[1])
    else:
        report.best_epoch = config.max_epochs - 1
    report.wall_time = time.perf_counter() - t0
    return model, report


def _val_prauc(model: StudentModel, val: Sequence[Sample]) -> float:
    if not val:
        return float("nan")
    probs = model.predict_proba(val)
    return mean_prauc(probs, np.stack([s.label for s in val]))
