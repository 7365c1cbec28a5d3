"""Teacher features and the distillation-side losses."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .ehr import Sample
from .ndgrad import Tensor
from .teacher import TeacherHead

MAGIC = b"LDRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class FeatureFileError(ValueError):
    pass


class MissingTeacherFeature(KeyError):
    pass


@dataclass
class DistillConfig:
    alpha: float = 0.4
    beta: float = 5e-3
    tau: float = 1.0
    denominator: str = "as-written"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.denominator not in ("as-written", "standard-infonce"):
            raise ValueError(f"unknown denominator mode {self.denominator!r}")


@dataclass
class TeacherFeatureStore:
    """Frozen teacher hidden states keyed by sample id."""

    d_h: int
    features: dict = field(default_factory=dict)
    provenance: str = "file"
    head: Optional[TeacherHead] = None

    def __post_init__(self):
        for sid, h in self.features.items():
            self._check(sid, h)

    def _check(self, sid: str, h: np.ndarray) -> None:
        if h.shape != (self.d_h,):
            raise FeatureFileError(f"feature for {sid!r} has shape {h.shape}, expected ({self.d_h},)")
        if not np.isfinite(h).all():
            raise FeatureFileError(f"non-finite feature for {sid!r}")

    def add(self, sample_id: str, h) -> None:
        if sample_id in self.features:
            raise FeatureFileError(f"duplicate sample id {sample_id!r}")
        h = np.asarray(h, dtype=np.float64)
        self._check(sample_id, h)
        self.features[sample_id] = h

    def __len__(self):
        return len(self.features)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.features

    def __getitem__(self, sample_id: str) -> np.ndarray:
        try:
            return self.features[sample_id]
        except KeyError:
            raise MissingTeacherFeature(f"no teacher feature for sample {sample_id!r}") from None

    def matrix(self, sample_ids: Iterable[str]) -> np.ndarray:
        rows = [self[s] for s in sample_ids]
        return np.stack(rows) if rows else np.zeros((0, self.d_h))


def save_teacher_features(store: TeacherFeatureStore, path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, store.d_h, len(store)))
        for sid, h in store.features.items():
            raw = sid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FeatureFileError(f"sample id too long: {sid[:40]}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(np.asarray(h, dtype="<f4").tobytes())


def load_teacher_features(path) -> TeacherFeatureStore:
    """Read an LDRF file; values are stored as float32 and widened to float64."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FeatureFileError(f"truncated header at byte offset {len(data)}")
    magic, version, d_h, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFileError(f"unsupported version {version}")
    store = TeacherFeatureStore(d_h, provenance="file")
    off = _HEADER.size
    width = 4 * d_h
    for _ in range(count):
        start = off
        if off + 2 > len(data):
            raise FeatureFileError(f"truncated record at byte offset {start}")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + n + width > len(data):
            raise FeatureFileError(f"truncated record at byte offset {start}")
        sid = data[off:off + n].decode("utf-8")
        off += n
        h = np.frombuffer(data, dtype="<f4", count=d_h, offset=off).astype(np.float64)
        off += width
        if sid in store:
            raise FeatureFileError(f"duplicate sample id {sid!r} at byte offset {start}")
        store.add(sid, h)
    if off != len(data):
        raise FeatureFileError(f"{len(data) - off} trailing bytes at byte offset {off}")
    return store


def mock_teacher(samples: Sequence[Sample], d_h: int = 128, noise_sigma: float = 0.1,
                 seed: int = 0, logit_scale: float = 4.0, gamma: float = 0.5,
                 feature_scale: float = 1.0) -> TeacherFeatureStore:
    """Synthetic stand-in for a fine-tuned language-model teacher.

    Draws a fixed random map A (d_h x n_med) and offset a0 and sets
    ``h = A y + a0 + noise``; the attached head is the exact affine readout
    ``W_CLS (A y + a0) = logit_scale * (2y - 1)`` when d_h > n_med, so the
    teacher's probabilities recover the labels. Features are rounded to
    float32 so a save/load round trip is exact.
    """
    if d_h < 1:
        raise ValueError("d_h must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if not samples:
        raise ValueError("mock_teacher: no samples")
    n_med = samples[0].n_medications
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, feature_scale / np.sqrt(d_h), size=(d_h, n_med))
    a0 = rng.normal(0.0, feature_scale / np.sqrt(d_h), size=d_h)
    basis = np.concatenate([a, a0[:, None]], axis=1)
    target = np.concatenate([2.0 * logit_scale * np.eye(n_med),
                             -logit_scale * np.ones((n_med, 1))], axis=1)
    w_cls = target @ np.linalg.pinv(basis)
    store = TeacherFeatureStore(d_h, provenance="mock", head=TeacherHead(w_cls, gamma))
    for s in sorted(samples, key=lambda s: s.sample_id):
        h = a @ s.label + a0 + noise_sigma * rng.normal(size=d_h)
        store.add(s.sample_id, h.astype(np.float32).astype(np.float64))
    return store


# ---------------------------------------------------------------- losses

def kd_loss(fused_pre: Tensor, teacher_h, w_proj: Tensor) -> Tensor:
    """Mean over the batch of ||h_i - W_proj r_i||^2; the teacher side is constant."""
    teacher_h = np.asarray(teacher_h, dtype=np.float64)
    if teacher_h.shape != (fused_pre.shape[0], w_proj.shape[0]):
        raise nd.ShapeError(f"kd_loss: teacher {teacher_h.shape} vs projected "
                            f"({fused_pre.shape[0]}, {w_proj.shape[0]})")
    return nd.mse(nd.linear(fused_pre, w_proj), teacher_h)


def _contrast(sim: Tensor, mask: np.ndarray) -> Tensor:
    # mean_i [ -sim_ii + log sum_{j in mask_i} exp(sim_ij) ]
    B = sim.shape[0]
    per_anchor = nd.sub(nd.logsumexp_rows(sim, mask), nd.diagonal(sim))
    return nd.scale(nd.sum_all(per_anchor), 1.0 / B)


def align_loss(z_p: Tensor, z_m: Tensor, tau: float = 1.0, mode: str = "as-written") -> Tensor:
    """Symmetric profile/medication contrastive loss over cosine similarities.

    ``as-written`` excludes the positive pair from the denominator (and can
    go negative); ``standard-infonce`` includes it.
    """
    z_p, z_m = nd.as_tensor(z_p), nd.as_tensor(z_m)
    if z_p.shape != z_m.shape or len(z_p.shape) != 2:
        raise nd.ShapeError(f"align_loss: shape mismatch {z_p.shape} vs {z_m.shape}")
    B = z_p.shape[0]
    if B < 2:
        raise ValueError("align_loss needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode == "as-written":
        mask = ~np.eye(B, dtype=bool)
    elif mode == "standard-infonce":
        mask = np.ones((B, B), dtype=bool)
    else:
        raise ValueError(f"unknown denominator mode {mode!r}")
    sim = nd.scale(nd.matmul(nd.l2_normalize(z_p), nd.transpose(nd.l2_normalize(z_m))), 1.0 / tau)
    return nd.add(_contrast(sim, mask), _contrast(nd.transpose(sim), mask))


def combined_loss(bce, kd, align, alpha: float, beta: float) -> Tensor:
    """bce + alpha * kd + beta * align."""
    total = nd.as_tensor(bce)
    if alpha:
        total = nd.add(total, nd.scale(kd, alpha))
    if beta:
        total = nd.add(total, nd.scale(align, beta))
    return total
