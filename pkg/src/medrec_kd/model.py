"""The distilled student recommender.

Three set encoders (diagnosis, procedure, medication) turn each visit's code
set into a vector; a visit encoder summarises each stream across visits; the
three summaries are fused by two linear layers into per-medication
probabilities. A patient's profile vector is appended to the medication
stream so single-visit patients still have a medication input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ndgrad as nd
from .ehr import CodeKind, Profile, Sample
from .ndgrad import Tensor

_KIND_KEY = {CodeKind.DIAGNOSIS: "diag", CodeKind.PROCEDURE: "proc", CodeKind.MEDICATION: "med"}


class ConfigError(ValueError):
    pass


@dataclass
class StudentConfig:
    n_diag: int
    n_proc: int
    n_med: int
    profile_cardinalities: tuple[int, ...] = (10, 2)
    d_e: int = 64
    d_t: int = 64
    n_set_layers: int = 1
    n_visit_layers: int = 1
    n_heads: int = 4
    gamma: float = 0.5
    d_h: int = 128
    max_visits: int = 32
    shared_visit_encoder: bool = True
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.profile_cardinalities = tuple(int(c) for c in self.profile_cardinalities)
        self.validate()

    def validate(self) -> None:
        dims = (self.n_diag, self.n_proc, self.n_med, self.d_e, self.d_t, self.n_heads,
                self.d_h, self.max_visits)
        if min(dims) < 1 or min(self.n_set_layers, self.n_visit_layers) < 1:
            raise ConfigError("all dimensions, vocab sizes and layer counts must be >= 1")
        if self.d_t % self.n_heads or self.d_e % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_e={self.d_e} and d_t={self.d_t}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie strictly between 0 and 1")
        if not self.profile_cardinalities or min(self.profile_cardinalities) < 1:
            raise ConfigError("profile cardinalities must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_cardinalities"] = list(self.profile_cardinalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown student config keys: {sorted(unknown)}")
        return cls(**d)


def layer_size(d: int) -> int:
    """Scalars in one transformer layer: attention 4(d^2 + d), FNN d^2 + d, two layer norms 4d."""
    return 5 * d * d + 9 * d


def visit_stack_size(config: StudentConfig) -> int:
    """Scalars in one visit encoder: its layers plus its positional table."""
    return config.n_visit_layers * layer_size(config.d_t) + config.max_visits * config.d_t


class StudentParams:
    """Ordered name -> Tensor mapping of every trainable array."""

    def __init__(self, tensors: Optional[dict] = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name}")
        self._t[name] = Tensor(value, requires_grad=True, name=name)

    def items(self):
        return self._t.items()

    def tensors(self) -> list[Tensor]:
        return list(self._t.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._t.items()}

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._t) - set(arrays)
        extra = set(arrays) - set(self._t)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self._t.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} vs {t.shape}")
            t.value = np.array(arrays[k], dtype=np.float64)

    def count(self) -> int:
        return sum(t.value.size for t in self._t.values())


def count_params(params: StudentParams) -> int:
    return params.count()


def init_params(config: StudentConfig) -> StudentParams:
    rng = np.random.default_rng(config.seed)
    p = StudentParams()

    def weight(out_dim, in_dim):
        bound = 1.0 / math.sqrt(in_dim)
        return rng.uniform(-bound, bound, size=(out_dim, in_dim))

    def emb(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    def layer(prefix, d):
        for w in ("wq", "wk", "wv", "wo"):
            p.add(f"{prefix}.{w}", weight(d, d))
            p.add(f"{prefix}.b{w[1]}", np.zeros(d))
        p.add(f"{prefix}.ln1_g", np.ones(d))
        p.add(f"{prefix}.ln1_b", np.zeros(d))
        p.add(f"{prefix}.ffn_w", weight(d, d))
        p.add(f"{prefix}.ffn_b", np.zeros(d))
        p.add(f"{prefix}.ln2_g", np.ones(d))
        p.add(f"{prefix}.ln2_b", np.zeros(d))

    d_e, d_t = config.d_e, config.d_t
    for key, n in (("diag", config.n_diag), ("proc", config.n_proc), ("med", config.n_med)):
        p.add(f"E_{key[0]}", emb(n, d_e))
        p.add(f"empty.{key}", emb(d_e))
        for l in range(config.n_set_layers):
            layer(f"set_{key}.{l}", d_e)
        if d_e != d_t:
            p.add(f"set_{key}.out", weight(d_t, d_e))
    for prefix in _visit_prefixes(config):
        p.add(f"{prefix}.pos", emb(config.max_visits, d_t))
        for l in range(config.n_visit_layers):
            layer(f"{prefix}.{l}", d_t)
    for i, card in enumerate(config.profile_cardinalities):
        p.add(f"profile.emb{i}", emb(card, d_e))
    p.add("profile.proj", weight(d_t, d_e * len(config.profile_cardinalities)))
    p.add("W_1", weight(d_t, 3 * d_t))
    p.add("b_1", np.zeros(d_t))
    p.add("W_2", weight(config.n_med, d_t))
    p.add("b_2", np.zeros(config.n_med))
    p.add("W_proj", weight(config.d_h, d_t))
    p.add("W_proj_P", weight(d_t, d_t))
    p.add("W_proj_M", weight(d_t, d_t))
    return p


def _visit_prefixes(config: StudentConfig) -> tuple[str, ...]:
    if config.shared_visit_encoder:
        return ("visit",)
    return ("visit_diag", "visit_proc", "visit_med")


@dataclass
class ForwardOutput:
    probs: Tensor
    fused_pre: Tensor
    z_p: Optional[Tensor] = None
    z_m: Optional[Tensor] = None
    groups: list = field(default_factory=list)


def bce_loss(probs, labels) -> Tensor:
    """Binary cross-entropy averaged over medications and batch."""
    return nd.bce_with_probs(probs, labels)


def recommend(probs, gamma: float) -> set[int]:
    """Medications whose probability strictly exceeds ``gamma``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    probs = probs.value if isinstance(probs, Tensor) else np.asarray(probs)
    return set(int(k) for k in np.flatnonzero(probs.reshape(-1) > gamma))


class StudentModel:
    def __init__(self, config: StudentConfig, params: Optional[StudentParams] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def count_params(self) -> int:
        return self.params.count()

    # ------------------------------------------------------------ blocks

    def _transformer(self, x: Tensor, prefix: str, n_layers: int,
                     segments: Optional[np.ndarray]) -> Tensor:
        p, cfg = self.params, self.config
        for l in range(n_layers):
            w = f"{prefix}.{l}."
            q = nd.linear(x, p[w + "wq"], p[w + "bq"])
            k = nd.linear(x, p[w + "wk"], p[w + "bk"])
            v = nd.linear(x, p[w + "wv"], p[w + "bv"])
            a = nd.linear(nd.multi_head_attention(q, k, v, cfg.n_heads, segments),
                          p[w + "wo"], p[w + "bo"])
            m = nd.layer_norm(nd.add(x, a), p[w + "ln1_g"], p[w + "ln1_b"], cfg.ln_eps)
            f = nd.linear(m, p[w + "ffn_w"], p[w + "ffn_b"])
            x = nd.layer_norm(nd.add(m, f), p[w + "ln2_g"], p[w + "ln2_b"], cfg.ln_eps)
        return x

    def encode_sets(self, sets: Sequence[Sequence[int]], kind: CodeKind) -> Tensor:
        """Encode many code sets at once; returns (len(sets), d_t)."""
        key = _KIND_KEY[CodeKind(kind)]
        table = self.params[f"E_{key[0]}"]
        n_codes = table.shape[0]
        if not sets:
            raise ValueError("encode_sets: no sets given")
        index, segments = [], []
        for s_i, s in enumerate(sets):
            for i in s:
                if not 0 <= i < n_codes:
                    raise IndexError(f"{CodeKind(kind).value} code-id {i} out of range 0..{n_codes - 1}")
            # the row after the table is the learned empty-set token
            ids = list(s) if len(s) else [n_codes]
            index.extend(ids)
            segments.extend([s_i] * len(ids))
        seg = np.asarray(segments)
        empty = nd.reshape(self.params[f"empty.{key}"], (1, self.config.d_e))
        x = nd.row_select(nd.concat([table, empty], axis=0), index)
        x = self._transformer(x, f"set_{key}", self.config.n_set_layers,
                              None if len(sets) == 1 else seg)
        out = nd.mean_pool(x, None if len(sets) == 1 else seg, len(sets))
        if self.config.d_e != self.config.d_t:
            out = nd.linear(out, self.params[f"set_{key}.out"])
        return out

    def encode_set(self, code_ids: Iterable[int], kind: CodeKind) -> Tensor:
        """Encode one code set to a (1, d_t) row; order of ``code_ids`` is irrelevant."""
        return self.encode_sets([tuple(code_ids)], kind)

    def _encode_sequences(self, x: Tensor, lengths: Sequence[int], prefix: str) -> Tensor:
        if max(lengths) > self.config.max_visits:
            raise ValueError(f"visit sequence of length {max(lengths)} exceeds "
                             f"max_visits={self.config.max_visits}")
        positions = np.concatenate([np.arange(n) for n in lengths])
        seg = np.repeat(np.arange(len(lengths)), lengths)
        x = nd.add(x, nd.row_select(self.params[f"{prefix}.pos"], positions))
        single = len(lengths) == 1
        x = self._transformer(x, prefix, self.config.n_visit_layers, None if single else seg)
        return nd.mean_pool(x, None if single else seg, len(lengths))

    def encode_visits(self, seq: Tensor, stream: str = "diag") -> Tensor:
        """Summarise one (T, d_t) sequence of visit vectors into a (1, d_t) row."""
        if seq.shape[0] < 1:
            raise ValueError("encode_visits: empty sequence")
        prefix = "visit" if self.config.shared_visit_encoder else f"visit_{stream}"
        return self._encode_sequences(seq, [seq.shape[0]], prefix)

    def encode_profiles(self, profiles: Sequence[Profile]) -> Tensor:
        cards = self.config.profile_cardinalities
        cols = []
        idx = np.array([p.indices for p in profiles], dtype=np.int64)
        if idx.shape[1] != len(cards):
            raise ValueError(f"profile has {idx.shape[1]} features, model expects {len(cards)}")
        for i, card in enumerate(cards):
            bad = idx[:, i][(idx[:, i] < 0) | (idx[:, i] >= card)]
            if bad.size:
                raise IndexError(f"profile feature {i}: index {int(bad[0])} outside 0..{card - 1}")
            cols.append(nd.row_select(self.params[f"profile.emb{i}"], idx[:, i]))
        return nd.linear(nd.concat(cols, axis=1), self.params["profile.proj"])

    def encode_profile(self, profile: Profile) -> Tensor:
        return self.encode_profiles([profile])

    # ------------------------------------------------------------ forward

    def forward(self, samples: Sequence[Sample], mode: str = "eval") -> ForwardOutput:
        """Run a batch. In train mode also produce the alignment projections."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not samples:
            raise ValueError("forward: empty batch")
        if isinstance(samples, Sample):
            samples = [samples]
        p, cfg = self.params, self.config
        B = len(samples)
        lengths = [len(s.history) + 1 for s in samples]

        diag_sets, proc_sets, med_sets = [], [], []
        for s in samples:
            diag_sets.extend(v.diagnoses for v in s.history)
            diag_sets.append(s.diagnoses)
            proc_sets.extend(v.procedures for v in s.history)
            proc_sets.append(s.procedures)
            med_sets.extend(v.medications for v in s.history)
        n_hist = len(med_sets)
        if mode == "train":
            med_sets.extend(s.target for s in samples)

        d_rows = self.encode_sets(diag_sets, CodeKind.DIAGNOSIS)
        p_rows = self.encode_sets(proc_sets, CodeKind.PROCEDURE)
        prof = self.encode_profiles([s.profile for s in samples])
        med_rows = self.encode_sets(med_sets, CodeKind.MEDICATION) if med_sets else None

        # medication stream per sample: its history rows, then the profile row
        pool = prof if med_rows is None else nd.concat([med_rows, prof], axis=0)
        prof_base = 0 if med_rows is None else med_rows.shape[0]
        order, cursor = [], 0
        for b, s in enumerate(samples):
            order.extend(range(cursor, cursor + len(s.history)))
            cursor += len(s.history)
            order.append(prof_base + b)
        m_rows = nd.row_select(pool, order)

        if cfg.shared_visit_encoder:
            out = self._encode_sequences(nd.concat([d_rows, p_rows, m_rows], axis=0),
                                         lengths * 3, "visit")
            fused_in = nd.concat([nd.row_select(out, np.arange(0, B)),
                                  nd.row_select(out, np.arange(B, 2 * B)),
                                  nd.row_select(out, np.arange(2 * B, 3 * B))], axis=1)
        else:
            fused_in = nd.concat([self._encode_sequences(d_rows, lengths, "visit_diag"),
                                  self._encode_sequences(p_rows, lengths, "visit_proc"),
                                  self._encode_sequences(m_rows, lengths, "visit_med")], axis=1)
        fused_pre = nd.linear(fused_in, p["W_1"], p["b_1"])
        probs = nd.sigmoid(nd.linear(fused_pre, p["W_2"], p["b_2"]))
        result = ForwardOutput(probs, fused_pre, groups=[s.group for s in samples])
        if mode == "train":
            result.z_p = nd.linear(prof, p["W_proj_P"])
            target_rows = nd.row_select(med_rows, np.arange(n_hist, n_hist + B))
            result.z_m = nd.linear(target_rows, p["W_proj_M"])
        return result

    def predict_proba(self, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
        """Evaluation-mode probabilities, (n_samples, n_med)."""
        chunks = [self.forward(samples[i:i + batch_size], "eval").probs.value
                  for i in range(0, len(samples), batch_size)]
        if not chunks:
            return np.zeros((0, self.config.n_med))
        return np.concatenate(chunks, axis=0)

    def transform(self, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
        chunks = [self.forward(samples[i:i + batch_size], "eval").fused_pre.value
                  for i in range(0, len(samples), batch_size)]
        if not chunks:
            return np.zeros((0, self.config.d_t))
        return np.concatenate(chunks, axis=0)
