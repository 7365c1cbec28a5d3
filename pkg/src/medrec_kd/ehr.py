"""EHR records, dataset files, sample construction and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


class CodeKind(str, Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"
    MEDICATION = "medication"


N_AGE_BUCKETS = 10


@dataclass(frozen=True)
class CodeVocab:
    kind: CodeKind
    codes: tuple[str, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.names):
            raise DatasetError("codes and display names differ in length")
        if len(set(self.codes)) != len(self.codes):
            seen, dup = set(), []
            for c in self.codes:
                if c in seen:
                    dup.append(c)
                seen.add(c)
            raise DatasetError(f"duplicate codes in {self.kind.value} vocab: {dup}")
        empty = [c for c, n in zip(self.codes, self.names) if not n.strip()]
        if empty:
            raise DatasetError(f"empty display names for codes {empty}")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self):
        return len(self.codes)

    def index(self, code: str) -> int:
        return self._index[code]

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def name(self, code_id: int) -> str:
        if not 0 <= code_id < len(self.names):
            raise KeyError(f"{self.kind.value} code-id {code_id} out of range")
        return self.names[code_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for c, n in zip(self.codes, self.names):
                f.write(f"{c}\t{n}\n")

    @classmethod
    def load(cls, path, kind: CodeKind) -> "CodeVocab":
        codes, names = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DatasetError(f"{path}:{lineno}: expected 'code<TAB>name'")
                codes.append(parts[0])
                names.append(parts[1])
        return cls(CodeKind(kind), tuple(codes), tuple(names))


@dataclass(frozen=True)
class Vocabs:
    diagnosis: CodeVocab
    procedure: CodeVocab
    medication: CodeVocab

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.diagnosis), len(self.procedure), len(self.medication)


@dataclass(frozen=True)
class ProfileSchema:
    """Categories for the non-age profile features.

    Age is always bucketed by decade into 10 buckets; gender and any extra
    features are categorical strings mapped by position in these tuples.
    """

    genders: tuple[str, ...] = ("F", "M")
    extras: tuple[tuple[str, tuple[str, ...]], ...] = ()

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return (N_AGE_BUCKETS, len(self.genders)) + tuple(len(c) for _, c in self.extras)

    def to_dict(self) -> dict:
        return {"genders": list(self.genders),
                "extras": [[name, list(cats)] for name, cats in self.extras]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileSchema":
        return cls(tuple(d["genders"]), tuple((n, tuple(c)) for n, c in d.get("extras", [])))

    @classmethod
    def infer(cls, raw_profiles: Iterable[dict]) -> "ProfileSchema":
        genders: set[str] = set()
        extras: dict[str, set[str]] = {}
        for p in raw_profiles:
            genders.add(str(p["gender"]))
            for k, v in p.items():
                if k not in ("age", "gender"):
                    extras.setdefault(k, set()).add(str(v))
        return cls(tuple(sorted(genders)), tuple((k, tuple(sorted(v))) for k, v in sorted(extras.items())))


def age_bucket(age: int) -> int:
    if age < 0:
        raise DatasetError(f"negative age {age}")
    return min(int(age) // 10, N_AGE_BUCKETS - 1)


@dataclass(frozen=True)
class Profile:
    age_bucket: int
    gender: int
    extra: tuple[tuple[str, int], ...] = ()

    @property
    def indices(self) -> tuple[int, ...]:
        return (self.age_bucket, self.gender) + tuple(i for _, i in self.extra)

    def validate(self, cardinalities: Sequence[int]) -> None:
        idx = self.indices
        if len(idx) != len(cardinalities):
            raise DatasetError(f"profile has {len(idx)} features, schema has {len(cardinalities)}")
        for i, (v, card) in enumerate(zip(idx, cardinalities)):
            if not 0 <= v < card:
                raise DatasetError(f"profile feature {i} index {v} outside 0..{card - 1}")


def _codeset(ids: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(set(int(i) for i in ids)))


@dataclass(frozen=True)
class Visit:
    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    medications: tuple[int, ...]

    @classmethod
    def of(cls, diagnoses, procedures, medications) -> "Visit":
        return cls(_codeset(diagnoses), _codeset(procedures), _codeset(medications))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    profile: Profile
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise DatasetError(f"patient {self.patient_id} has no visits")


@dataclass(frozen=True)
class Sample:
    """One prediction target: the medication set of a single visit."""

    sample_id: str
    history: tuple[Visit, ...]
    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    profile: Profile
    target: tuple[int, ...]
    n_medications: int

    @property
    def label(self) -> np.ndarray:
        y = np.zeros(self.n_medications)
        y[list(self.target)] = 1.0
        return y

    @property
    def is_single_visit(self) -> bool:
        return not self.history

    @property
    def group(self) -> str:
        return "single" if self.is_single_visit else "multi"

    @property
    def patient_id(self) -> str:
        return self.sample_id.rsplit("/", 1)[0]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Sample, ...]
    validation: tuple[Sample, ...]
    test: tuple[Sample, ...]
    seed: int
    patients: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, name: str) -> tuple[Sample, ...]:
        if name not in ("train", "validation", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------- file IO

def _resolve(codes, vocab: CodeVocab, unknown: list) -> list[int]:
    out = []
    for c in codes:
        if c in vocab:
            out.append(vocab.index(c))
        else:
            unknown.append(c)
    return out


def load_dataset(path, vocabs: Vocabs, schema: Optional[ProfileSchema] = None) -> list[PatientRecord]:
    """Parse a line-delimited JSON dataset into records.

    Diagnosis-free visits are dropped; a patient left with no visits is an
    error, as is any code absent from its vocabulary.
    """
    raw = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid = str(obj["patient_id"])
                prof = obj["profile"]
                prof["age"], prof["gender"]
                visits = obj["visits"]
                if not isinstance(visits, list):
                    raise TypeError("visits must be a list")
                for v in visits:
                    v["diag"], v.get("proc", []), v.get("med", [])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            raw.append((lineno, pid, prof, visits))
    if schema is None:
        schema = ProfileSchema.infer(r[2] for r in raw)

    records = []
    for lineno, pid, prof, visits in raw:
        unknown: list = []
        parsed = []
        for v in visits:
            d = _resolve(v["diag"], vocabs.diagnosis, unknown)
            p = _resolve(v.get("proc", []), vocabs.procedure, unknown)
            m = _resolve(v.get("med", []), vocabs.medication, unknown)
            if d:
                parsed.append(Visit.of(d, p, m))
        if unknown:
            raise DatasetError(f"{path}:{lineno}: unknown codes {sorted(set(map(str, unknown)))}")
        if not parsed:
            raise DatasetError(f"{path}:{lineno}: patient {pid} has no visits after filtering")
        records.append(PatientRecord(pid, _parse_profile(prof, schema, lineno), tuple(parsed)))
    return records


def _parse_profile(prof: dict, schema: ProfileSchema, lineno: int) -> Profile:
    try:
        gender = schema.genders.index(str(prof["gender"]))
        extra = tuple((name, cats.index(str(prof[name]))) for name, cats in schema.extras)
        return Profile(age_bucket(int(prof["age"])), gender, extra)
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"line {lineno}: profile does not match schema ({exc})") from exc


def record_to_json(record: PatientRecord, vocabs: Vocabs, schema: ProfileSchema,
                   age: Optional[int] = None) -> dict:
    prof = {"age": 10 * record.profile.age_bucket + 5 if age is None else age,
            "gender": schema.genders[record.profile.gender]}
    for (name, cats), (_, idx) in zip(schema.extras, record.profile.extra):
        prof[name] = cats[idx]
    return {
        "patient_id": record.patient_id,
        "profile": prof,
        "visits": [{"diag": [vocabs.diagnosis.codes[i] for i in v.diagnoses],
                    "proc": [vocabs.procedure.codes[i] for i in v.procedures],
                    "med": [vocabs.medication.codes[i] for i in v.medications]}
                   for v in record.visits],
    }


def save_dataset(records: Sequence[PatientRecord], path, vocabs: Vocabs, schema: ProfileSchema) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(record_to_json(r, vocabs, schema), separators=(",", ":")) + "\n")


VOCAB_FILES = {CodeKind.DIAGNOSIS: "diag_vocab.tsv", CodeKind.PROCEDURE: "proc_vocab.tsv",
               CodeKind.MEDICATION: "med_vocab.tsv"}


def load_vocabs(directory) -> Vocabs:
    d = Path(directory)
    return Vocabs(*(CodeVocab.load(d / VOCAB_FILES[k], k) for k in CodeKind))


def save_vocabs(vocabs: Vocabs, directory) -> None:
    d = Path(directory)
    vocabs.diagnosis.save(d / VOCAB_FILES[CodeKind.DIAGNOSIS])
    vocabs.procedure.save(d / VOCAB_FILES[CodeKind.PROCEDURE])
    vocabs.medication.save(d / VOCAB_FILES[CodeKind.MEDICATION])


# ---------------------------------------------------------------- samples

def sample_id(patient_id: str, visit_index: int) -> str:
    return f"{patient_id}/v{visit_index:03d}"


def build_samples(records: Sequence[PatientRecord], n_medications: int) -> list[Sample]:
    """One sample per visit with a nonempty medication set."""
    out = []
    for r in records:
        for t, visit in enumerate(r.visits):
            if not visit.medications:
                continue
            if max(visit.medications) >= n_medications:
                raise DatasetError(f"medication id out of range in patient {r.patient_id}")
            out.append(Sample(sample_id(r.patient_id, t + 1), tuple(r.visits[:t]),
                              visit.diagnoses, visit.procedures, r.profile,
                              visit.medications, n_medications))
    return out


def split_counts(n: int) -> tuple[int, int, int]:
    n_val = int(n * 0.1 + 0.5)
    n_test = int(n * 0.1 + 0.5)
    return n - n_val - n_test, n_val, n_test


def split_patients(patient_ids: Sequence[str], seed: int) -> dict[str, list[str]]:
    if len(patient_ids) < 10:
        raise DatasetError(f"need at least 10 patients to split, got {len(patient_ids)}")
    if len(set(patient_ids)) != len(patient_ids):
        raise DatasetError("duplicate patient ids")
    order = np.random.default_rng(seed).permutation(len(patient_ids))
    ids = [patient_ids[i] for i in order]
    n_train, n_val, _ = split_counts(len(ids))
    return {"train": ids[:n_train], "validation": ids[n_train:n_train + n_val],
            "test": ids[n_train + n_val:]}


def split_by_patient(records: Sequence[PatientRecord], seed: int, n_medications: int,
                     assignment: Optional[dict] = None) -> DatasetSplit:
    """8:1:1 patient-level split; ``assignment`` reuses a stored manifest."""
    if assignment is None:
        assignment = split_patients([r.patient_id for r in records], seed)
    by_id = {r.patient_id: r for r in records}
    parts = {}
    for name in ("train", "validation", "test"):
        try:
            parts[name] = tuple(build_samples([by_id[p] for p in assignment[name]], n_medications))
        except KeyError as exc:
            raise DatasetError(f"split manifest names unknown patient {exc}") from exc
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], seed,
                        {k: list(v) for k, v in assignment.items()})


# ---------------------------------------------------------------- synthetic data

_SYLLABLES = ("ra", "lo", "ti", "nem", "car", "vi", "sol", "pra", "zo", "mex", "ta", "din",
              "fo", "ke", "lu", "bri", "den", "xa", "mo", "gal")
_DIAG_WORDS = ("acute", "chronic", "primary", "secondary", "recurrent", "benign", "severe")
_DIAG_NOUNS = ("nephritis", "arrhythmia", "hypertension", "anemia", "sepsis", "embolism",
               "pneumonia", "neuropathy", "hepatitis", "edema", "infarction", "colitis")
_PROC_NOUNS = ("catheterization", "biopsy", "intubation", "transfusion", "resection",
               "angiography", "dialysis", "endoscopy", "drainage", "grafting")
_MED_SUFFIX = ("pril", "olol", "statin", "mab", "cillin", "azole", "sartan", "parin", "oxacin", "tide")


def _names(kind: CodeKind, n: int, rng: np.random.Generator) -> list[str]:
    names, seen = [], set()
    for i in range(n):
        if kind is CodeKind.DIAGNOSIS:
            base = f"{_DIAG_WORDS[rng.integers(len(_DIAG_WORDS))]} {_DIAG_NOUNS[rng.integers(len(_DIAG_NOUNS))]}"
        elif kind is CodeKind.PROCEDURE:
            organ = "".join(_SYLLABLES[j] for j in rng.integers(len(_SYLLABLES), size=2))
            base = f"{organ} {_PROC_NOUNS[rng.integers(len(_PROC_NOUNS))]}"
        else:
            stem = "".join(_SYLLABLES[j] for j in rng.integers(len(_SYLLABLES), size=2))
            base = (stem + _MED_SUFFIX[rng.integers(len(_MED_SUFFIX))]).capitalize()
        name = base if base not in seen else f"{base} type {i}"
        seen.add(name)
        names.append(name)
    return names


@dataclass
class SynthConfig:
    n_patients: int = 200
    vocab_sizes: tuple[int, int, int] = (150, 80, 64)
    max_visits: int = 4
    seed: int = 0
    single_visit_frac: float = 0.15
    avg_diag: float = 10.0
    avg_proc: float = 4.0
    avg_med: float = 11.0
    noise: float = 0.5
    latent_dim: int = 8

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if len(self.vocab_sizes) != 3 or min(self.vocab_sizes) < 4:
            raise ValueError("vocab_sizes must be three integers >= 4")
        if self.max_visits < 1:
            raise ValueError("max_visits must be >= 1")
        if not 0.0 <= self.single_visit_frac <= 1.0:
            raise ValueError("single_visit_frac must lie in [0, 1]")
        if min(self.avg_diag, self.avg_proc, self.avg_med) < 1:
            raise ValueError("average set sizes must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


SYNTH_SCHEMA = ProfileSchema(("F", "M"), (("admission", ("elective", "emergency", "urgent")),))


def _draw_size(rng, mean: float, cap: int) -> int:
    return int(min(cap, 1 + rng.poisson(mean - 1)))


def generate_synthetic(config: SynthConfig) -> tuple[Vocabs, list[PatientRecord]]:
    """Deterministic stand-in for a preprocessed MIMIC cohort.

    Each patient has a latent health state that drifts across visits.
    Diagnoses and procedures are sampled from softmax affinities with that
    state; medications come from a hidden linear rule over the visit's
    diagnoses, procedures, profile and previous prescription, plus Gumbel
    noise, keeping the top-k for a Poisson-distributed k.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_d, n_p, n_m = config.vocab_sizes
    vocabs = Vocabs(*(CodeVocab(kind, tuple(f"{kind.value[0].upper()}{i:04d}" for i in range(n)),
                                tuple(_names(kind, n, rng)))
                      for kind, n in zip(CodeKind, config.vocab_sizes)))

    k = config.latent_dim
    diag_emb = rng.normal(size=(n_d, k))
    proc_emb = rng.normal(size=(n_p, k))
    w_diag = rng.normal(size=(n_m, n_d)) / math.sqrt(config.avg_diag)
    w_proc = rng.normal(size=(n_m, n_p)) / math.sqrt(config.avg_proc)
    w_age = rng.normal(size=(n_m, N_AGE_BUCKETS))
    w_gender = rng.normal(size=(n_m, 2)) * 0.5
    w_prev = 1.5
    med_pop = rng.normal(size=n_m)

    records = []
    for i in range(config.n_patients):
        age = int(rng.integers(18, 95))
        gender = int(rng.integers(2))
        admission = int(rng.integers(3))
        profile = Profile(age_bucket(age), gender, (("admission", admission),))
        if rng.random() < config.single_visit_frac or config.max_visits == 1:
            n_visits = 1
        else:
            n_visits = int(rng.integers(2, config.max_visits + 1))
        state = rng.normal(size=k)
        prev_meds = np.zeros(n_m)
        visits = []
        for _ in range(n_visits):
            state = 0.8 * state + 0.6 * rng.normal(size=k)
            d_logits = diag_emb @ state
            p_logits = proc_emb @ state
            d = _sample_set(rng, d_logits, _draw_size(rng, config.avg_diag, n_d))
            p = _sample_set(rng, p_logits, _draw_size(rng, config.avg_proc, n_p))
            xd = np.zeros(n_d)
            xd[d] = 1.0
            xp = np.zeros(n_p)
            xp[p] = 1.0
            score = (w_diag @ xd + w_proc @ xp + w_age[:, profile.age_bucket]
                     + w_gender[:, gender] + w_prev * prev_meds + med_pop)
            score = score + config.noise * rng.gumbel(size=n_m)
            n_med = _draw_size(rng, config.avg_med, n_m)
            m = np.argsort(-score, kind="stable")[:n_med]
            prev_meds = np.zeros(n_m)
            prev_meds[m] = 1.0
            visits.append(Visit.of(d, p, m))
        records.append(PatientRecord(f"P{i:05d}", profile, tuple(visits)))
    return vocabs, records


def _sample_set(rng, logits: np.ndarray, size: int) -> np.ndarray:
    # Gumbel top-k: a draw without replacement proportional to softmax(logits)
    keys = logits + rng.gumbel(size=logits.shape[0])
    return np.argsort(-keys, kind="stable")[:size]
