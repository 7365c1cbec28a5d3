import numpy as np
import pytest

from medrec_kd.ehr import (CodeKind, CodeVocab, Profile, Sample, SynthConfig, Visit, Vocabs,
                           build_samples, generate_synthetic, split_by_patient, PatientRecord)
from medrec_kd.model import StudentConfig


def make_vocabs(n_d=6, n_p=6, n_m=5) -> Vocabs:
    return Vocabs(
        CodeVocab(CodeKind.DIAGNOSIS, tuple(f"D{i}" for i in range(n_d)),
                  tuple(f"diagnosis {chr(97 + i)}" for i in range(n_d))),
        CodeVocab(CodeKind.PROCEDURE, tuple(f"P{i}" for i in range(n_p)),
                  tuple(f"procedure {chr(97 + i)}" for i in range(n_p))),
        CodeVocab(CodeKind.MEDICATION, tuple(f"M{i}" for i in range(n_m)),
                  tuple(f"drug {chr(97 + i)}" for i in range(n_m))))


@pytest.fixture
def vocabs():
    return make_vocabs()


@pytest.fixture
def tiny_records():
    """Three hand-built patients over the 6/6/5 vocabulary."""
    f = Profile(3, 0, (("admission", 1),))
    m = Profile(7, 1, (("admission", 0),))
    return [
        PatientRecord("A", f, (Visit.of([0, 2], [1], [0, 3]), Visit.of([1], [], [1, 3, 4]))),
        PatientRecord("B", m, (Visit.of([4, 5], [2, 3], [2]),)),
        PatientRecord("C", m, (Visit.of([3], [0], [0]), Visit.of([2, 3], [5], [1]),
                               Visit.of([0, 1, 5], [4], [2, 4]))),
    ]


@pytest.fixture
def tiny_samples(tiny_records):
    return build_samples(tiny_records, 5)


@pytest.fixture
def tiny_config():
    return StudentConfig(6, 6, 5, profile_cardinalities=(10, 2, 3), d_e=8, d_t=8, n_heads=4,
                         d_h=6, max_visits=8, seed=0)


@pytest.fixture(scope="session")
def small_synth():
    vocabs, records = generate_synthetic(SynthConfig(n_patients=40, vocab_sizes=(30, 20, 16),
                                                     avg_diag=5, avg_proc=3, avg_med=5, seed=3))
    return vocabs, records, split_by_patient(records, 3, 16)


def small_config(vocabs, **kw) -> StudentConfig:
    base = dict(profile_cardinalities=(10, 2, 3), d_e=16, d_t=16, n_heads=4, d_h=32, seed=0)
    base.update(kw)
    return StudentConfig(*vocabs.sizes, **base)


def random_sample(rng, sid="X/v001", n_hist=1, sizes=(6, 6, 5)) -> Sample:
    def pick(n, lo=1):
        return tuple(sorted(rng.choice(n, size=rng.integers(lo, n + 1), replace=False).tolist()))
    hist = tuple(Visit.of(pick(sizes[0]), pick(sizes[1], 0), pick(sizes[2])) for _ in range(n_hist))
    return Sample(sid, hist, pick(sizes[0]), pick(sizes[1], 0),
                  Profile(int(rng.integers(10)), int(rng.integers(2)),
                          (("admission", int(rng.integers(3))),)),
                  pick(sizes[2]), sizes[2])


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1].removeprefix("test_").replace("_", " ")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{outcome}  {name}")
