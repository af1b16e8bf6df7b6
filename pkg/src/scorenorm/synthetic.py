"""Seedable generator of demographically biased score ecosystems.

All randomness comes from one ``numpy.random.Generator(PCG64(seed))`` drawn
in a fixed order: test table (per demographic: genuine, then impostor),
gallery x cohort, probe x cohort, then cohort x cohort (impostor pairs,
then genuine).  Scores are Gaussian per demographic and pair type and are
clipped to [-1, 1].  Cross-demographic cohort comparisons use the mean of
the two impostor models shifted by ``cross_demo_shift``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .core import AXES, DemoManifest, ScoreTable, TableKind
from .errors import SpecError
from .protocols import DatasetManifest, SubjectEntry


@dataclass(frozen=True)
class DemoSpec:
    genuine_mu: float
    genuine_sigma: float
    impostor_mu: float
    impostor_sigma: float
    n_genuine: int = 2000
    n_impostor: int = 20000
    n_cohort_subjects: int = 100
    n_gallery_subjects: int = 100


@dataclass(frozen=True)
class SyntheticSpec:
    demographics: dict = field(default_factory=dict)
    seed: int = 0
    axis: str = "ethnicity"
    cross_demo_shift: float = -0.05
    cohort_genuine_per_subject: int = 5
    samples_per_subject: int = 6

    def __post_init__(self):
        demos = {str(k): v if isinstance(v, DemoSpec) else DemoSpec(**v)
                 for k, v in dict(self.demographics).items()}
        object.__setattr__(self, "demographics", demos)
        self.validate()

    def validate(self):
        if not self.demographics:
            raise SpecError("at least one demographic is required")
        if self.axis not in AXES:
            raise SpecError(f"unknown demographic axis {self.axis!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if self.cohort_genuine_per_subject < 1 or self.samples_per_subject < 2:
            raise SpecError("cohort genuine count must be >= 1 and samples per subject >= 2")
        for label, d in self.demographics.items():
            if not label:
                raise SpecError("demographic labels must be non-empty")
            if not (d.genuine_sigma > 0 and d.impostor_sigma > 0):
                raise SpecError(f"{label}: standard deviations must be positive")
            if min(d.n_genuine, d.n_impostor) < 1:
                raise SpecError(f"{label}: score counts must be at least 1")
            if min(d.n_cohort_subjects, d.n_gallery_subjects) < 2:
                raise SpecError(f"{label}: impostor pairs need at least 2 subjects per pool")
            if not d.genuine_mu > d.impostor_mu:
                raise SpecError(f"{label}: genuine mean must exceed impostor mean")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.demographics)

    @property
    def manifest(self) -> DemoManifest:
        return DemoManifest(self.axis, self.labels)

    def to_json(self) -> dict:
        return {
            "demographics": {k: asdict(v) for k, v in self.demographics.items()},
            "seed": self.seed,
            "axis": self.axis,
            "cross_demo_shift": self.cross_demo_shift,
            "cohort_genuine_per_subject": self.cohort_genuine_per_subject,
            "samples_per_subject": self.samples_per_subject,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SpecError(f"invalid synthetic spec: {exc}") from None


def default_spec(seed: int = 0) -> SyntheticSpec:
    """Two ethnicities, the second with higher impostor and lower genuine scores."""
    return SyntheticSpec(
        demographics={
            "Caucasian": DemoSpec(0.70, 0.12, 0.00, 0.12),
            "African": DemoSpec(0.55, 0.12, 0.15, 0.12),
        },
        seed=seed,
    )


class SyntheticData(NamedTuple):
    test: ScoreTable
    gallery_cohort: ScoreTable
    probe_cohort: ScoreTable
    cohort: ScoreTable
    clipped: dict


def _ids(label, tag, n):
    return np.array([f"{label}-{tag}{i:04d}" for i in range(n)], dtype=object)


class _Columns:
    def __init__(self):
        self.parts = {k: [] for k in ("gs", "ps", "gd", "pd", "gen", "score")}

    def add(self, gs, ps, gd, pd, genuine, score):
        n = len(score)
        self.parts["gs"].append(np.broadcast_to(np.asarray(gs, dtype=object), n))
        self.parts["ps"].append(np.broadcast_to(np.asarray(ps, dtype=object), n))
        self.parts["gd"].append(np.full(n, gd, dtype=object))
        self.parts["pd"].append(np.full(n, pd, dtype=object))
        self.parts["gen"].append(np.full(n, genuine, dtype=bool))
        self.parts["score"].append(score)

    def table(self, kind, manifest) -> ScoreTable:
        cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in self.parts.items()}
        return ScoreTable(kind, manifest, cat["gs"], cat["ps"], cat["gd"], cat["pd"],
                          cat["gen"], cat["score"])


def generate(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    manifest = spec.manifest
    demos = spec.demographics
    gallery = {lab: _ids(lab, "g", d.n_gallery_subjects) for lab, d in demos.items()}
    cohort = {lab: _ids(lab, "c", d.n_cohort_subjects) for lab, d in demos.items()}
    clipped = {}

    def draw(mu, sigma, n, table_name):
        x = rng.normal(mu, sigma, size=n)
        out = np.clip(x, -1.0, 1.0)
        clipped[table_name] = clipped.get(table_name, 0) + int(np.count_nonzero(out != x))
        return out

    def pair_model(la, lb):
        a, b = demos[la], demos[lb]
        if la == lb:
            return a.impostor_mu, a.impostor_sigma
        return ((a.impostor_mu + b.impostor_mu) / 2 + spec.cross_demo_shift,
                (a.impostor_sigma + b.impostor_sigma) / 2)

    test = _Columns()
    for lab, d in demos.items():
        g = gallery[lab]
        who = g[rng.integers(0, len(g), size=d.n_genuine)]
        test.add(who, who, lab, lab, True, draw(d.genuine_mu, d.genuine_sigma, d.n_genuine, "test"))
        a = rng.integers(0, len(g), size=d.n_impostor)
        b = (a + rng.integers(1, len(g), size=d.n_impostor)) % len(g)
        test.add(g[a], g[b], lab, lab, False,
                 draw(d.impostor_mu, d.impostor_sigma, d.n_impostor, "test"))

    gal_coh = _Columns()
    for la in demos:
        for lb in demos:
            mu, sd = pair_model(la, lb)
            ga, cb = gallery[la], cohort[lb]
            n = len(ga) * len(cb)
            gal_coh.add(np.repeat(ga, len(cb)), np.tile(cb, len(ga)), la, lb, False,
                        draw(mu, sd, n, "gallery_cohort"))

    prb_coh = _Columns()
    for la in demos:
        for lb in demos:
            mu, sd = pair_model(la, lb)
            pa, cb = gallery[la], cohort[lb]
            n = len(pa) * len(cb)
            prb_coh.add(np.tile(cb, len(pa)), np.repeat(pa, len(cb)), lb, la, False,
                        draw(mu, sd, n, "probe_cohort"))

    coh = _Columns()
    all_cohort = np.concatenate([cohort[lab] for lab in demos])
    all_demo = np.concatenate([np.full(len(cohort[lab]), lab, dtype=object) for lab in demos])
    i, j = np.triu_indices(len(all_cohort), k=1)
    labels = list(demos)
    for ia, la in enumerate(labels):
        for lb in labels[ia:]:
            m = ((all_demo[i] == la) & (all_demo[j] == lb)) | ((all_demo[i] == lb) & (all_demo[j] == la))
            mu, sd = pair_model(la, lb)
            ii, jj = i[m], j[m]
            coh.add(all_cohort[ii], all_cohort[jj], None, None, False,
                    draw(mu, sd, len(ii), "cohort"))
            coh.parts["gd"][-1] = all_demo[ii]
            coh.parts["pd"][-1] = all_demo[jj]
    for lab, d in demos.items():
        who = np.repeat(cohort[lab], spec.cohort_genuine_per_subject)
        coh.add(who, who, lab, lab, True, draw(d.genuine_mu, d.genuine_sigma, len(who), "cohort"))

    return SyntheticData(
        test=test.table(TableKind.TEST, manifest),
        gallery_cohort=gal_coh.table(TableKind.GALLERY_COHORT, manifest),
        probe_cohort=prb_coh.table(TableKind.PROBE_COHORT, manifest),
        cohort=coh.table(TableKind.COHORT_COHORT, manifest),
        clipped=clipped,
    )


def dataset_manifest(spec: SyntheticSpec) -> DatasetManifest:
    """Manifest of the synthetic test subjects, for the pair-protocol tools."""
    subjects = {}
    for lab, d in spec.demographics.items():
        for sid in _ids(lab, "g", d.n_gallery_subjects):
            samples = tuple(f"{sid}-s{k}" for k in range(spec.samples_per_subject))
            subjects[str(sid)] = SubjectEntry(lab, samples)
    return DatasetManifest(spec.axis, spec.labels, subjects)
