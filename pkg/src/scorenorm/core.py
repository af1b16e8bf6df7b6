"""Domain types and the Gaussian kernels shared by every normalizer."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    ConsistencyError,
    DegenerateDistribution,
    EmptyDistribution,
    ManifestViolation,
    SpecError,
)

SIGMA_MIN = 1e-12

AXES = ("gender", "ethnicity")


class TableKind(str, enum.Enum):
    TEST = "test"
    GALLERY_COHORT = "gallery_cohort"
    PROBE_COHORT = "probe_cohort"
    COHORT_COHORT = "cohort_cohort"


class PairType(str, enum.Enum):
    GENUINE = "genuine"
    IMPOSTOR = "impostor"


@dataclass(frozen=True)
class DemoManifest:
    """Demographic axis and the label set a table is allowed to use."""

    axis: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.axis not in AXES:
            raise SpecError(f"unknown demographic axis {self.axis!r}; expected one of {AXES}")
        labels = tuple(self.labels)
        if not labels or any(not lab for lab in labels):
            raise SpecError("label set must be non-empty and contain no empty labels")
        if len(set(labels)) != len(labels):
            raise SpecError(f"duplicate labels in {labels}")
        object.__setattr__(self, "labels", labels)

    def to_json(self) -> dict:
        return {"axis": self.axis, "labels": list(self.labels)}

    @classmethod
    def from_json(cls, doc: dict) -> "DemoManifest":
        return cls(doc["axis"], tuple(doc["labels"]))


class ScoreRecord(NamedTuple):
    gallery_subject: str
    probe_subject: str
    gallery_demo: str
    probe_demo: Optional[str]
    pair_type: PairType
    score: float

    @property
    def genuine(self) -> bool:
        return self.pair_type is PairType.GENUINE


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Column-oriented, immutable collection of score records.

    ``probe_demo`` uses the empty string for a missing probe demographic.
    Construction validates the pair-type/subject invariants, the label set
    and, for gallery/probe cohort kinds, that every record is an impostor.
    """

    kind: TableKind
    manifest: DemoManifest
    gallery_subject: np.ndarray
    probe_subject: np.ndarray
    gallery_demo: np.ndarray
    probe_demo: np.ndarray
    genuine: np.ndarray
    score: np.ndarray
    _label_codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TableKind(self.kind))
        cols = {}
        for name in ("gallery_subject", "probe_subject", "gallery_demo", "probe_demo"):
            cols[name] = _frozen(getattr(self, name), object)
        cols["genuine"] = _frozen(self.genuine, bool)
        cols["score"] = _frozen(self.score, np.float64)
        n = len(cols["score"])
        if any(len(c) != n for c in cols.values()):
            raise ValueError("score table columns have different lengths")
        for name, col in cols.items():
            object.__setattr__(self, name, col)
        self._validate()

    def _validate(self):
        n = len(self)
        if n == 0:
            object.__setattr__(self, "_label_codes", np.zeros(0, dtype=np.intp))
            return
        same = self.gallery_subject == self.probe_subject
        bad = np.flatnonzero(self.genuine != same)
        if bad.size:
            i = int(bad[0])
            kind = "genuine" if self.genuine[i] else "impostor"
            raise ConsistencyError(
                f"record {i}: {kind} pair with gallery {self.gallery_subject[i]!r} "
                f"and probe {self.probe_subject[i]!r}"
            )
        if self.kind in (TableKind.GALLERY_COHORT, TableKind.PROBE_COHORT) and self.genuine.any():
            i = int(np.flatnonzero(self.genuine)[0])
            raise ConsistencyError(f"record {i}: {self.kind.value} tables hold impostor records only")
        lookup = {lab: k for k, lab in enumerate(self.manifest.labels)}
        uniq, inv = np.unique(self.gallery_demo, return_inverse=True)
        try:
            codes = np.array([lookup[u] for u in uniq], dtype=np.intp)
        except KeyError as exc:
            raise ManifestViolation(f"unknown demographic {exc.args[0]!r}") from None
        object.__setattr__(self, "_label_codes", codes[inv])
        for u in np.unique(self.probe_demo):
            if u and u not in lookup:
                raise ManifestViolation(f"unknown probe demographic {u!r}")

    @classmethod
    def from_records(
        cls, kind, records: Iterable[ScoreRecord], manifest: DemoManifest
    ) -> "ScoreTable":
        records = list(records)
        return cls(
            kind=kind,
            manifest=manifest,
            gallery_subject=[r.gallery_subject for r in records],
            probe_subject=[r.probe_subject for r in records],
            gallery_demo=[r.gallery_demo for r in records],
            probe_demo=[r.probe_demo or "" for r in records],
            genuine=[PairType(r.pair_type) is PairType.GENUINE for r in records],
            score=[float(r.score) for r in records],
        )

    def __len__(self) -> int:
        return len(self.score)

    def record(self, i: int) -> ScoreRecord:
        return ScoreRecord(
            str(self.gallery_subject[i]),
            str(self.probe_subject[i]),
            str(self.gallery_demo[i]),
            str(self.probe_demo[i]) or None,
            PairType.GENUINE if self.genuine[i] else PairType.IMPOSTOR,
            float(self.score[i]),
        )

    def __getitem__(self, i: int) -> ScoreRecord:
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.record(i)

    def __iter__(self) -> Iterator[ScoreRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def records(self) -> list[ScoreRecord]:
        return list(self)

    def take(self, index) -> "ScoreTable":
        """Row subset by boolean mask or integer index array."""
        index = np.asarray(index)
        return ScoreTable(
            kind=self.kind,
            manifest=self.manifest,
            gallery_subject=self.gallery_subject[index],
            probe_subject=self.probe_subject[index],
            gallery_demo=self.gallery_demo[index],
            probe_demo=self.probe_demo[index],
            genuine=self.genuine[index],
            score=self.score[index],
        )

    def with_scores(self, scores) -> "ScoreTable":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != self.score.shape:
            raise ValueError("replacement scores must match the table length")
        return ScoreTable(
            kind=self.kind,
            manifest=self.manifest,
            gallery_subject=self.gallery_subject,
            probe_subject=self.probe_subject,
            gallery_demo=self.gallery_demo,
            probe_demo=self.probe_demo,
            genuine=self.genuine,
            score=scores,
        )

    def demo_mask(self, label: str) -> np.ndarray:
        return self.gallery_demo == label

    def same_demo_mask(self) -> np.ndarray:
        return self.gallery_demo == self.probe_demo

    def equals(self, other: "ScoreTable") -> bool:
        return (
            self.kind == other.kind
            and self.manifest == other.manifest
            and all(
                np.array_equal(getattr(self, c), getattr(other, c))
                for c in ("gallery_subject", "probe_subject", "gallery_demo",
                          "probe_demo", "genuine", "score")
            )
        )


def empty_table(kind, manifest: DemoManifest) -> ScoreTable:
    return ScoreTable(kind, manifest, [], [], [], [], [], [])


@dataclass(frozen=True)
class NormalStats:
    mu: float
    sigma: float
    count: int

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.count < 1:
            raise ValueError(f"count must be at least 1, got {self.count}")


def fit_normal_stats(scores: Sequence[float] | np.ndarray) -> NormalStats:
    """Mean and population standard deviation of a score sample.

    The variance divides by the sample size (not ``n - 1``) and is computed
    with a second pass over the centred data in float64.
    """
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptyDistribution("cannot fit a normal model to an empty sample")
    mu = float(np.mean(x))
    dev = x - mu
    # second-pass correction removes the rounding error left in mu
    corr = float(np.mean(dev))
    var = float(np.mean(dev * dev)) - corr * corr
    return NormalStats(mu=mu, sigma=float(np.sqrt(max(var, 0.0))), count=int(x.size))


def _check_sigma(stats: NormalStats):
    if not stats.sigma >= SIGMA_MIN:
        raise DegenerateDistribution(
            f"standard deviation {stats.sigma!r} is below the floor {SIGMA_MIN}"
        )


def standardize(s, stats: NormalStats):
    """Return ``(s - mu) / sigma``; works on scalars and arrays."""
    _check_sigma(stats)
    out = (np.asarray(s, dtype=np.float64) - stats.mu) / stats.sigma
    return float(out) if out.ndim == 0 else out


def normal_cdf(s, stats: NormalStats):
    """Gaussian CDF at ``s``.

    A zero-variance model degenerates to a step: 0 below the mean, 1 above
    it and 0.5 exactly at the mean.
    """
    s = np.asarray(s, dtype=np.float64)
    if stats.sigma < SIGMA_MIN:
        out = np.where(s < stats.mu, 0.0, np.where(s > stats.mu, 1.0, 0.5))
    else:
        out = ndtr((s - stats.mu) / stats.sigma)
    return float(out) if out.ndim == 0 else out
