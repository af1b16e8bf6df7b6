"""Verification error rates, operating-point selection and WERM.

Tie convention: an impostor score counts as a false match only when it is
strictly above the threshold, and a genuine score counts as a false
non-match when it is at or below it.  The two rules partition any score
set exactly at every threshold.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import ScoreTable, TableKind
from .errors import (
    ArityError,
    ConfigurationError,
    EmptyDistribution,
    MissingDemographic,
    NotEnoughDemographics,
    TableKindMismatch,
    TagMismatch,
)


def _scores(values, what):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyDistribution(f"no {what} scores")
    return arr


def fmr(impostor_scores, tau: float) -> float:
    """Fraction of impostor scores strictly above ``tau``."""
    x = _scores(impostor_scores, "impostor")
    return int(np.count_nonzero(x > tau)) / x.size


def fnmr(genuine_scores, tau: float) -> float:
    """Fraction of genuine scores at or below ``tau``."""
    x = _scores(genuine_scores, "genuine")
    return int(np.count_nonzero(x <= tau)) / x.size


class OperatingPoint(NamedTuple):
    tau: float
    fmr: float


def threshold_at_fmr(impostor_scores, target: float = 1e-3) -> OperatingPoint:
    """Lowest observed impostor score whose FMR does not exceed ``target``.

    Any lower distinct score would let more than ``target`` of the
    impostors through.  With heavy ties the achieved FMR can fall well
    below ``target``; it is returned alongside the threshold.
    """
    if not 0 < target < 1:
        raise ConfigurationError(f"FMR target must lie in (0, 1), got {target}")
    x = np.sort(_scores(impostor_scores, "impostor"))
    n = x.size
    if n * target < 1:
        warnings.warn(
            f"{n} impostor scores cannot resolve an FMR of {target:g}; "
            "the achievable operating points are coarse",
            stacklevel=2,
        )
    levels = np.unique(x)
    above = n - np.searchsorted(x, levels, side="right")
    rates = above / n
    # the largest level always has zero impostors above it
    i = int(np.argmax(rates <= target))
    return OperatingPoint(float(levels[i]), float(rates[i]))


class DemoRates(NamedTuple):
    fmr: float
    fnmr: float
    n_impostor: int
    n_genuine: int

    @property
    def tmr(self) -> float:
        return 1.0 - self.fnmr


@dataclass(frozen=True)
class RateSet:
    per_demo: Mapping[str, DemoRates]
    threshold: float

    @property
    def fmrs(self) -> list[float]:
        return [r.fmr for r in self.per_demo.values()]

    @property
    def fnmrs(self) -> list[float]:
        return [r.fnmr for r in self.per_demo.values()]


def compute_rates(table: ScoreTable, tau: float) -> RateSet:
    """Per-demographic FMR/FNMR at one shared threshold.

    Comparisons are attributed to the demographic of their gallery side.
    """
    if table.kind is not TableKind.TEST:
        raise TableKindMismatch(f"rates are computed on test tables, got {table.kind.value}")
    per_demo = {}
    missing = []
    for label in table.manifest.labels:
        m = table.gallery_demo == label
        gen = table.score[m & table.genuine]
        imp = table.score[m & ~table.genuine]
        if gen.size == 0 or imp.size == 0:
            missing.append(label)
            continue
        per_demo[label] = DemoRates(fmr(imp, tau), fnmr(gen, tau), int(imp.size), int(gen.size))
    if missing:
        raise MissingDemographic(missing, "need at least one genuine and one impostor score")
    return RateSet(per_demo, float(tau))


@dataclass(frozen=True)
class WermConfig:
    alpha_weight: float = 0.5
    epsilon: float = 1e-5
    fmr_target: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.alpha_weight <= 1:
            raise ConfigurationError("WERM alpha weight must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ConfigurationError("WERM epsilon must be positive")
        if not 0 < self.fmr_target < 1:
            raise ConfigurationError("FMR target must lie in (0, 1)")


class WermResult(NamedTuple):
    werm: float
    r_fmr: float
    r_fnmr: float
    delta: float


def werm_values(fmrs: Sequence[float], fnmrs: Sequence[float],
                config: WermConfig = WermConfig()) -> WermResult:
    """Worst-case error rate over the geometric mean, FMR and FNMR combined.

    ``epsilon`` is added to the product of the per-demographic rates before
    the n-th root.  ``r_fmr`` and ``r_fnmr`` are the two weighted factors
    divided by the combined value, so ``r_fmr * r_fnmr * werm == 1`` up to
    rounding, and ``delta = r_fmr - r_fnmr``.  A factor of zero (every rate
    of one kind is zero) makes the other ratio infinite.
    """
    fmrs = [float(v) for v in fmrs]
    fnmrs = [float(v) for v in fnmrs]
    if len(fmrs) != len(fnmrs):
        raise ValueError("FMR and FNMR vectors must have the same length")
    n = len(fmrs)
    if n < 2:
        raise NotEnoughDemographics(f"WERM needs at least two demographics, got {n}")
    eps = config.epsilon
    a = max(fmrs) / (math.prod(fmrs) + eps) ** (1.0 / n)
    b = max(fnmrs) / (math.prod(fnmrs) + eps) ** (1.0 / n)
    fa = a ** config.alpha_weight
    fb = b ** (1.0 - config.alpha_weight)
    w = fa * fb
    # fa / w and fb / w, written so an all-zero rate vector gives inf, not a crash
    r_fmr = 1.0 / fb if fb > 0 else math.inf
    r_fnmr = 1.0 / fa if fa > 0 else math.inf
    return WermResult(w, r_fmr, r_fnmr, r_fmr - r_fnmr)


def werm(rates: RateSet, config: WermConfig = WermConfig()) -> WermResult:
    return werm_values(rates.fmrs, rates.fnmrs, config)


@dataclass(frozen=True)
class FairnessReport:
    method: str
    rates: RateSet
    werm: float
    tmr_overall: float
    delta: float
    r_fmr: float
    r_fnmr: float
    achieved_fmr: float = float("nan")

    @property
    def threshold(self) -> float:
        return self.rates.threshold

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "threshold": self.threshold,
            "per_demo": {
                label: {"fmr": r.fmr, "fnmr": r.fnmr, "tmr": r.tmr}
                for label, r in self.rates.per_demo.items()
            },
            "werm": self.werm,
            "r_fmr": self.r_fmr,
            "r_fnmr": self.r_fnmr,
            "delta": self.delta,
            "tmr_overall": self.tmr_overall,
        }

    def csv_row(self) -> dict:
        """Flat row in the TMR (%) / WERM comparison layout."""
        return {
            "method": self.method,
            "TMR": f"{100 * self.tmr_overall:.2f}",
            "WERM": f"{self.werm:.4f}",
        }


def evaluate(table: ScoreTable, method: str = "baseline",
             config: WermConfig = WermConfig()) -> FairnessReport:
    """Threshold on all impostors pooled, then per-demographic rates and WERM."""
    if len(table) == 0:
        raise EmptyDistribution("cannot evaluate an empty score table")
    imp = table.score[~table.genuine]
    gen = table.score[table.genuine]
    op = threshold_at_fmr(imp, config.fmr_target)
    rates = compute_rates(table, op.tau)
    w = werm(rates, config)
    return FairnessReport(
        method=str(method),
        rates=rates,
        werm=w.werm,
        tmr_overall=1.0 - fnmr(gen, op.tau),
        delta=w.delta,
        r_fmr=w.r_fmr,
        r_fnmr=w.r_fnmr,
        achieved_fmr=op.fmr,
    )


SUMMARY_METRICS = ("tmr_overall", "werm", "delta", "r_fmr", "r_fnmr", "threshold")


@dataclass(frozen=True)
class SplitSummary:
    method: str
    n_splits: int
    mean: Mapping[str, float] = field(default_factory=dict)
    std: Mapping[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"method": self.method, "n_splits": self.n_splits,
                "mean": dict(self.mean), "std": dict(self.std)}


def aggregate_splits(reports: Sequence[FairnessReport]) -> SplitSummary:
    """Mean and population standard deviation of each metric across splits."""
    reports = list(reports)
    if len(reports) < 2:
        raise ArityError(f"need at least two split reports, got {len(reports)}")
    tags = {r.method for r in reports}
    if len(tags) != 1:
        raise TagMismatch(f"reports mix method tags {sorted(tags)}")
    mean, std = {}, {}
    for name in SUMMARY_METRICS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    return SplitSummary(reports[0].method, len(reports), mean, std)
