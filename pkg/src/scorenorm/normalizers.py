"""Cohort-based score normalizers.

Nine methods, grouped by the cohort table they are fitted on:

==========  ==========================================  ===============
method      statistics                                  fitted on
==========  ==========================================  ===============
M1          per gallery subject, all cohort scores      gallery_cohort
M1_1        per gallery subject, same-demographic only  gallery_cohort
M1_2        per demographic, pooled over gallery        gallery_cohort
M2          per probe subject, all cohort scores        probe_cohort
M2_1        per probe subject, same-demographic only    probe_cohort
M2_2        per demographic, pooled over probes         probe_cohort
M3          same-demographic cohort impostors           cohort_cohort
M4          logistic (Platt) fit, genuine vs impostor   cohort_cohort
M5          genuine CDF minus impostor survival         cohort_cohort
==========  ==========================================  ===============

Cohort table orientation: in ``gallery_cohort`` tables the test gallery
subject sits in the gallery columns and the cohort sample in the probe
columns; ``probe_cohort`` tables put the test probe in the probe columns
and the cohort sample in the gallery columns.  M3, M4 and M5 resolve the
demographic of a test comparison from its gallery side.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, NamedTuple, Optional, Union

import numpy as np
from scipy.special import expit, ndtr

from .core import (
    SIGMA_MIN,
    DemoManifest,
    NormalStats,
    ScoreRecord,
    ScoreTable,
    TableKind,
    fit_normal_stats,
    standardize,
)
from .errors import (
    ConfigurationError,
    DegenerateDistribution,
    InsufficientCohort,
    MissingDemographic,
    ScoreNormError,
    TableKindMismatch,
    UnknownKey,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class MethodId(str, enum.Enum):
    M1 = "M1"
    M1_1 = "M1_1"
    M1_2 = "M1_2"
    M2 = "M2"
    M2_1 = "M2_1"
    M2_2 = "M2_2"
    M3 = "M3"
    M4 = "M4"
    M5 = "M5"

    @classmethod
    def parse(cls, token: str) -> "MethodId":
        norm = token.strip().upper().replace(".", "_")
        try:
            return cls(norm)
        except ValueError:
            raise ConfigurationError(f"unknown normalization method {token!r}") from None

    @property
    def label(self) -> str:
        return self.value.replace("_", ".")

    @property
    def family(self) -> Optional[str]:
        if self.value.startswith("M1"):
            return "z"
        if self.value.startswith("M2"):
            return "t"
        return None


ZT_METHODS = tuple(m for m in MethodId if m.family is not None)

REQUIRED_KIND = {
    **{m: TableKind.GALLERY_COHORT for m in MethodId if m.family == "z"},
    **{m: TableKind.PROBE_COHORT for m in MethodId if m.family == "t"},
    MethodId.M3: TableKind.COHORT_COHORT,
    MethodId.M4: TableKind.COHORT_COHORT,
    MethodId.M5: TableKind.COHORT_COHORT,
}


class KeyVariant(str, enum.Enum):
    BY_SUBJECT = "by_subject"
    BY_SUBJECT_AND_DEMO = "by_subject_and_demo"
    BY_DEMO = "by_demo"


@dataclass(frozen=True)
class NormKey:
    variant: KeyVariant
    subject: Optional[str] = None
    demo: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", KeyVariant(self.variant))
        need_subject = self.variant in (KeyVariant.BY_SUBJECT, KeyVariant.BY_SUBJECT_AND_DEMO)
        need_demo = self.variant in (KeyVariant.BY_DEMO, KeyVariant.BY_SUBJECT_AND_DEMO)
        if need_subject != (self.subject is not None) or need_demo != (self.demo is not None):
            raise ValueError(f"key fields do not match variant {self.variant.value}: {self}")

    def __str__(self):
        parts = [p for p in (self.subject, self.demo) if p is not None]
        return f"{self.variant.value}({', '.join(parts)})"


def _variant_for(method: MethodId) -> KeyVariant:
    suffix = method.value[2:]
    return {
        "": KeyVariant.BY_SUBJECT,
        "_1": KeyVariant.BY_SUBJECT_AND_DEMO,
        "_2": KeyVariant.BY_DEMO,
    }[suffix]


@dataclass(frozen=True)
class FitConfig:
    min_cohort_count: int = 10
    platt_l2: float = 1e-4
    max_iterations: int = 1000
    grad_tol: float = 1e-9

    def __post_init__(self):
        if self.min_cohort_count < 1:
            raise ConfigurationError("min_cohort_count must be at least 1")
        if not self.platt_l2 > 0:
            raise ConfigurationError("the Platt L2 penalty must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1")


def _freeze(mapping) -> Mapping:
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True)
class ZTNormModel:
    method: MethodId
    stats_by_key: Mapping[NormKey, NormalStats]
    anchor_side: str
    manifest: DemoManifest
    diagnostics: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "stats_by_key", _freeze(self.stats_by_key))
        object.__setattr__(self, "diagnostics", _freeze(self.diagnostics))


@dataclass(frozen=True)
class DemoStatsModel:
    impostor_stats: Mapping[str, NormalStats]
    manifest: DemoManifest
    diagnostics: Mapping = field(default_factory=dict)
    method = MethodId.M3

    def __post_init__(self):
        object.__setattr__(self, "impostor_stats", _freeze(self.impostor_stats))
        object.__setattr__(self, "diagnostics", _freeze(self.diagnostics))


class PlattFit(NamedTuple):
    objective: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class PlattModel:
    params_by_demo: Mapping[str, tuple[float, float]]
    fit_diagnostics: Mapping[str, PlattFit]
    manifest: DemoManifest
    diagnostics: Mapping = field(default_factory=dict)
    method = MethodId.M4

    def __post_init__(self):
        object.__setattr__(self, "params_by_demo", _freeze(self.params_by_demo))
        object.__setattr__(self, "fit_diagnostics", _freeze(self.fit_diagnostics))
        object.__setattr__(self, "diagnostics", _freeze(self.diagnostics))

    @property
    def converged(self) -> bool:
        return all(d.converged for d in self.fit_diagnostics.values())


@dataclass(frozen=True)
class BimodalModel:
    genuine_stats: Mapping[str, NormalStats]
    impostor_stats: Mapping[str, NormalStats]
    manifest: DemoManifest
    diagnostics: Mapping = field(default_factory=dict)
    method = MethodId.M5

    def __post_init__(self):
        if set(self.genuine_stats) != set(self.impostor_stats):
            raise ValueError("genuine and impostor statistics must cover the same labels")
        object.__setattr__(self, "genuine_stats", _freeze(self.genuine_stats))
        object.__setattr__(self, "impostor_stats", _freeze(self.impostor_stats))
        object.__setattr__(self, "diagnostics", _freeze(self.diagnostics))


Model = Union[ZTNormModel, DemoStatsModel, PlattModel, BimodalModel]


# -- fitting -----------------------------------------------------------------


def _require_kind(table: ScoreTable, kind: TableKind, what: str):
    if table.kind is not kind:
        raise TableKindMismatch(f"{what} needs a {kind.value} table, got {table.kind.value}")


def _grouped_stats(values: np.ndarray, groups: np.ndarray, n_groups: int):
    order = np.argsort(groups, kind="stable")
    bounds = np.searchsorted(groups[order], np.arange(n_groups + 1))
    return [
        fit_normal_stats(values[order[lo:hi]]) if hi > lo else None
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]


def fit_ztnorm(table: ScoreTable, method, config: FitConfig = FitConfig()) -> ZTNormModel:
    """Fit one of the identity-based (Z-norm / T-norm) methods.

    M1 and M2 pool every cohort comparison of an anchor subject.  The
    ``.1`` variants keep only cohort samples sharing the anchor's
    demographic; the ``.2`` variants pool those same-demographic scores
    over all anchors of a demographic.
    """
    method = MethodId(method)
    if method.family is None:
        raise ConfigurationError(f"{method.label} is not a Z-norm/T-norm method")
    _require_kind(table, REQUIRED_KIND[method], method.label)
    if method.family == "z":
        subj, demo, cohort_demo, side = (
            table.gallery_subject, table.gallery_demo, table.probe_demo, "gallery")
    else:
        subj, demo, cohort_demo, side = (
            table.probe_subject, table.probe_demo, table.gallery_demo, "probe")
    variant = _variant_for(method)
    same = (demo == cohort_demo) & (demo != "")
    n_cross = int(np.count_nonzero(~same))

    if variant is KeyVariant.BY_SUBJECT:
        anchors, inv = np.unique(subj, return_inverse=True)
        keys = [NormKey(variant, subject=str(a)) for a in anchors]
        keep = np.ones(len(table), dtype=bool)
    elif variant is KeyVariant.BY_SUBJECT_AND_DEMO:
        pair = np.array([f"{s}\x1f{d}" for s, d in zip(subj, demo)], dtype=object)
        anchors, inv = np.unique(pair, return_inverse=True)
        keys = []
        for a in anchors:
            s, d = str(a).split("\x1f", 1)
            keys.append(NormKey(variant, subject=s, demo=d) if d else None)
        keep = same
    else:
        anchors, inv = np.unique(demo, return_inverse=True)
        keys = [NormKey(variant, demo=str(a)) if a else None for a in anchors]
        keep = same

    counts = np.bincount(inv[keep], minlength=len(keys))
    for k, key in enumerate(keys):
        if key is not None and counts[k] < config.min_cohort_count:
            raise InsufficientCohort(str(key), int(counts[k]), config.min_cohort_count)
    stats = _grouped_stats(table.score[keep], inv[keep], len(keys))
    stats_by_key = {key: st for key, st in zip(keys, stats) if key is not None}
    diagnostics = {
        "records": len(table),
        "cross_demographic_excluded": 0 if variant is KeyVariant.BY_SUBJECT else n_cross,
        "min_cohort_count": config.min_cohort_count,
    }
    return ZTNormModel(method, stats_by_key, side, table.manifest, diagnostics)


def _same_demo_split(table: ScoreTable):
    same = table.same_demo_mask()
    n_cross = int(np.count_nonzero(~same))
    if n_cross:
        log.debug("ignoring %d cross-demographic cohort records", n_cross)
    out = {}
    for label in table.manifest.labels:
        m = same & (table.gallery_demo == label)
        out[label] = (table.score[m & table.genuine], table.score[m & ~table.genuine])
    return out, n_cross


def fit_impostor_norm(table: ScoreTable) -> DemoStatsModel:
    """Per-demographic statistics of same-demographic cohort impostor scores (M3)."""
    _require_kind(table, TableKind.COHORT_COHORT, "M3")
    split, n_cross = _same_demo_split(table)
    missing = [lab for lab, (_, imp) in split.items() if imp.size == 0]
    if missing:
        raise MissingDemographic(missing, "no same-demographic impostor cohort scores")
    stats = {lab: fit_normal_stats(imp) for lab, (_, imp) in split.items()}
    diag = {"cross_demographic_excluded": n_cross,
            "genuine_excluded": int(np.count_nonzero(table.genuine))}
    return DemoStatsModel(stats, table.manifest, diag)


def _both_sides(table: ScoreTable, what: str):
    _require_kind(table, TableKind.COHORT_COHORT, what)
    split, n_cross = _same_demo_split(table)
    missing = [lab for lab, (gen, imp) in split.items() if gen.size == 0 or imp.size == 0]
    if missing:
        raise MissingDemographic(missing, "genuine and impostor cohort scores are both required")
    return split, n_cross


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def fit_logistic(genuine, impostor, config: FitConfig = FitConfig()):
    """Class-balanced, L2-regularized logistic fit of ``P(genuine | s)``.

    Maximizes ``mean(log sig(a*s+b))`` over genuine scores plus
    ``mean(log(1 - sig(a*s+b)))`` over impostor scores minus
    ``l2 * (a**2 + b**2)`` by damped Newton ascent from ``a = b = 0``.

    Returns ``(alpha, beta, PlattFit)``.
    """
    pos = np.asarray(genuine, dtype=np.float64)
    neg = np.asarray(impostor, dtype=np.float64)
    wp, wn = 1.0 / pos.size, 1.0 / neg.size
    lam = config.platt_l2

    def objective(a, b):
        return (wp * np.sum(_log_sigmoid(a * pos + b))
                + wn * np.sum(_log_sigmoid(-(a * neg + b)))
                - lam * (a * a + b * b))

    a = b = 0.0
    f = objective(a, b)
    converged = False
    it = 0
    for it in range(config.max_iterations + 1):
        zp = a * pos + b
        zn = a * neg + b
        rp = expit(-zp)      # 1 - p on genuine
        pn = expit(zn)       # p on impostor
        ga = wp * np.dot(rp, pos) - wn * np.dot(pn, neg) - 2 * lam * a
        gb = wp * np.sum(rp) - wn * np.sum(pn) - 2 * lam * b
        if math.hypot(ga, gb) <= config.grad_tol:
            converged = True
            break
        if it == config.max_iterations:
            break
        hp = wp * rp * (1.0 - rp)
        hn = wn * pn * (1.0 - pn)
        haa = np.dot(hp, pos * pos) + np.dot(hn, neg * neg) + 2 * lam
        hab = np.dot(hp, pos) + np.dot(hn, neg)
        hbb = np.sum(hp) + np.sum(hn) + 2 * lam
        det = haa * hbb - hab * hab
        da = (hbb * ga - hab * gb) / det
        db = (haa * gb - hab * ga) / det
        slope = ga * da + gb * db
        t = 1.0
        for _ in range(60):
            f_new = objective(a + t * da, b + t * db)
            if f_new >= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no ascent possible at float resolution
            converged = math.hypot(ga, gb) <= 1e3 * config.grad_tol
            break
        a, b, f = a + t * da, b + t * db, f_new
    return float(a), float(b), PlattFit(float(objective(a, b)), it, converged)


def fit_platt(table: ScoreTable, config: FitConfig = FitConfig()) -> PlattModel:
    """Per-demographic Platt scaling (M4) on same-demographic cohort scores.

    Non-convergence is not an error here; inspect ``model.converged``.
    """
    split, n_cross = _both_sides(table, "M4")
    params, fits = {}, {}
    for label, (gen, imp) in split.items():
        alpha, beta, fit = fit_logistic(gen, imp, config)
        if not fit.converged:
            log.warning("Platt fit for %s did not converge after %d iterations",
                        label, fit.iterations)
        params[label] = (alpha, beta)
        fits[label] = fit
    diag = {"cross_demographic_excluded": n_cross, "l2": config.platt_l2}
    return PlattModel(params, fits, table.manifest, diag)


def fit_bimodal_cdf(table: ScoreTable) -> BimodalModel:
    split, n_cross = _both_sides(table, "M5")
    gen = {lab: fit_normal_stats(g) for lab, (g, _) in split.items()}
    imp = {lab: fit_normal_stats(i) for lab, (_, i) in split.items()}
    return BimodalModel(gen, imp, table.manifest, {"cross_demographic_excluded": n_cross})


def fit_model(method, *, gallery_cohort: ScoreTable = None, probe_cohort: ScoreTable = None,
              cohort: ScoreTable = None, config: FitConfig = FitConfig()) -> Model:
    """Fit ``method`` from whichever cohort table it needs."""
    method = MethodId(method)
    kind = REQUIRED_KIND[method]
    table = {
        TableKind.GALLERY_COHORT: gallery_cohort,
        TableKind.PROBE_COHORT: probe_cohort,
        TableKind.COHORT_COHORT: cohort,
    }[kind]
    if table is None:
        raise ConfigurationError(f"method {method.label} requires a {kind.value} table")
    if method.family is not None:
        return fit_ztnorm(table, method, config)
    if method is MethodId.M3:
        return fit_impostor_norm(table)
    if method is MethodId.M4:
        return fit_platt(table, config)
    return fit_bimodal_cdf(table)


# -- application -------------------------------------------------------------


def resolve_key(model: Model, gallery_subject, probe_subject, gallery_demo, probe_demo):
    """Normalization key for one comparison under ``model``."""
    if isinstance(model, ZTNormModel):
        if model.anchor_side == "gallery":
            subject, demo = gallery_subject, gallery_demo
        else:
            subject, demo = probe_subject, probe_demo
        variant = _variant_for(model.method)
        if variant is not KeyVariant.BY_SUBJECT and not demo:
            raise UnknownKey(f"{model.method.label} needs the {model.anchor_side} demographic")
        if variant is KeyVariant.BY_SUBJECT:
            return NormKey(variant, subject=subject)
        if variant is KeyVariant.BY_SUBJECT_AND_DEMO:
            return NormKey(variant, subject=subject, demo=demo)
        return NormKey(variant, demo=demo)
    return gallery_demo


def _lookup(mapping, key, model):
    try:
        return mapping[key]
    except KeyError:
        raise UnknownKey(f"{model.method.label} has no statistics for {key}") from None


def _map_scores(model: Model, key, s):
    if isinstance(model, ZTNormModel):
        return standardize(s, _lookup(model.stats_by_key, key, model))
    if isinstance(model, DemoStatsModel):
        return standardize(s, _lookup(model.impostor_stats, key, model))
    if isinstance(model, PlattModel):
        alpha, beta = _lookup(model.params_by_demo, key, model)
        out = expit(alpha * np.asarray(s, dtype=np.float64) + beta)
        return float(out) if out.ndim == 0 else out
    if isinstance(model, BimodalModel):
        g = _lookup(model.genuine_stats, key, model)
        i = _lookup(model.impostor_stats, key, model)
        if g.sigma < SIGMA_MIN or i.sigma < SIGMA_MIN:
            raise DegenerateDistribution(f"M5 statistics for {key} have zero spread")
        s = np.asarray(s, dtype=np.float64)
        # CDF_gen(s) - 1 + CDF_imp(s), written to cancel exactly at symmetric points
        out = ndtr((s - g.mu) / g.sigma) - ndtr((i.mu - s) / i.sigma)
        return float(out) if out.ndim == 0 else out
    raise TypeError(f"not a fitted normalizer: {type(model).__name__}")


def apply(model: Model, record: ScoreRecord) -> float:
    key = resolve_key(model, record.gallery_subject, record.probe_subject,
                      record.gallery_demo, record.probe_demo or "")
    return float(_map_scores(model, key, record.score))


class RecordFailure(NamedTuple):
    index: int
    error: ScoreNormError


def transform_scores(model: Model, table: ScoreTable):
    """Vectorized ``apply`` over a table of any kind.

    Returns ``(scores, failures)``; failed rows hold NaN.
    """
    n = len(table)
    out = np.full(n, np.nan)
    failures: list[RecordFailure] = []
    if n == 0:
        return out, failures
    if isinstance(model, ZTNormModel):
        if model.anchor_side == "gallery":
            subj, demo = table.gallery_subject, table.gallery_demo
        else:
            subj, demo = table.probe_subject, table.probe_demo
        cols = np.array([f"{s}\x1f{d}" for s, d in zip(subj, demo)], dtype=object)
    else:
        cols = table.gallery_demo
    uniq, inv = np.unique(cols, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
    for k, u in enumerate(uniq):
        rows = order[bounds[k]:bounds[k + 1]]
        i0 = int(rows[0])
        try:
            key = resolve_key(model, table.gallery_subject[i0], table.probe_subject[i0],
                              table.gallery_demo[i0], table.probe_demo[i0])
            out[rows] = _map_scores(model, key, table.score[rows])
        except ScoreNormError as exc:
            failures.extend(RecordFailure(int(r), exc) for r in rows)
    failures.sort(key=lambda f: f.index)
    return out, failures


class BatchNormalizationError(ScoreNormError):
    def __init__(self, failures: list[RecordFailure]):
        self.failures = failures
        first = failures[0]
        super().__init__(
            f"{len(failures)} record(s) could not be normalized; first at row "
            f"{first.index}: {first.error}"
        )
        self.exit_code = getattr(first.error, "exit_code", 2)


def normalize_table(model: Model, table: ScoreTable, strict: bool = True) -> ScoreTable:
    """Replace every test score by its normalized value, preserving order.

    In strict mode any failing record aborts the batch with
    :class:`BatchNormalizationError`; otherwise failing records are dropped
    and logged.
    """
    _require_kind(table, TableKind.TEST, "normalize_table")
    scores, failures = transform_scores(model, table)
    if not failures:
        return table.with_scores(scores)
    if strict:
        raise BatchNormalizationError(failures)
    for f in failures:
        log.warning("dropping record %d: %s", f.index, f.error)
    keep = np.ones(len(table), dtype=bool)
    keep[[f.index for f in failures]] = False
    return table.take(keep).with_scores(scores[keep])


# -- serialization -----------------------------------------------------------


def _stats_json(st: NormalStats) -> dict:
    return {"mu": st.mu, "sigma": st.sigma, "count": st.count}


def _jsonable(value):
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, PlattFit):
        return value._asdict()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def model_to_json(model: Model) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "method": model.method.value,
        "manifest": model.manifest.to_json(),
        "keys": [],
    }
    if isinstance(model, ZTNormModel):
        doc["anchor_side"] = model.anchor_side
        for key, st in model.stats_by_key.items():
            entry = {"variant": key.variant.value}
            if key.subject is not None:
                entry["subject"] = key.subject
            if key.demo is not None:
                entry["demo"] = key.demo
            doc["keys"].append({**entry, **_stats_json(st)})
    elif isinstance(model, DemoStatsModel):
        for demo, st in model.impostor_stats.items():
            doc["keys"].append({"variant": "by_demo", "demo": demo, **_stats_json(st)})
    elif isinstance(model, BimodalModel):
        for side, stats in (("genuine", model.genuine_stats), ("impostor", model.impostor_stats)):
            for demo, st in stats.items():
                doc["keys"].append(
                    {"variant": "by_demo", "demo": demo, "side": side, **_stats_json(st)})
    elif isinstance(model, PlattModel):
        doc["platt"] = [
            {"demo": demo, "alpha": a, "beta": b} for demo, (a, b) in model.params_by_demo.items()
        ]
    diagnostics = dict(model.diagnostics)
    if isinstance(model, PlattModel):
        diagnostics["fits"] = dict(model.fit_diagnostics)
    doc["diagnostics"] = _jsonable(diagnostics)
    return doc


def _stats_from(entry) -> NormalStats:
    return NormalStats(float(entry["mu"]), float(entry["sigma"]), int(entry["count"]))


def model_from_json(doc: dict) -> Model:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {version!r}")
    method = MethodId(doc["method"])
    manifest = DemoManifest.from_json(doc["manifest"])
    diagnostics = dict(doc.get("diagnostics", {}))
    keys = doc.get("keys", [])
    if method.family is not None:
        stats = {
            NormKey(e["variant"], e.get("subject"), e.get("demo")): _stats_from(e) for e in keys
        }
        return ZTNormModel(method, stats, doc["anchor_side"], manifest, diagnostics)
    if method is MethodId.M3:
        return DemoStatsModel({e["demo"]: _stats_from(e) for e in keys}, manifest, diagnostics)
    if method is MethodId.M5:
        gen = {e["demo"]: _stats_from(e) for e in keys if e["side"] == "genuine"}
        imp = {e["demo"]: _stats_from(e) for e in keys if e["side"] == "impostor"}
        return BimodalModel(gen, imp, manifest, diagnostics)
    fits_doc = diagnostics.pop("fits", {})
    fits = {demo: PlattFit(float(f["objective"]), int(f["iterations"]), bool(f["converged"]))
            for demo, f in fits_doc.items()}
    params = {p["demo"]: (float(p["alpha"]), float(p["beta"])) for p in doc["platt"]}
    return PlattModel(params, fits, manifest, diagnostics)
