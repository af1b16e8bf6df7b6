"""Score-table I/O and evaluation-protocol construction.

File formats
------------
Score CSV (UTF-8, header required)::

    kind,pair_type,gallery_subject,probe_subject,gallery_demo,probe_demo,score

``probe_demo`` may be empty.  Dataset manifest (JSON)::

    {"axis": "ethnicity", "labels": [...],
     "subjects": {"<id>": {"demo": "...", "samples": [...], "secondary": "..."}}}

``secondary`` is optional; when present, impostor pairs must agree on it.
Pair list CSV::

    pair_type,subject_a,sample_a,subject_b,sample_b,demo

Replicate seeds are derived with SplitMix64: split ``i`` of base seed ``s``
uses ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the
SplitMix64 finalizer (shifts 30/27/31, multipliers 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import IO, Iterable, NamedTuple, Optional, Union

import numpy as np

from .core import AXES, DemoManifest, PairType, ScoreTable, TableKind
from .errors import (
    ArityError,
    ConsistencyError,
    InsufficientPairs,
    InsufficientRecords,
    ManifestViolation,
    ParseError,
    SpecError,
    TableKindMismatch,
)

log = logging.getLogger(__name__)

SCORE_COLUMNS = ("kind", "pair_type", "gallery_subject", "probe_subject",
                 "gallery_demo", "probe_demo", "score")
PAIR_COLUMNS = ("pair_type", "subject_a", "sample_a", "subject_b", "sample_b", "demo")

Source = Union[str, os.PathLike, bytes, IO]


def _open_text(source: Source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8-sig", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8-sig"), newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def _check_header(header, expected, what):
    if header is None:
        raise ParseError(f"empty {what} file", line=1)
    header = [h.strip() for h in header]
    if tuple(header) != expected:
        raise ParseError(f"{what} header must be {','.join(expected)}, got {','.join(header)}",
                         line=1)


# -- score tables ----------------------------------------------------------------


def parse_score_table(source: Source, expected_kind=None, manifest: DemoManifest = None,
                      axis: str = "ethnicity") -> ScoreTable:
    """Read and validate a score CSV.

    Without a ``manifest`` the label set is taken from the file (sorted) on
    the given ``axis``; with one, unknown labels raise ManifestViolation.
    """
    expected_kind = TableKind(expected_kind) if expected_kind is not None else None
    labels = set(manifest.labels) if manifest is not None else None
    cols = {c: [] for c in SCORE_COLUMNS[1:]}
    kind = expected_kind
    handle = _open_text(source)
    try:
        reader = csv.reader(handle)
        _check_header(next(reader, None), SCORE_COLUMNS, "score")
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(SCORE_COLUMNS):
                raise ParseError(f"expected {len(SCORE_COLUMNS)} fields, got {len(row)}", line)
            k, ptype, gsub, psub, gdemo, pdemo, score = (f.strip() for f in row)
            try:
                row_kind = TableKind(k)
            except ValueError:
                raise ParseError(f"unknown table kind {k!r}", line) from None
            if kind is None:
                kind = row_kind
            elif row_kind is not kind and expected_kind is not None:
                raise TableKindMismatch(
                    f"line {line}: expected a {kind.value} table, found a {k!r} row")
            elif row_kind is not kind:
                raise ParseError(f"row kind {k!r} does not match table kind {kind.value!r}", line)
            try:
                ptype = PairType(ptype)
            except ValueError:
                raise ParseError(f"unknown pair type {ptype!r}", line) from None
            if not gsub or not psub:
                raise ParseError("subject ids must be non-empty", line)
            if not gdemo:
                raise ParseError("gallery_demo must be non-empty", line)
            try:
                value = float(score)
            except ValueError:
                raise ParseError(f"score {score!r} is not a number", line) from None
            if not math.isfinite(value):
                raise ParseError(f"score {score!r} is not finite", line)
            genuine = ptype is PairType.GENUINE
            if genuine != (gsub == psub):
                raise ConsistencyError(
                    f"{ptype.value} pair with subjects {gsub!r} and {psub!r}", line)
            if genuine and kind in (TableKind.GALLERY_COHORT, TableKind.PROBE_COHORT):
                raise ConsistencyError(f"{kind.value} tables hold impostor records only", line)
            if labels is not None:
                for d in (gdemo, pdemo):
                    if d and d not in labels:
                        raise ManifestViolation(f"unknown demographic {d!r}", line)
            cols["pair_type"].append(genuine)
            cols["gallery_subject"].append(gsub)
            cols["probe_subject"].append(psub)
            cols["gallery_demo"].append(gdemo)
            cols["probe_demo"].append(pdemo)
            cols["score"].append(value)
    finally:
        if isinstance(source, (str, os.PathLike)):
            handle.close()
    if kind is None:
        raise ParseError("score file has no rows and no expected kind was given")
    if manifest is None:
        found = set(cols["gallery_demo"]) | {d for d in cols["probe_demo"] if d}
        if not found:
            raise ParseError("score file has no rows to infer demographics from")
        manifest = DemoManifest(axis, tuple(sorted(found)))
    return ScoreTable(
        kind=kind,
        manifest=manifest,
        gallery_subject=cols["gallery_subject"],
        probe_subject=cols["probe_subject"],
        gallery_demo=cols["gallery_demo"],
        probe_demo=cols["probe_demo"],
        genuine=cols["pair_type"],
        score=cols["score"],
    )


def write_score_table(table: ScoreTable, dest: Union[str, os.PathLike, IO]) -> None:
    """Write a table as score CSV; floats use the shortest round-trip repr."""
    own = isinstance(dest, (str, os.PathLike))
    handle = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        kind = table.kind.value
        for gs, ps, gd, pd, gen, s in zip(table.gallery_subject, table.probe_subject,
                                          table.gallery_demo, table.probe_demo,
                                          table.genuine, table.score):
            w.writerow((kind, "genuine" if gen else "impostor", gs, ps, gd, pd, repr(float(s))))
    finally:
        if own:
            handle.close()


def score_table_to_bytes(table: ScoreTable) -> bytes:
    buf = io.StringIO()
    write_score_table(table, buf)
    return buf.getvalue().encode("utf-8")


# -- dataset manifests -------------------------------------------------------------


class SubjectEntry(NamedTuple):
    demo: str
    samples: tuple[str, ...]
    secondary: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    axis: str
    labels: tuple[str, ...]
    subjects: dict

    def __post_init__(self):
        if self.axis not in AXES:
            raise SpecError(f"unknown demographic axis {self.axis!r}")
        object.__setattr__(self, "labels", tuple(self.labels))
        for sid, entry in self.subjects.items():
            if entry.demo not in self.labels:
                raise ManifestViolation(f"subject {sid!r} has unknown demographic {entry.demo!r}")
            if not entry.samples:
                raise ManifestViolation(f"subject {sid!r} has no samples")

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        subjects = {
            str(sid): SubjectEntry(e["demo"], tuple(str(s) for s in e["samples"]),
                                   e.get("secondary"))
            for sid, e in doc["subjects"].items()
        }
        return cls(doc["axis"], tuple(doc["labels"]), subjects)

    def to_json(self) -> dict:
        subjects = {}
        for sid, e in self.subjects.items():
            entry = {"demo": e.demo, "samples": list(e.samples)}
            if e.secondary is not None:
                entry["secondary"] = e.secondary
            subjects[sid] = entry
        return {"axis": self.axis, "labels": list(self.labels), "subjects": subjects}

    @property
    def demo_manifest(self) -> DemoManifest:
        return DemoManifest(self.axis, self.labels)


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        return DatasetManifest.from_json(json.load(fh))


# -- balanced subsampling ----------------------------------------------------------


@dataclass(frozen=True)
class SamplingSpec:
    per_demo_impostor_count: int
    quantile_bins: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.per_demo_impostor_count < 1:
            raise SpecError("per-demographic impostor count must be at least 1")
        if self.quantile_bins < 1:
            raise SpecError("quantile_bins must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must be a 64-bit unsigned integer")


def quantile_bins(scores: np.ndarray, bins: int) -> np.ndarray:
    """Bin index of every score under an equal-mass partition of ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    edges = np.quantile(scores, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, scores, side="right")


def apportion(total: int, masses: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``masses``."""
    masses = np.asarray(masses, dtype=np.float64)
    raw = total * masses / masses.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _redistribute(quota: np.ndarray, avail: np.ndarray) -> tuple[np.ndarray, int]:
    quota = quota.copy()
    moved = 0
    nbins = len(quota)
    for b in range(nbins):
        excess = int(quota[b] - avail[b])
        if excess <= 0:
            continue
        quota[b] = avail[b]
        moved += excess
        for dist in range(1, nbins):
            for nb in (b - dist, b + dist):
                if 0 <= nb < nbins and excess:
                    room = int(avail[nb] - quota[nb])
                    take = min(room, excess)
                    if take > 0:
                        quota[nb] += take
                        excess -= take
            if not excess:
                break
    return quota, moved


def subsample_balanced(table: ScoreTable, spec: SamplingSpec) -> ScoreTable:
    """Keep all genuine rows and exactly ``spec.per_demo_impostor_count``
    impostor rows per demographic.

    Impostors are stratified by equal-mass score bins computed on the
    pooled impostor set, so each demographic's sample follows the pooled
    score distribution.  Rows keep their original order.
    """
    imp_idx = np.flatnonzero(~table.genuine)
    pooled = table.score[imp_idx]
    count = spec.per_demo_impostor_count
    if pooled.size == 0:
        raise InsufficientRecords("table has no impostor records")
    bins = quantile_bins(pooled, spec.quantile_bins)
    masses = np.bincount(bins, minlength=spec.quantile_bins) / pooled.size
    demos = table.gallery_demo[imp_idx]
    rng = np.random.default_rng(spec.seed)
    keep = table.genuine.copy()
    for label in table.manifest.labels:
        rows = imp_idx[demos == label]
        row_bins = bins[demos == label]
        if rows.size < count:
            raise InsufficientRecords(
                f"demographic {label!r} has {rows.size} impostor records, {count} requested")
        avail = np.bincount(row_bins, minlength=spec.quantile_bins)
        quota, moved = _redistribute(apportion(count, masses), avail)
        if moved:
            log.info("%s: %d impostor draws moved to neighbouring bins", label, moved)
        for b in range(spec.quantile_bins):
            if quota[b] == 0:
                continue
            members = rows[row_bins == b]
            keep[rng.choice(members, size=int(quota[b]), replace=False)] = True
    return table.take(keep)


# -- random pair protocols ---------------------------------------------------------


class Pair(NamedTuple):
    pair_type: PairType
    subject_a: str
    sample_a: str
    subject_b: str
    sample_b: str
    demo: str


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    return splitmix64(seed + (index + 1) * _GOLDEN)


def _unrank_pair(k: int, n: int) -> tuple[int, int]:
    """``k``-th pair ``(i, j)``, ``i < j``, in row-major order over ``n`` items."""
    total = n * (n - 1) // 2
    # count pairs from the end to get a closed form in integers
    r = total - 1 - k
    m = (math.isqrt(8 * r + 1) - 1) // 2
    i = n - 2 - m
    j = n - 1 - (r - m * (m + 1) // 2)
    return i, j


_ENUMERATE_LIMIT = 1_000_000


def _sample_genuine(rng, label, subjects, count) -> list[Pair]:
    sizes = np.array([len(s.samples) for _, s in subjects], dtype=np.int64)
    per_subject = sizes * (sizes - 1) // 2
    universe = int(per_subject.sum())
    if count > universe:
        raise InsufficientPairs(label, count, universe, "genuine")
    if count == 0:
        return []
    picks = np.sort(rng.choice(universe, size=count, replace=False))
    starts = np.concatenate(([0], np.cumsum(per_subject)))
    out = []
    for k in picks:
        s = int(np.searchsorted(starts, k, side="right") - 1)
        sid, entry = subjects[s]
        i, j = _unrank_pair(int(k - starts[s]), len(entry.samples))
        out.append(Pair(PairType.GENUINE, sid, entry.samples[i], sid, entry.samples[j], label))
    return out


def _sample_impostor(rng, label, subjects, count) -> list[Pair]:
    cells: dict = {}
    for sid, entry in subjects:
        cells.setdefault(entry.secondary, []).extend((sid, smp) for smp in entry.samples)
    cell_list = [cells[c] for c in sorted(cells, key=lambda c: (c is not None, c or ""))]
    sizes = np.array([len(c) for c in cell_list], dtype=np.int64)
    cell_pairs = sizes * (sizes - 1) // 2
    same_subject = sum(len(e.samples) * (len(e.samples) - 1) // 2 for _, e in subjects)
    universe = int(cell_pairs.sum())
    valid = universe - same_subject
    if count > valid:
        raise InsufficientPairs(label, count, valid, "impostor")
    if count == 0:
        return []
    starts = np.concatenate(([0], np.cumsum(cell_pairs)))

    def decode(k):
        c = int(np.searchsorted(starts, k, side="right") - 1)
        i, j = _unrank_pair(int(k - starts[c]), len(cell_list[c]))
        return cell_list[c][i], cell_list[c][j]

    if universe <= _ENUMERATE_LIMIT:
        candidates = []
        for c, members in enumerate(cell_list):
            owner = np.array([sid for sid, _ in members], dtype=object)
            i, j = np.triu_indices(len(members), k=1)
            candidates.append(starts[c] + np.flatnonzero(owner[i] != owner[j]))
        candidates = np.concatenate(candidates)
        picks = np.sort(rng.choice(candidates, size=count, replace=False)).tolist()
    else:
        chosen: set = set()
        while len(chosen) < count:
            for k in rng.integers(0, universe, size=2 * (count - len(chosen))):
                k = int(k)
                if k in chosen:
                    continue
                a, b = decode(k)
                if a[0] != b[0]:
                    chosen.add(k)
                    if len(chosen) == count:
                        break
        picks = sorted(chosen)
    out = []
    for k in picks:
        (sa, xa), (sb, xb) = decode(k)
        out.append(Pair(PairType.IMPOSTOR, sa, xa, sb, xb, label))
    return out


def generate_random_pairs(manifest: DatasetManifest, genuine_per_demo: int,
                          impostor_per_demo: int, seed: int) -> list[Pair]:
    """Uniformly drawn, duplicate-free genuine and same-demographic impostor pairs.

    Pairs are unordered; within a demographic they are emitted genuine
    first, each block in a fixed canonical order.
    """
    if genuine_per_demo < 0 or impostor_per_demo < 0:
        raise SpecError("pair counts must be non-negative")
    rng = np.random.default_rng(seed)
    pairs: list[Pair] = []
    for label in manifest.labels:
        subjects = sorted((sid, e) for sid, e in manifest.subjects.items() if e.demo == label)
        pairs.extend(_sample_genuine(rng, label, subjects, genuine_per_demo))
        pairs.extend(_sample_impostor(rng, label, subjects, impostor_per_demo))
    return pairs


def split_replicates(manifest: DatasetManifest, k: int, genuine_per_demo: int,
                     impostor_per_demo: int, seed: int) -> list[list[Pair]]:
    if k < 1:
        raise ArityError(f"number of splits must be at least 1, got {k}")
    return [
        generate_random_pairs(manifest, genuine_per_demo, impostor_per_demo, derive_seed(seed, i))
        for i in range(k)
    ]


def write_pairs(pairs: Iterable[Pair], dest) -> None:
    own = isinstance(dest, (str, os.PathLike))
    handle = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for p in pairs:
            w.writerow((PairType(p.pair_type).value, *p[1:]))
    finally:
        if own:
            handle.close()


def read_pairs(source: Source) -> list[Pair]:
    handle = _open_text(source)
    out = []
    try:
        reader = csv.reader(handle)
        _check_header(next(reader, None), PAIR_COLUMNS, "pair list")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(PAIR_COLUMNS):
                raise ParseError(f"expected {len(PAIR_COLUMNS)} fields, got {len(row)}", line)
            ptype, sa, xa, sb, xb, demo = (f.strip() for f in row)
            try:
                ptype = PairType(ptype)
            except ValueError:
                raise ParseError(f"unknown pair type {ptype!r}", line) from None
            if (ptype is PairType.GENUINE) != (sa == sb):
                raise ConsistencyError(f"{ptype.value} pair with subjects {sa!r} and {sb!r}", line)
            if ptype is PairType.GENUINE and xa == xb:
                raise ConsistencyError("genuine pair repeats the same sample", line)
            out.append(Pair(ptype, sa, xa, sb, xb, demo))
    finally:
        if isinstance(source, (str, os.PathLike)):
            handle.close()
    return out
