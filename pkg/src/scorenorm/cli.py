"""Command-line front end.

Exit codes: 0 success, 1 validation/configuration error, 2 data error,
3 numerical failure (Platt non-convergence under --strict, degenerate
statistics).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .core import TableKind
from .errors import ConfigurationError, ConvergenceError, ScoreNormError
from .metrics import WermConfig, aggregate_splits, evaluate
from .normalizers import (
    REQUIRED_KIND,
    FitConfig,
    MethodId,
    PlattModel,
    fit_model,
    model_to_json,
    normalize_table,
    transform_scores,
)
from .protocols import (
    SamplingSpec,
    load_manifest,
    parse_score_table,
    split_replicates,
    generate_random_pairs,
    subsample_balanced,
    write_pairs,
    write_score_table,
)
from .synthetic import SyntheticSpec, dataset_manifest, default_spec, generate

log = logging.getLogger("scorenorm")

COHORT_FLAGS = {
    TableKind.GALLERY_COHORT: "--gallery-cohort",
    TableKind.PROBE_COHORT: "--probe-cohort",
    TableKind.COHORT_COHORT: "--cohort",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(command: str, config: dict, inputs: dict) -> dict:
    return {
        "toolkit": "scorenorm",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _digest(p)} for name, p in inputs.items()},
    }


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _require_paths(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigurationError(f"input file not found: {p}")


def _parse_methods(text: str) -> list[MethodId]:
    tokens = [t for t in (text or "").split(",") if t.strip()]
    methods = [MethodId.parse(t) for t in tokens]
    return list(dict.fromkeys(methods))


# -- normalize -------------------------------------------------------------------


def cmd_normalize(args) -> int:
    methods = _parse_methods(args.methods)
    if not methods:
        log.warning("no methods requested; nothing to do")
        return 0
    paths = {
        TableKind.GALLERY_COHORT: args.gallery_cohort,
        TableKind.PROBE_COHORT: args.probe_cohort,
        TableKind.COHORT_COHORT: args.cohort,
    }
    for m in methods:
        kind = REQUIRED_KIND[m]
        if paths[kind] is None:
            raise ConfigurationError(
                f"method {m.label} requires a {kind.value} table ({COHORT_FLAGS[kind]})")
    _require_paths(args.test, *paths.values())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    test = parse_score_table(args.test, TableKind.TEST, axis=args.axis)
    tables = {}
    for kind in {REQUIRED_KIND[m] for m in methods}:
        tables[kind] = parse_score_table(paths[kind], kind, manifest=test.manifest)
    config = FitConfig(min_cohort_count=args.min_cohort_count, platt_l2=args.platt_l2,
                       max_iterations=args.max_iterations)

    summary = {}
    for m in methods:
        model = fit_model(m, gallery_cohort=tables.get(TableKind.GALLERY_COHORT),
                          probe_cohort=tables.get(TableKind.PROBE_COHORT),
                          cohort=tables.get(TableKind.COHORT_COHORT), config=config)
        if isinstance(model, PlattModel) and not model.converged:
            bad = [d for d, f in model.fit_diagnostics.items() if not f.converged]
            if args.strict:
                raise ConvergenceError(f"Platt fit did not converge for {', '.join(bad)}")
            log.warning("Platt fit did not converge for %s", ", ".join(bad))
        _write_json(out / f"model_{m.value}.json", model_to_json(model))
        if args.strict:
            normalized = normalize_table(model, test, strict=True)
            failures = []
        else:
            _, failures = transform_scores(model, test)
            normalized = normalize_table(model, test, strict=False)
        write_score_table(normalized, out / f"normalized_{m.value}.csv")
        summary[m.value] = {
            "records_in": len(test),
            "records_out": len(normalized),
            "failures": [{"row": f.index, "error": str(f.error)} for f in failures],
        }

    config_echo = {
        "methods": [m.value for m in methods],
        "strict": args.strict,
        "axis": args.axis,
        "min_cohort_count": args.min_cohort_count,
        "platt_l2": args.platt_l2,
        "max_iterations": args.max_iterations,
    }
    inputs = {"test": args.test}
    inputs.update({k.value: p for k, p in paths.items() if p is not None and k in tables})
    _write_json(out / "normalize_run.json",
                {"provenance": _provenance("normalize", config_echo, inputs), "methods": summary})
    return 0


# -- evaluate --------------------------------------------------------------------


def _input_tag(spec: str) -> tuple[str, str]:
    if "=" in spec and not Path(spec).exists():
        tag, path = spec.split("=", 1)
        return tag, path
    stem = Path(spec).stem
    if stem.startswith("normalized_"):
        try:
            return MethodId.parse(stem[len("normalized_"):]).label, spec
        except ConfigurationError:
            pass
    return "baseline", spec


def cmd_evaluate(args) -> int:
    inputs = [_input_tag(s) for s in args.inputs]
    _require_paths(*(p for _, p in inputs))
    config = WermConfig(alpha_weight=args.alpha, epsilon=args.epsilon, fmr_target=args.fmr_target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seen: dict[str, int] = {}
    reports, failures = [], []
    for tag, path in inputs:
        try:
            table = parse_score_table(path, TableKind.TEST, axis=args.axis)
            report = evaluate(table, tag, config)
        except ScoreNormError as exc:
            if args.strict:
                raise
            log.error("%s: %s", path, exc)
            failures.append({"input": path, "method": tag, "error": str(exc),
                             "exit_code": exc.exit_code})
            continue
        k = seen.get(tag, 0)
        seen[tag] = k + 1
        name = tag.replace(".", "_") + (f"_{k}" if k else "")
        reports.append((name, path, report))

    cfg = {"fmr_target": args.fmr_target, "alpha": args.alpha, "epsilon": args.epsilon,
           "axis": args.axis, "strict": args.strict}
    for name, path, report in reports:
        if args.format == "json":
            doc = report.to_json()
            doc["provenance"] = _provenance("evaluate", cfg, {"scores": path})
            _write_json(out / f"report_{name}.json", doc)
        else:
            with open(out / f"report_{name}.csv", "w", encoding="utf-8", newline="") as fh:
                row = report.csv_row()
                w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
                w.writeheader()
                w.writerow(row)

    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "TMR", "WERM"], lineterminator="\n")
        w.writeheader()
        for _, _, r in reports:
            w.writerow(r.csv_row())
    with open(out / "breakdown.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "demo", "fmr", "fnmr", "tmr", "threshold"])
        for _, _, r in reports:
            for label, rates in r.rates.per_demo.items():
                w.writerow([r.method, label, repr(rates.fmr), repr(rates.fnmr),
                            repr(rates.tmr), repr(r.threshold)])
    with open(out / "contributions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "werm", "r_fmr", "r_fnmr", "delta"])
        for _, _, r in reports:
            w.writerow([r.method, repr(r.werm), repr(r.r_fmr), repr(r.r_fnmr), repr(r.delta)])

    by_tag: dict[str, list] = {}
    for _, _, r in reports:
        by_tag.setdefault(r.method, []).append(r)
    summaries = [aggregate_splits(rs).to_json() for rs in by_tag.values() if len(rs) > 1]
    if summaries:
        _write_json(out / "splits_summary.json", summaries)
    if failures:
        _write_json(out / "failures.json", failures)
        return max(f["exit_code"] for f in failures)
    return 0


# -- protocol --------------------------------------------------------------------


def cmd_subsample(args) -> int:
    _require_paths(args.test)
    spec = SamplingSpec(args.count, args.bins, args.seed)
    table = parse_score_table(args.test, TableKind.TEST, axis=args.axis)
    sub = subsample_balanced(table, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_score_table(sub, out / "subsampled.csv")
    cfg = {"count": args.count, "bins": args.bins, "seed": args.seed, "axis": args.axis}
    _write_json(out / "subsample_run.json",
                {"provenance": _provenance("protocol subsample", cfg, {"test": args.test})})
    return 0


def cmd_random_pairs(args) -> int:
    _require_paths(args.manifest)
    manifest = load_manifest(args.manifest)
    pairs = generate_random_pairs(manifest, args.genuine, args.impostor, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(pairs, out / "pairs.csv")
    return 0


def cmd_splits(args) -> int:
    _require_paths(args.manifest)
    manifest = load_manifest(args.manifest)
    splits = split_replicates(manifest, args.k, args.genuine, args.impostor, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pairs in enumerate(splits):
        write_pairs(pairs, out / f"pairs_split{i}.csv")
    return 0


# -- synth -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        _require_paths(args.spec)
        with open(args.spec, encoding="utf-8") as fh:
            doc = json.load(fh)
        if args.seed is not None:
            doc["seed"] = args.seed
        spec = SyntheticSpec.from_json(doc)
    else:
        spec = default_spec(args.seed or 0)
    data = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_score_table(data.test, out / "test.csv")
    write_score_table(data.gallery_cohort, out / "gallery_cohort.csv")
    write_score_table(data.probe_cohort, out / "probe_cohort.csv")
    write_score_table(data.cohort, out / "cohort.csv")
    _write_json(out / "spec.json", {**spec.to_json(), "clipped": data.clipped})
    _write_json(out / "manifest.json", dataset_manifest(spec).to_json())
    return 0


# -- wiring ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scorenorm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def strictness(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--strict", dest="strict", action="store_true", default=True)
        g.add_argument("--lenient", dest="strict", action="store_false")

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--axis", default="ethnicity", choices=["gender", "ethnicity"])

    n = sub.add_parser("normalize", help="fit normalizers on cohorts and rescore a test table")
    n.add_argument("--test", required=True)
    n.add_argument("--gallery-cohort")
    n.add_argument("--probe-cohort")
    n.add_argument("--cohort", help="cohort x cohort table")
    n.add_argument("--methods", default="", help="comma list, e.g. m1,m1.1,m3")
    n.add_argument("--min-cohort-count", type=int, default=10)
    n.add_argument("--platt-l2", type=float, default=1e-4)
    n.add_argument("--max-iterations", type=int, default=1000)
    common(n)
    strictness(n)
    n.set_defaults(func=cmd_normalize)

    e = sub.add_parser("evaluate", help="FMR/FNMR, TMR and WERM reports for score tables")
    e.add_argument("inputs", nargs="+", help="score CSVs; TAG=PATH sets the method tag")
    e.add_argument("--fmr-target", type=float, default=1e-3)
    e.add_argument("--alpha", type=float, default=0.5)
    e.add_argument("--epsilon", type=float, default=1e-5)
    e.add_argument("--format", choices=["json", "csv"], default="json")
    common(e)
    strictness(e)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("protocol", help="protocol constructions")
    psub = pr.add_subparsers(dest="protocol", required=True, parser_class=_Parser)
    s = psub.add_parser("subsample", help="distribution-preserving impostor subsampling")
    s.add_argument("--test", required=True)
    s.add_argument("--count", type=int, required=True, help="impostor records per demographic")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    common(s)
    s.set_defaults(func=cmd_subsample)
    rp = psub.add_parser("random-pairs", help="random same-demographic pair list")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--genuine", type=int, required=True)
    rp.add_argument("--impostor", type=int, required=True)
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_random_pairs)
    sp = psub.add_parser("splits", help="k replicate random pair lists")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--genuine", type=int, required=True)
    sp.add_argument("--impostor", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_splits)

    y = sub.add_parser("synth", help="write a synthetic biased score ecosystem")
    y.add_argument("--spec", help="JSON synthetic spec (default: built-in two-group spec)")
    y.add_argument("--seed", type=int)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScoreNormError as exc:
        print(f"scorenorm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"scorenorm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
