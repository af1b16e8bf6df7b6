import numpy as np
import pytest

from scorenorm.core import DemoManifest, ScoreRecord, ScoreTable, PairType
from scorenorm.synthetic import DemoSpec, SyntheticSpec, generate

_acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        label = marker.args[0] if marker.args else item.name
        suffix = f" [{item.callspec.id}]" if hasattr(item, "callspec") else ""
        _acceptance.append((label + suffix, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _acceptance:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {label}")


def make_table(kind, rows, labels=("Asian", "Black"), axis="ethnicity"):
    """rows: (gallery_subject, probe_subject, gallery_demo, probe_demo, score)."""
    records = [
        ScoreRecord(g, p, gd, pd, PairType.GENUINE if g == p else PairType.IMPOSTOR, s)
        for g, p, gd, pd, s in rows
    ]
    return ScoreTable.from_records(kind, records, DemoManifest(axis, tuple(labels)))


@pytest.fixture(scope="session")
def small_ecosystem():
    spec = SyntheticSpec(
        demographics={
            "Caucasian": DemoSpec(0.70, 0.12, 0.00, 0.12, n_genuine=400, n_impostor=4000,
                                  n_cohort_subjects=30, n_gallery_subjects=30),
            "African": DemoSpec(0.55, 0.12, 0.15, 0.12, n_genuine=400, n_impostor=4000,
                                n_cohort_subjects=30, n_gallery_subjects=30),
        },
        seed=11,
    )
    return generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
