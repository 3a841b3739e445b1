import numpy as np
import pytest

from brainexplore.synth import gen_responses, gen_world, oracle_annotators


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    return gen_world(0, n_voxels=200, n_concepts=6, rois=2, n_measured=600, n_predicted=1800)


@pytest.fixture(scope="session")
def small_pools(small_world):
    return {k: gen_responses(small_world, pool_kind=k) for k in ("measured", "predicted")}


@pytest.fixture
def oracle(small_world):
    return oracle_annotators(small_world)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {
    "1": "synthetic recovery", "2": "scoring oracle equivalence", "3": "pooling monotonicity",
    "4": "sparsity ablation direction", "5": "augmentation direction", "6": "dedup correctness",
    "7": "decomposition unit suite", "8": "determinism and persistence", "9": "hand-worked fixture",
}
_results: dict[str, list] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        key = name.split("_")[2]
        _results.setdefault(key, []).append((report.outcome, dict(report.user_properties)))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in _CRITERIA.items():
        runs = _results.get(key)
        if not runs:
            continue
        ok = all(outcome == "passed" for outcome, _ in runs)
        detail = "; ".join(", ".join(f"{k}={v}" for k, v in props.items()) for _, props in runs if props)
        terminalreporter.write_line(f"criterion {key} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
