import pytest

from gla.rf_synth import generate_dataset
from gla.trainer import TrainConfig, train

SMALL = dict(resolution=(16, 16), conv_channels=(4, 4, 8, 8), latent_dim=4, embed_dim=16, batch_size=8, seed=3,
             max_epochs=3, patience=2)


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    return generate_dataset(20, 20, seed=5, out_dir=tmp_path_factory.mktemp("small_ds"))


@pytest.fixture(scope="session")
def small_ckpt(small_config, small_manifest):
    return train(small_config, small_manifest)


# -- acceptance summary -------------------------------------------------------------

CRITERIA = {
    1: "analytic loss values",
    2: "combined-loss gradient check",
    3: "MVDR oracle",
    4: "desk-scale training",
    5: "CAM localization",
    6: "prompt ablation",
    7: "determinism",
    8: "invariant suite",
}
_criterion_of: dict[str, int] = {}
_outcomes: dict[int, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            _criterion_of[item.nodeid] = m.args[0]


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None or (report.when != "call" and report.passed):
        return
    notes = [f"{k}={v}" for k, v in report.user_properties]
    _outcomes.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            continue
        ok = all(outcome == "passed" for _, outcome, _ in results)
        tr.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}")
        for name, outcome, notes in results:
            tr.write_line(f"    {outcome:7s} {name} {' '.join(notes)}".rstrip())
