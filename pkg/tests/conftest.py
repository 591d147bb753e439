import time
from pathlib import Path

import numpy as np
import pytest

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
TOY_SEED = 7

# (criterion, passed, detail) lines printed at the end of the session
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> bool:
    line = f"CRITERION {criterion:>2} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE.append((criterion, bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"CRITERION {crit:>2} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cloud(rng, n, scale=1.0):
    return rng.standard_normal((n, 3)) * scale


def _train_toy(root: Path, name: str) -> tuple[Path, float]:
    from vfnet.cli import main

    t0 = time.perf_counter()
    code = main(["train", "--config", str(TOY_CONFIG), "--seed", str(TOY_SEED),
                 "--set", f"data.dir={root / 'data'}", "--out", str(root / name)])
    assert code == 0, f"toy training exited with {code}"
    return root / name / "checkpoint.vfn", time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The shipped toy config trained once through the CLI (200 patches, seed 7)."""
    from vfnet.checkpoint import load_checkpoint
    from vfnet.cli import main

    root = tmp_path_factory.mktemp("toy")
    assert main(["synth", "--out", str(root / "data"), "--count", "200", "--seed", "1"]) == 0
    path, seconds = _train_toy(root, "run")
    return {"root": root, "checkpoint_path": path, "checkpoint": load_checkpoint(path), "seconds": seconds,
            "retrain": lambda name: _train_toy(root, name)}


@pytest.fixture(scope="session")
def toy_model(toy_run):
    return toy_run["checkpoint"].model


def pytest_collection_modifyitems(items):
    for item in items:
        if {"toy_run", "toy_model"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
