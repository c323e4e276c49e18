import numpy as np
import pytest

from omnidet.data import GenConfig, generate_dataset


def small_config(**kw) -> GenConfig:
    base = dict(image_size=64, train_counts={"box": 6, "mask": 6, "dot": 6, "unlabeled": 6},
                val_count=4, test_count=4, seed=3)
    base.update(kw)
    return GenConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifests = generate_dataset(small_config(), root)
    return root, manifests


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_CRITERIA = 10
_results: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def report():
    """Record one acceptance outcome; the summary prints a line per criterion."""
    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        _results[number] = (name, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    ran_acceptance = any("test_acceptance" in str(getattr(r, "nodeid", ""))
                         for reports in terminalreporter.stats.values() for r in reports)
    if not ran_acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        if n in _results:
            name, ok, detail = _results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {name} ({detail})")
        else:
            terminalreporter.write_line(f"[ -- ] criterion {n:2d}: not run in this session")
