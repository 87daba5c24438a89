import pytest

from cgl.config import load_config

TOY = {
    "data.n_per_class": 30, "data.test_per_class": 10, "data.n_classes": 3, "data.dim": 4,
    "grid.L": 2, "grid.M": 2, "grid.width": 8, "pool.K": 2, "train.epochs": 3, "train.batch_size": 16,
}


def toy_config(**overrides):
    """Small blobs task that trains in well under a second."""
    return load_config().replace(**{**TOY, **overrides})


@pytest.fixture
def toy():
    return toy_config


@pytest.fixture(autouse=True)
def _isolated_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("CGL_OUTPUT_ROOT", str(tmp_path / "runs"))


_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one line per acceptance criterion; printed after the run."""
    def record(n, title, ok, detail=""):
        _ACCEPTANCE[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f": {detail}" if detail else "")
        print(_ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
