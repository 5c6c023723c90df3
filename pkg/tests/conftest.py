import pytest

from texscale.config import PipelineConfig


@pytest.fixture(scope="session")
def shared_cache(tmp_path_factory):
    """One stage cache for the whole session so the default NG model trains once."""
    return str(tmp_path_factory.mktemp("cache"))


@pytest.fixture
def small_cfg(tmp_path, shared_cache):
    return PipelineConfig(per_class=15, generations=2, epochs=1, channels=(4, 8), Kg=2,
                          gmm_iters=5, eta="0.8", out=str(tmp_path / "run"), cache=shared_cache)


_CRITERIA = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    def record(n, ok, detail):
        _CRITERIA[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
