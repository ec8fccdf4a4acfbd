import pytest

from hybridpair import pipeline, shipped_config
from hybridpair.config import load_config


@pytest.fixture(scope="session")
def small_cfg():
    return load_config(shipped_config("small"))


@pytest.fixture(scope="session")
def small_run(small_cfg):
    """Archive from the small config: a handful of core pairs, variants and rudimentary paths."""
    archive, summary = pipeline.generate(small_cfg)
    return archive, summary


ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def criterion(request):
    """Record one acceptance outcome; the line is printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(lines.get(n, f"criterion {n:>2}: NOT RUN (errored or deselected)"))
