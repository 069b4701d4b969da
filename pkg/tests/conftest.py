import pytest

from synfuse.data import SyntheticSpec, gen_multimodal, split_indices

# (criterion id, passed, detail) lines collected by the acceptance tests
ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str, report_only: bool = False):
    status = "PASS" if passed else ("FINDING" if report_only else "FAIL")
    ACCEPTANCE_LINES.append((number, f"criterion {number} [{status}] {title}: {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def make_splits(n=400, seed=0, **kw):
    data = gen_multimodal(SyntheticSpec(n=n, seed=seed, **kw))
    tr, va, te = split_indices(n, seed=seed)
    return {"train": data.rows(tr), "val": data.rows(va), "test": data.rows(te)}


@pytest.fixture
def small_splits():
    return make_splits()
