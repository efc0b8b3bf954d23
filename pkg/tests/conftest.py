import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

CRITERIA = {
    1: "oracle equivalence",
    2: "gradient suite",
    3: "SASA reductions and monotonicity",
    4: "structural invariants",
    5: "Hungarian optimality",
    6: "overfit sanity",
    7: "directional ablations",
    8: "simulator statistics and gate ordering",
    9: "determinism and serialization",
}
_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def record(request):
    """Store one acceptance outcome for the end-of-session summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def _record(number: int, passed: bool, detail: str) -> None:
        results[number] = (passed, detail)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        if number not in results:
            terminalreporter.write_line(f"[----] {number}. {title}: not run in this session")
            continue
        passed, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
