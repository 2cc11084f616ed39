import numpy as np
import pytest

from snider.data import TrainingSample


def random_samples(n, size, seed=0):
    """Cheap samples with the right shapes; no plate rendering involved."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hq0 = r.uniform(size=(3, size, size))
        out.append(TrainingSample(
            i_lq=np.clip(hq0 + r.normal(0, 0.1, hq0.shape), 0, 1),
            i_hq=np.rot90(hq0, axes=(1, 2)).copy(),
            i_hq_0=hq0,
            i_seg=(r.uniform(size=(1, size, size)) > 0.7).astype(np.float64),
            count=int(r.integers(4, 9)),
            angle=0,
            digits="1234",
            sample_id=f"r{i}",
        ))
    return out


@pytest.fixture
def samples16():
    return random_samples(6, 16)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> None:
    line = f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
