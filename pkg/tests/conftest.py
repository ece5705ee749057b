import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_sdf(volume, spacing=(1.0, 1.0, 1.0)):
    """All-pairs signed distance: distance to the nearest voxel of the other class."""
    fg = np.asarray(volume) != 0
    w = [float(s) * float(s) for s in spacing]
    idx = np.argwhere(np.ones(fg.shape, dtype=bool))
    out = np.empty(fg.shape)
    fg_idx = np.argwhere(fg)
    bg_idx = np.argwhere(~fg)
    for p in idx:
        other = bg_idx if fg[tuple(p)] else fg_idx
        d = other - p
        # same summation order as the separable transform: x, then y, then z
        sq = (d[:, 0] ** 2 * w[0] + d[:, 1] ** 2 * w[1]) + d[:, 2] ** 2 * w[2]
        dist = np.sqrt(sq.min())
        out[tuple(p)] = -dist if fg[tuple(p)] else dist
    return out


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}" + (f": {detail}" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
