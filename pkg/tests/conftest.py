import numpy as np
import pytest

from cemee.panel import ClusterPanel


def random_panel(rng, M=4, G=3, T=8, sizes=None, avail_rate=0.9, prob_range=(0.15, 0.85), y_rate=(0.2, 0.7)):
    """Small panel with individual-varying probabilities, availability and
    a couple of state columns. ``sizes`` overrides the equal cluster size."""
    sizes = list(sizes) if sizes is not None else [G] * M
    cols = {k: [] for k in ("cluster", "user", "t", "A", "prob", "avail", "Y", "Z", "X")}
    uid = 0
    for m, g in enumerate(sizes):
        for _ in range(g):
            base_p = rng.uniform(*prob_range)
            for t in range(1, T + 1):
                p = float(np.clip(base_p + rng.normal(0, 0.05), 0.05, 0.95))
                av = int(rng.random() < avail_rate)
                a = int(av and rng.random() < p)
                z = int(rng.integers(3))
                mean = rng.uniform(*y_rate) * (1.3 if a else 1.0)
                cols["cluster"].append(10 + m)
                cols["user"].append(100 + uid)
                cols["t"].append(t)
                cols["A"].append(a)
                cols["prob"].append(p)
                cols["avail"].append(av)
                cols["Y"].append(int(rng.random() < mean))
                cols["Z"].append(z)
                cols["X"].append(rng.normal())
            uid += 1
    return ClusterPanel.from_arrays(
        cols["cluster"],
        cols["user"],
        cols["t"],
        cols["A"],
        cols["prob"],
        cols["Y"],
        avail=cols["avail"],
        states={"Z": cols["Z"], "X": cols["X"]},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def acceptance(label, ok, detail):
    """Record one acceptance line for the terminal summary and assert it."""
    ACCEPTANCE_LINES.append(f"{label} {'PASS' if ok else 'FAIL'}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
