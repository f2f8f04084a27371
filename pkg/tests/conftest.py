import numpy as np
import pytest

from sgood.graph import Graph


def random_graph(rng, n_max=12, p=None, min_nodes=1) -> Graph:
    n = int(rng.integers(min_nodes, n_max + 1))
    p = rng.uniform(0.1, 0.6) if p is None else p
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return Graph(n, edges, np.ones((n, 1)))


def motif_stitched(rng, n_max=12) -> Graph:
    """Small cycles/cliques joined by single bridges, sometimes with isolated nodes."""
    nodes, edges = 0, []
    blocks = []
    while nodes < n_max - 2:
        k = int(rng.integers(3, 5))
        if nodes + k > n_max:
            break
        base = nodes
        if rng.random() < 0.5:
            edges += [(base + i, base + (i + 1) % k) for i in range(k)]
        else:
            edges += [(base + i, base + j) for i in range(k) for j in range(i + 1, k)]
        if blocks and rng.random() < 0.8:
            other = blocks[int(rng.integers(len(blocks)))]
            edges.append((other + int(rng.integers(3)), base + int(rng.integers(k))))
        blocks.append(base)
        nodes += k
    nodes += int(rng.integers(0, 2))
    return Graph(nodes, edges, np.ones((nodes, 1)))


def cycle_chain(k, n_motifs, features=None) -> Graph:
    """``n_motifs`` copies of C_k, consecutive copies joined by one bridge edge."""
    edges = []
    for m in range(n_motifs):
        base = m * k
        edges += [(base + i, base + (i + 1) % k) for i in range(k)]
        if m:
            edges.append((base - 1, base))
    n = k * n_motifs
    return Graph(n, edges, np.ones((n, 1)) if features is None else features)


def fuzz_corpus(n=500, seed=0, n_max=12):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(random_graph(rng, n_max) if i % 2 == 0 else motif_stitched(rng, n_max))
    return out


@pytest.fixture(scope="session")
def fuzz_graphs():
    return fuzz_corpus()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number} {status}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
