import numpy as np
import pytest

from pagecert.graph import DirectedGraph, build_scenario


def ring_graph(n: int, chords=()) -> DirectedGraph:
    """Symmetric ring 0-1-...-(n-1)-0 plus optional undirected chords."""
    pairs = [(i, (i + 1) % n) for i in range(n)] + list(chords)
    edges = [(a, b) for a, b in pairs] + [(b, a) for a, b in pairs]
    return DirectedGraph.from_edges(n, edges, dedupe=True)


def random_connected_graph(rng: np.random.Generator, n: int, extra: int = 3
                           ) -> DirectedGraph:
    """Random symmetric graph guaranteed connected (ring plus random chords)."""
    candidates = [
        (a, b)
        for a in range(n)
        for b in range(a + 1, n)
        if (b - a) % n not in (1, n - 1)
    ]
    extra = min(extra, len(candidates))
    idx = rng.choice(len(candidates), size=extra, replace=False) if extra else []
    chords = [candidates[int(i)] for i in idx]
    return ring_graph(n, sorted(chords))


def random_instance(rng: np.random.Generator, n: int = 7, extra: int = 3,
                    mode: str = "remove-only", global_budget=None):
    """Random graph + scenario with nontrivial budgets, for oracle tests."""
    G = random_connected_graph(rng, n, extra)
    S = build_scenario(
        G, mode,
        local_budgets=rng.integers(0, 3, size=n),
        global_budget=global_budget,
    )
    return G, S


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
