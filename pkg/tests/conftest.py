import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hopgraph.graph import EntityNode, PredicateNode, SceneGraph

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FULL = (0.0, 0.0, 1.0, 1.0)


def random_graph(rng: np.random.Generator, max_entities=6, max_predicates=5, feature_dim=4,
                 allow_isolated=True) -> SceneGraph:
    """Random bipartite graph; predicate boxes cover the image so geometry never fails."""
    ne = int(rng.integers(1, max_entities + 1))
    npred = int(rng.integers(0 if allow_isolated else 1, max_predicates + 1))
    entities = []
    for _ in range(ne):
        x0, y0 = rng.uniform(0, 0.5, 2)
        entities.append(EntityNode(int(rng.integers(5)), (x0, y0, x0 + 0.3, y0 + 0.3), rng.normal(size=feature_dim)))
    predicates = [PredicateNode(int(rng.integers(4)), FULL, rng.normal(size=feature_dim)) for _ in range(npred)]
    triplets = []
    for p in range(npred):
        if allow_isolated and rng.random() < 0.2:
            continue  # leave this predicate without edges
        for _ in range(int(rng.integers(1, 3))):
            s, o = rng.integers(ne, size=2)
            triplets.append((int(s), p, int(o)))
    return SceneGraph(entities, predicates, triplets)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    """man -ride-> horse, man -hold-> rope; the rope also sits under a second predicate."""
    f = np.eye(4)
    ents = [
        EntityNode(0, (0.1, 0.1, 0.4, 0.6), f[0], "man"),
        EntityNode(1, (0.3, 0.4, 0.9, 0.9), f[1], "horse"),
        EntityNode(2, (0.0, 0.2, 0.2, 0.5), f[2], "rope"),
    ]
    preds = [
        PredicateNode(0, (0.1, 0.1, 0.9, 0.9), f[3], "ride"),
        PredicateNode(1, (0.0, 0.1, 0.4, 0.6), f[0] + f[3], "hold"),
    ]
    return SceneGraph(ents, preds, [(0, 0, 1), (0, 1, 2)])


# lines recorded by the acceptance tests, printed once at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
