import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from peerbias.features import UserFeatures
from peerbias.graphcore import Graph, make_snowball

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance tests append (criterion, passed, detail); printed in the summary
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def users_for(ids, age=25.0, rng=None):
    out = {}
    for i in ids:
        if rng is None:
            out[i] = UserFeatures(i, 0, age, 1.0, 1.0)
        else:
            out[i] = UserFeatures(i, int(rng.random() < 0.5), float(rng.uniform(15, 40)),
                                  float(rng.normal(2, 1)), float(rng.normal(2, 1)))
    return out


def snowball_from_edges(edges, seed, installs=None, peer=None):
    g = Graph.from_edges(edges, nodes=[seed])
    installs = installs or {n: 0 for n in g.nodes}
    return make_snowball(g, seed, installs, peer)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_scale():
    """A scale small enough to run the whole pipeline in seconds."""
    from peerbias.pipeline import ScaleConfig
    return ScaleConfig.preset("smoke")
