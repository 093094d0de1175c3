import numpy as np
import pytest

from certens.network import Layer, Network


def random_net(rng, d, widths, C, scale=1.0):
    sizes = [d, *widths, C]
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(Layer(scale * rng.normal(size=(b, a)) / np.sqrt(a),
                            0.5 * rng.normal(size=b), act))
    return Network(tuple(layers))


def sample_ball(rng, n, d, eps, p):
    """Interior samples plus points on the boundary (corners for l-inf)."""
    if p == np.inf:
        inner = rng.uniform(-eps, eps, size=(n // 2, d))
        corners = eps * rng.choice([-1.0, 1.0], size=(n - n // 2, d))
        return np.vstack([inner, corners])
    dirs = rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = eps * rng.uniform(size=(n, 1)) ** (1.0 / d)
    radii[: n // 2] = eps
    return dirs * radii


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE = []


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
