import numpy as np
import pytest

from reptile.core import QuadraticLoss, RngStream
from reptile.models import Minibatch, MlpSpec, mlp_init


@pytest.fixture
def quad_pair():
    """L1 = 0.5 (phi - 1)^2 and L2 = 0.5 (phi - 3)^2."""
    return QuadraticLoss([[1.0]], [1.0]), QuadraticLoss([[1.0]], [3.0])


def random_net(seed, max_params=5000, output="linear", activation="tanh"):
    """A random tanh MLP, parameters and minibatch; sizes vary with the seed."""
    gen = np.random.default_rng(seed)
    while True:
        depth = int(gen.integers(2, 5))
        sizes = [int(gen.integers(1, 8))] + [int(gen.integers(2, 40)) for _ in range(depth - 2)]
        sizes.append(int(gen.integers(2, 6)) if output == "softmax" else int(gen.integers(1, 4)))
        spec = MlpSpec(tuple(sizes), activation, output)
        if spec.n_params <= max_params:
            break
    phi = mlp_init(spec, RngStream(seed, 99)) + 0.1 * gen.normal(size=spec.n_params)
    n = int(gen.integers(1, 12))
    x = gen.normal(size=(n, spec.in_dim))
    if output == "softmax":
        y = gen.integers(0, spec.out_dim, size=n)
    else:
        y = gen.normal(size=(n, spec.out_dim))
    return spec, phi, Minibatch(x, y, np.arange(n))


# acceptance criteria report one line each; the lines are repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
