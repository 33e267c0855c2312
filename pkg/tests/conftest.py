import math

import numpy as np
import pytest

from saftlab import nn


def random_instance(seed: int, max_params: int = 500, max_rows: int = 64, activation: str = "tanh"):
    """Random MLP spec, parameters and dataset within the given size limits."""
    rng = np.random.default_rng(seed)
    while True:
        d = int(rng.integers(2, 6))
        c = int(rng.integers(2, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(0, 3))))
        spec = nn.ModelSpec((d, *hidden, c), activation)
        if spec.n_params <= max_params:
            break
    n = int(rng.integers(4, max_rows + 1))
    params = rng.normal(0.0, 0.7, spec.n_params)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    return spec, params, nn.TaskDataset(x, y, "train", f"rand{seed}")


def scalar_forward(params, spec, x, upto=None):
    """Scalar-loop forward pass; returns every layer's output (post-activation for hidden layers)."""
    acts = [list(map(float, row)) for row in x]
    outs = []
    k = 0
    sizes = spec.layer_sizes
    for li in range(len(sizes) - 1):
        n_in, n_out = sizes[li], sizes[li + 1]
        W = [[float(params[k + o * n_in + i]) for i in range(n_in)] for o in range(n_out)]
        k += n_in * n_out
        b = [float(params[k + o]) for o in range(n_out)]
        k += n_out
        new = []
        for row in acts:
            z = []
            for o in range(n_out):
                s = b[o]
                for i in range(n_in):
                    s += W[o][i] * row[i]
                if li < len(sizes) - 2:
                    s = math.tanh(s) if spec.activation == "tanh" else max(s, 0.0)
                z.append(s)
            new.append(z)
        acts = new
        outs.append(np.array(acts))
    return outs


def row_loss(logits, labels):
    total = 0.0
    for z, y in zip(logits, labels):
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[y]
    return total / len(labels)


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


@pytest.fixture
def small_instance():
    return random_instance(7, max_params=120, max_rows=20)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
