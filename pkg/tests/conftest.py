import numpy as np
import pytest

from layer_ensembles.ensemble import LayerEnsembleModel
from layer_ensembles.nn import DenseWeights, LayerKind, arch_from_sizes

ACCEPTANCE = {}


def random_model(rng, N, K, widths=None, prior_scale=1.0, seed=None):
    """LayerEnsembleModel with random layer sizes (input first, scalar output)."""
    if widths is None:
        widths = [int(rng.integers(1, 7)) for _ in range(N)] + [1]
    arch = arch_from_sizes(widths)
    seed = int(rng.integers(2**31)) if seed is None else seed
    return LayerEnsembleModel.init(arch, K, prior_scale=prior_scale, seed=seed)


def hand_model(weights, prior_scale=0.0):
    """Model from nested lists ``weights[i][q] = (W, b)``; ReLU on all but the last layer."""
    arch = []
    options = []
    for i, layer in enumerate(weights):
        opts = [DenseWeights(np.array(W, float), np.array(b, float)) for W, b in layer]
        arch.append(LayerKind(opts[0].in_dim, opts[0].out_dim, relu=i < len(weights) - 1))
        options.append(opts)
    return LayerEnsembleModel(arch, options, prior_scale=prior_scale)


def brute_prefix_count(samples):
    """Number of distinct non-empty prefixes, by building them all in a set."""
    prefixes = set()
    for s in samples:
        for d in range(1, len(s) + 1):
            prefixes.add(tuple(s[:d]))
    return len(prefixes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
