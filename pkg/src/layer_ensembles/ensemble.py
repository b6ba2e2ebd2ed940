"""Layer Ensembles: N layers with K interchangeable weight options each.

A concrete subnetwork is a *layer sample*, a tuple of N option indices. The
model also owns a frozen, randomly initialised prior network with the same
layout; its output (scaled by ``prior_scale``) is added to the trained output
using the same layer sample.
"""
from __future__ import annotations

import io
import itertools
import json
import zipfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import (
    DenseWeights,
    LayerKind,
    as_tensor,
    dense_backward,
    dense_forward,
    init_dense,
    mse_loss,
    sgd_step,
)

VAR_FLOOR = 1e-9

LayerSample = tuple  # tuple[int, ...] of length N


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-point predictive mean and variance.

    ``mean`` and ``var`` are either floats or equal-length 1-d arrays (one
    entry per input row).
    """

    mean: np.ndarray | float
    var: np.ndarray | float

    def __len__(self):
        return int(np.size(self.mean))

    def __getitem__(self, i) -> "GaussianPrediction":
        return GaussianPrediction(float(np.asarray(self.mean).reshape(-1)[i]),
                                  float(np.asarray(self.var).reshape(-1)[i]))


class LayerEnsembleModel:
    """N layers by K weight options, plus a frozen prior network.

    Build a fresh one with :meth:`init`; the constructor takes explicit
    weights (used for checkpoints and hand-built test models).
    """

    def __init__(self, arch: Sequence[LayerKind], options, prior_options=None,
                 prior_scale: float = 1.0, seed: int | None = None, lineage=None):
        self.arch = list(arch)
        if not self.arch:
            raise ValueError("architecture must have at least one layer")
        self.options = [list(layer) for layer in options]
        if len(self.options) != len(self.arch):
            raise ValueError("need one option list per layer")
        self.K = len(self.options[0])
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if prior_options is None:
            prior_options = [[DenseWeights(np.zeros_like(w.W), np.zeros_like(w.b)) for w in layer]
                             for layer in self.options]
        self.prior_options = [list(layer) for layer in prior_options]
        for kind, layer, prior in zip(self.arch, self.options, self.prior_options, strict=True):
            if len(layer) != self.K or len(prior) != self.K:
                raise ValueError("every layer must have exactly K options")
            for w in (*layer, *prior):
                if (w.in_dim, w.out_dim) != (kind.in_dim, kind.out_dim):
                    raise ValueError(f"option shape {w.W.shape} does not match {kind}")
        for i in range(1, len(self.arch)):
            if self.arch[i].in_dim != self.arch[i - 1].out_dim:
                raise ValueError(f"layer {i} input does not match layer {i - 1} output")
        if prior_scale < 0:
            raise ValueError("prior_scale must be >= 0")
        self.prior_scale = float(prior_scale)
        self.seed = seed
        self.lineage = list(lineage or [])
        self.update_counts = np.zeros((self.N, self.K), dtype=np.int64)

    @classmethod
    def init(cls, arch: Sequence[LayerKind], K: int, prior_scale: float = 1.0,
             seed: int = 0) -> "LayerEnsembleModel":
        if K < 1:
            raise ValueError("K must be >= 1")
        trained_ss, prior_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(trained_ss)
        prior_rng = np.random.default_rng(prior_ss)
        options = [[init_dense(kind, rng) for _ in range(K)] for kind in arch]
        prior = [[init_dense(kind, prior_rng) for _ in range(K)] for kind in arch]
        return cls(arch, options, prior, prior_scale=prior_scale, seed=seed,
                   lineage=[f"init:seed={seed}"])

    @property
    def N(self) -> int:
        return len(self.arch)

    @property
    def in_dim(self) -> int:
        return self.arch[0].in_dim

    def apply_layer(self, i: int, q: int, x: np.ndarray, prior: bool = False) -> np.ndarray:
        """Run option ``q`` of layer ``i`` (trained or prior) on ``x``."""
        w = (self.prior_options if prior else self.options)[i][q]
        return dense_forward(w, x, self.arch[i].relu)

    def combine(self, trained: np.ndarray, prior: np.ndarray | None) -> np.ndarray:
        # Single place where trained and prior outputs meet, shared by every
        # evaluator so their results stay bitwise identical.
        if prior is None or self.prior_scale == 0.0:
            return trained
        return trained + self.prior_scale * prior

    def copy(self) -> "LayerEnsembleModel":
        m = LayerEnsembleModel(self.arch, [[w.copy() for w in layer] for layer in self.options],
                               [[w.copy() for w in layer] for layer in self.prior_options],
                               prior_scale=self.prior_scale, seed=self.seed, lineage=self.lineage)
        m.update_counts = self.update_counts.copy()
        return m


def check_sample(model_or_kn, sample) -> LayerSample:
    K, N = _kn(model_or_kn)
    sample = tuple(int(q) for q in sample)
    if len(sample) != N:
        raise ValueError(f"sample {sample} has length {len(sample)}, expected {N}")
    if any(q < 0 or q >= K for q in sample):
        raise ValueError(f"sample {sample} has an index outside [0, {K})")
    return sample


def check_sample_set(model_or_kn, samples) -> list[LayerSample]:
    """Validate a sample set: non-empty, well-formed, no duplicates."""
    samples = [check_sample(model_or_kn, s) for s in samples]
    if not samples:
        raise ValueError("sample set is empty")
    if len(set(samples)) != len(samples):
        raise ValueError("sample set contains duplicates")
    return samples


def _kn(model_or_kn):
    if isinstance(model_or_kn, LayerEnsembleModel):
        return model_or_kn.K, model_or_kn.N
    return model_or_kn


def sample_layers(model: LayerEnsembleModel, rng: np.random.Generator) -> LayerSample:
    """Draw one option per layer, independently and uniformly."""
    return tuple(int(q) for q in rng.integers(0, model.K, size=model.N))


def forward_sample(model: LayerEnsembleModel, sample, x) -> np.ndarray:
    sample = check_sample(model, sample)
    x = as_tensor(x)
    h = x
    for i, q in enumerate(sample):
        h = model.apply_layer(i, q, h)
    if model.prior_scale == 0.0:
        return h
    p = x
    for i, q in enumerate(sample):
        p = model.apply_layer(i, q, p, prior=True)
    return model.combine(h, p)


def gaussian_from_outputs(outputs) -> GaussianPrediction:
    """Mean and population variance over the sample axis of ``[J, batch(, 1)]``."""
    stacked = np.asarray(outputs, dtype=np.float64)
    if stacked.shape[0] == 0:
        raise ValueError("no sample outputs")
    stacked = stacked.reshape(stacked.shape[0], -1)
    mean = stacked.mean(axis=0)
    var = np.maximum(((stacked - mean) ** 2).mean(axis=0), VAR_FLOOR)
    return GaussianPrediction(mean, var)


def predict(model: LayerEnsembleModel, samples, x) -> GaussianPrediction:
    """Ensemble prediction over ``samples`` for every row of ``x``."""
    samples = check_sample_set(model, samples)
    if model.arch[-1].out_dim != 1:
        raise ValueError("predict needs a scalar-output architecture")
    return gaussian_from_outputs([forward_sample(model, s, x) for s in samples])


def sample_loss_grads(model: LayerEnsembleModel, sample, x, y):
    """MSE loss of one layer sample and its gradients for every layer.

    Returns ``(loss, [(grad_W, grad_b) per layer])``; the gradients belong to
    the options selected by ``sample``. Prior weights get no gradient.
    """
    inputs = []
    h = x
    for i, q in enumerate(sample):
        inputs.append(h)
        h = model.apply_layer(i, q, h)
    prior = None
    if model.prior_scale != 0.0:
        prior = x
        for i, q in enumerate(sample):
            prior = model.apply_layer(i, q, prior, prior=True)
    loss, g = mse_loss(model.combine(h, prior), y)
    grads = [None] * model.N
    for i in reversed(range(model.N)):
        gW, gb, g = dense_backward(model.options[i][sample[i]], inputs[i], g, model.arch[i].relu)
        grads[i] = (gW, gb)
    return loss, grads


def train_epoch(model: LayerEnsembleModel, X, y, *, lr: float, batch_size: int = 32,
                samples_per_batch: int | None = None, rng: np.random.Generator,
                pool=None, weight_decay: float = 0.0) -> float:
    """One pass of minibatch SGD over ``(X, y)``.

    Each batch draws ``samples_per_batch`` layer samples (default K), averages
    their MSE losses and updates only the options those samples touched. With
    ``pool`` the samples are drawn from that fixed set instead, without
    replacement when the pool is large enough. ``weight_decay`` adds an L2
    penalty ``weight_decay * ||W||^2`` on each updated option's matrix.
    Returns the mean batch loss (without the penalty).
    """
    X = as_tensor(X)
    y = as_tensor(y).reshape(len(X), -1)
    if len(X) == 0:
        raise ValueError("empty training data")
    spb = model.K if samples_per_batch is None else int(samples_per_batch)
    if spb < 1:
        raise ValueError("samples_per_batch must be >= 1")
    if pool is not None:
        pool = check_sample_set(model, pool)

    order = rng.permutation(len(X))
    losses = []
    for start in range(0, len(X), batch_size):
        idx = order[start:start + batch_size]
        xb, yb = X[idx], y[idx]
        if pool is None:
            batch_samples = [sample_layers(model, rng) for _ in range(spb)]
        else:
            picks = rng.choice(len(pool), size=spb, replace=spb > len(pool))
            batch_samples = [pool[int(j)] for j in picks]

        grads: dict[tuple[int, int], list[np.ndarray]] = {}
        batch_loss = 0.0
        for sample in batch_samples:
            loss, layer_grads = sample_loss_grads(model, sample, xb, yb)
            batch_loss += loss / spb
            for i, (gW, gb) in enumerate(layer_grads):
                acc = grads.get((i, sample[i]))
                if acc is None:
                    grads[(i, sample[i])] = [gW / spb, gb / spb]
                else:
                    acc[0] = acc[0] + gW / spb
                    acc[1] = acc[1] + gb / spb
        for (i, q), (gW, gb) in sorted(grads.items()):
            w = model.options[i][q]
            if weight_decay:
                gW = gW + 2.0 * weight_decay * w.W
            w.W, w.b = sgd_step([w.W, w.b], [gW, gb], lr)
            model.update_counts[i, q] += 1
        losses.append(batch_loss)
    return float(np.mean(losses))


def fit(model: LayerEnsembleModel, X, y, *, epochs: int, lr: float, batch_size: int = 32,
        samples_per_batch: int | None = None, seed: int = 0, pool=None,
        weight_decay: float = 0.0) -> list[float]:
    """Run ``epochs`` calls of :func:`train_epoch` with one seeded generator."""
    rng = np.random.default_rng(seed)
    history = [train_epoch(model, X, y, lr=lr, batch_size=batch_size,
                           samples_per_batch=samples_per_batch, rng=rng, pool=pool,
                           weight_decay=weight_decay)
               for _ in range(epochs)]
    model.lineage.append(f"train:seed={seed},epochs={epochs},lr={lr!r}")
    return history


# -- sample-set constructors -------------------------------------------------

def full_samples(K: int, N: int) -> list[LayerSample]:
    """All K**N layer samples in lexicographic order."""
    return list(itertools.product(range(K), repeat=N))


def deep_ensemble_samples(K: int, N: int) -> list[LayerSample]:
    """K samples that share no option at any layer: ``[j, j, ..., j]``."""
    if K < 1 or N < 1:
        raise ValueError("K and N must be >= 1")
    return [(j,) * N for j in range(K)]


def sub_ensemble_samples(K: int, N: int, trunk_len: int) -> list[LayerSample]:
    """A shared trunk (option 0 for the first ``trunk_len`` layers) and an ensembled tail."""
    if K < 1 or N < 1:
        raise ValueError("K and N must be >= 1")
    if not 0 <= trunk_len <= N:
        raise ValueError(f"trunk length {trunk_len} outside [0, {N}]")
    if trunk_len == N:
        return [(0,) * N]
    return [(0,) * trunk_len + (j,) * (N - trunk_len) for j in range(K)]


def random_samples(K: int, N: int, J: int, rng: np.random.Generator) -> list[LayerSample]:
    """``J`` distinct samples drawn uniformly without replacement."""
    total = K ** N
    if not 1 <= J <= total:
        raise ValueError(f"J={J} outside [1, {total}]")
    if total <= 1_000_000:
        codes = rng.choice(total, size=J, replace=False)
        return [_decode(int(c), K, N) for c in codes]
    seen: dict[LayerSample, None] = {}
    while len(seen) < J:
        seen.setdefault(tuple(int(q) for q in rng.integers(0, K, size=N)))
    return list(seen)


def _decode(code: int, K: int, N: int) -> LayerSample:
    digits = []
    for _ in range(N):
        code, r = divmod(code, K)
        digits.append(r)
    return tuple(reversed(digits))


def make_sample_set(spec: str, K: int, N: int, rng: np.random.Generator | None = None):
    """Parse ``full``, ``deep``, ``sub:T`` or ``random:J`` into a sample set."""
    kind, _, arg = spec.partition(":")
    if kind == "full" and not arg:
        return full_samples(K, N)
    if kind == "deep" and not arg:
        return deep_ensemble_samples(K, N)
    try:
        value = int(arg)
    except ValueError:
        raise ValueError(f"invalid sample-set spec {spec!r}") from None
    if kind == "sub":
        return sub_ensemble_samples(K, N, value)
    if kind == "random":
        if rng is None:
            raise ValueError("random sample sets need an rng")
        return random_samples(K, N, value, rng)
    raise ValueError(f"invalid sample-set spec {spec!r}")


# -- checkpoints ---------------------------------------------------------------

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _array_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, a, allow_pickle=False)
    return buf.getvalue()


def save_model(model: LayerEnsembleModel, path) -> None:
    """Write a zip container: ``meta.json`` plus one ``.npy`` per array.

    Entries carry a fixed timestamp so equal models give equal bytes.
    """
    meta = {
        "format": "layer-ensemble/1",
        "arch": [[k.in_dim, k.out_dim, k.relu] for k in model.arch],
        "K": model.K,
        "prior_scale": model.prior_scale,
        "seed": model.seed,
        "lineage": model.lineage,
    }
    entries = [("meta.json", json.dumps(meta, sort_keys=True).encode())]
    for i in range(model.N):
        for q in range(model.K):
            for tag, w in (("w", model.options[i][q]), ("p", model.prior_options[i][q])):
                entries.append((f"{tag}_{i}_{q}_W.npy", _array_bytes(w.W)))
                entries.append((f"{tag}_{i}_{q}_b.npy", _array_bytes(w.b)))
    entries.append(("update_counts.npy", _array_bytes(model.update_counts)))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            zf.writestr(zipfile.ZipInfo(name, date_time=_FIXED_DATE), data)


def load_model(path) -> LayerEnsembleModel:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))

        def arr(name):
            return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)

        arch = [LayerKind(a, b, bool(r)) for a, b, r in meta["arch"]]
        K = meta["K"]
        options = [[DenseWeights(arr(f"w_{i}_{q}_W.npy"), arr(f"w_{i}_{q}_b.npy")) for q in range(K)]
                   for i in range(len(arch))]
        prior = [[DenseWeights(arr(f"p_{i}_{q}_W.npy"), arr(f"p_{i}_{q}_b.npy")) for q in range(K)]
                 for i in range(len(arch))]
        model = LayerEnsembleModel(arch, options, prior, prior_scale=meta["prior_scale"],
                                   seed=meta["seed"], lineage=meta["lineage"])
        model.update_counts = arr("update_counts.npy")
    return model
