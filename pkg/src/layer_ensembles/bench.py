"""Uncertainty-quality benchmark against an exact NNGP regression oracle.

The data generator draws ``f`` from the same NNGP prior the oracle uses, adds
Gaussian noise, and a model is scored by the mean KL divergence between its
per-point Gaussian prediction and the oracle's posterior predictive.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ensemble import (
    VAR_FLOOR,
    GaussianPrediction,
    LayerEnsembleModel,
    deep_ensemble_samples,
    fit,
    gaussian_from_outputs,
    random_samples,
)
from .nn import arch_from_sizes, as_tensor
from .ole import ole_eval

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
SWEEP_HEADER = ["method", "K", "J", "D_x", "lambda", "eps", "seed", "Q", "wall_ms"]


@dataclass(frozen=True)
class KernelSpec:
    depth: int = 2
    sigma_w2: float = 2.0
    sigma_b2: float = 0.1


@dataclass(frozen=True)
class BenchConfig:
    D_x: int
    lam: int
    eps_std: float
    seed: int = 0
    oracle_noise: bool = True

    def __post_init__(self):
        if self.D_x < 1 or self.lam < 1:
            raise ValueError("D_x and lambda must be >= 1")
        if not self.eps_std > 0:
            raise ValueError("eps_std must be > 0")

    @property
    def T(self) -> int:
        return self.D_x * self.lam

    @property
    def T_test(self) -> int:
        return max(50, self.T)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    f: np.ndarray  # noiseless targets for train, val, test stacked in that order
    jitter: float = 0.0


@dataclass
class GPPosterior:
    kernel: KernelSpec
    X: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    noise_var: float
    jitter: float


@dataclass
class QualityScore:
    mean_kl: float
    kls: np.ndarray


# -- kernel ----------------------------------------------------------------

def nngp_kernel_matrix(X1, X2, kernel: KernelSpec = KernelSpec()) -> np.ndarray:
    """Covariance of an infinitely wide ReLU network between rows of X1 and X2."""
    X1 = as_tensor(X1)
    X2 = as_tensor(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError("inputs must have the same dimension")
    D = X1.shape[1]
    sw, sb = kernel.sigma_w2, kernel.sigma_b2
    k12 = sb + sw * (X1 @ X2.T) / D
    k11 = sb + sw * np.einsum("ij,ij->i", X1, X1) / D
    k22 = sb + sw * np.einsum("ij,ij->i", X2, X2) / D
    for _ in range(kernel.depth):
        norm = np.sqrt(np.outer(k11, k22))
        cos = np.clip(k12 / norm, -1.0, 1.0)
        theta = np.arccos(cos)
        k12 = sb + sw / (2 * np.pi) * norm * (np.sin(theta) + (np.pi - theta) * cos)
        # theta == 0 on the diagonal
        k11 = sb + sw / 2 * k11
        k22 = sb + sw / 2 * k22
    return k12


def nngp_kernel(x1, x2, depth: int = 2, sigma_w2: float = 2.0, sigma_b2: float = 0.1) -> float:
    x1 = np.atleast_2d(as_tensor(x1))
    x2 = np.atleast_2d(as_tensor(x2))
    return float(nngp_kernel_matrix(x1, x2, KernelSpec(depth, sigma_w2, sigma_b2))[0, 0])


def nngp_kernel_diag(X, kernel: KernelSpec = KernelSpec()) -> np.ndarray:
    X = as_tensor(X)
    k = kernel.sigma_b2 + kernel.sigma_w2 * np.einsum("ij,ij->i", X, X) / X.shape[1]
    for _ in range(kernel.depth):
        k = kernel.sigma_b2 + kernel.sigma_w2 / 2 * k
    return k


def jittered_cholesky(K: np.ndarray, ladder=JITTER_LADDER):
    """Cholesky of ``K + jitter*I`` for the first jitter on the ladder that works."""
    eye = np.eye(len(K))
    for jitter in ladder:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(f"Cholesky failed even with jitter {ladder[-1]}")


# -- data --------------------------------------------------------------------

def gen_dataset(cfg: BenchConfig, kernel: KernelSpec = KernelSpec()) -> Dataset:
    """Sample train/validation/test sets with ``f`` drawn from the NNGP prior.

    ``f`` is drawn jointly over all inputs so the three splits come from one
    function. Deterministic given ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_tr, n_ho = cfg.T, cfg.T_test
    X_all = rng.standard_normal((n_tr + 2 * n_ho, cfg.D_x))
    z = rng.standard_normal(len(X_all))
    noise = rng.standard_normal(len(X_all))
    L, jitter = jittered_cholesky(nngp_kernel_matrix(X_all, X_all, kernel),
                                  JITTER_LADDER + (1e-5, 1e-4))
    if jitter > JITTER_LADDER[-1]:
        log.warning("dataset seed %d needed Cholesky jitter %g", cfg.seed, jitter)
    f = L @ z
    y = f + cfg.eps_std * noise
    a, b = n_tr, n_tr + n_ho
    return Dataset(
        X=X_all[:a], y=y[:a, None],
        X_val=X_all[a:b], y_val=y[a:b, None],
        X_test=X_all[b:], y_test=y[b:, None],
        f=f, jitter=jitter,
    )


# -- GP oracle ---------------------------------------------------------------

def gp_fit(X, y, kernel: KernelSpec = KernelSpec(), noise_var: float = 1e-2) -> GPPosterior:
    X = as_tensor(X)
    y = as_tensor(y).reshape(-1)
    if len(X) < 1:
        raise ValueError("need at least one training point")
    K = nngp_kernel_matrix(X, X, kernel) + noise_var * np.eye(len(X))
    L, jitter = jittered_cholesky(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    return GPPosterior(kernel, X, L, alpha, float(noise_var), jitter)


def gp_predict(post: GPPosterior, X, include_noise: bool = False) -> GaussianPrediction:
    """Posterior predictive mean and variance of the latent function.

    With ``include_noise`` the observation noise variance is added, giving the
    predictive distribution of ``y`` rather than ``f``.
    """
    X = as_tensor(X)
    Ks = nngp_kernel_matrix(post.X, X, post.kernel)
    mean = Ks.T @ post.alpha
    v = np.linalg.solve(post.chol, Ks)
    var = nngp_kernel_diag(X, post.kernel) - np.einsum("ij,ij->j", v, v)
    if include_noise:
        var = var + post.noise_var
    return GaussianPrediction(mean, np.maximum(var, VAR_FLOOR))


# -- scoring -------------------------------------------------------------------

def kl_gauss(p: GaussianPrediction, q: GaussianPrediction):
    """KL(p || q) between univariate Gaussians, elementwise over arrays."""
    mp, vp = np.asarray(p.mean, dtype=float), np.asarray(p.var, dtype=float)
    mq, vq = np.asarray(q.mean, dtype=float), np.asarray(q.var, dtype=float)
    for a in (mp, vp, mq, vq):
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite Gaussian parameters")
    if np.any(vp <= 0) or np.any(vq <= 0):
        raise ValueError("variances must be positive")
    kl = 0.5 * np.log(vq / vp) + (vp + (mp - mq) ** 2) / (2 * vq) - 0.5
    # rounding can leave tiny negatives when p and q nearly coincide
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def quality_score(model_pred: GaussianPrediction, oracle_pred: GaussianPrediction) -> QualityScore:
    """Mean per-point KL(model || oracle). Lower is better."""
    if len(model_pred) != len(oracle_pred):
        raise ValueError(f"{len(model_pred)} model points vs {len(oracle_pred)} oracle points")
    kls = np.atleast_1d(kl_gauss(model_pred, oracle_pred))
    return QualityScore(float(np.mean(kls)), kls)


def oracle_predictions(data: Dataset, cfg: BenchConfig, kernel: KernelSpec = KernelSpec()):
    """Fit the NNGP on the training split; return (validation, test) predictions."""
    post = gp_fit(data.X, data.y, kernel, noise_var=cfg.eps_std ** 2)
    return (gp_predict(post, data.X_val, include_noise=cfg.oracle_noise),
            gp_predict(post, data.X_test, include_noise=cfg.oracle_noise))


# -- methods and sweep -----------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """A trainable ensemble configuration.

    ``kind`` is ``layer-ensemble`` (J random distinct layer samples at
    prediction time, categorical sampling during training) or
    ``deep-ensemble`` (K disjoint samples, all trained every step).
    """

    kind: str
    K: int = 3
    J: int | None = None
    prior_scale: float = 1.0
    hidden: tuple = (50, 50)
    steps: int = 2000
    lr: float = 0.01
    batch_size: int = 32
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("layer-ensemble", "deep-ensemble"):
            raise ValueError(f"unknown method {self.kind!r}")

    @property
    def n_samples(self) -> int:
        if self.kind == "deep-ensemble":
            return self.K
        return self.J if self.J is not None else self.K ** (len(self.hidden) + 1)

    @property
    def label(self) -> str:
        if self.prior_scale == 1.0:
            return self.kind
        return f"{self.kind}[prior={self.prior_scale:g}]"


def stable_seed(*parts) -> int:
    """Seed derived by hashing ``parts``; identical across runs and processes."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def data_seed(cfg: BenchConfig) -> int:
    return stable_seed("data", cfg.D_x, cfg.lam, float(cfg.eps_std), cfg.seed)


def train_method(method: MethodSpec, data: Dataset, cfg: BenchConfig):
    """Train one model on ``data``; returns ``(model, prediction_samples)``.

    Model init, training and sample draws are seeded from the cell coordinates
    only, so different methods in the same cell share initial weights.
    """
    coords = (cfg.D_x, cfg.lam, float(cfg.eps_std), cfg.seed)
    arch = arch_from_sizes([cfg.D_x, *method.hidden, 1])
    model = LayerEnsembleModel.init(arch, method.K, prior_scale=method.prior_scale,
                                    seed=stable_seed("model", *coords))
    batches = math.ceil(len(data.X) / method.batch_size)
    epochs = max(1, math.ceil(method.steps / batches))
    if method.kind == "deep-ensemble":
        samples = deep_ensemble_samples(method.K, model.N)
        pool = samples
    else:
        rng = np.random.default_rng(stable_seed("samples", *coords))
        samples = random_samples(method.K, model.N, method.n_samples, rng)
        pool = None
    fit(model, data.X, data.y, epochs=epochs, lr=method.lr, batch_size=method.batch_size,
        samples_per_batch=method.K, seed=stable_seed("train", *coords), pool=pool,
        weight_decay=method.weight_decay)
    return model, samples


def ensemble_prediction(model: LayerEnsembleModel, samples, X) -> GaussianPrediction:
    return gaussian_from_outputs(ole_eval(model, samples, X))


def run_cell(cfg: BenchConfig, method: MethodSpec, kernel: KernelSpec = KernelSpec(),
             timing: bool = True) -> dict:
    t0 = time.perf_counter()
    data = gen_dataset(replace(cfg, seed=data_seed(cfg)), kernel)
    _, oracle_test = oracle_predictions(data, cfg, kernel)
    model, samples = train_method(method, data, cfg)
    score = quality_score(ensemble_prediction(model, samples, data.X_test), oracle_test)
    wall = (time.perf_counter() - t0) * 1e3
    return {
        "method": method.label, "K": method.K, "J": len(samples), "D_x": cfg.D_x,
        "lambda": cfg.lam, "eps": cfg.eps_std, "seed": cfg.seed, "Q": score.mean_kl,
        "wall_ms": wall if timing else None,
    }


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (method label, cfg, error message)


def make_grid(D_xs, lambdas, epss) -> list[BenchConfig]:
    return [BenchConfig(d, l, e) for d in D_xs for l in lambdas for e in epss]


def run_sweep(grid, methods, seeds, kernel: KernelSpec = KernelSpec(), threads: int = 1,
              timing: bool = True) -> SweepResult:
    """Score every (config, method, seed) cell; failing cells are recorded and skipped.

    Row order is grid-major, then method, then seed, independent of ``threads``.
    """
    if not grid:
        raise ValueError("empty grid")
    cells = [(replace(cfg, seed=s), m) for cfg in grid for m in methods for s in seeds]

    def run(cell):
        cfg, m = cell
        try:
            return run_cell(cfg, m, kernel, timing), None
        except Exception as exc:  # noqa: BLE001 - a bad cell must not kill the sweep
            log.warning("cell %s %s failed: %s", m.label, cfg, exc)
            return None, (m.label, cfg, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(run, cells))
    else:
        outcomes = [run(c) for c in cells]
    result = SweepResult()
    for row, failure in outcomes:
        if row is not None:
            result.rows.append(row)
        else:
            result.failures.append(failure)
    return result


def aggregate(rows, keys=("method", "K", "J", "D_x", "lambda", "eps")) -> list[dict]:
    """Mean and population std of Q across seeds for each group of ``keys``."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["Q"])
    out = []
    for key, qs in groups.items():
        d = dict(zip(keys, key))
        d.update(Q_mean=float(np.mean(qs)), Q_std=float(np.std(qs)), n=len(qs))
        out.append(d)
    return out


def format_row(row: dict) -> list[str]:
    wall = row["wall_ms"]
    return [row["method"], str(row["K"]), str(row["J"]), str(row["D_x"]), str(row["lambda"]),
            repr(float(row["eps"])), str(row["seed"]), repr(float(row["Q"])),
            "" if wall is None else f"{wall:.3f}"]
