"""Bayesian optimization pieces: Sobol sampling, a random-forest surrogate and
log expected improvement.

The objective is maximized throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import sklearn
from scipy.special import erfcx, ndtr
from scipy.stats import qmc
from sklearn.tree import DecisionTreeRegressor

from .errors import DimensionUnsupported, EmptyTrainingSet, NotFitted

SIGMA_FLOOR = 1e-6
LEI_FLOOR = -690.0
DEFAULT_XI = 0.01
DEFAULT_POOL = 512
MAX_SOBOL_DIM = 21201


def sobol_sequence(dim: int, n: int) -> np.ndarray:
    """First ``n`` points of the unscrambled base-2 Sobol sequence, skipping the origin.

    Returns an ``(n, dim)`` array; row ``i`` is point ``i + 1`` of the sequence.
    """
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be positive")
    if dim > MAX_SOBOL_DIM:
        raise DimensionUnsupported(f"Sobol direction numbers cover {MAX_SOBOL_DIM} dimensions, got {dim}")
    engine = qmc.Sobol(d=dim, scramble=False)
    engine.fast_forward(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return engine.random(n)


@dataclass(frozen=True)
class ForestConfig:
    trees: int = 100
    min_leaf: int = 1
    feature_frac: float = 1.0 / 3.0
    seed: int = 0
    threads: int = 1


@dataclass
class Posterior:
    mean: float
    sigma: float


@dataclass
class SurrogateForest:
    config: ForestConfig
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None
    trees: list = field(default_factory=list)

    def tree_predictions(self, x: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise NotFitted("forest has not been fitted")
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float32)
        return np.stack([t.predict(x, check_input=False) for t in self.trees]).astype(np.float64)

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        per_tree = self.tree_predictions(x)
        mean = per_tree.mean(axis=0)
        if per_tree.shape[0] > 1:
            sd = per_tree.std(axis=0, ddof=1)
        else:
            sd = np.zeros_like(mean)
        return mean, np.maximum(sd, SIGMA_FLOOR)


def _fit_tree(x, y, rows, max_features, min_leaf, state):
    tree = DecisionTreeRegressor(max_features=max_features, min_samples_leaf=min_leaf, random_state=state)
    with sklearn.config_context(skip_parameter_validation=True):
        return tree.fit(x[rows], y[rows], check_input=False)


def forest_fit(train_x, train_y, config: ForestConfig = ForestConfig()) -> SurrogateForest:
    """Bagged regression trees; each split considers ceil(feature_frac * d) random features."""
    # the tree kernels work on float32 features
    x = np.ascontiguousarray(np.atleast_2d(train_x), dtype=np.float32)
    y = np.asarray(train_y, dtype=np.float64).reshape(-1)
    if len(y) == 0 or x.size == 0:
        raise EmptyTrainingSet("cannot fit a surrogate on no data")
    if x.shape[0] != len(y):
        raise ValueError("train_x and train_y lengths differ")
    n, d = x.shape
    max_features = max(1, min(d, math.ceil(config.feature_frac * d)))

    rng = np.random.default_rng(config.seed)
    jobs = [(rng.integers(0, n, size=n), int(rng.integers(0, 2**31 - 1))) for _ in range(config.trees)]
    args = [(x, y, rows, max_features, config.min_leaf, state) for rows, state in jobs]
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            trees = list(pool.map(lambda a: _fit_tree(*a), args))
    else:
        trees = [_fit_tree(*a) for a in args]
    return SurrogateForest(config, x, y, trees)


def forest_predict(forest: SurrogateForest, s) -> Posterior:
    mean, sigma = forest.predict_many(np.asarray(s, dtype=np.float64).reshape(1, -1))
    return Posterior(float(mean[0]), float(sigma[0]))


_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


def _log_h(z: float) -> float:
    """log(z * Phi(z) + phi(z)) without underflow."""
    log_phi = -0.5 * z * z - _LOG_SQRT_2PI
    if z >= 0.0:
        return math.log(z * float(ndtr(z)) + math.exp(log_phi))
    if z >= -6.0:
        # Phi(z) / phi(z) via the scaled complementary error function
        ratio = _SQRT_HALF_PI * float(erfcx(-z / math.sqrt(2.0)))
        return log_phi + math.log1p(z * ratio)
    # 1 + z * Phi(z)/phi(z) = sum_k (-1)^(k+1) (2k-1)!! / z^(2k), truncated at its smallest term
    inv = 1.0 / (z * z)
    term, total, k = inv, 0.0, 1
    while k < 40:
        total += term
        nxt = -term * (2 * k + 1) * inv
        if abs(nxt) >= abs(term):
            break
        term, k = nxt, k + 1
    return log_phi + math.log(total)


def log_expected_improvement(p: Posterior, f_best: float, xi: float = DEFAULT_XI) -> float:
    """Log of the classic expected improvement over ``f_best + xi``, floored at -690."""
    if not p.sigma > 0:
        raise ValueError("sigma must be positive")
    z = (p.mean - f_best - xi) / p.sigma
    return max(math.log(p.sigma) + _log_h(z), LEI_FLOOR)


def select_next(forest: SurrogateForest, space, f_best: float, pool: int = DEFAULT_POOL, seed: int = 0,
                xi: float = DEFAULT_XI):
    """Score ``pool`` random samples of ``space`` by LEI and return the best (lowest index on ties)."""
    if not forest.trees:
        raise NotFitted("forest has not been fitted")
    rng = np.random.default_rng(seed)
    candidates = [space.random_sample(rng) for _ in range(pool)]
    encoded = np.stack([space.encode(c) for c in candidates])
    means, sigmas = forest.predict_many(encoded)
    scores = [log_expected_improvement(Posterior(float(m), float(s)), f_best, xi) for m, s in zip(means, sigmas)]
    return candidates[int(np.argmax(scores))]
