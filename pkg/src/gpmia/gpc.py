"""Binary Gaussian-process classifier with a logistic likelihood.

Inference is the Laplace approximation (Newton iterations in the
``B = I + W^1/2 K W^1/2`` form), hyperparameters are fitted by gradient
ascent on the approximate log evidence, and predictive probabilities come
from Gauss-Hermite quadrature of the sigmoid against the latent Gaussian.

Covariance: ``k(a, b) = s2 * exp(-|a-b|^2 / (2 l^2)) + noise * [a is b]``.
Labels are {0, 1} externally and +-1 internally.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from gpmia import linops
from gpmia.errors import ConfigError, DimensionMismatch, NonConvergence, SingleClass

log = logging.getLogger(__name__)

POSTERIOR_FORMAT_VERSION = 1
N_QUADRATURE = 300
MAX_NEWTON = 100
NEWTON_TOL = 1e-10
STATIONARITY_TOL = 1e-8
# box for log hyperparameters during optimisation
LOG_BOUNDS = ((-9.0, 9.0), (-7.0, 7.0), (-23.0, 2.0))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return -np.logaddexp(0.0, -z)


@dataclass(frozen=True)
class GpHyperparams:
    signal_variance: float = 1.0
    lengthscale: float = 1.0
    noise_variance: float = 1e-4

    def __post_init__(self):
        if not (self.signal_variance > 0 and self.lengthscale > 0 and self.noise_variance >= 0):
            raise ConfigError("need signal_variance > 0, lengthscale > 0, noise_variance >= 0")

    @property
    def log_params(self):
        return np.array([
            math.log(self.signal_variance),
            math.log(self.lengthscale),
            math.log(self.noise_variance) if self.noise_variance > 0 else -math.inf,
        ])

    @classmethod
    def from_log(cls, theta):
        return cls(math.exp(theta[0]), math.exp(theta[1]), math.exp(theta[2]))

    @classmethod
    def default_for(cls, n_features):
        return cls(1.0, math.sqrt(n_features), 1e-4)


@dataclass(frozen=True)
class GpTrainingSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"features {X.shape} do not match {y.shape[0]} labels")
        if X.shape[0] < 2:
            raise ConfigError("need at least 2 training points")
        if not np.all(np.isin(y, (0, 1))):
            raise ConfigError("labels must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ConfigError("training features must be finite")
        X.setflags(write=False)
        y = y.astype(np.int64)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def signs(self):
        return 2.0 * self.labels - 1.0

    def require_both_classes(self):
        if len(np.unique(self.labels)) < 2:
            raise SingleClass("GP training needs both member and non-member examples")


@dataclass(frozen=True)
class GpPosterior:
    hyper: GpHyperparams
    train: GpTrainingSet
    mode: np.ndarray
    hessian_w: np.ndarray
    factor: linops.CholeskyFactor
    log_marginal: float
    grad_loglik: np.ndarray
    residual: float


@dataclass(frozen=True)
class MembershipPrediction:
    probability: float
    latent_mean: float
    latent_variance: float


def kernel(hyper: GpHyperparams, a, b, same_point: bool = False) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature lengths differ: {a.shape[0]} vs {b.shape[0]}")
    d2 = float(np.sum((a - b) ** 2))
    k = hyper.signal_variance * math.exp(-d2 / (2.0 * hyper.lengthscale ** 2))
    return k + (hyper.noise_variance if same_point else 0.0)


def _rbf_parts(hyper, X):
    d2 = linops.sq_dists(X, X)
    rbf = hyper.signal_variance * np.exp(-d2 / (2.0 * hyper.lengthscale ** 2))
    return d2, rbf


def gram(hyper: GpHyperparams, X) -> np.ndarray:
    """Training covariance including the white-noise diagonal."""
    _, rbf = _rbf_parts(hyper, X)
    return rbf + hyper.noise_variance * np.eye(X.shape[0])


def cross_cov(hyper: GpHyperparams, X, Xs) -> np.ndarray:
    d2 = linops.sq_dists(X, Xs)
    return hyper.signal_variance * np.exp(-d2 / (2.0 * hyper.lengthscale ** 2))


def _newton(K, t, max_iter):
    """Find the Laplace mode. Returns (f, a, W, L_B, residual, n_iter).

    Works in the ``f = K a`` parametrisation; the stationarity residual is
    ``|grad log p(y|f) - a|_inf``. Each Newton step is damped by halving
    until the objective ``log p(y|f) - a.f/2`` does not decrease.
    """
    n = K.shape[0]
    a = np.zeros(n)
    f = np.zeros(n)

    def objective(a_, f_):
        return float(np.sum(log_sigmoid(t * f_)) - 0.5 * a_ @ f_)

    psi = objective(a, f)
    residual = math.inf
    for it in range(1, max_iter + 1):
        pi = sigmoid(f)
        grad = (t + 1.0) / 2.0 - pi
        W = pi * (1.0 - pi)
        sw = np.sqrt(W)
        B = np.eye(n) + sw[:, None] * K * sw[None, :]
        LB = linops.cholesky(B)
        b = W * f + grad
        v = linops.solve_spd(LB, sw * (K @ b))
        a_new = b - sw * v
        da = a_new - a
        step = 1.0
        while True:
            a_try = a + step * da
            f_try = K @ a_try
            psi_try = objective(a_try, f_try)
            if psi_try >= psi - 1e-12 * max(1.0, abs(psi)) or step < 1e-10:
                break
            step *= 0.5
        change = float(np.max(np.abs(f_try - f))) if n else 0.0
        a, f, psi = a_try, f_try, psi_try
        pi = sigmoid(f)
        grad = (t + 1.0) / 2.0 - pi
        residual = float(np.max(np.abs(grad - a)))
        if residual < NEWTON_TOL or (change < 1e-14 and residual < STATIONARITY_TOL):
            break
    pi = sigmoid(f)
    W = pi * (1.0 - pi)
    sw = np.sqrt(W)
    LB = linops.cholesky(np.eye(n) + sw[:, None] * K * sw[None, :])
    return f, a, W, LB, residual, it


def fit_laplace(train: GpTrainingSet, hyper: GpHyperparams, max_iter: int = MAX_NEWTON) -> GpPosterior:
    """Laplace posterior for fixed hyperparameters.

    The evidence is ``-a.f/2 + log p(y|f) - sum(log diag L_B)``.
    Raises ``NonConvergence`` if the residual is still above 1e-8 after
    ``max_iter`` Newton steps.
    """
    K = gram(hyper, train.features)
    t = train.signs
    f, a, W, LB, residual, _ = _newton(K, t, max_iter)
    if not residual < STATIONARITY_TOL:
        raise NonConvergence(f"Laplace mode not found in {max_iter} iterations (residual {residual:.3e})",
                             residual=residual)
    lml = float(-0.5 * a @ f + np.sum(log_sigmoid(t * f)) - np.sum(np.log(np.diag(LB.lower))))
    f.setflags(write=False)
    return GpPosterior(hyper, train, f, W, LB, lml, a, residual)


def log_marginal(train: GpTrainingSet, hyper: GpHyperparams) -> float:
    return fit_laplace(train, hyper).log_marginal


def log_marginal_and_gradient(train: GpTrainingSet, hyper: GpHyperparams):
    """Laplace evidence and its gradient w.r.t. (log s2, log l, log noise).

    The implicit dependence of the mode on the hyperparameters is included
    through the third derivative of the log-likelihood.
    """
    post = fit_laplace(train, hyper)
    X = train.features
    n = X.shape[0]
    d2, rbf = _rbf_parts(hyper, X)
    K = rbf + hyper.noise_variance * np.eye(n)
    f, W, a = post.mode, post.hessian_w, post.grad_loglik
    pi = sigmoid(f)
    t = train.signs
    dlp = (t + 1.0) / 2.0 - pi
    d3lp = -W * (1.0 - 2.0 * pi)
    sw = np.sqrt(W)
    LB = post.factor
    R = sw[:, None] * linops.solve_spd(LB, np.diag(sw))
    C = linops.solve_lower(LB, sw[:, None] * K)
    s2 = 0.5 * (np.diag(K) - np.sum(C * C, axis=0)) * d3lp

    dK = (
        rbf,
        rbf * d2 / hyper.lengthscale ** 2,
        hyper.noise_variance * np.eye(n),
    )
    grad = np.empty(3)
    for j, Cj in enumerate(dK):
        s1 = 0.5 * a @ Cj @ a - 0.5 * np.sum(R * Cj)
        b = Cj @ dlp
        s3 = b - K @ (R @ b)
        grad[j] = s1 + s2 @ s3
    return post.log_marginal, grad


def log_marginal_gradient(train: GpTrainingSet, hyper: GpHyperparams) -> np.ndarray:
    return log_marginal_and_gradient(train, hyper)[1]


def optimize_hyperparams(train: GpTrainingSet, init: GpHyperparams, steps: int = 300,
                         gtol: float = 1e-6) -> GpHyperparams:
    """Gradient ascent on the log evidence in log-hyperparameter space.

    The step length grows by 1.5x after an accepted step and halves after a
    rejected one. Log-hyperparameters are clipped to ``LOG_BOUNDS``. Always
    returns the best point seen, so the evidence never drops below the
    initial value.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    train.require_both_classes()
    lo = np.array([b[0] for b in LOG_BOUNDS])
    hi = np.array([b[1] for b in LOG_BOUNDS])
    theta = init.log_params
    if not np.isfinite(theta[2]):
        theta[2] = lo[2]

    def evaluate(th):
        try:
            return log_marginal_and_gradient(train, GpHyperparams.from_log(th))
        except NonConvergence as exc:
            log.warning("evidence evaluation failed at %s: %s", th, exc)
            return -math.inf, np.zeros(3)

    best_val, grad = evaluate(theta)
    init_val = best_val
    if not math.isfinite(best_val):
        log.warning("evidence not finite at the initial hyperparameters; returning them unchanged")
        return init
    # start with a step that moves the largest coordinate by ~0.5
    lr = 0.5 / max(float(np.max(np.abs(grad))), 1e-12)
    for _ in range(steps):
        # projected gradient: ignore components pushing against an active bound
        g = grad.copy()
        g[(theta <= lo) & (g < 0)] = 0.0
        g[(theta >= hi) & (g > 0)] = 0.0
        if np.max(np.abs(g)) < gtol:
            break
        accepted = False
        while lr * np.max(np.abs(g)) > 1e-12:
            cand = np.clip(theta + lr * g, lo, hi)
            val, cgrad = evaluate(cand)
            if val > best_val:
                theta, best_val, grad = cand, val, cgrad
                lr *= 1.5
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
    log.debug("evidence %.6f -> %.6f", init_val, best_val)
    if np.array_equal(theta, init.log_params):
        return init
    return GpHyperparams.from_log(theta)


_GH_CACHE = {}


def gauss_hermite(n=N_QUADRATURE):
    if n not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(n)
        _GH_CACHE[n] = (x, w / math.sqrt(math.pi))
    return _GH_CACHE[n]


def expected_sigmoid(mean, variance, n_nodes=N_QUADRATURE):
    """E[sigmoid(f)] for f ~ N(mean, variance), by Gauss-Hermite quadrature."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    x, w = gauss_hermite(n_nodes)
    z = mean[..., None] + math.sqrt(2.0) * sd[..., None] * x
    return np.sum(w * sigmoid(z), axis=-1)


def predict_latent(post: GpPosterior, Xs):
    Xs = np.ascontiguousarray(np.atleast_2d(np.asarray(Xs, dtype=np.float64)))
    if Xs.shape[1] != post.train.features.shape[1]:
        raise DimensionMismatch(
            f"posterior expects {post.train.features.shape[1]} features, got {Xs.shape[1]}")
    Ks = cross_cov(post.hyper, post.train.features, Xs)
    mean = Ks.T @ post.grad_loglik
    sw = np.sqrt(post.hessian_w)
    v = linops.solve_lower(post.factor, sw[:, None] * Ks)
    kss = post.hyper.signal_variance + post.hyper.noise_variance
    var = np.maximum(kss - np.sum(v * v, axis=0), 0.0)
    return mean, var


def predict_many(post: GpPosterior, Xs) -> list[MembershipPrediction]:
    mean, var = predict_latent(post, Xs)
    prob = expected_sigmoid(mean, var)
    return [MembershipPrediction(float(p), float(m), float(v)) for p, m, v in zip(prob, mean, var)]


def predict(post: GpPosterior, x_star) -> MembershipPrediction:
    x = np.asarray(x_star, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict takes one feature vector; use predict_many for batches")
    return predict_many(post, x[None, :])[0]


def fit(train: GpTrainingSet, init: GpHyperparams | None = None, steps: int = 300) -> GpPosterior:
    """Optimise hyperparameters then return the Laplace posterior."""
    if init is None:
        init = GpHyperparams.default_for(train.features.shape[1])
    return fit_laplace(train, optimize_hyperparams(train, init, steps))


def posterior_to_dict(post: GpPosterior) -> dict:
    h = post.hyper
    return {
        "format": "gpmia-gpc",
        "version": POSTERIOR_FORMAT_VERSION,
        "hyper": {
            "signal_variance": h.signal_variance.hex(),
            "lengthscale": h.lengthscale.hex(),
            "noise_variance": float(h.noise_variance).hex(),
        },
        "features": [[float(v).hex() for v in row] for row in post.train.features],
        "labels": [int(v) for v in post.train.labels],
        "mode": [float(v).hex() for v in post.mode],
        "log_marginal": float(post.log_marginal).hex(),
    }


def posterior_from_dict(doc: dict) -> GpPosterior:
    """Rebuild a posterior by refitting the mode from the stored hyperparameters and features."""
    if doc.get("format") != "gpmia-gpc" or doc.get("version") != POSTERIOR_FORMAT_VERSION:
        raise ConfigError("not a supported gpmia posterior document")
    h = doc["hyper"]
    hyper = GpHyperparams(float.fromhex(h["signal_variance"]), float.fromhex(h["lengthscale"]),
                          float.fromhex(h["noise_variance"]))
    train = GpTrainingSet(np.array([[float.fromhex(v) for v in row] for row in doc["features"]]),
                          np.array(doc["labels"]))
    return fit_laplace(train, hyper)


def save_posterior(post: GpPosterior, path, extra: dict | None = None) -> None:
    doc = posterior_to_dict(post)
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_posterior(path):
    """Return ``(posterior, document)``; the document carries any extra keys."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return posterior_from_dict(doc), doc
