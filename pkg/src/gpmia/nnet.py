"""Numpy MLP classifier used as the audited target model.

Parameters live in one flat vector. For each layer ``l`` the block is the
weight matrix ``W_l`` (out x in, row-major) followed by the bias ``b_l``.
Hidden layers use the configured activation; the output layer is linear
(logits). The loss is softmax cross-entropy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gpmia.errors import ConfigError, DimensionMismatch, EmptyDataset, LabelOutOfRange

MODEL_FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all layer widths must be >= 1")
        if not self.hidden_dims:
            raise ConfigError("at least one hidden layer is required")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def layer_shapes(self):
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self):
        return sum(o * (i + 1) for o, i in self.layer_shapes)


@dataclass(frozen=True)
class TargetModel:
    arch: MlpArchitecture
    params: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (self.arch.n_params,):
            raise DimensionMismatch(f"expected {self.arch.n_params} parameters, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("model parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def layers(self):
        """Views ``(W, b)`` into the flat parameter vector."""
        return _unflatten(self.arch, self.params)

    def with_params(self, params):
        return TargetModel(self.arch, params, self.rng_seed)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigError("learning_rate must lie in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass(frozen=True)
class SensitivityBundle:
    loss_grad_norm: float
    param_jac_fro: float
    input_jac_fro: float
    loss_value: float


@dataclass
class TrainHistory:
    epoch_losses: list = field(default_factory=list)


def _unflatten(arch, flat):
    out = []
    pos = 0
    for o, i in arch.layer_shapes:
        W = flat[pos:pos + o * i].reshape(o, i)
        pos += o * i
        b = flat[pos:pos + o]
        pos += o
        out.append((W, b))
    return out


def init_model(arch: MlpArchitecture, seed: int = 0) -> TargetModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for o, i in arch.layer_shapes:
        limit = np.sqrt(6.0 / (i + o))
        parts.append(rng.uniform(-limit, limit, size=o * i))
        parts.append(np.zeros(o))
    return TargetModel(arch, np.concatenate(parts), seed)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X.reshape(1, -1) if single else X
    if X2.ndim != 2 or X2.shape[1] != model.arch.input_dim:
        raise DimensionMismatch(f"expected inputs of width {model.arch.input_dim}, got shape {X.shape}")
    return X2, single


def _check_labels(model, y, n):
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise DimensionMismatch(f"{n} samples but {y.shape[0]} labels")
    yi = y.astype(np.int64)
    if np.any(yi != y) or np.any(yi < 0) or np.any(yi >= model.arch.output_dim):
        raise LabelOutOfRange(f"labels must be integers in [0, {model.arch.output_dim})")
    return yi


def _forward_cache(layers, activation, X):
    """Return the list of (pre-activation, activation) per layer; a[0] is X."""
    zs = []
    acts = [X]
    h = X
    last = len(layers) - 1
    for li, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        h = z if li == last else _act(activation, z)
        acts.append(h)
    return zs, acts


def forward(model: TargetModel, x) -> np.ndarray:
    """Logits for one sample (1-D) or a batch (2-D)."""
    X, single = _check_batch(model, x)
    _, acts = _forward_cache(model.layers(), model.arch.activation, X)
    out = acts[-1]
    return out[0] if single else out


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _backward(layers, activation, zs, acts, delta_out):
    """Backpropagate ``delta_out`` (n x m, dL/dlogits per sample).

    Returns per-sample parameter gradients as an (n x p) array and the input
    gradient (n x d).
    """
    n = delta_out.shape[0]
    grads = []
    delta = delta_out
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = acts[li]
        gW = delta[:, :, None] * a_prev[:, None, :]
        grads.append((gW.reshape(n, -1), delta))
        delta = delta @ W
        if li > 0:
            delta = delta * _act_grad(activation, zs[li - 1], acts[li])
    flat = np.concatenate([np.concatenate(g, axis=1) for g in reversed(grads)], axis=1)
    return flat, delta


def _batch_loss_grad(model, layers, X, y):
    """Mean cross-entropy and its gradient over a batch, without per-sample storage."""
    zs, acts = _forward_cache(layers, model.arch.activation, X)
    logp = log_softmax(acts[-1])
    n = X.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    parts = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        parts.append((delta.sum(axis=0), (delta.T @ acts[li]).reshape(-1)))
        if li > 0:
            delta = (delta @ W) * _act_grad(model.arch.activation, zs[li - 1], acts[li])
    grad = np.concatenate([np.concatenate([gw, gb]) for gb, gw in reversed(parts)])
    return loss, grad


def mean_loss(model: TargetModel, X, y) -> float:
    X, _ = _check_batch(model, X)
    y = _check_labels(model, y, X.shape[0])
    logp = log_softmax(forward(model, X))
    return -float(np.mean(logp[np.arange(X.shape[0]), y]))


def accuracy(model: TargetModel, X, y) -> float:
    X, _ = _check_batch(model, X)
    y = _check_labels(model, y, X.shape[0])
    return float(np.mean(np.argmax(forward(model, X), axis=1) == y))


def loss_and_gradient(model: TargetModel, x, y):
    """Cross-entropy loss of one sample and its gradient w.r.t. all parameters."""
    X, single = _check_batch(model, x)
    if not single:
        raise DimensionMismatch("loss_and_gradient takes a single sample")
    yi = _check_labels(model, [y], 1)
    return _batch_loss_grad(model, model.layers(), X, yi)


def per_sample_loss_grads(model: TargetModel, X, y):
    """Losses (n,) and loss gradients (n x p) for every sample of a batch."""
    X, _ = _check_batch(model, X)
    y = _check_labels(model, y, X.shape[0])
    layers = model.layers()
    zs, acts = _forward_cache(layers, model.arch.activation, X)
    logp = log_softmax(acts[-1])
    n = X.shape[0]
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    grads, _ = _backward(layers, model.arch.activation, zs, acts, delta)
    return -logp[np.arange(n), y], grads


def batch_jacobians(model: TargetModel, X):
    """Parameter-Jacobians (n x m x p) and input-Jacobians (n x m x d).

    One backward pass per output coordinate.
    """
    X, _ = _check_batch(model, X)
    layers = model.layers()
    zs, acts = _forward_cache(layers, model.arch.activation, X)
    n, m = X.shape[0], model.arch.output_dim
    pj = np.empty((n, m, model.arch.n_params))
    ij = np.empty((n, m, model.arch.input_dim))
    for i in range(m):
        seed = np.zeros((n, m))
        seed[:, i] = 1.0
        pj[:, i, :], ij[:, i, :] = _backward(layers, model.arch.activation, zs, acts, seed)
    return pj, ij


def parameter_jacobian(model: TargetModel, x) -> np.ndarray:
    """d logits / d params for one sample, shape (m, p)."""
    X, single = _check_batch(model, x)
    if not single:
        raise DimensionMismatch("parameter_jacobian takes a single sample")
    return batch_jacobians(model, X)[0][0]


def input_jacobian(model: TargetModel, x) -> np.ndarray:
    """d logits / d x for one sample, shape (m, d)."""
    X, single = _check_batch(model, x)
    if not single:
        raise DimensionMismatch("input_jacobian takes a single sample")
    return batch_jacobians(model, X)[1][0]


def batch_sensitivity(model: TargetModel, X, y):
    """Per-sample sensitivity scalars as four (n,) arrays.

    Order: param_jac_fro, input_jac_fro, loss_value, loss_grad_norm.
    """
    losses, lgrads = per_sample_loss_grads(model, X, y)
    pj, ij = batch_jacobians(model, X)
    return (
        np.sqrt(np.einsum("nmp,nmp->n", pj, pj)),
        np.sqrt(np.einsum("nmd,nmd->n", ij, ij)),
        losses,
        np.sqrt(np.einsum("np,np->n", lgrads, lgrads)),
    )


def sensitivity_bundle(model: TargetModel, x, y) -> SensitivityBundle:
    X, single = _check_batch(model, x)
    if not single:
        raise DimensionMismatch("sensitivity_bundle takes a single sample")
    pjf, ijf, loss, lgn = batch_sensitivity(model, X, [y])
    return SensitivityBundle(
        loss_grad_norm=float(lgn[0]),
        param_jac_fro=float(pjf[0]),
        input_jac_fro=float(ijf[0]),
        loss_value=float(loss[0]),
    )


class _Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def _validate_data(model, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("training data is empty")
    X, _ = _check_batch(model, X)
    return X, _check_labels(model, y, X.shape[0])


def train(model: TargetModel, X, y, cfg: TrainConfig, history: TrainHistory | None = None) -> TargetModel:
    """Mini-batch training from ``model``'s parameters; returns a new model.

    Mini-batch order is drawn from ``cfg.seed``. If ``history`` is given, the
    full-data loss after each epoch is appended to it.
    """
    X, y = _validate_data(model, X, y)
    rng = np.random.default_rng(cfg.seed)
    params = np.array(model.params)
    opt = _Adam(params.size, cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = _batch_loss_grad(model, _unflatten(model.arch, params), X[idx], y[idx])
            params = opt.step(params, g)
        if history is not None:
            history.epoch_losses.append(_batch_loss_grad(model, _unflatten(model.arch, params), X, y)[0])
    return model.with_params(params)


def finetune_copy(model: TargetModel, X, y, epochs: int = 5, lr: float = 1e-3):
    """Lightly fine-tune a copy of ``model`` on (X, y).

    Each epoch is one full-batch gradient step, so the result does not depend
    on the batch size or on any random stream. Returns ``(tuned, ||dtheta||_2)``.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    X, y = _validate_data(model, X, y)
    params = np.array(model.params)
    for _ in range(epochs):
        _, g = _batch_loss_grad(model, _unflatten(model.arch, params), X, y)
        params = params - lr * g
    tuned = model.with_params(params)
    return tuned, float(np.linalg.norm(params - model.params))


def model_to_dict(model: TargetModel) -> dict:
    return {
        "format": "gpmia-mlp",
        "version": MODEL_FORMAT_VERSION,
        "arch": {
            "input_dim": model.arch.input_dim,
            "hidden_dims": list(model.arch.hidden_dims),
            "output_dim": model.arch.output_dim,
            "activation": model.arch.activation,
        },
        "rng_seed": model.rng_seed,
        # float.hex is exact; repr() would also round-trip but hex makes the intent plain
        "params": [float(v).hex() for v in model.params],
    }


def model_from_dict(doc: dict) -> TargetModel:
    if doc.get("format") != "gpmia-mlp":
        raise ConfigError("not a gpmia model document")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version {doc.get('version')}")
    a = doc["arch"]
    arch = MlpArchitecture(a["input_dim"], tuple(a["hidden_dims"]), a["output_dim"], a["activation"])
    params = np.array([float.fromhex(v) for v in doc["params"]])
    return TargetModel(arch, params, int(doc.get("rng_seed", 0)))


def save_model(model: TargetModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> TargetModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def build_model(input_dim: int, hidden_dims: Sequence[int], output_dim: int,
                activation: str = "relu", seed: int = 0) -> TargetModel:
    return init_model(MlpArchitecture(input_dim, tuple(hidden_dims), output_dim, activation), seed)
