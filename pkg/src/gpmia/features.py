"""Diagnostic feature vectors for audit units.

A unit is a batch of one or more labelled samples; per-sample quantities are
averaged over the unit. Three families, always emitted in this order:

``common``  accuracy, entropy, loss, confidence, correct-class probability,
            fine-tune perturbation, grand input mean, grand input variance
``grad``    parameter-Jacobian norm, input-Jacobian norm, loss, loss-gradient norm
``ntk``     ridge leverage, |h|_2, max |h_i|, max and mean NTK cosine similarity

The NTK between two samples is the Frobenius inner product of their
parameter-Jacobians, i.e. the trace of the m x m block.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from gpmia import linops, nnet
from gpmia.errors import (
    ConfigError,
    DimensionMismatch,
    FeatureSchemaMismatch,
    InsufficientData,
    MissingNtkContext,
)

log = logging.getLogger(__name__)

FAMILIES = ("common", "grad", "ntk")
COMMON_NAMES = (
    "accuracy",
    "entropy",
    "loss",
    "confidence",
    "correct_prob",
    "perturbation",
    "input_mean",
    "input_var",
)
GRAD_NAMES = ("param_jac_fro", "input_jac_fro", "loss", "loss_grad_norm")
NTK_NAMES = ("leverage", "h_norm", "h_max", "sim_max", "sim_mean")
FAMILY_NAMES = {"common": COMMON_NAMES, "grad": GRAD_NAMES, "ntk": NTK_NAMES}
DEGENERATE_KXX = 1e-12
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class AuditUnit:
    samples: np.ndarray
    labels: np.ndarray
    unit_id: str = ""

    def __post_init__(self):
        X = np.ascontiguousarray(self.samples, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        y = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if X.shape[0] < 1:
            raise ConfigError("an audit unit needs at least one sample")
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatch(f"unit {self.unit_id!r}: {X.shape[0]} samples, {y.shape[0]} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class FeatureConfig:
    families: tuple[str, ...] = ("common",)
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    ntk_lambda: float = 1.0
    ntk_ref_size: int = 64

    def __post_init__(self):
        fams = tuple(f for f in FAMILIES if f in set(self.families))
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown feature families: {sorted(unknown)}")
        if not fams:
            raise ConfigError("at least one feature family must be enabled")
        if not self.ntk_lambda > 0:
            raise ConfigError("ntk_lambda must be > 0")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        object.__setattr__(self, "families", fams)

    @property
    def names(self):
        return [f"{fam}.{n}" for fam in self.families for n in FAMILY_NAMES[fam]]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...]
    unit_id: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        names = tuple(self.names)
        if v.shape[0] != len(names):
            raise DimensionMismatch(f"{v.shape[0]} values for {len(names)} names")
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"unit {self.unit_id!r} has non-finite features")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", names)

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))


@dataclass(frozen=True)
class NtkContext:
    reference_jacobians: np.ndarray  # (R, m*p)
    gram: np.ndarray
    lam: float
    factor: linops.CholeskyFactor

    @property
    def ref_diag(self):
        return np.diag(self.gram)


def _entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -np.sum(terms, axis=-1)


def common_features(model: nnet.TargetModel, unit: AuditUnit, cfg: FeatureConfig) -> list[tuple[str, float]]:
    X, y = unit.samples, unit.labels
    logits = nnet.forward(model, X)
    probs = nnet.softmax_probs(logits)
    logp = nnet.log_softmax(logits)
    idx = np.arange(len(unit))
    _, perturbation = nnet.finetune_copy(model, X, y, cfg.finetune_epochs, cfg.finetune_lr)
    values = (
        float(np.mean(np.argmax(logits, axis=1) == y)),
        float(np.mean(_entropy(probs))),
        float(np.mean(-logp[idx, y])),
        float(np.mean(np.max(probs, axis=1))),
        float(np.mean(probs[idx, y])),
        perturbation,
        float(np.mean(X)),
        float(np.var(X)),
    )
    return list(zip(COMMON_NAMES, values))


def grad_features(model: nnet.TargetModel, unit: AuditUnit) -> list[tuple[str, float]]:
    pjf, ijf, loss, lgn = nnet.batch_sensitivity(model, unit.samples, unit.labels)
    return list(zip(GRAD_NAMES, (float(np.mean(v)) for v in (pjf, ijf, loss, lgn))))


def flat_jacobians(model, X):
    pj, _ = nnet.batch_jacobians(model, X)
    return pj.reshape(pj.shape[0], -1)


def build_ntk_context(model: nnet.TargetModel, reference: AuditUnit, lam: float) -> NtkContext:
    if not lam > 0:
        raise ConfigError("lambda must be > 0")
    J = flat_jacobians(model, reference.samples)
    K = J @ J.T
    K = 0.5 * (K + K.T)
    factor = linops.cholesky(K + lam * np.eye(K.shape[0]))
    J.setflags(write=False)
    K.setflags(write=False)
    return NtkContext(J, K, float(lam), factor)


def ntk_sample_stats(ctx: NtkContext, Jx) -> np.ndarray:
    """Per-sample NTK statistics for flattened Jacobians ``Jx`` (n x m*p).

    Returns an (n x 5) array in ``NTK_NAMES`` order.
    """
    kx = Jx @ ctx.reference_jacobians.T            # (n, R)
    kxx = np.einsum("ij,ij->i", Jx, Jx)
    h = linops.solve_spd(ctx.factor, kx.T).T       # (n, R)
    tau = np.einsum("ij,ij->i", kx, h)
    out = np.empty((Jx.shape[0], 5))
    out[:, 0] = tau
    out[:, 1] = np.sqrt(np.einsum("ij,ij->i", h, h))
    out[:, 2] = np.max(np.abs(h), axis=1)
    rdiag = ctx.ref_diag
    for i in range(Jx.shape[0]):
        if kxx[i] < DEGENERATE_KXX:
            log.warning("degenerate NTK self-similarity k(x,x)=%.3e; similarity features set to 0", kxx[i])
            out[i, 3:] = 0.0
            continue
        denom = np.sqrt(kxx[i] * rdiag)
        s = np.where(rdiag >= DEGENERATE_KXX, kx[i] / np.where(denom > 0, denom, 1.0), 0.0)
        s = np.clip(s, -1.0, 1.0)
        out[i, 3] = np.max(s)
        out[i, 4] = np.mean(s)
    return out


def ntk_features(model: nnet.TargetModel, unit: AuditUnit, ctx: NtkContext) -> list[tuple[str, float]]:
    Jx = flat_jacobians(model, unit.samples)
    if Jx.shape[1] != ctx.reference_jacobians.shape[1]:
        raise DimensionMismatch("NTK context was built for a different architecture")
    stats = ntk_sample_stats(ctx, Jx)
    return list(zip(NTK_NAMES, (float(v) for v in np.mean(stats, axis=0))))


def extract(model: nnet.TargetModel, unit: AuditUnit, cfg: FeatureConfig,
            ctx: NtkContext | None = None) -> FeatureVector:
    if "ntk" in cfg.families and ctx is None:
        raise MissingNtkContext("the ntk family is enabled but no NTK context was given")
    names, values = [], []
    for fam in cfg.families:
        if fam == "common":
            part = common_features(model, unit, cfg)
        elif fam == "grad":
            part = grad_features(model, unit)
        else:
            part = ntk_features(model, unit, ctx)
        for n, v in part:
            names.append(f"{fam}.{n}")
            values.append(v)
    return FeatureVector(np.array(values), tuple(names), unit.unit_id)


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    names: tuple[str, ...] = ()

    def apply(self, fv: FeatureVector) -> FeatureVector:
        check_schema(self.names, fv.names)
        return FeatureVector((fv.values - self.means) / self.stds, fv.names, fv.unit_id)

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.means.shape[0]:
            raise DimensionMismatch(f"standardizer has {self.means.shape[0]} columns, got {X.shape[-1]}")
        return (X - self.means) / self.stds

    def to_dict(self):
        return {
            "names": list(self.names),
            "means": [float(v).hex() for v in self.means],
            "stds": [float(v).hex() for v in self.stds],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array([float.fromhex(v) for v in doc["means"]]),
                   np.array([float.fromhex(v) for v in doc["stds"]]),
                   tuple(doc["names"]))


def fit_standardizer(features: list[FeatureVector]) -> Standardizer:
    """Column means and population standard deviations (floored at 1e-12)."""
    if len(features) < 2:
        raise InsufficientData("need at least 2 feature vectors to fit a standardizer")
    names = features[0].names
    for fv in features[1:]:
        check_schema(names, fv.names)
    X = np.vstack([fv.values for fv in features])
    return Standardizer(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR), names)


def apply(standardizer: Standardizer, fv: FeatureVector) -> FeatureVector:
    return standardizer.apply(fv)


def check_schema(expected, got):
    expected, got = tuple(expected), tuple(got)
    if expected and expected != got:
        missing = [n for n in expected if n not in got]
        extra = [n for n in got if n not in expected]
        raise FeatureSchemaMismatch(missing, extra)


# -- feature store: JSON lines, one record per unit ---------------------------

def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _fmt(v):
    return format(float(v), ".17g")


def write_store(path, records, fingerprint: str = "") -> None:
    """Write ``records``: iterable of (FeatureVector, label-or-None, extra-dict-or-None)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fv, label, extra in records:
            rec = {
                "unit_id": fv.unit_id,
                "label": None if label is None else int(label),
                "names": list(fv.names),
                "values": [_fmt(v) for v in fv.values],
                "fingerprint": fingerprint,
            }
            if extra:
                rec["meta"] = extra
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class StoreRecord:
    vector: FeatureVector
    label: int | None
    fingerprint: str
    meta: dict


def read_store(path) -> list[StoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                fv = FeatureVector(np.array([float(v) for v in rec["values"]]), tuple(rec["names"]),
                                   rec["unit_id"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed feature record ({exc})") from exc
            out.append(StoreRecord(fv, rec.get("label"), rec.get("fingerprint", ""), rec.get("meta") or {}))
    return out


def stack(vectors: list[FeatureVector]):
    if not vectors:
        raise InsufficientData("no feature vectors")
    names = vectors[0].names
    for fv in vectors[1:]:
        check_schema(names, fv.names)
    return np.vstack([fv.values for fv in vectors]), names
