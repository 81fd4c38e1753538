import numpy as np
import pytest

from gpmia import nnet
from gpmia.features import AuditUnit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond_floor=1e-1):
    a = rng.standard_normal((n, n))
    return a @ a.T + cond_floor * n * np.eye(n)


def small_net(seed, activation="tanh", d=3, hidden=(5, 4), m=3, scale=1.0):
    """A net with <= 200 params and nonzero random biases."""
    model = nnet.build_model(d, hidden, m, activation, seed)
    rng = np.random.default_rng(seed + 1000)
    return model.with_params(scale * rng.standard_normal(model.arch.n_params))


def central_diff(fn, x, h=1e-5):
    """Central finite-difference Jacobian of vector-valued ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    f0 = np.atleast_1d(fn(x))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        jac[:, i] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2 * h)
    return jac


def gp_instance(seed, n=None, f=None):
    """Random separable-ish binary problem with N <= 30, F <= 5 and GP hyperparameters."""
    from gpmia import gpc

    r = np.random.default_rng(seed)
    n = n or int(r.integers(6, 31))
    f = f or int(r.integers(1, 6))
    X = r.standard_normal((n, f))
    y = (X[:, 0] + 0.7 * r.standard_normal(n) > 0).astype(int)
    y[0], y[1] = 0, 1
    hyper = gpc.GpHyperparams(float(np.exp(r.uniform(-1, 1.5))), float(np.exp(r.uniform(-0.5, 1.0))),
                              float(np.exp(r.uniform(-6, -1))))
    return gpc.GpTrainingSet(X, y), hyper


def dense_expected_sigmoid(mean, var):
    """E[sigmoid(f)], f ~ N(mean, var), by adaptive quadrature over a standard normal."""
    from scipy import integrate

    sd = float(np.sqrt(var))

    def integrand(z):
        u = mean + sd * z
        s = 1.0 / (1.0 + np.exp(-u)) if u >= 0 else np.exp(u) / (1.0 + np.exp(u))
        return s * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

    val, _ = integrate.quad(integrand, -40, 40, points=[-mean / sd] if sd > 0 and abs(mean / sd) < 40 else None,
                            epsabs=1e-13, epsrel=1e-13, limit=500)
    return val


def rel_err(a, b, floor=1e-8):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), floor))


def reference_logits(model, x):
    """Plain-loop forward pass used as an independent check on the vectorised one."""
    h = np.asarray(x, dtype=np.float64)
    layers = model.layers()
    for li, (W, b) in enumerate(layers):
        z = np.array([sum(W[r, c] * h[c] for c in range(W.shape[1])) + b[r] for r in range(W.shape[0])])
        if li < len(layers) - 1:
            z = np.maximum(z, 0.0) if model.arch.activation == "relu" else np.tanh(z)
        h = z
    return h


def net_case(seed):
    """One of the random numerics cases: a small net plus one sample and label."""
    r = np.random.default_rng(seed)
    act = "tanh" if seed % 2 else "relu"
    d = int(r.integers(2, 6))
    hidden = tuple(int(v) for v in r.integers(2, 7, size=int(r.integers(1, 3))))
    m = int(r.integers(2, 5))
    model = small_net(seed, act, d, hidden, m, scale=0.8)
    x = r.standard_normal(d)
    y = int(r.integers(0, m))
    return model, x, y


def near_relu_kink(model, x, margin=1e-3):
    """True if any hidden pre-activation is so close to zero that finite differences straddle the kink."""
    if model.arch.activation != "relu":
        return False
    h = np.asarray(x, dtype=np.float64)
    layers = model.layers()
    for W, b in layers[:-1]:
        z = W @ h + b
        if np.any(np.abs(z) < margin):
            return True
        h = np.maximum(z, 0.0)
    return False


def brute_auroc(scores, labels):
    from fractions import Fraction

    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0) for p in pos for q in neg)
    return float(wins / (len(pos) * len(neg)))


def brute_aupr(scores, labels):
    """Average precision by enumerating every distinct threshold from the top."""
    from fractions import Fraction

    n_pos = sum(labels)
    total, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= t]
        tp = sum(sel)
        recall = Fraction(tp, n_pos)
        if recall != prev_recall:
            total += (recall - prev_recall) * Fraction(tp, len(sel))
            prev_recall = recall
    return float(total)


def brute_tpr_at_fpr(scores, labels, target):
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    best = 0
    for t in sorted(set(scores)) + [float("inf")]:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        if fp / n_neg <= target:
            best = max(best, tp)
    return best / n_pos


def metric_case(seed):
    """Random scored list, N <= 200; every third case draws from a handful of values to force ties."""
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 201))
    labels = r.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    if seed % 3 == 0:
        scores = r.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
    elif seed % 3 == 1:
        scores = np.round(r.random(n), 1)
    else:
        scores = r.random(n)
    return [float(s) for s in scores], [int(l) for l in labels]


ACCEPTANCE_LINES = []


def acceptance_line(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_for(model, n=6, seed=0, uid="u"):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, model.arch.input_dim))
    y = r.integers(0, model.arch.output_dim, n)
    return AuditUnit(X, y, uid)


def dense_ntk_oracle(model, ref_X, X, lam):
    """Leverage and h from per-sample Jacobians and an explicit matrix inverse."""
    Jr = [nnet.parameter_jacobian(model, x) for x in ref_X]
    Jx = [nnet.parameter_jacobian(model, x) for x in X]
    K = np.array([[np.trace(a @ b.T) for b in Jr] for a in Jr])
    inv = np.linalg.inv(K + lam * np.eye(len(Jr)))
    taus, hs = [], []
    for a in Jx:
        k = np.array([np.trace(a @ b.T) for b in Jr])
        h = inv @ k
        taus.append(k @ h)
        hs.append(h)
    return np.array(taus), np.array(hs)


def run_repro(name, out, seed=None):
    """Run a built-in experiment through the CLI; returns (report dict, seconds)."""
    import json
    import time

    from gpmia import cli

    args = ["repro", name, "--out", str(out), "--force"]
    if seed is not None:
        args += ["--seed", str(seed)]
    t0 = time.perf_counter()
    code = cli.main(args)
    elapsed = time.perf_counter() - t0
    assert code == 0, f"repro {name} exited with {code}"
    return json.loads((out / "report.json").read_text()), elapsed


@pytest.fixture(scope="session")
def fraud_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fraud")
    report, elapsed = run_repro("fraud", out)
    return out, report, elapsed


@pytest.fixture(scope="session")
def exp1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp1")
    report, elapsed = run_repro("exp1", out)
    return out, report, elapsed
