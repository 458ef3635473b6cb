"""Finite-difference verification of every analytic backward pass.

Checks run at float64 with central differences.  Each check reports the
worst norm-wise relative error ``|a - n| / max(|a|, |n|)`` over the gradient
tensors it inspects.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import fusion as F
from . import nn as N
from . import tensor as T
from .errors import ConfigurationError
from .fusion import FusionSpec
from .model import ArchitectureSpec, build

STEP = 1e-5
# Whole-network differences start at STEP and shrink until neither side of
# the window flips a rectifier mask or a max-fusion winner.
MODEL_STEPS = (1e-5, 1e-6, 1e-7, 1e-8, 1e-9)
UNIT_TOL = 1e-5
MODEL_TOL = 1e-4
COMPONENTS = ("tensor", "nn", "fusion", "model")


@dataclass
class CheckResult:
    component: str
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def rel_error(analytic, numeric) -> float:
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(f, x, index=None, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``index`` is an iterable of flat indices; default is every entry.
    """
    flat = x.reshape(-1)
    if index is None:
        index = range(flat.size)
    out = []
    for i in index:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def _projection(rng, shape):
    """Random cotangent; the scalar objective is ``sum(w * output)``."""
    return rng.standard_normal(shape)


# -- tensor ---------------------------------------------------------------


def check_conv3d(rng, c_in=2, c_out=3, extent=(5, 4, 5), size=3):
    x = rng.standard_normal((c_in,) + extent)
    w = rng.standard_normal((c_out, c_in, size, size, size))
    b = rng.standard_normal(c_out)
    out_shape = (c_out,) + tuple(n - size + 1 for n in extent)
    proj = _projection(rng, out_shape)

    def f():
        return float(np.sum(proj * T.conv3d_valid(x, T.ConvKernel(w, b))))

    gx, gw, gb = T.conv3d_backward(x, T.ConvKernel(w, b), proj)
    return max(rel_error(gx, numerical_gradient(f, x)),
               rel_error(gw, numerical_gradient(f, w)),
               rel_error(gb, numerical_gradient(f, b)))


def _tensor_checks(rng):
    yield "conv3d 3x3x3", lambda: check_conv3d(rng)
    yield "conv3d 1x1x1", lambda: check_conv3d(rng, 4, 2, (3, 2, 3), size=1)
    yield "conv3d single voxel", lambda: check_conv3d(rng, 1, 1, (3, 3, 3))


# -- nn -------------------------------------------------------------------


def check_relu(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    proj = _projection(rng, x.shape)
    y, mask = N.relu_forward(x)
    g = N.relu_backward(proj, mask)
    return rel_error(g, numerical_gradient(lambda: float(np.sum(proj * N.relu_forward(x)[0])), x))


def check_dropout(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    _, mask = N.dropout_forward(x, 0.3, "train", rng)
    proj = _projection(rng, x.shape)
    g = N.dropout_backward(proj, mask)
    f = lambda: float(np.sum(proj * N.dropout_forward(x, 0.3, "train", mask=mask)[0]))  # noqa: E731
    return rel_error(g, numerical_gradient(f, x))


def check_cross_entropy(rng):
    logits = rng.standard_normal((5, 3, 3, 3)) * 2
    labels = rng.integers(0, 5, size=(3, 3, 3))
    _, g = N.softmax_cross_entropy(logits, labels)
    return rel_error(g, numerical_gradient(lambda: N.softmax_cross_entropy(logits, labels)[0], logits))


def check_regularization(rng):
    w = rng.standard_normal((3, 2, 1, 1, 1))
    w[np.abs(w) < 1e-3] = 0.5
    p = N.Parameter("w", w)
    l1, l2 = 0.3, 0.7
    N.regularization([p], l1, l2, accumulate=True)

    def f():
        a, b = N.regularization([p])
        return l1 * a + l2 * b

    return rel_error(p.grad, numerical_gradient(f, w))


def check_layer(rng, layer, in_shape, train=False):
    """Backward of an ``nn`` layer (input and parameter gradients)."""
    x = rng.standard_normal(in_shape)
    seed = int(rng.integers(2 ** 31))
    out_shape = layer.output_shape(in_shape)
    proj = _projection(rng, out_shape)

    def f():
        y, _ = layer.forward(x, train, np.random.default_rng(seed))
        return float(np.sum(proj * y))

    for p in layer.parameters():
        p.zero_grad()
    _, cache = layer.forward(x, train, np.random.default_rng(seed))
    gx = layer.backward(proj, cache)
    errs = [rel_error(gx, numerical_gradient(f, x))]
    for p in layer.parameters():
        errs.append(rel_error(p.grad, numerical_gradient(f, p.value)))
    return max(errs)


def _nn_checks(rng):
    yield "relu", lambda: check_relu(rng)
    yield "dropout (frozen mask)", lambda: check_dropout(rng)
    yield "softmax cross-entropy", lambda: check_cross_entropy(rng)
    yield "l1/l2 regularization", lambda: check_regularization(rng)
    yield "conv3 layer", lambda: check_layer(rng, N.Conv3d("c", 2, 3, 3, rng, np.float64), (2, 4, 5, 4))
    yield "dense1 layer", lambda: check_layer(rng, N.Conv3d("d", 3, 4, 1, rng, np.float64), (3, 2, 3, 2))
    yield "dropout layer", lambda: check_layer(rng, N.Dropout(0.4), (2, 3, 3, 3), train=True)


# -- fusion ---------------------------------------------------------------


def check_fusion(rng, function, n=4, c=3, extent=(3, 2, 3)):
    layer = F.Fusion(function, n, c, rng, np.float64)
    return check_layer(rng, layer, (n, c) + extent)


def _fusion_checks(rng):
    for fn in F.FUNCTIONS:
        yield f"fuse_{fn}", lambda fn=fn: check_fusion(rng, fn)


# -- model ----------------------------------------------------------------

TINY_VARIANTS = [None] + [FusionSpec(p, f) for p in F.POINTS for f in F.FUNCTIONS]


@contextlib.contextmanager
def _record_kinks(log: list):
    """Append every rectifier mask and max-fusion winner computed inside."""
    relu, fmax = N.relu_forward, F.fuse_max

    def relu_spy(x):
        y, mask = relu(x)
        log.append(mask)
        return y, mask

    def max_spy(streams):
        out, arg = fmax(streams)
        log.append(arg)
        return out, arg

    N.relu_forward, F.fuse_max = relu_spy, max_spy
    try:
        yield
    finally:
        N.relu_forward, F.fuse_max = relu, fmax


def _same_kinks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def kink_safe_gradient(f, x, index, steps=MODEL_STEPS):
    """Central differences that refuse windows crossing a non-smooth point.

    For each entry the largest step whose two evaluations reproduce the
    unperturbed masks is used (the smallest step if none does).
    """
    base = []
    with _record_kinks(base):
        f()
    flat = x.reshape(-1)
    out = []
    for i in index:
        orig = flat[i]
        for h in steps:
            plus, minus = [], []
            flat[i] = orig + h
            with _record_kinks(plus):
                fp = f()
            flat[i] = orig - h
            with _record_kinks(minus):
                fm = f()
            flat[i] = orig
            if _same_kinks(base, plus) and _same_kinks(base, minus):
                break
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check_network(spec: ArchitectureSpec, rng, batch=2, per_tensor=3, mode="train"):
    """End-to-end gradient of the mean batch cross-entropy.

    Dropout masks are frozen by reseeding the dropout generator for every
    loss evaluation.  ``per_tensor`` random entries of each parameter (all
    entries for tensors that small) are checked.  Biases are drawn at random:
    with zero biases, a conv over an all-zero rectified region has a
    pre-activation of exactly 0, i.e. the check would sit on a kink.
    """
    net = build(spec, np.random.default_rng(int(rng.integers(2 ** 31))), dtype=np.float64)
    for p in net.parameters():
        if not p.regularized:
            p.value[...] = rng.uniform(-0.1, 0.1, size=p.value.shape)
    x = rng.random((batch,) + net.input_shape)
    labels = rng.integers(0, spec.classes, size=(batch,) + net.output_shape[1:])
    seed = int(rng.integers(2 ** 31))

    def loss(record=False):
        logits = net.forward(x, mode, np.random.default_rng(seed), record=record)
        grads = []
        total = 0.0
        for b in range(batch):
            lb, gb = N.softmax_cross_entropy(logits[b], labels[b])
            total += lb
            grads.append(gb)
        return total / batch, np.stack(grads) / batch

    _, g = loss(record=True)
    net.backward(g)
    worst = 0.0
    for p in net.parameters():
        k = min(per_tensor, p.size)
        idx = rng.choice(p.size, size=k, replace=False)
        analytic = p.grad.reshape(-1)[idx].copy()
        numeric = kink_safe_gradient(lambda: loss()[0], p.value, idx)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def tiny_spec(fusion=None, **kw) -> ArchitectureSpec:
    return ArchitectureSpec.preset("tiny", fusion=fusion, **kw)


def _model_checks(rng):
    for fs in TINY_VARIANTS:
        spec = tiny_spec(fs)
        yield f"network {spec.variant}", lambda spec=spec: check_network(spec, rng)


_SUITES = {
    "tensor": (_tensor_checks, UNIT_TOL),
    "nn": (_nn_checks, UNIT_TOL),
    "fusion": (_fusion_checks, UNIT_TOL),
    "model": (_model_checks, MODEL_TOL),
}


def run_checks(select=None, seed=0) -> list[CheckResult]:
    """Run every check whose component or name matches one of ``select``.

    ``select`` is an iterable of component names or name substrings; None
    selects everything.
    """
    patterns = None if select is None else [s.strip() for s in select if s.strip()]
    plan = []
    for component, (factory, tol) in _SUITES.items():
        rng = np.random.default_rng([seed, COMPONENTS.index(component)])
        for name, fn in factory(rng):
            if patterns is None or any(p == component or p in name for p in patterns):
                plan.append((component, name, fn, tol))
    if not plan:
        raise ConfigurationError("no checks selected")
    return [CheckResult(component, name, fn(), tol) for component, name, fn, tol in plan]


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.component:<7} {r.name:<{width}}  rel.err {r.error:.3e}  (tol {r.tol:.0e})")
    worst = {}
    for r in results:
        worst[r.component] = max(worst.get(r.component, 0.0), r.error)
    lines.append("worst relative error: " + ", ".join(f"{c}={e:.3e}" for c, e in worst.items()))
    return "\n".join(lines)


FAULTS = ("relu", "conv", "fuse-max")


@contextlib.contextmanager
def inject_fault(kind: str):
    """Temporarily break one backward implementation (test hook)."""
    if kind == "relu":
        targets = [(N, "relu_backward", lambda grad, mask: grad)]
    elif kind == "conv":
        orig = T.conv3d_backward

        def broken(x, kernel, grad_out, input_grad=True):
            gx, gw, gb = orig(x, kernel, grad_out, input_grad)
            return gx, gw * 1.01, gb

        targets = [(T, "conv3d_backward", broken), (N, "conv3d_backward", broken)]
    elif kind == "fuse-max":
        targets = [(F, "fuse_max_backward",
                    lambda grad, argmax, n: np.broadcast_to(grad, (n,) + grad.shape) / n)]
    else:
        raise ConfigurationError(f"unknown fault {kind!r}; choose from {FAULTS}")
    saved = [(mod, name, getattr(mod, name)) for mod, name, _ in targets]
    try:
        for mod, name, fn in targets:
            setattr(mod, name, fn)
        yield
    finally:
        for mod, name, fn in saved:
            setattr(mod, name, fn)
