"""Finite-difference verification of the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# builder(rng) -> (leaves to check, closure that rebuilds the scalar loss)
GraphBuilder = Callable[[np.random.Generator], tuple[Sequence[Tensor], Callable[[], Tensor]]]


def numerical_grad(loss_fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``leaf``."""
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max-norm error relative to the larger gradient.

    ``floor`` bounds the denominator from below: central differences cannot
    resolve gradients much smaller than ~1e-7 at unit loss scale.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_graph(leaves: Sequence[Tensor], loss_fn: Callable[[], Tensor], step: float = 1e-5) -> float:
    grads = T.backward(loss_fn())
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        worst = max(worst, relative_error(analytic, numerical_grad(loss_fn, leaf, step)))
    return worst


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.total(T.mul(y, w))


def _projected(rng, leaves, forward):
    proj = _project(forward(), rng)
    return leaves, lambda: proj(forward())


def _dims(rng, n, lo=1, hi=5):
    return [int(d) for d in rng.integers(lo, hi, size=n)]


def _b_add(rng):
    m, n = _dims(rng, 2)
    a, b = _leaf(rng, m, n), _leaf(rng, n)
    return _projected(rng, [a, b], lambda: T.add(a, b))


def _b_sub(rng):
    m, n = _dims(rng, 2)
    a, b = _leaf(rng, m, n), _leaf(rng, m, n)
    return _projected(rng, [a, b], lambda: T.sub(a, b))


def _b_scale(rng):
    a = _leaf(rng, *_dims(rng, 2))
    c = float(rng.standard_normal())
    return _projected(rng, [a], lambda: T.scale(a, c))


def _b_mul(rng):
    m, n = _dims(rng, 2)
    a, b = _leaf(rng, m, n), _leaf(rng, 1, n)
    return _projected(rng, [a, b], lambda: T.mul(a, b))


def _b_matmul(rng):
    bsz, m, k, n = _dims(rng, 4)
    a, b = _leaf(rng, bsz, m, k), _leaf(rng, k, n)
    return _projected(rng, [a, b], lambda: T.matmul(a, b))


def _b_transpose(rng):
    a = _leaf(rng, *_dims(rng, 3))
    axes = tuple(int(i) for i in rng.permutation(3))
    return _projected(rng, [a], lambda: T.transpose(a, axes))


def _b_reshape(rng):
    m, n = _dims(rng, 2)
    a = _leaf(rng, m, n, 2)
    return _projected(rng, [a], lambda: T.reshape(a, (2 * n, m)))


def _b_gather(rng):
    bsz, n, d = _dims(rng, 3, 2, 5)
    a = _leaf(rng, bsz, n, d)
    k = int(rng.integers(1, n + 1))
    idx = np.stack([rng.choice(n, size=k, replace=False) for _ in range(bsz)])
    shared = rng.integers(0, n, size=k + 1)  # repeats exercise accumulation
    return _projected(rng, [a], lambda: T.add(T.gather(a, idx, axis=1), T.gather(a, shared[:k], axis=1)))


def _b_concat(rng):
    m, n1, n2 = _dims(rng, 3)
    a, b = _leaf(rng, m, n1), _leaf(rng, m, n2)
    return _projected(rng, [a, b], lambda: T.concat([a, b], axis=1))


def _b_layer_norm(rng):
    m, n = _dims(rng, 2, 2, 6)
    x, g, b = _leaf(rng, m, n), _leaf(rng, n), _leaf(rng, n)
    return _projected(rng, [x, g, b], lambda: T.layer_norm(x, g, b))


def _b_softmax(rng):
    x = _leaf(rng, *_dims(rng, 2, 2, 6))
    return _projected(rng, [x], lambda: T.softmax(x))


def _b_gelu(rng):
    x = _leaf(rng, *_dims(rng, 2))
    return _projected(rng, [x], lambda: T.gelu(x))


def _b_mse(rng):
    shape = _dims(rng, 2)
    a, b = _leaf(rng, *shape), _leaf(rng, *shape)
    return [a, b], lambda: T.mse(a, b)


def _b_mean(rng):
    a = _leaf(rng, *_dims(rng, 2))
    return [a], lambda: T.mean(T.mul(a, a))


def _b_softmax_layernorm(rng):
    m, n = _dims(rng, 2, 2, 6)
    x, g, b = _leaf(rng, m, n), _leaf(rng, n), _leaf(rng, n)
    return _projected(rng, [x, g, b], lambda: T.softmax(T.layer_norm(x, g, b)))


def _b_mlp(rng):
    n_in, h1, h2, n_out, bsz = _dims(rng, 5, 2, 6)
    x = Tensor(rng.standard_normal((bsz, n_in)))
    ws = [_leaf(rng, a, b) for a, b in ((n_in, h1), (h1, h2), (h2, n_out))]
    bs = [_leaf(rng, d) for d in (h1, h2, n_out)]
    y = Tensor(rng.standard_normal((bsz, n_out)))

    def forward():
        h = x
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = T.add(T.matmul(h, w), b)
            if i < 2:
                h = T.gelu(h)
        return T.mse(h, y)

    return ws + bs, forward


def _b_attention(rng):
    # every op kind in one graph: a single-head attention block with MSE loss
    bsz, n = _dims(rng, 2, 2, 5)
    d = int(rng.integers(3, 6))
    x = _leaf(rng, bsz, n, d)
    wq, wk, wv = (_leaf(rng, d, d) for _ in range(3))
    g, b = _leaf(rng, d), _leaf(rng, d)
    keep = np.sort(rng.choice(n, size=max(1, n - 1), replace=False))
    target = Tensor(rng.standard_normal((bsz, keep.size + n, d)))
    c = float(rng.uniform(0.2, 1.0))

    def forward():
        h = T.layer_norm(x, g, b)
        q, k, v = T.matmul(h, wq), T.matmul(h, wk), T.matmul(h, wv)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), c))
        o = T.mul(T.add(x, T.gelu(T.matmul(att, v))), g)
        o = T.concat([T.gather(o, keep, axis=1), T.reshape(T.reshape(o, (-1,)), o.shape)], axis=1)
        r = T.sub(o, target)
        return T.add(T.mean(T.mul(r, r)), T.mse(o, target))

    return [x, wq, wk, wv, g, b], forward


DEFAULT_BUILDERS: dict[str, GraphBuilder] = {
    "add": _b_add,
    "sub": _b_sub,
    "scale": _b_scale,
    "mul": _b_mul,
    "matmul": _b_matmul,
    "transpose": _b_transpose,
    "reshape": _b_reshape,
    "gather": _b_gather,
    "concat": _b_concat,
    "layer_norm": _b_layer_norm,
    "softmax": _b_softmax,
    "gelu": _b_gelu,
    "mse": _b_mse,
    "mean": _b_mean,
    "softmax_layernorm": _b_softmax_layernorm,
    "mlp": _b_mlp,
    "attention": _b_attention,
}


@dataclass
class GradCheckReport:
    tol: float
    n_trials: int
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [
            f"{k:<18} max_rel_err={e:.3e} {'PASS' if e < self.tol else 'FAIL'}"
            for k, e in self.max_rel_error.items()
        ]


def grad_check(builders: Mapping[str, GraphBuilder] | GraphBuilder | None = None,
               n_trials: int = 1, tol: float = 1e-3, seed: int = 0,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference gradients on randomized graphs.

    Each trial draws fresh shapes and values for every builder. All leaves
    are 64-bit.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if builders is None:
        builders = DEFAULT_BUILDERS
    elif callable(builders):
        builders = {"graph": builders}
    report = GradCheckReport(tol=tol, n_trials=n_trials)
    rng = np.random.default_rng(seed)
    for _ in range(n_trials):
        for kind, build in builders.items():
            leaves, loss_fn = build(rng)
            err = check_graph(leaves, loss_fn, step)
            report.max_rel_error[kind] = max(report.max_rel_error.get(kind, 0.0), err)
    return report
