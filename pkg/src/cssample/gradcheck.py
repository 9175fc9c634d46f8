"""Registered 64-bit gradient and oracle checks, run by ``cssample gradcheck``.

Each check returns its worst relative error; a check passes when that error
is strictly below the tolerance, so a tolerance of 0 fails everything.
Checks carry their own default tolerance (1e-4 for single ops, 1e-3 for the
full sampler pipeline); an explicit tolerance overrides all of them.
Checks look up ops through their modules at call time, which lets a test
swap in a corrupted backward rule and watch the named check fail.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import metrics, model, tensor as T, topk, trainer
from .layers import init_mlp
from .pointcloud import PointCloud

__all__ = ["CHECKS", "CHECK_TOLS", "CheckResult", "run_checks", "pipeline_gradcheck", "register"]

DEFAULT_TOL = 1e-4

PIPELINE_TOL = 1e-3

CHECKS: dict[str, Callable[[np.random.Generator], float]] = {}
CHECK_TOLS: dict[str, float] = {}


def register(name: str, tol: float = DEFAULT_TOL):
    def deco(fn):
        CHECKS[name] = fn
        CHECK_TOLS[name] = tol
        return fn

    return deco


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error < self.tol


def _weighted(rng, fn):
    """Scalar probe ``sum(fn(x) * W)`` with a fixed random W."""
    cache = {}

    def f(x):
        y = fn(x)
        if "w" not in cache:
            cache["w"] = rng.normal(size=y.shape)
        return T.reduce_sum(T.mul(y, x.graph.constant(cache["w"])))

    return f


def _op_check(rng, fn, x) -> float:
    return T.finite_diff_check(_weighted(rng, fn), x, tol=np.inf).max_rel_error


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape):
    # values spaced far enough apart that max/argmax never switch under h
    return rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape)


# ---------------------------------------------------------------------------
# tensor ops


@register("tensor.add")
def _(rng):
    c = rng.normal(size=(3, 4))
    return _op_check(rng, lambda x: T.add(x, x.graph.constant(c)), rng.normal(size=(3, 4)))


@register("tensor.sub")
def _(rng):
    c = rng.normal(size=(3, 4))
    return _op_check(rng, lambda x: T.sub(x.graph.constant(c), x), rng.normal(size=(3, 4)))


@register("tensor.mul")
def _(rng):
    return _op_check(rng, lambda x: T.mul(x, T.square(x)), rng.normal(size=(3, 4)))


@register("tensor.scalar_ops")
def _(rng):
    return _op_check(rng, lambda x: T.add_scalar(T.scalar_mul(x, -2.5), 0.3), rng.normal(size=(5,)))


@register("tensor.relu")
def _(rng):
    return _op_check(rng, T.relu, _away_from_zero(rng, (4, 5)))


@register("tensor.square")
def _(rng):
    return _op_check(rng, T.square, rng.normal(size=(4, 3)))


@register("tensor.exp")
def _(rng):
    return _op_check(rng, T.exp, rng.normal(size=(4, 3)))


@register("tensor.log")
def _(rng):
    return _op_check(rng, T.log, rng.uniform(0.5, 2.0, size=(4, 3)))


@register("tensor.matmul")
def _(rng):
    b = rng.normal(size=(4, 2))
    a = rng.normal(size=(3, 3))
    return max(
        _op_check(rng, lambda x: T.matmul(x, x.graph.constant(b)), rng.normal(size=(3, 4))),
        _op_check(rng, lambda x: T.matmul(x.graph.constant(a), x), rng.normal(size=(3, 2))),
    )


@register("tensor.transpose_reshape")
def _(rng):
    return _op_check(rng, lambda x: T.reshape(T.transpose(x), (2, 6)), rng.normal(size=(3, 4)))


@register("tensor.concat")
def _(rng):
    c = rng.normal(size=(3, 2))
    return _op_check(rng, lambda x: T.concat([x, x.graph.constant(c), T.square(x)], axis=1), rng.normal(size=(3, 4)))


@register("tensor.take_gather")
def _(rng):
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    return max(
        _op_check(rng, lambda x: T.take(x, [2, 0, 2], axis=1), rng.normal(size=(3, 4))),
        _op_check(rng, lambda x: T.gather_rows(x, idx), rng.normal(size=(4, 3))),
        _op_check(rng, lambda x: T.column(x, 1), rng.normal(size=(4, 3))),
    )


@register("tensor.add_bias")
def _(rng):
    w = rng.normal(size=(5, 3))
    return max(
        _op_check(rng, lambda b: T.add_bias(b.graph.constant(w), b), rng.normal(size=(3,))),
        _op_check(rng, lambda x: T.add_bias(x, x.graph.constant(w[0])), rng.normal(size=(5, 3))),
    )


@register("tensor.scale_rows")
def _(rng):
    x = rng.normal(size=(4, 3))
    s = rng.normal(size=(4,))
    return max(
        _op_check(rng, lambda v: T.scale_rows(v.graph.constant(x), v), s),
        _op_check(rng, lambda v: T.scale_rows(v, v.graph.constant(s)), x),
    )


@register("tensor.replicate")
def _(rng):
    return _op_check(rng, lambda x: T.replicate(x, 3, axis=1), rng.normal(size=(4, 2)))


@register("tensor.reduce")
def _(rng):
    x = _distinct(rng, (4, 5, 3))
    return max(
        _op_check(rng, lambda v: T.reduce("max", v, 1), x),
        _op_check(rng, lambda v: T.reduce("mean", v, 1), x),
        _op_check(rng, lambda v: T.reduce_sum(v, 0), x),
    )


@register("tensor.softmax")
def _(rng):
    return _op_check(rng, lambda x: T.softmax(x, axis=1, scale=1.7), rng.normal(size=(4, 5)))


@register("tensor.logsumexp")
def _(rng):
    return _op_check(rng, lambda x: T.logsumexp(x, axis=0), rng.normal(size=(6, 2)))


# ---------------------------------------------------------------------------
# transport top-k


@register("topk.build_cost")
def _(rng):
    return _op_check(rng, topk.build_cost, _distinct(rng, (12,)))


def _fixed_iter_cfg(epsilon=0.05, iters=80):
    # a fixed iteration count keeps the solver output smooth under perturbation
    return topk.TopkConfig(epsilon=epsilon, max_iters=iters, tol=1e-300)


@register("topk.sinkhorn")
def _(rng):
    cfg = _fixed_iter_cfg()
    cost = rng.uniform(size=(10, 2))
    return _op_check(rng, lambda c: topk.sinkhorn(c, 3, cfg).gamma, cost)


@register("topk.soft_indicator")
def _(rng):
    cfg = _fixed_iter_cfg()
    s = _distinct(rng, (10,))
    return _op_check(rng, lambda x: topk.soft_indicator(topk.sinkhorn(topk.build_cost(x), 4, cfg)), s)


# ---------------------------------------------------------------------------
# classifier


@register("trainer.cross_entropy")
def _(rng):
    label = int(rng.integers(5))
    return T.finite_diff_check(lambda z: trainer.cross_entropy(z, label), rng.normal(size=(5,)), tol=np.inf).max_rel_error


@register("trainer.classifier_forward")
def _(rng):
    clf = trainer.ClassifierModel.initialize(4, rng)
    pts = rng.normal(size=(9, 3))

    def f(x):
        p = {k: x.graph.constant(v) for k, v in clf.params.items()}
        return trainer.cross_entropy(trainer.classifier_forward(x, p), 2)

    return T.finite_diff_check(f, pts, tol=np.inf).max_rel_error


# ---------------------------------------------------------------------------
# scoring network


def _pipeline_topk(epsilon: float = 0.05) -> topk.TopkConfig:
    # short annealed solve at a fixed iteration count: exercises the
    # epsilon schedule in the backward pass and keeps the surrogate smooth
    return topk.TopkConfig(epsilon=epsilon, max_iters=25, tol=1e-300, eps_start=4 * epsilon, eps_decay=0.9)


def pipeline_gradcheck(
    seed: int = 0,
    n: int = 32,
    g: int = 4,
    c: int = 8,
    k: int = 8,
    attention: str = "oa",
    loss_variant: str = "emd",
    alpha: float = 1.0,
    beta: float = 1.0,
    max_coords: Optional[int] = None,
    h: float = 1e-6,
    epsilon: float = 0.05,
) -> T.GradCheckReport:
    """Training backward pass against finite differences of its smooth surrogate.

    The analytic side runs the real training graph: scores, transport plan,
    straight-through gates, gated shape loss and (when ``beta > 0``) the
    classifier on the gated points. Straight-through gates read 1 in the
    forward pass, so the numeric side differentiates the linearised surrogate
    ``sum_j (alpha * w_j + beta * v_j) * omega[idx_j]``: ``w`` are the frozen
    shape-loss weights and ``v`` the derivative of the task loss with respect
    to each gate at gates = 1, itself taken by central differences. That is
    the function whose gradient the gates pass on.

    ``max_coords`` limits each parameter tensor to a random subset of
    coordinates; ``None`` checks every scalar. Some coordinates (the final
    score bias, which min-max normalisation cancels) have true gradient 0 and
    are judged against the comparator's floor. Small clouds at small
    ``epsilon`` can saturate the plan so that every gradient sits at the
    rounding-noise level of the differences; use a larger ``epsilon`` there.
    """
    rng = np.random.default_rng(seed)
    cfg = model.CsNetConfig(n_neighbors=g, n_features=c, attention=attention, topk=_pipeline_topk(epsilon))
    net = model.CsNetModel.initialize(cfg, rng)
    clf = trainer.ClassifierModel.initialize(4, rng)
    label = int(rng.integers(4))
    cloud = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
    # zero-initialised biases put rows fed by dead units exactly on a relu
    # kink, where central differences are meaningless; jitter them off it
    base = {
        name: v.astype(np.float64) + (rng.normal(0.0, 0.05, size=v.shape) if name.endswith(".b") else 0.0)
        for name, v in net.params.items()
    }
    net = model.CsNetModel(cfg, base)
    loss_cfg = model.LossConfig(alpha, beta, loss_variant)

    coords = {}
    for name in sorted(base):
        size = base[name].size
        if max_coords is None or size <= max_coords:
            coords[name] = np.arange(size)
        else:
            coords[name] = np.sort(rng.choice(size, max_coords, replace=False))

    def task_loss(graph, pts, gates):
        if beta == 0:
            return 0.0
        p_clf = {nm: graph.constant(v) for nm, v in clf.params.items()}
        logits = trainer.classifier_forward(T.scale_rows(graph.constant(pts), gates), p_clf)
        return trainer.cross_entropy(logits, label)

    with T.Graph(np.float64) as graph:
        p = {name: graph.param(v) for name, v in base.items()}
        rec: dict = {}
        scores = model.forward_scores(graph, cloud, net, p, rec)
        result, gates, _ = topk.straight_through_select(cloud, scores, k, cfg.topk)
        loss = model.joint_loss(result, gates, cloud, task_loss(graph, result.sampled.points, gates), loss_cfg)
        grads = T.backward(graph, loss)
        analytic = np.concatenate([grads[p[name]].ravel()[coords[name]] for name in coords])
    idx = result.indices
    sampled = result.sampled.points
    w = model.shape_loss_weights(result, cloud, loss_variant) if alpha > 0 else np.zeros(k)
    if beta > 0:
        def task_at(gv):
            with T.Graph(np.float64) as g3:
                return task_loss(g3, sampled, g3.constant(gv)).data

        v = T.numeric_gradient(task_at, np.ones(k), h)
    else:
        v = np.zeros(k)
    gate_weights = alpha * w + beta * v
    f_pw, f_concat = rec["f_pointwise"], rec["f_concat"]

    def surrogate(name, value):
        with T.Graph(np.float64) as g2:
            q = {nm: g2.constant(value if nm == name else v) for nm, v in base.items()}
            # parameters downstream of a stage leave its output unchanged
            stage = name.split(".")[0] if name else "fe"
            if stage == "cs":
                fc = g2.constant(f_concat)
            elif stage == "ca":
                fc = model.cascade_attention(g2.constant(f_pw), q, attention)
            else:
                fc = model.cascade_attention(model.feature_embed(g2, cloud.points, q, g, c), q, attention)
            s = model.score(fc, q)
            omega = topk.soft_indicator(topk.sinkhorn(topk.build_cost(s), k, cfg.topk))
            return float(np.dot(omega.data[idx], gate_weights))

    f_base = surrogate(None, None)
    parts = []
    for name, sel in coords.items():
        flat = base[name].ravel()

        def value_at(v, nm=name, shape=base[name].shape):
            return surrogate(nm, v.reshape(shape))

        num = np.empty(sel.size)
        for j, i in enumerate(sel):
            def one(x, i=i):
                v = flat.copy()
                v[i] = x[0]
                return value_at(v)

            num[j] = T.numeric_gradient(one, flat[i : i + 1], h, refine=2, f0=f_base)[0]
        parts.append(num)
    numeric = np.concatenate(parts)
    # differences through the iterative solver carry ~1e-9 absolute rounding
    # noise, so entries under 1e-4 of the largest are judged on that scale
    return T.compare_gradients(analytic, numeric, tol=1e-3, rel_floor=1e-4)


@register("csnet.pipeline_oa_emd", tol=PIPELINE_TOL)
def _(rng):
    return pipeline_gradcheck(int(rng.integers(2**31)), n=16, g=4, c=4, k=4, epsilon=0.2, max_coords=24).max_rel_error


@register("csnet.pipeline_sa_cd_emd", tol=PIPELINE_TOL)
def _(rng):
    return pipeline_gradcheck(int(rng.integers(2**31)), n=16, g=4, c=4, k=4, epsilon=0.2, attention="sa",
                              loss_variant="cd_plus_emd", max_coords=24).max_rel_error


@register("csnet.pipeline_mlp_cd", tol=PIPELINE_TOL)
def _(rng):
    return pipeline_gradcheck(int(rng.integers(2**31)), n=16, g=4, c=4, k=4, epsilon=0.2, attention="mlp",
                              loss_variant="cd", beta=0.0, max_coords=24).max_rel_error


@register("csnet.layers")
def _(rng):
    params = init_mlp(rng, "fe.mlp", (6, 5, 5))
    pts = rng.uniform(-1, 1, size=(7, 3))

    def f(x):
        p = {k: x.graph.constant(v) for k, v in params.items()}
        p["fe.xi.0.w"] = x
        p["fe.xi.0.b"] = x.graph.constant(np.zeros(5))
        return model.feature_embed(x.graph, pts, p, 3, 5)

    return _op_check(rng, f, rng.normal(size=(10, 5)))


# ---------------------------------------------------------------------------
# oracles (relative disagreement with an independent computation)


@register("metrics.emd_oracle")
def _(rng):
    worst = 0.0
    for _ in range(40):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(m, 7))
        a, b = rng.normal(size=(m, 3)), rng.normal(size=(n, 3))
        fast, _ = metrics.emd(a, b)
        slow, _ = metrics.emd_brute_force(a, b)
        worst = max(worst, abs(fast - slow) / max(abs(slow), 1e-12))
    return worst


@register("metrics.gated_emd_grad")
def _(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    _, matching = metrics.emd(a, b)
    gates = rng.uniform(0.5, 1.5, size=4)
    analytic = metrics.emd_grad_wrt_weights(matching, gates)
    numeric = T.numeric_gradient(lambda v: metrics.gated_emd_value(matching, v), gates)
    return T.compare_gradients(analytic, numeric).max_rel_error


def run_checks(tol: Optional[float] = None, seed: int = 0, names=None) -> list[CheckResult]:
    """Run registered checks; ``tol=None`` uses each check's own tolerance."""
    if names is not None:
        unknown = set(names) - set(CHECKS)
        if unknown:
            raise KeyError(f"unknown checks: {sorted(unknown)}")
    out = []
    for pos, (name, fn) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        limit = CHECK_TOLS[name] if tol is None else tol
        rng = np.random.default_rng([seed, pos])
        try:
            err = float(fn(rng))
            out.append(CheckResult(name, err, limit))
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(name, np.inf, limit, f"{type(exc).__name__}: {exc}"))
    return out
