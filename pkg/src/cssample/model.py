"""The contribution-scoring sampler network and its joint loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from . import tensor as T
from .layers import bind, glorot, init_mlp, linear, mlp
from .metrics import emd, pairwise_sq_dists
from .pointcloud import PointCloud
from .samplers import SampleResult
from .tensor import Graph, Tensor
from .topk import TopkConfig, hard_topk, straight_through_select

__all__ = [
    "CsNetConfig",
    "CsNetModel",
    "ActivationRecord",
    "LossConfig",
    "knn_indices",
    "grouping_layer",
    "feature_embed",
    "self_attention",
    "offset_attention",
    "cascade_attention",
    "score",
    "forward_scores",
    "forward_sample",
    "joint_loss",
    "ATTENTION_KINDS",
    "LOSS_VARIANTS",
]

ATTENTION_KINDS = ("oa", "sa", "mlp")
LOSS_VARIANTS = ("emd", "cd", "cd_plus_emd")
SCORE_WIDTHS = (128, 64, 32, 1)


@dataclass(frozen=True)
class CsNetConfig:
    n_neighbors: int = 32
    n_features: int = 64
    attention: str = "oa"
    topk: TopkConfig = field(default_factory=TopkConfig)

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CsNetConfig":
        d = dict(d)
        d["topk"] = TopkConfig(**d.get("topk", {}))
        return cls(**d)


def _param_shapes(cfg: CsNetConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.n_features
    shapes = {}

    def add_mlp(prefix, widths):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"{prefix}.{i}.w"] = (a, b)
            shapes[f"{prefix}.{i}.b"] = (b,)

    add_mlp("fe.mlp", (6, c, c))
    add_mlp("fe.xi", (2 * c, c))
    for blk in range(3):
        if cfg.attention != "mlp":
            for w in ("query", "key", "value"):
                shapes[f"ca.{blk}.w_{w}"] = (c, c)
        add_mlp(f"ca.{blk}.gamma", (c, c, c))
    add_mlp("cs.rho", (3 * c, SCORE_WIDTHS[0]))
    add_mlp("cs.fc", SCORE_WIDTHS)
    return shapes


class CsNetModel:
    """Parameter table plus hyper-parameters for the scoring network."""

    def __init__(self, config: CsNetConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        expected = _param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter table mismatch; missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            arr = params[name]
            if tuple(arr.shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(arr.shape)}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite weights")
        self.params = {name: np.asarray(params[name], dtype=np.float32) for name in expected}

    @classmethod
    def initialize(cls, config: CsNetConfig = CsNetConfig(), seed: Union[int, np.random.Generator] = 0) -> "CsNetModel":
        rng = np.random.default_rng(seed)
        c = config.n_features
        params = {}
        params.update(init_mlp(rng, "fe.mlp", (6, c, c)))
        params.update(init_mlp(rng, "fe.xi", (2 * c, c)))
        for blk in range(3):
            if config.attention != "mlp":
                for w in ("query", "key", "value"):
                    params[f"ca.{blk}.w_{w}"] = glorot(rng, c, c)
            params.update(init_mlp(rng, f"ca.{blk}.gamma", (c, c, c)))
        params.update(init_mlp(rng, "cs.rho", (3 * c, SCORE_WIDTHS[0])))
        params.update(init_mlp(rng, "cs.fc", SCORE_WIDTHS))
        return cls(config, params)

    def bind(self, graph: Graph, trainable: bool = True) -> dict[str, Tensor]:
        return bind(graph, self.params, trainable)

    def copy(self) -> "CsNetModel":
        return CsNetModel(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class ActivationRecord:
    f_group: np.ndarray
    f_combine: np.ndarray
    f_pointwise: np.ndarray
    f_sa: list
    f_oa: list
    f_concat: np.ndarray
    s_con: np.ndarray


# ---------------------------------------------------------------------------
# feature embedding


def knn_indices(points: np.ndarray, g: int) -> np.ndarray:
    """(n, g) neighbour indices, self first, then by distance with lower index on ties."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= g <= n:
        raise ValueError(f"need 1 <= g <= n, got g={g}, n={n}")
    sq = (pts * pts).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, -1.0)
    if g == n:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, g - 1, axis=1)[:, :g]
    thresh = np.take_along_axis(d, part, axis=1).max(axis=1)
    mask = d <= thresh[:, None]
    counts = mask.sum(axis=1)
    out = np.empty((n, g), dtype=np.int64)
    exact = counts == g
    if exact.any():
        # nonzero walks each row in column order, so ties stay index-ordered
        cand = np.nonzero(mask[exact])[1].reshape(-1, g)
        dist = np.take_along_axis(d[exact], cand, axis=1)
        out[exact] = np.take_along_axis(cand, np.argsort(dist, axis=1, kind="stable"), axis=1)
    for i in np.nonzero(~exact)[0]:
        out[i] = np.argsort(d[i], kind="stable")[:g]
    return out


def grouping_layer(cloud: Union[PointCloud, np.ndarray], g: int) -> tuple[np.ndarray, np.ndarray]:
    """Relative neighbour offsets ``p_ij - p_i`` (n, g, 3) and the neighbour indices."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if g > pts.shape[0]:
        raise ValueError(f"g={g} exceeds the number of points {pts.shape[0]}")
    idx = knn_indices(pts, g)
    return pts[idx] - pts[:, None, :], idx


def feature_embed(graph: Graph, points: np.ndarray, p: Mapping[str, Tensor], g: int, c: int, record: Optional[dict] = None) -> Tensor:
    n = points.shape[0]
    f_group, _ = grouping_layer(points, g)
    rel = graph.constant(f_group)
    absolute = T.replicate(graph.constant(points), g, axis=1)
    combined = T.reshape(T.concat([rel, absolute], axis=2), (n * g, 6))
    f_combine = T.reshape(mlp(combined, p, "fe.mlp", 2), (n, g, c))
    pooled = T.concat([T.reduce("max", f_combine, 1), T.reduce("mean", f_combine, 1)], axis=1)
    f_pointwise = mlp(pooled, p, "fe.xi", 1)
    if record is not None:
        record.update(f_group=f_group, f_combine=f_combine.data, f_pointwise=f_pointwise.data)
    return f_pointwise


# ---------------------------------------------------------------------------
# attention


def self_attention(f_in: Tensor, p: Mapping[str, Tensor], block: int) -> Tensor:
    q = T.matmul(f_in, p[f"ca.{block}.w_query"])
    k = T.matmul(f_in, p[f"ca.{block}.w_key"])
    v = T.matmul(f_in, p[f"ca.{block}.w_value"])
    d_key = f_in.shape[1]
    attn = T.softmax(T.matmul(q, T.transpose(k)), axis=1, scale=float(np.sqrt(d_key)))
    return T.matmul(attn, v)


def offset_attention(f_in: Tensor, p: Mapping[str, Tensor], block: int, kind: str = "oa"):
    """One residual block; returns ``(f_out, f_sa)`` (``f_sa`` is None for ``mlp``)."""
    if kind == "mlp":
        f_sa = None
        inner = f_in
    else:
        f_sa = self_attention(f_in, p, block)
        inner = T.sub(f_in, f_sa) if kind == "oa" else f_sa
    return T.add(mlp(inner, p, f"ca.{block}.gamma", 2, final_relu=False), f_in), f_sa


def cascade_attention(f_pointwise: Tensor, p: Mapping[str, Tensor], kind: str = "oa", record: Optional[dict] = None) -> Tensor:
    outs, sas = [], []
    x = f_pointwise
    for blk in range(3):
        x, f_sa = offset_attention(x, p, blk, kind)
        outs.append(x)
        sas.append(None if f_sa is None else f_sa.data)
    f_concat = T.concat(outs, axis=1)
    if record is not None:
        record.update(f_sa=sas, f_oa=[o.data for o in outs], f_concat=f_concat.data)
    return f_concat


def score(f_concat: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    h = T.relu(linear(f_concat, p, "cs.rho.0"))
    s = mlp(h, p, "cs.fc", len(SCORE_WIDTHS) - 1, final_relu=False)
    return T.reshape(s, (f_concat.shape[0],))


def forward_scores(graph: Graph, cloud: Union[PointCloud, np.ndarray], model: CsNetModel, p: Optional[Mapping[str, Tensor]] = None, record: Optional[dict] = None) -> Tensor:
    """Per-point contribution scores on ``graph``."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    cfg = model.config
    if cfg.n_neighbors > pts.shape[0]:
        raise ValueError(f"n_neighbors={cfg.n_neighbors} exceeds cloud size {pts.shape[0]}")
    if p is None:
        p = model.bind(graph)
    f_pw = feature_embed(graph, pts, p, cfg.n_neighbors, cfg.n_features, record)
    f_concat = cascade_attention(f_pw, p, cfg.attention, record)
    s = score(f_concat, p)
    if record is not None:
        record["s_con"] = s.data
    return s


def forward_sample(graph: Graph, cloud: PointCloud, model: CsNetModel, k: int, p: Optional[Mapping[str, Tensor]] = None):
    """Scores, hard top-k subset and straight-through gates.

    Returns ``(result, gates, activations, plan)``.
    """
    if not 1 <= k < cloud.n:
        raise ValueError(f"k must satisfy 1 <= k < n={cloud.n}, got {k}")
    rec: dict = {}
    s = forward_scores(graph, cloud, model, p, rec)
    result, gates, plan = straight_through_select(cloud, s, k, model.config.topk)
    return result, gates, ActivationRecord(**rec), plan


def select(cloud: PointCloud, model: CsNetModel, k: int) -> SampleResult:
    """Inference-time selection: rank raw scores, no transport solve."""
    with Graph(np.float32) as graph:
        s = forward_scores(graph, cloud, model, model.bind(graph, trainable=False))
    return SampleResult.from_indices(cloud, hard_topk(s.data, k), "csnet")


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    loss_variant: str = "emd"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")


def gated_chamfer_weights(sampled: np.ndarray, full: np.ndarray) -> np.ndarray:
    """Per-sampled-point weights w with sum(w) == chamfer(sampled, full)."""
    d = pairwise_sq_dists(sampled, full)
    k, n = d.shape
    w = d.min(axis=1) / k
    np.add.at(w, d.argmin(axis=0), d.min(axis=0) / n)
    return w


def shape_loss_weights(result: SampleResult, cloud: PointCloud, variant: str) -> np.ndarray:
    sp = result.sampled.points
    w = np.zeros(result.k)
    if variant in ("emd", "cd_plus_emd"):
        _, matching = emd(sp, cloud.points)
        w += matching.sq_dists / result.k
    if variant in ("cd", "cd_plus_emd"):
        w += gated_chamfer_weights(sp, cloud.points)
    return w


def joint_loss(result: SampleResult, gates: Tensor, cloud: PointCloud, task_loss: Union[Tensor, float], cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * gated shape loss + beta * task loss.

    The shape term is linear in the gates with the matching frozen at the
    current selection, so its value equals the plain metric (gates read 1).
    """
    graph = gates.graph
    if cfg.loss_variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {cfg.loss_variant!r}")
    total = graph.constant(0.0)
    if cfg.alpha > 0:
        w = shape_loss_weights(result, cloud, cfg.loss_variant)
        shape = T.reduce_sum(T.mul(gates, graph.constant(w)))
        total = T.add(total, T.scalar_mul(shape, cfg.alpha))
    if cfg.beta > 0:
        task = task_loss if isinstance(task_loss, Tensor) else graph.constant(float(task_loss))
        total = T.add(total, T.scalar_mul(task, cfg.beta))
    return total
