"""Downstream classifier, optimiser, and the joint train / evaluate loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import bind, collect_grads, init_mlp, linear, mlp
from .model import CsNetConfig, CsNetModel, LossConfig, forward_sample, joint_loss, select
from .pointcloud import PointCloud, augment
from .samplers import SampleResult, fps, random_sample
from .tensor import Graph, Tensor
from .topk import TopkConfig

logger = logging.getLogger(__name__)

__all__ = [
    "ClassifierModel",
    "classifier_forward",
    "cross_entropy",
    "Adam",
    "TrainConfig",
    "TrainReport",
    "train",
    "evaluate",
    "EvalResult",
    "SAMPLING_METHODS",
]

SAMPLING_METHODS = ("csnet", "random", "fps", "none")


class ClassifierModel:
    """Shared point MLP 3-64-128, global max pool, head 128-64-classes."""

    def __init__(self, num_classes: int, params: Mapping[str, np.ndarray]):
        self.num_classes = int(num_classes)
        expected = self.param_shapes(num_classes)
        if set(params) != set(expected):
            raise ValueError(f"classifier parameter table mismatch: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")
        self.params = {name: np.asarray(params[name], dtype=np.float32) for name in expected}

    @staticmethod
    def param_shapes(num_classes: int) -> dict:
        shapes = {}
        for prefix, widths in (("point", (3, 64, 128)), ("head", (128, 64, num_classes))):
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"{prefix}.{i}.w"] = (a, b)
                shapes[f"{prefix}.{i}.b"] = (b,)
        return shapes

    @classmethod
    def initialize(cls, num_classes: int, seed=0) -> "ClassifierModel":
        if num_classes < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(seed)
        params = init_mlp(rng, "point", (3, 64, 128))
        params.update(init_mlp(rng, "head", (128, 64, num_classes)))
        return cls(num_classes, params)

    def bind(self, graph: Graph, trainable: bool = True):
        return bind(graph, self.params, trainable)


def classifier_forward(points: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Logits for one (m, 3) point set; invariant to row order."""
    h = mlp(points, p, "point", 2)
    g = T.reshape(T.reduce("max", h, 0), (1, h.shape[1]))
    g = T.relu(linear(g, p, "head.0"))
    logits = linear(g, p, "head.1")
    return T.reshape(logits, (logits.shape[1],))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return T.sub(T.logsumexp(logits, axis=0), T.reshape(T.take(logits, [int(label)]), ()))


class Adam:
    """Bias-corrected Adam over a dict of named float32 arrays."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: Mapping[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g, dtype=np.float64)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p - update).astype(np.float32)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    k: int = 64
    alpha: float = 1.0
    beta: float = 1.0
    loss_variant: str = "emd"
    eps: float = 0.01
    attention: str = "oa"
    n_neighbors: int = 32
    n_features: int = 64
    method: str = "csnet"
    augment: bool = True
    scale_range: tuple = (0.8, 1.25)
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.method not in SAMPLING_METHODS:
            raise ValueError(f"method must be one of {SAMPLING_METHODS}")
        self.scale_range = tuple(self.scale_range)
        LossConfig(self.alpha, self.beta, self.loss_variant)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.loss_variant)

    def csnet_config(self) -> CsNetConfig:
        return CsNetConfig(self.n_neighbors, self.n_features, self.attention, TopkConfig(epsilon=self.eps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    sinkhorn_nonconverged: int = 0


def _sample_for_training(method, cloud, k, csnet, p_cs, graph, rng):
    """(result, gates tensor or None, plan or None) for one training cloud."""
    if method == "csnet":
        result, gates, _, plan = forward_sample(graph, cloud, csnet, k, p_cs)
        return result, gates, plan
    if method == "random":
        return random_sample(cloud, k, rng), None, None
    if method == "fps":
        return fps(cloud, k, int(rng.integers(cloud.n))), None, None
    return SampleResult.from_indices(cloud, np.arange(cloud.n), "none"), None, None


def _cloud_step(cloud, label, csnet, clf, cfg: TrainConfig, rng, report):
    """Forward + backward for one cloud; returns (loss, correct, csnet grads, clf grads)."""
    with Graph(np.float32) as graph:
        p_clf = clf.bind(graph, trainable=cfg.beta > 0)
        p_cs = csnet.bind(graph) if csnet is not None else None
        result, gates, plan = _sample_for_training(cfg.method, cloud, cfg.k, csnet, p_cs, graph, rng)
        if plan is not None and not plan.converged:
            report.sinkhorn_nonconverged += 1
        pts = graph.constant(result.sampled.points)
        if gates is not None:
            pts = T.scale_rows(pts, gates)
        logits = classifier_forward(pts, p_clf)
        correct = int(np.argmax(logits.data) == label)
        task = cross_entropy(logits, label)
        if gates is not None:
            total = joint_loss(result, gates, cloud, task, cfg.loss)
        else:
            total = T.scalar_mul(task, cfg.beta)
        value = float(total.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite training loss on cloud with label {label}")
        grads = T.backward(graph, total)
        g_cs = collect_grads(grads, p_cs) if p_cs is not None else None
        g_clf = collect_grads(grads, p_clf) if cfg.beta > 0 else None
    return value, correct, g_cs, g_clf


def _accumulate(acc, grads, scale):
    if grads is None:
        return acc
    if acc is None:
        return {k: v.astype(np.float64) * scale for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v * scale
    return acc


def train(
    train_set: Sequence[PointCloud],
    csnet: Optional[CsNetModel],
    clf: ClassifierModel,
    cfg: TrainConfig,
    test_set: Optional[Sequence[PointCloud]] = None,
    rng: Optional[np.random.Generator] = None,
    on_epoch: Optional[Callable[[int, TrainReport], None]] = None,
) -> tuple[TrainReport, np.random.Generator]:
    """Joint sampler + classifier training; parameters are updated in place."""
    if not train_set:
        raise ValueError("empty training set")
    if cfg.method == "csnet" and csnet is None:
        raise ValueError("csnet method needs a CsNetModel")
    if cfg.method != "csnet":
        csnet = None
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt_cs, opt_clf = Adam(cfg.learning_rate), Adam(cfg.learning_rate)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        tot_loss, tot_correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc_cs = acc_clf = None
            for i in batch:
                cloud = train_set[i]
                if cfg.augment:
                    cloud = augment(cloud, rng, rotation=True, scale_range=cfg.scale_range)
                loss, correct, g_cs, g_clf = _cloud_step(cloud, cloud.label, csnet, clf, cfg, rng, report)
                tot_loss += loss
                tot_correct += correct
                acc_cs = _accumulate(acc_cs, g_cs, 1.0 / len(batch))
                acc_clf = _accumulate(acc_clf, g_clf, 1.0 / len(batch))
            if acc_cs is not None:
                opt_cs.step(csnet.params, acc_cs)
            if acc_clf is not None:
                opt_clf.step(clf.params, acc_clf)
        report.train_loss.append(tot_loss / len(train_set))
        report.train_accuracy.append(tot_correct / len(train_set))
        if test_set:
            report.test_accuracy.append(evaluate(test_set, csnet, clf, cfg.k, cfg.method).accuracy)
        logger.info(
            "epoch %d loss %.4f train acc %.3f%s",
            epoch + 1,
            report.train_loss[-1],
            report.train_accuracy[-1],
            f" test acc {report.test_accuracy[-1]:.3f}" if test_set else "",
        )
        if on_epoch is not None:
            on_epoch(epoch, report)
    return report, rng


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray


def sample_cloud(cloud: PointCloud, method: str, k: int, csnet: Optional[CsNetModel] = None, seed: int = 0) -> SampleResult:
    """Deterministic evaluation-time sampling of one cloud."""
    if method == "csnet":
        if csnet is None:
            raise ValueError("csnet sampling needs a model")
        return select(cloud, csnet, k)
    if method == "random":
        return random_sample(cloud, k, np.random.default_rng(seed))
    if method == "fps":
        return fps(cloud, k, 0)
    if method == "none":
        return SampleResult.from_indices(cloud, np.arange(cloud.n), "none")
    raise ValueError(f"unknown sampling method {method!r}")


def predict_logits(points: np.ndarray, clf: ClassifierModel) -> np.ndarray:
    with Graph(np.float32) as graph:
        return classifier_forward(graph.constant(points), clf.bind(graph, trainable=False)).data


def evaluate(dataset: Sequence[PointCloud], csnet: Optional[CsNetModel], clf: ClassifierModel, k: int, method: str = "csnet") -> EvalResult:
    """Accuracy and confusion counts; consumes no external randomness."""
    if not dataset:
        raise ValueError("cannot evaluate an empty split")
    nc = clf.num_classes
    confusion = np.zeros((nc, nc), dtype=np.int64)
    preds = np.empty(len(dataset), dtype=np.int64)
    for i, cloud in enumerate(dataset):
        res = sample_cloud(cloud, method, k, csnet, seed=i)
        pred = int(np.argmax(predict_logits(res.sampled.points, clf)))
        preds[i] = pred
        if cloud.label is not None:
            confusion[cloud.label, pred] += 1
    total = confusion.sum()
    acc = float(np.trace(confusion) / total) if total else 0.0
    return EvalResult(acc, confusion, preds)
