"""scikit-learn style front end.

Samplers are transformers mapping a batch of (n, 3) clouds to a batch of
(k, 3) sub-clouds; :class:`CSNetSampler` is also a classifier because it is
trained jointly with one. All hyper-parameters live in ``__init__`` so
``get_params`` / ``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_clouds, check_n_samples, stack_results
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import CsNetModel, select
from .samplers import fps, poisson_disk, random_sample
from .trainer import ClassifierModel, TrainConfig, TrainReport, predict_logits, sample_cloud, train

__all__ = [
    "RandomSampler",
    "FarthestPointSampler",
    "PoissonDiskSampler",
    "CSNetSampler",
    "SampledPointClassifier",
]


class _IndexSampler(TransformerMixin, BaseEstimator):
    """Stateless samplers: ``fit`` only records the sample size check."""

    def fit(self, X, y=None):
        clouds = check_clouds(X)
        for c in clouds:
            check_n_samples(self.n_samples, c.n)
        self.n_features_in_ = 3
        return self

    def sample(self, X):
        """One :class:`~cssample.samplers.SampleResult` per cloud."""
        raise NotImplementedError

    def transform(self, X):
        return stack_results(self.sample(X))

    def select_indices(self, X) -> list[np.ndarray]:
        return [r.indices for r in self.sample(X)]


class RandomSampler(_IndexSampler):
    def __init__(self, n_samples: int = 64, random_state=None):
        self.n_samples = n_samples
        self.random_state = random_state

    def sample(self, X):
        rng = np.random.default_rng(self.random_state)
        return [random_sample(c, self.n_samples, rng) for c in check_clouds(X)]


class FarthestPointSampler(_IndexSampler):
    def __init__(self, n_samples: int = 64, start_index: int = 0):
        self.n_samples = n_samples
        self.start_index = start_index

    def sample(self, X):
        return [fps(c, self.n_samples, self.start_index) for c in check_clouds(X)]


class PoissonDiskSampler(_IndexSampler):
    def __init__(self, n_samples: int = 64, random_state=None):
        self.n_samples = n_samples
        self.random_state = random_state

    def sample(self, X):
        rng = np.random.default_rng(self.random_state)
        return [poisson_disk(c, self.n_samples, rng) for c in check_clouds(X)]


class CSNetSampler(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Learned contribution-score sampler trained jointly with a point classifier.

    Parameters
    ----------
    n_samples : int, default=64
        Points kept per cloud (k).
    n_neighbors : int, default=32
        Neighbourhood size of the grouping layer.
    n_features : int, default=64
        Feature width of the embedding and attention blocks.
    attention : {'oa', 'sa', 'mlp'}, default='oa'
        Offset attention, plain self-attention, or no attention.
    loss : {'emd', 'cd', 'cd_plus_emd'}, default='emd'
        Shape-preservation term of the joint loss.
    alpha, beta : float, default=1.0
        Weights of the shape term and the classification term.
    epsilon : float, default=0.01
        Entropic regularisation of the transport-based top-k.
    epochs, batch_size, learning_rate
        Optimiser schedule (Adam).
    augment : bool, default=True
        Random z-rotation and scaling of training clouds.
    random_state : int, default=0
        Seeds initialisation and the training stream.

    Attributes
    ----------
    model_ : CsNetModel
    classifier_ : ClassifierModel
    history_ : TrainReport
    classes_ : ndarray
    """

    def __init__(
        self,
        n_samples: int = 64,
        n_neighbors: int = 32,
        n_features: int = 64,
        attention: str = "oa",
        loss: str = "emd",
        alpha: float = 1.0,
        beta: float = 1.0,
        epsilon: float = 0.01,
        epochs: int = 20,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        augment: bool = True,
        random_state: int = 0,
    ):
        self.n_samples = n_samples
        self.n_neighbors = n_neighbors
        self.n_features = n_features
        self.attention = attention
        self.loss = loss
        self.alpha = alpha
        self.beta = beta
        self.epsilon = epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.augment = augment
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.random_state,
            k=self.n_samples,
            alpha=self.alpha,
            beta=self.beta,
            loss_variant=self.loss,
            eps=self.epsilon,
            attention=self.attention,
            n_neighbors=self.n_neighbors,
            n_features=self.n_features,
            method="csnet",
            augment=self.augment,
        )

    def fit(self, X, y=None, X_val=None, y_val=None):
        """Train sampler and classifier; without ``y`` only the shape term is used."""
        cfg = self._train_config()
        if y is None:
            if cfg.alpha == 0:
                raise ValueError("fitting without labels needs alpha > 0")
            cfg.beta = 0.0
            y_arr = np.zeros(len(X), dtype=np.int64)
            self.classes_ = np.array([0, 1])
        else:
            self.classes_, y_arr = np.unique(np.asarray(y), return_inverse=True)
            if self.classes_.size < 2:
                raise ValueError("need at least two classes")
        clouds = check_clouds(X, y_arr)
        for c in clouds:
            check_n_samples(self.n_samples, c.n, strict=True)
            if self.n_neighbors > c.n:
                raise ValueError(f"n_neighbors={self.n_neighbors} exceeds cloud size {c.n}")
        val = None
        if X_val is not None:
            val = check_clouds(X_val, np.searchsorted(self.classes_, np.asarray(y_val)))
        net_cfg = cfg.csnet_config()
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        self.model_ = CsNetModel.initialize(net_cfg, np.random.default_rng(seeds[0]))
        self.classifier_ = ClassifierModel.initialize(self.classes_.size, np.random.default_rng(seeds[1]))
        self.history_, rng = train(clouds, self.model_, self.classifier_, cfg, val, np.random.default_rng(seeds[2]))
        self._rng_state = rng.bit_generator.state
        self.n_features_in_ = 3
        return self

    def sample(self, X):
        check_is_fitted(self, "model_")
        return [select(c, self.model_, self.n_samples) for c in check_clouds(X)]

    def transform(self, X):
        return stack_results(self.sample(X))

    def scores(self, X) -> list[np.ndarray]:
        """Raw contribution scores per point."""
        from .model import forward_scores
        from .tensor import Graph

        check_is_fitted(self, "model_")
        out = []
        for c in check_clouds(X):
            with Graph(np.float32) as g:
                out.append(forward_scores(g, c, self.model_, self.model_.bind(g, trainable=False)).data.copy())
        return out

    def predict(self, X):
        check_is_fitted(self, "classifier_")
        idx = [int(np.argmax(predict_logits(r.sampled.points, self.classifier_))) for r in self.sample(X)]
        return self.classes_[idx]

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        extra = {"classes": self.classes_.tolist()}
        if hasattr(self, "history_"):
            extra["history"] = asdict(self.history_)
        save_checkpoint(
            Checkpoint(self.model_, self.classifier_, self._train_config().to_dict(), self._rng_state, extra),
            path,
        )

    @classmethod
    def load(cls, path) -> "CSNetSampler":
        ckpt = load_checkpoint(path)
        if ckpt.csnet is None:
            raise ValueError(f"{path} holds no sampler parameters")
        tc = ckpt.train_config
        est = cls(
            n_samples=tc.get("k", 64),
            n_neighbors=ckpt.csnet.config.n_neighbors,
            n_features=ckpt.csnet.config.n_features,
            attention=ckpt.csnet.config.attention,
            loss=tc.get("loss_variant", "emd"),
            alpha=tc.get("alpha", 1.0),
            beta=tc.get("beta", 1.0),
            epsilon=ckpt.csnet.config.topk.epsilon,
            epochs=tc.get("epochs", 20),
            batch_size=tc.get("batch_size", 8),
            learning_rate=tc.get("learning_rate", 1e-3),
            augment=tc.get("augment", True),
            random_state=tc.get("seed", 0),
        )
        est.model_, est.classifier_ = ckpt.csnet, ckpt.classifier
        est.classes_ = np.asarray(ckpt.extra.get("classes", list(range(ckpt.classifier.num_classes))))
        est._rng_state = ckpt.rng_state
        if "history" in ckpt.extra:
            est.history_ = TrainReport(**ckpt.extra["history"])
        est.n_features_in_ = 3
        return est


class SampledPointClassifier(ClassifierMixin, BaseEstimator):
    """The downstream classifier trained on clouds reduced by a fixed sampler.

    ``sampler='random'`` is the usual baseline; ``'none'`` trains on full clouds.
    """

    def __init__(self, sampler: str = "random", n_samples: int = 64, epochs: int = 20, batch_size: int = 8,
                 learning_rate: float = 1e-3, augment: bool = True, random_state: int = 0):
        self.sampler = sampler
        self.n_samples = n_samples
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        if self.sampler not in ("random", "fps", "none"):
            raise ValueError(f"sampler must be 'random', 'fps' or 'none', got {self.sampler!r}")
        self.classes_, y_arr = np.unique(np.asarray(y), return_inverse=True)
        clouds = check_clouds(X, y_arr)
        for c in clouds:
            check_n_samples(self.n_samples, c.n)
        val = None
        if X_val is not None:
            val = check_clouds(X_val, np.searchsorted(self.classes_, np.asarray(y_val)))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          seed=self.random_state, k=self.n_samples, alpha=0.0, beta=1.0,
                          method=self.sampler, augment=self.augment)
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        self.classifier_ = ClassifierModel.initialize(self.classes_.size, np.random.default_rng(seeds[0]))
        self.history_, _ = train(clouds, None, self.classifier_, cfg, val, np.random.default_rng(seeds[1]))
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "classifier_")
        clouds = check_clouds(X)
        idx = [
            int(np.argmax(predict_logits(sample_cloud(c, self.sampler, self.n_samples, seed=i).sampled.points, self.classifier_)))
            for i, c in enumerate(clouds)
        ]
        return self.classes_[idx]
