"""scikit-learn style front end.

``GateSegmenter`` fits the head and the gated toolbox on a set of source
images with patch labels and predicts patch label grids for new images.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import Backbone, BackboneConfig
from .config import Mode, TrainConfig
from .fisher import GateConfig
from .metrics import mean_iou
from .synth import Benchmark, DatasetConfig, Sample
from .tensor import no_grad
from .toolbox import ToolboxDims
from .trainer import Trainer, pretrain_backbone


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Validate a stack of square ``(n, s, s, c)`` images with finite values."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, h, w, c), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if channels is not None and X.shape[3] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    return X


def check_patch_labels(y, n: int, grid: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n, grid, grid):
        raise ValueError(f"expected labels of shape ({n}, {grid}, {grid}), got {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    return y


class GateSegmenter(BaseEstimator):
    def __init__(
        self,
        mode: str = "CrossEarthGate",
        n_classes: int | None = None,
        patch_size: int = 4,
        depth: int = 4,
        dim: int = 32,
        heads: int = 2,
        mlp_ratio: int = 2,
        spatial_rank: int = 4,
        semantic_dim: int = 8,
        frequency_dim: int = 4,
        cutoff: float = 0.3,
        scale: float = 0.1,
        top_k: int = 3,
        accumulation_steps: int = 100,
        selection_count: int = 10,
        max_iter: int = 3000,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.01,
        batch_size: int = 8,
        pretrain_iterations: int = 0,
        backbone: Backbone | None = None,
        random_state: int = 0,
    ):
        self.mode = mode
        self.n_classes = n_classes
        self.patch_size = patch_size
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.spatial_rank = spatial_rank
        self.semantic_dim = semantic_dim
        self.frequency_dim = frequency_dim
        self.cutoff = cutoff
        self.scale = scale
        self.top_k = top_k
        self.accumulation_steps = accumulation_steps
        self.selection_count = selection_count
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.pretrain_iterations = pretrain_iterations
        self.backbone = backbone
        self.random_state = random_state

    def _train_config(self, image_size: int, channels: int, num_classes: int) -> TrainConfig:
        return TrainConfig(
            backbone=BackboneConfig(image_size, channels, self.patch_size, self.depth, self.dim,
                                    self.heads, self.mlp_ratio, num_classes),
            toolbox=ToolboxDims(self.spatial_rank, self.semantic_dim, self.frequency_dim,
                                self.cutoff, self.scale),
            gate=GateConfig(self.top_k, self.accumulation_steps, self.selection_count, self.max_iter),
            mode=Mode.parse(self.mode),
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
            pretrain_iterations=self.pretrain_iterations,
            pretrain_seed=self.random_state,
        )

    def fit(self, X, y, X_pretrain=None, y_pretrain=None):
        """Fit on source images ``X`` with patch labels ``y``.

        Without a ``backbone`` the encoder is first trained on
        ``(X_pretrain, y_pretrain)`` for ``pretrain_iterations`` steps
        (random weights if neither is given), then frozen.
        """
        X = check_images(X)
        s, c = X.shape[1], X.shape[3]
        if s % self.patch_size:
            raise ValueError(f"image size {s} not divisible by patch_size {self.patch_size}")
        grid = s // self.patch_size
        y = check_patch_labels(y, len(X), grid, self.n_classes)
        num_classes = self.n_classes or int(y.max()) + 1
        cfg = self._train_config(s, c, num_classes)
        data_cfg = DatasetConfig(num_classes=num_classes, channels=c, image_size=s,
                                 patch_size=self.patch_size)
        train = [Sample(img, lab, "source") for img, lab in zip(X, y)]
        bench = Benchmark(data_cfg, None, [], train, {})
        backbone = self.backbone
        if backbone is None:
            pre = []
            if X_pretrain is not None:
                Xp = check_images(X_pretrain, channels=c)
                yp = check_patch_labels(y_pretrain, len(Xp), grid, num_classes)
                pre = [Sample(img, lab, "pretrain") for img, lab in zip(Xp, yp)]
            backbone = pretrain_backbone(cfg, pre)
        trainer = Trainer(cfg, bench, backbone=backbone)
        trainer.run()
        self.model_ = trainer.model
        self.classes_ = np.arange(num_classes)
        self.losses_ = list(trainer.losses)
        self.importance_history_ = list(trainer.gate.history) if trainer.gate else []
        self.summary_ = trainer.summary()
        self.n_features_in_ = s * s * c
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.model_.cfg.channels)
        return self.model_.predict(X)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.model_.cfg.channels)
        with no_grad():
            logits = self.model_.logits(X).data
        z = np.exp(logits - logits.max(-1, keepdims=True))
        g = self.model_.cfg.grid
        return (z / z.sum(-1, keepdims=True)).reshape(len(X), g, g, -1)

    def transform(self, X) -> np.ndarray:
        """Final-layer tokens ``(n, l, d)`` of the adapted encoder."""
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.model_.cfg.channels)
        with no_grad():
            return self.model_.backbone.encode(X, self.model_.toolbox)[-1].data.copy()

    def score(self, X, y) -> float:
        """Mean IoU over classes present in prediction or labels."""
        pred = self.predict(X)
        y = check_patch_labels(y, len(pred), pred.shape[1])
        return mean_iou(pred, y, len(self.classes_))
