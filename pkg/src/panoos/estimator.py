"""scikit-learn style front end around :class:`POSModel`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .bpdl import BpdlConfig
from .decoder import FeatureBundle, ModelConfig, POSModel
from .evaluation import auprc, pr_curve
from .synthdata import STRIDES
from .training import FINETUNE_GROUPS, TrainConfig, finetune_oe, train_closed_set
from .validation import check_scenes


class POSSegmenter(BaseEstimator):
    """Out-of-distribution segmenter.

    ``fit`` runs closed-set training and, when an ``outlier_bank`` is given,
    outlier-exposure fine-tuning. ``predict`` returns per-pixel class ids
    and ``score_samples`` the anomaly maps (higher is more anomalous).

    Parameters mirror the keys of the run configuration.
    """

    def __init__(
        self,
        num_classes=6,
        num_queries=100,
        query_dim=256,
        mask_dim=256,
        text_dim=768,
        ffn_dim=512,
        template_count=14,
        num_layers=1,
        use_pra=True,
        strides=STRIDES,
        text_embeddings="",
        iterations=2000,
        finetune_iterations=1000,
        learning_rate=1e-4,
        weight_decay=0.05,
        batch_size=4,
        lambda_bce=5.0,
        lambda_dice=5.0,
        lambda_cls=2.0,
        lambda_bpdl=0.01,
        margin_s=1.0,
        margin_d=1.0,
        alpha=0.1,
        p_out=0.3,
        max_pixels=4096,
        trainable_groups=FINETUNE_GROUPS,
        random_state=7,
    ):
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.query_dim = query_dim
        self.mask_dim = mask_dim
        self.text_dim = text_dim
        self.ffn_dim = ffn_dim
        self.template_count = template_count
        self.num_layers = num_layers
        self.use_pra = use_pra
        self.strides = strides
        self.text_embeddings = text_embeddings
        self.iterations = iterations
        self.finetune_iterations = finetune_iterations
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.lambda_cls = lambda_cls
        self.lambda_bpdl = lambda_bpdl
        self.margin_s = margin_s
        self.margin_d = margin_d
        self.alpha = alpha
        self.p_out = p_out
        self.max_pixels = max_pixels
        self.trainable_groups = trainable_groups
        self.random_state = random_state

    def _model_config(self, feature_dim):
        return ModelConfig(
            num_classes=self.num_classes,
            feature_dim=feature_dim,
            num_queries=self.num_queries,
            query_dim=self.query_dim,
            mask_dim=self.mask_dim,
            text_dim=self.text_dim,
            ffn_dim=self.ffn_dim,
            template_count=self.template_count,
            num_layers=self.num_layers,
            use_pra=self.use_pra,
            strides=tuple(self.strides),
            seed=self.random_state,
            text_embeddings=self.text_embeddings,
        )

    def _train_config(self, finetune):
        return TrainConfig(
            iterations=self.finetune_iterations if finetune else self.iterations,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            lambda_bce=self.lambda_bce,
            lambda_dice=self.lambda_dice,
            lambda_cls=self.lambda_cls,
            p_out=self.p_out,
            bpdl=BpdlConfig(self.margin_s, self.margin_d, self.alpha, self.lambda_bpdl),
            seed=self.random_state,
            trainable_groups=tuple(self.trainable_groups),
            max_pixels=self.max_pixels,
        )

    def fit(self, X, y=None, outlier_bank=None):
        scenes = check_scenes(X, y, num_classes=self.num_classes)
        self.n_features_in_ = scenes[0].features.shape[0]
        check_scenes(scenes, feature_dim=self.n_features_in_)
        self.classes_ = np.arange(self.num_classes)
        self.model_ = POSModel(self._model_config(self.n_features_in_))
        self.closed_trace_ = train_closed_set(self.model_, scenes, self._train_config(False))
        self.finetune_trace_ = []
        if outlier_bank is not None:
            self.finetune(scenes, outlier_bank=outlier_bank)
        return self

    def finetune(self, X, y=None, outlier_bank=None):
        """Outlier-exposure fine-tuning of an already fitted model."""
        check_is_fitted(self, "model_")
        scenes = check_scenes(X, y, feature_dim=self.n_features_in_, num_classes=self.num_classes)
        self.finetune_trace_ = finetune_oe(self.model_, scenes, outlier_bank, self._train_config(True))
        return self

    def segment(self, X):
        """Full model outputs (``SegOutput``) for each scene, without recording gradients."""
        check_is_fitted(self, "model_")
        scenes = check_scenes(X, feature_dim=self.n_features_in_, require_labels=False)
        with nx.no_grad():
            return [self.model_.forward(FeatureBundle.from_scene(s, self.model_.config.strides)) for s in scenes]

    def predict(self, X):
        return np.stack([o.semantic() for o in self.segment(X)])

    def score_samples(self, X):
        return np.stack([o.A.data for o in self.segment(X)])

    def score(self, X, y=None):
        """Pooled AuPRC of the anomaly maps against the outlier labels."""
        scenes = check_scenes(X, y, num_classes=self.num_classes)
        maps = self.score_samples(scenes)
        return auprc(pr_curve(list(maps), [s.labels for s in scenes]))
