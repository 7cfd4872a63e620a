"""Input checks for the estimator front end."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .synthdata import IGNORE, OUTLIER, SceneSample


def check_scenes(X, y=None, feature_dim=None, num_classes=None, require_labels=True):
    """Normalise estimator input to a list of :class:`SceneSample`.

    ``X`` is either a sequence of scenes (``y`` must be None) or a feature
    array of shape ``(n, D, H, W)`` with labels ``y`` of shape ``(n, H, W)``.
    """
    if isinstance(X, SceneSample):
        X = [X]
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise DimensionError(f"feature array must be (n, D, H, W), got shape {X.shape}")
        if y is None:
            if require_labels:
                raise ContractError("labels y are required with a feature array")
            y = np.full((X.shape[0],) + X.shape[2:], IGNORE, dtype=np.uint8)
        y = np.asarray(y)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise DimensionError(f"labels shape {y.shape} does not match features {X.shape}")
        scenes = [SceneSample(np.asarray(f, dtype=np.float64), np.asarray(l, dtype=np.uint8), f"x{i}") for i, (f, l) in enumerate(zip(X, y))]
    else:
        if y is not None:
            raise ContractError("pass labels inside the scenes, not as y")
        scenes = list(X)
    if not scenes:
        raise ContractError("no scenes given")
    for s in scenes:
        if not isinstance(s, SceneSample):
            raise ContractError(f"expected SceneSample, got {type(s).__name__}")
        if s.features.ndim != 3 or s.features.shape[1:] != s.labels.shape:
            raise DimensionError(f"scene {s.name}: features {s.features.shape} vs labels {s.labels.shape}")
        if feature_dim is not None and s.features.shape[0] != feature_dim:
            raise DimensionError(f"scene {s.name}: {s.features.shape[0]} channels, expected {feature_dim}")
        if not np.all(np.isfinite(s.features)):
            raise ContractError(f"scene {s.name}: non-finite features")
        if num_classes is not None:
            lab = s.labels
            bad = (lab >= num_classes) & (lab != OUTLIER) & (lab != IGNORE)
            if bad.any():
                raise ContractError(f"scene {s.name}: label {int(lab[bad][0])} is not a legal code")
    return scenes
