"""Finite-difference audit of every training loss on tiny random instances."""

from __future__ import annotations

import numpy as np

from . import bpdl
from . import numerics as nx
from .bpdl import BpdlConfig, PixelPartition, partition_pixels
from .decoder import FeatureBundle, ModelConfig, POSModel
from .errors import ConfigError
from .numerics import Parameter
from .synthdata import OUTLIER, SceneSample
from .training import FINETUNE_GROUPS, MatchAssignment, Targets, TrainConfig, loss_cls, loss_mask, loss_rba_oe, total_loss_oe

LOSSES = (
    "loss_intra",
    "loss_sep",
    "loss_ori",
    "loss_ind",
    "loss_in_dir",
    "loss_outlier",
    "loss_mask",
    "loss_cls",
    "loss_rba_oe",
    "total_loss_oe",
)
TOLERANCE = 1e-4
NUM_QUERIES, NUM_CLASSES, EMBED = 4, 3, 4


def _strides(size):
    if size not in (1, 2, 4):
        raise ConfigError(f"gradcheck size must be 1, 2 or 4, got {size}")
    return (1, min(2, size), size, size)


def _labels(rng, size):
    lab = rng.integers(0, NUM_CLASSES, size=(size, size)).astype(np.uint8)
    n_out = max(1, size * size // 4)
    lab.reshape(-1)[rng.choice(size * size, n_out, replace=False)] = OUTLIER
    return lab


def _pixel_instance(rng, size):
    lab = _labels(rng, size).reshape(-1)
    inl = lab != OUTLIER
    emb_in = Parameter(rng.standard_normal((int(inl.sum()), EMBED)), name="inlier")
    emb_out = Parameter(rng.standard_normal((int((~inl).sum()), EMBED)), name="outlier")
    part = PixelPartition(emb_in, lab[inl].astype(np.int64) + 1, emb_out)
    protos = Parameter(0.3 * rng.standard_normal((NUM_CLASSES + 1, EMBED)), name="T")
    dist = Parameter(rng.standard_normal((2, EMBED)), name="dist")
    return part, protos, dist


def _model_instance(rng, seed, size):
    cfg = ModelConfig(
        num_classes=NUM_CLASSES,
        feature_dim=3,
        num_queries=NUM_QUERIES,
        query_dim=EMBED,
        mask_dim=EMBED,
        text_dim=EMBED,
        ffn_dim=EMBED,
        template_count=2,
        strides=_strides(size),
        seed=seed,
    )
    model = POSModel(cfg)
    # a generic point: zero biases and the zero gate put ReLUs exactly on their kink
    for p in model.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    model.set_trainable(FINETUNE_GROUPS)
    scene = SceneSample(rng.standard_normal((3, size, size)), _labels(rng, size), "grad")
    return model, scene


def loss_instances(seed=0, size=4):
    """``{name: (f, params)}`` with ``f`` a no-argument closure."""
    rng = np.random.default_rng([seed, 404])
    part, T, dist = _pixel_instance(rng, size)
    p_in = lambda: dist[0]  # noqa: E731
    p_out = lambda: dist[1]  # noqa: E731
    cfg = BpdlConfig()

    pixels = size * size
    g = min(2, NUM_QUERIES)
    mask_logits = Parameter(rng.standard_normal((g, pixels)), name="mask_logits")
    mask_gt = rng.random((g, pixels)) < 0.5
    cls_logits = Parameter(rng.standard_normal((NUM_QUERIES, NUM_CLASSES)), name="cls_logits")
    matched = rng.permutation(NUM_QUERIES)[:g]
    assignment = MatchAssignment(matched, np.arange(g), NUM_QUERIES)
    gt_classes = rng.choice(NUM_CLASSES, size=g, replace=False)
    S = Parameter(rng.standard_normal((NUM_CLASSES, size, size)), name="S")
    out_mask = _labels(rng, size) == OUTLIER

    model, scene = _model_instance(rng, seed, size)
    tcfg = TrainConfig(bpdl=BpdlConfig(lambda_bpdl=0.5))
    gt = Targets.from_labels(scene.labels, NUM_CLASSES)
    bundle = FeatureBundle.from_scene(scene, model.config.strides)

    def oe():
        seg = model.forward(bundle)
        p = partition_pixels(seg.pixel_embeddings, seg.stride, scene.labels, max_pixels=None)
        return total_loss_oe(seg, gt, p, seg.extras["prompts"], tcfg)[0]

    trainable = [p for p in model.parameters() if p.trainable]
    return {
        "loss_intra": (lambda: bpdl.loss_intra(part, T), [part.inlier_embeddings, T]),
        "loss_sep": (lambda: bpdl.loss_sep(T, cfg.s), [T]),
        "loss_ori": (lambda: bpdl.loss_ori(T), [T]),
        "loss_ind": (lambda: bpdl.loss_ind(T, p_in()), [T, dist]),
        "loss_in_dir": (lambda: bpdl.loss_in_dir(T, p_in(), p_out()), [T, dist]),
        "loss_outlier": (lambda: bpdl.loss_outlier(part, p_in(), p_out(), cfg.d), [part.outlier_embeddings, dist]),
        "loss_mask": (lambda: loss_mask(nx.sigmoid(mask_logits), mask_gt)[0], [mask_logits]),
        "loss_cls": (lambda: loss_cls(nx.softmax_lastdim(cls_logits), assignment, gt_classes), [cls_logits]),
        "loss_rba_oe": (lambda: loss_rba_oe(S, out_mask), [S]),
        "total_loss_oe": (oe, trainable),
    }


def run_suite(seed=0, size=4, h=1e-5):
    """List of ``(loss name, max relative error)`` in a fixed order."""
    inst = loss_instances(seed, size)
    return [(name, nx.finite_diff_check(*inst[name], h=h)) for name in LOSSES]


def format_table(rows, tolerance=TOLERANCE):
    width = max(len(n) for n, _ in rows)
    lines = [f"{'loss':<{width}}  max_rel_error  status"]
    for name, err in rows:
        lines.append(f"{name:<{width}}  {err:13.3e}  {'ok' if err < tolerance else 'FAIL'}")
    return "\n".join(lines) + "\n"

