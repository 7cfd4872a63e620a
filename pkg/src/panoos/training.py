"""Closed-set training and outlier-exposure fine-tuning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .bpdl import BpdlConfig, loss_bpdl, partition_pixels
from .decoder import FeatureBundle, POSModel, SegOutput
from .errors import ContractError, FormatError
from .numerics import GROUPS, Tensor
from .synthdata import IGNORE, OUTLIER, SceneSample

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CLOSED_SET_GROUPS = tuple(g for g in GROUPS if g != "distribution-prompts")
FINETUNE_GROUPS = ("pixel-decoder", "mask-mlp", "class-linear", "prompt-projection", "distribution-prompts")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 4
    lambda_bce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    p_out: float = 0.3
    bpdl: BpdlConfig = field(default_factory=BpdlConfig)
    seed: int = 7
    trainable_groups: tuple = FINETUNE_GROUPS
    max_pixels: int = 4096
    poly_power: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.p_out <= 1.0:
            raise ContractError(f"p_out must lie in [0, 1], got {self.p_out}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")
        bad = set(self.trainable_groups) - set(GROUPS)
        if bad:
            raise ContractError(f"unknown parameter groups {sorted(bad)}")


@dataclass
class Targets:
    """Ground truth derived from a label raster."""

    classes: np.ndarray  # (G,) class ids 0..K-1
    masks: np.ndarray  # (G, H*W) bool
    valid: np.ndarray  # (H*W,) bool, inlier pixels
    outlier: np.ndarray  # (H*W,) bool

    @classmethod
    def from_labels(cls, labels, num_classes):
        flat = np.asarray(labels).reshape(-1)
        valid = flat < num_classes
        bad = ~valid & (flat != OUTLIER) & (flat != IGNORE)
        if bad.any():
            raise ContractError(f"illegal label value {int(flat[bad][0])}")
        classes = np.unique(flat[valid]).astype(np.int64)
        masks = flat[None, :] == classes[:, None]
        return cls(classes, masks, valid, flat == OUTLIER)


@dataclass
class MatchAssignment:
    queries: np.ndarray
    segments: np.ndarray
    num_queries: int

    @property
    def unmatched(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.num_queries), self.queries)


# -- matching -----------------------------------------------------------------


def solve_assignment(cost: np.ndarray):
    """Minimum-cost injective assignment of columns (segments) to rows (queries)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[1] > cost.shape[0]:
        raise ContractError(f"{cost.shape[1]} segments cannot be matched to {cost.shape[0]} queries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return rows[order], cols[order]


def match_cost(M: np.ndarray, P: np.ndarray, gt: Targets, lambda_cls=2.0, lambda_bce=5.0, lambda_dice=5.0):
    """(N, G) matching cost. ``M`` is ``(N, H*W)`` probabilities."""
    m = np.clip(M[:, gt.valid], PROB_EPS, 1 - PROB_EPS)
    g = gt.masks[:, gt.valid].astype(np.float64)
    npix = max(m.shape[1], 1)
    bce = -(np.log(m) @ g.T + np.log1p(-m) @ (1.0 - g).T) / npix
    inter = m @ g.T
    dice = 1.0 - (2.0 * inter + 1.0) / (m.sum(1)[:, None] + g.sum(1)[None, :] + 1.0)
    cls = -P[:, gt.classes]
    return lambda_cls * cls + lambda_bce * bce + lambda_dice * dice


def hungarian_match(seg: SegOutput, gt: Targets, cfg: TrainConfig = TrainConfig()) -> MatchAssignment:
    n = seg.M.shape[0]
    if len(gt.classes) > n:
        raise ContractError(f"{len(gt.classes)} ground-truth segments exceed {n} queries")
    cost = match_cost(seg.M.data.reshape(n, -1), seg.P.data, gt, cfg.lambda_cls, cfg.lambda_bce, cfg.lambda_dice)
    q, s = solve_assignment(cost)
    return MatchAssignment(q, s, n)


# -- losses -------------------------------------------------------------------


def loss_mask(M_matched: Tensor, gt_masks: np.ndarray, valid=None, lambda_bce=5.0, lambda_dice=5.0):
    """Weighted BCE + Dice between matched masks ``(G, P)`` and binary targets.

    Returns ``(total, bce, dice)``; each term is a mean over matched pairs.
    """
    if M_matched.shape[0] == 0:
        z = Tensor(0.0)
        return z, z, z
    if valid is not None:
        idx = np.flatnonzero(valid)
        M_matched = M_matched[:, idx]
        gt_masks = gt_masks[:, idx]
    g = np.asarray(gt_masks, dtype=np.float64)
    m = nx.clip(M_matched, PROB_EPS, 1 - PROB_EPS)
    npix = max(g.shape[1], 1)
    bce = -(g * nx.log(m) + (1.0 - g) * nx.log(1.0 - m)).sum() / float(npix * g.shape[0])
    inter = (m * g).sum(axis=1)
    dice = (1.0 - (2.0 * inter + 1.0) / (m.sum(axis=1) + g.sum(axis=1) + 1.0)).mean()
    return lambda_bce * bce + lambda_dice * dice, bce, dice


def loss_cls(P: Tensor, assignment: MatchAssignment, gt_labels: np.ndarray) -> Tensor:
    """Cross-entropy of matched queries; unmatched queries carry no class loss."""
    if len(assignment.queries) == 0:
        return Tensor(0.0)
    picked = P[assignment.queries, np.asarray(gt_labels)[assignment.segments]]
    return -nx.log(nx.clip(picked, 1e-12, 1.0)).mean()


def loss_rba_oe(S: Tensor, outlier_mask: np.ndarray) -> Tensor:
    """Mean over outlier pixels of sum_k max(S_k, 0)^2."""
    idx = np.flatnonzero(np.asarray(outlier_mask).reshape(-1))
    if idx.size == 0:
        return Tensor(0.0)
    k = S.shape[0]
    at = S.reshape(k, -1)[:, idx]
    return nx.square(nx.relu(at)).sum() / float(idx.size)


def total_loss_closed(seg: SegOutput, gt: Targets, cfg: TrainConfig = TrainConfig()):
    """Returns ``(loss, parts)`` with ``parts`` holding the mask and cls terms."""
    a = hungarian_match(seg, gt, cfg)
    n = seg.M.shape[0]
    mm = seg.M.reshape(n, -1)[a.queries]
    lm, _, _ = loss_mask(mm, gt.masks[a.segments], gt.valid, cfg.lambda_bce, cfg.lambda_dice)
    lc = loss_cls(seg.P, a, gt.classes)
    return lm + cfg.lambda_cls * lc, {"mask": lm, "cls": lc, "assignment": a}


def total_loss_oe(seg: SegOutput, gt: Targets, partition, prompts, cfg: TrainConfig = TrainConfig()):
    closed, parts = total_loss_closed(seg, gt, cfg)
    rba = loss_rba_oe(seg.S, gt.outlier)
    total = closed + rba
    if cfg.bpdl.lambda_bpdl > 0:
        b = loss_bpdl(partition, prompts, cfg.bpdl)
        total = total + cfg.bpdl.lambda_bpdl * b
    else:
        b = Tensor(0.0)
    parts.update(rba=rba, bpdl=b, closed=closed)
    return total, parts


# -- augmentation -------------------------------------------------------------


def anomaly_mix(sample: SceneSample, outlier_bank, p_out: float, seed) -> SceneSample:
    """With probability ``p_out`` paste one bank patch at a uniform location."""
    if not outlier_bank:
        raise ContractError("outlier bank is empty")
    if not 0.0 <= p_out <= 1.0:
        raise ContractError(f"p_out must lie in [0, 1], got {p_out}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not rng.random() < p_out:
        return sample
    patch = outlier_bank[int(rng.integers(len(outlier_bank)))]
    ph, pw = patch.mask.shape
    if ph > sample.height or pw > sample.width:
        raise ContractError(f"patch {ph}x{pw} larger than scene {sample.height}x{sample.width}")
    top = int(rng.integers(0, sample.height - ph + 1))
    left = int(rng.integers(0, sample.width - pw + 1))
    out = sample.copy()
    region = out.features[:, top : top + ph, left : left + pw]
    region[:, patch.mask] = patch.features[:, patch.mask]
    out.labels[top : top + ph, left : left + pw][patch.mask] = OUTLIER
    return out


# -- optimisation -------------------------------------------------------------


def poly_lr(base_lr, step, total, power=0.9):
    if total <= 0:
        return base_lr
    return base_lr * (1.0 - min(step, total) / total) ** power


class AdamW:
    """Adam with decoupled weight decay; frozen parameters are never touched."""

    def __init__(self, params, lr=1e-4, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params, lr, weight_decay, state: AdamW | None = None) -> AdamW:
    """One AdamW update from the parameters' gradient accumulators."""
    state = state or AdamW(params, lr=lr, weight_decay=weight_decay)
    state.weight_decay = weight_decay
    state.step(lr)
    return state


# -- loops --------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "total", "mask", "cls", "rba", "bpdl")


def _run(model: POSModel, scenes, cfg: TrainConfig, groups, bank=None, oe=False, progress=None):
    if not scenes:
        raise ContractError("training needs at least one scene")
    model.set_trainable(groups)
    model.zero_grad()
    opt = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 31 if oe else 29])
    K = model.config.num_classes
    trace = []
    for it in range(cfg.iterations):
        picks = rng.integers(0, len(scenes), size=cfg.batch_size)
        sums = dict.fromkeys(TRACE_COLUMNS[1:], 0.0)
        for b, si in enumerate(picks):
            scene = scenes[int(si)]
            if oe:
                scene = anomaly_mix(scene, bank, cfg.p_out, np.random.default_rng([cfg.seed, it, b, 7]))
            gt = Targets.from_labels(scene.labels, K)
            bundle = FeatureBundle.from_scene(scene, model.config.strides)
            with nx.Tape() as tape:
                seg = model.forward(bundle)
                if oe:
                    part_rng = np.random.default_rng([cfg.seed, it, b, 11])
                    partition = partition_pixels(seg.pixel_embeddings, seg.stride, scene.labels, part_rng, cfg.max_pixels)
                    loss, parts = total_loss_oe(seg, gt, partition, seg.extras["prompts"], cfg)
                else:
                    loss, parts = total_loss_closed(seg, gt, cfg)
                scaled = loss / float(cfg.batch_size)
            nx.backward(scaled, tape)
            sums["total"] += loss.item()
            for k in ("mask", "cls", "rba", "bpdl"):
                if k in parts:
                    sums[k] += parts[k].item()
        opt.step(poly_lr(cfg.learning_rate, it, cfg.iterations, cfg.poly_power))
        model.zero_grad()
        row = [it] + [sums[k] / cfg.batch_size for k in TRACE_COLUMNS[1:]]
        trace.append(row)
        if progress is not None:
            progress(row)
    return trace


def train_closed_set(model: POSModel, scenes, cfg: TrainConfig, progress=None):
    """Train every group except the distribution prompts; returns the loss trace."""
    return _run(model, scenes, cfg, CLOSED_SET_GROUPS, progress=progress)


def finetune_oe(model: POSModel, scenes, outlier_bank, cfg: TrainConfig, progress=None):
    """Outlier-exposure fine-tuning of ``cfg.trainable_groups`` only."""
    if not outlier_bank:
        raise ContractError("fine-tuning needs a non-empty outlier bank")
    return _run(model, scenes, cfg, cfg.trainable_groups, bank=outlier_bank, oe=True, progress=progress)


def write_trace(path, trace):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(f"{row[0]}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"POSCKPT1"


def checkpoint_bytes(model: POSModel) -> bytes:
    chunks = [CKPT_MAGIC, struct.pack("<I", len(model.params))]
    for p in model.parameters():
        tag = p.group.encode()
        chunks.append(struct.pack("<H", len(tag)) + tag)
        chunks.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: POSModel, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint_bytes(model: POSModel, blob: bytes):
    """Overwrite ``model`` parameters in creation order; tags and shapes must agree."""
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params = model.parameters()
    if count != len(params):
        raise FormatError(f"checkpoint has {count} parameters, model has {len(params)}", 8)
    values = []
    for p in params:
        start = pos
        (n,) = struct.unpack("<H", take(2))
        tag = take(n).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tag != p.group or tuple(shape) != p.shape:
            raise FormatError(f"parameter {p.name}: checkpoint has {tag}{shape}, model expects {p.group}{p.shape}", start)
        size = int(np.prod(shape)) if shape else 1
        values.append(np.frombuffer(take(8 * size), dtype="<f8").reshape(shape))
    if pos != len(blob):
        raise FormatError("trailing bytes after last parameter", pos)
    for p, v in zip(params, values):
        p.data[...] = v


def load_checkpoint(model: POSModel, path):
    with open(path, "rb") as fh:
        load_checkpoint_bytes(model, fh.read())
    return model
