"""Bilevel prompt distribution losses over per-pixel embeddings.

Class level: pull pixels onto their class prototype (``loss_intra``), push
each prototype away from its nearest neighbour (``loss_sep``) and turn the
remaining neighbours away from that direction (``loss_ori``).
Distribution level: tie class prototypes to the inlier prompt
(``loss_ind``), orient them so the inlier and outlier prompts lie on the same
side (``loss_in_dir``), and keep outlier pixels closer to the outlier prompt
than to the inlier prompt by a margin (``loss_outlier``).

Prototype rows are ``T_0..T_K`` (``T_0`` is void); pixel labels ``k`` index
``T_1..T_K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor
from .synthdata import IGNORE, OUTLIER


@dataclass(frozen=True)
class BpdlConfig:
    s: float = 1.0
    d: float = 1.0
    alpha: float = 0.1
    lambda_bpdl: float = 0.01

    def __post_init__(self):
        for k in ("s", "d", "alpha"):
            if not getattr(self, k) > 0:
                raise ContractError(f"BPDL {k} must be strictly positive, got {getattr(self, k)}")
        if not self.lambda_bpdl >= 0:
            raise ContractError(f"lambda_bpdl must be non-negative, got {self.lambda_bpdl}")


@dataclass
class PixelPartition:
    inlier_embeddings: Tensor  # (N_i, C_m)
    labels: np.ndarray  # (N_i,) in 1..K
    outlier_embeddings: Tensor  # (N_o, C_m)

    @property
    def n_inlier(self):
        return int(self.labels.shape[0])

    @property
    def n_outlier(self):
        return int(self.outlier_embeddings.shape[0])


def partition_pixels(fm_coarse: Tensor, stride: int, labels: np.ndarray, rng=None, max_pixels=4096) -> PixelPartition:
    """Split full-resolution pixels by label and gather their embeddings.

    ``fm_coarse`` is the ``(C_m, H/stride, W/stride)`` decoder grid; a
    full-resolution pixel reads the embedding of the cell containing it.
    At most ``max_pixels`` of each kind are kept, sampled uniformly with
    ``rng`` when given.
    """
    c, gh, gw = fm_coarse.shape
    h, w = labels.shape
    rows = fm_coarse.reshape(c, gh * gw).T
    yy, xx = np.divmod(np.arange(h * w), w)
    cell = (yy // stride) * gw + xx // stride
    flat = labels.reshape(-1)

    def pick(sel):
        idx = np.flatnonzero(sel)
        if max_pixels is not None and idx.size > max_pixels:
            if rng is None:
                raise ContractError("rng required when subsampling pixels")
            idx = np.sort(rng.choice(idx, size=max_pixels, replace=False))
        return idx

    inl = pick((flat != OUTLIER) & (flat != IGNORE))
    out = pick(flat == OUTLIER)
    return PixelPartition(rows[cell[inl]], flat[inl].astype(np.int64) + 1, rows[cell[out]])


def _sqdist(a: Tensor, b) -> Tensor:
    return nx.square(a - b).sum(axis=-1)


def _nearest_other(protos: np.ndarray) -> np.ndarray:
    d = ((protos[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)


def loss_intra(partition: PixelPartition, class_prototypes: Tensor) -> Tensor:
    if partition.n_inlier == 0:
        return Tensor(0.0)
    k1 = class_prototypes.shape[0]
    if partition.labels.min() < 1 or partition.labels.max() >= k1:
        raise ContractError(f"pixel labels must lie in 1..{k1 - 1}")
    return _sqdist(partition.inlier_embeddings, class_prototypes[partition.labels]).mean()


def loss_sep(class_prototypes: Tensor, s: float) -> Tensor:
    if class_prototypes.shape[0] < 2:
        raise ContractError("separation needs at least two prototypes")
    nearest = _nearest_other(class_prototypes.data)
    d = _sqdist(class_prototypes, class_prototypes[nearest])
    return nx.relu(s - d).mean()


def loss_ori(class_prototypes: Tensor) -> Tensor:
    """Orientation of the remaining neighbours relative to the nearest one.

    Weights are a softmax of negative (non-squared) distances to the nearest
    neighbour, taken over the other prototypes of each anchor.
    """
    T = class_prototypes
    k1 = T.shape[0]
    if k1 < 3:
        return Tensor(0.0)
    nearest = _nearest_other(T.data)
    anchor, other = [], []
    for i in range(k1):
        for o in range(k1):
            if o != i and o != nearest[i]:
                anchor.append(i)
                other.append(o)
    anchor, other = np.array(anchor), np.array(other)
    Ti, Tn, To = T[anchor], T[nearest[anchor]], T[other]
    cos = nx.cosine(Tn - Ti, To - Ti)
    dist = nx.safe_norm(Tn - To)
    # per-anchor shift leaves the normalised weights unchanged
    dmin = np.full(k1, np.inf)
    np.minimum.at(dmin, anchor, dist.data)
    e = nx.exp(dmin[anchor] - dist)
    groups = (anchor[None, :] == np.arange(k1)[:, None]).astype(np.float64)  # (K+1, pairs)
    denom = (Tensor(groups) @ e.reshape(-1, 1)).reshape(-1)
    omega = e / denom[anchor]
    return (omega * (1.0 + cos)).sum() / float(k1)


def loss_inter(class_prototypes: Tensor, s: float) -> Tensor:
    return loss_sep(class_prototypes, s) + loss_ori(class_prototypes)


def loss_pixel(partition, class_prototypes, s) -> Tensor:
    return loss_intra(partition, class_prototypes) + loss_inter(class_prototypes, s)


def loss_ind(class_prototypes: Tensor, p_in: Tensor) -> Tensor:
    return _sqdist(class_prototypes, p_in).mean()


def loss_in_dir(class_prototypes: Tensor, p_in: Tensor, p_out: Tensor) -> Tensor:
    return (1.0 - nx.cosine(p_in - class_prototypes, p_out - class_prototypes)).mean()


def loss_inlier(class_prototypes, p_in, p_out, alpha) -> Tensor:
    return alpha * loss_ind(class_prototypes, p_in) + loss_in_dir(class_prototypes, p_in, p_out)


def loss_outlier(partition: PixelPartition, p_in: Tensor, p_out: Tensor, d: float) -> Tensor:
    if partition.n_outlier > 0:
        O = partition.outlier_embeddings
        return nx.relu(_sqdist(O, p_out) - _sqdist(O, p_in) + d).mean()
    return nx.relu(d - _sqdist(p_out, p_in))


def loss_distri(partition, prompts, cfg: BpdlConfig) -> Tensor:
    T = prompts.class_prototypes
    return loss_inlier(T, prompts.p_in, prompts.p_out, cfg.alpha) + loss_outlier(
        partition, prompts.p_in, prompts.p_out, cfg.d
    )


def loss_bpdl(partition, prompts, cfg: BpdlConfig) -> Tensor:
    return loss_pixel(partition, prompts.class_prototypes, cfg.s) + loss_distri(partition, prompts, cfg)


def bpdl_terms(partition, prompts, cfg: BpdlConfig) -> dict:
    """Each leaf term as a float, for logging and additivity checks."""
    T, pi, po = prompts.class_prototypes, prompts.p_in, prompts.p_out
    with nx.no_grad():
        return {
            "intra": loss_intra(partition, T).item(),
            "sep": loss_sep(T, cfg.s).item(),
            "ori": loss_ori(T).item(),
            "ind": loss_ind(T, pi).item(),
            "in_dir": loss_in_dir(T, pi, po).item(),
            "outlier": loss_outlier(partition, pi, po, cfg.d).item(),
        }
