"""Mask-transformer segmentation model with prompt-guided query refinement.

Pipeline for one scene::

    pyramid rasters -> pixel decoder -> (f4, F_m)
    queries --masked attention(f4)--> prompt cross-attention --> gated correction
            --> self-attention --> FFN
    refined queries -> mask MLP . F_m -> sigmoid -> M      (N, H, W)
                    -> linear -> softmax           -> P      (N, K)
    S = P^T M (K, H, W);  A = -sum_k tanh(S_k)

The decoder works at the resolution of the finest pyramid level and
upsamples by nearest neighbour to full resolution. Because every head is a
per-pixel map, computing at the coarse grid and upsampling gives exactly the
same values as upsampling the embeddings first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Parameter, Tensor
from .synthdata import STRIDES, read_raster

LARGE = 1e9
DIST_IDS = (1000, 1001)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    feature_dim: int = 16
    num_queries: int = 100
    query_dim: int = 256
    mask_dim: int = 256
    text_dim: int = 768
    ffn_dim: int = 512
    template_count: int = 14
    num_layers: int = 1
    use_pra: bool = True
    strides: tuple = STRIDES
    seed: int = 7
    text_embeddings: str = ""


# -- data containers ----------------------------------------------------------


@dataclass
class FeatureBundle:
    """Multi-scale feature rasters ``{stride: (D, H/s, W/s)}`` for one scene."""

    rasters: dict
    height: int
    width: int

    @classmethod
    def from_scene(cls, scene, strides=STRIDES):
        return cls(scene.pyramid(strides), scene.height, scene.width)

    def check(self, strides):
        for s in strides:
            if s not in self.rasters:
                raise DimensionError(f"feature bundle has no raster at stride {s}")
            _, h, w = self.rasters[s].shape
            if h * s != self.height or w * s != self.width:
                raise DimensionError(
                    f"raster at stride {s} is {h}x{w}, inconsistent with input {self.height}x{self.width}"
                )


@dataclass
class PromptSet:
    class_prototypes: Tensor  # (K+1, C_m); row 0 is the void embedding
    dist_prototypes: Tensor  # (2, C_m); rows are P_in, P_out
    raw_text_embeddings: Tensor  # (K+3, D_text)

    @property
    def rows(self) -> Tensor:
        """All K+3 prototypes in order [void, classes, inlier, outlier]."""
        return nx.concat([self.class_prototypes, self.dist_prototypes], axis=0)

    @property
    def p_in(self) -> Tensor:
        return self.dist_prototypes[0]

    @property
    def p_out(self) -> Tensor:
        return self.dist_prototypes[1]


@dataclass
class QueryState:
    queries: Tensor
    positional: Tensor


@dataclass
class AttentionMask:
    """Additive mask with entries exactly 0 (attend) or -LARGE (blocked)."""

    values: np.ndarray

    @property
    def fully_masked(self) -> np.ndarray:
        return np.all(self.values != 0, axis=1)


@dataclass
class SegOutput:
    M: Tensor  # (N, H, W)
    P: Tensor  # (N, K)
    S: Tensor  # (K, H, W)
    A: Tensor  # (H, W)
    pixel_embeddings: Tensor = None  # (C_m, H/s, W/s) at the decoder grid
    stride: int = 1
    extras: dict = field(default_factory=dict)

    def semantic(self) -> np.ndarray:
        return np.argmax(self.S.data, axis=0).astype(np.uint8)


# -- text side ----------------------------------------------------------------


def synth_text_encode(ids, template_count=14, seed=7, dim=768) -> np.ndarray:
    """Deterministic stand-in for a frozen text encoder.

    Each ``(id, template)`` pair seeds its own Gaussian draw; the per-id
    embedding is the template average, L2-normalised.
    """
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate prompt ids in {ids}")
    if template_count < 1:
        raise ContractError("template_count must be at least 1")
    out = np.empty((len(ids), dim))
    for r, i in enumerate(ids):
        acc = np.zeros(dim)
        for t in range(template_count):
            acc += np.random.default_rng([seed, i, t]).standard_normal(dim)
        acc /= template_count
        out[r] = acc / np.linalg.norm(acc)
    return out


def load_text_embeddings(path, num_classes, dim) -> np.ndarray:
    emb = read_raster(path, "embedding")
    if emb.shape != (num_classes + 3, dim):
        raise DimensionError(f"{path}: expected {(num_classes + 3, dim)} embeddings, found {emb.shape}")
    return emb


def project_prompts(raw: Tensor, projection: Tensor, num_classes: int) -> PromptSet:
    raw = nx.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[0] != num_classes + 3:
        raise DimensionError(f"expected {num_classes + 3} raw prompt rows, got shape {raw.shape}")
    proj = raw @ projection
    return PromptSet(proj[: num_classes + 1], proj[num_classes + 1 :], raw)


# -- attention pieces ---------------------------------------------------------


def build_attention_mask(m_prev: np.ndarray) -> AttentionMask:
    """Threshold previous mask probabilities at 0.5 (``(N, h, w)`` or ``(N, L)``)."""
    m = np.asarray(m_prev, dtype=np.float64)
    m = m.reshape(m.shape[0], -1)
    return AttentionMask(np.where(m >= 0.5, 0.0, -LARGE))


def masked_attention(x, image_feats, mask: AttentionMask | None, wq, wk, wv, pos=None) -> Tensor:
    """softmax(mask + Q K^T) V over image positions.

    A query whose row is entirely blocked attends uniformly to every position.
    """
    xq = x if pos is None else x + pos
    q = xq @ wq
    k = image_feats @ wk
    v = image_feats @ wv
    logits = q @ k.T
    if mask is not None:
        if mask.values.shape != logits.shape:
            raise DimensionError(f"attention mask {mask.values.shape} does not match logits {logits.shape}")
        full = mask.fully_masked
        add = np.where(full[:, None], 0.0, mask.values)
        if full.any():
            logits = logits * (~full)[:, None].astype(np.float64)
        logits = logits + add
    return nx.softmax_lastdim(logits) @ v


def prompt_cross_attention(x_hat_i, prompt_rows, wq, wk, wv) -> Tensor:
    """Queries attend over the K+3 projected prompt rows."""
    q = x_hat_i @ wq
    k = prompt_rows @ wk
    v = prompt_rows @ wv
    return nx.softmax_lastdim(q @ k.T) @ v


def ffn(x, w1, b1, w2, b2) -> Tensor:
    return nx.relu(x @ w1 + b1) @ w2 + b2


def self_adaptive_correction(x_hat_l, gate, ln_gain, ln_bias, w1, b1, w2, b2) -> Tensor:
    """x + FFN(LN(x)) * tanh(gate); identity while the gate is 0."""
    return x_hat_l + ffn(nx.layer_norm(x_hat_l, ln_gain, ln_bias), w1, b1, w2, b2) * nx.tanh(gate)


def self_attention(x, wq, wk, wv, pos=None) -> Tensor:
    xp = x if pos is None else x + pos
    return nx.softmax_lastdim((xp @ wq) @ (xp @ wk).T) @ (x @ wv)


# -- heads --------------------------------------------------------------------


def mask_mlp(q, layers) -> Tensor:
    h = q
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = nx.relu(h)
    return h


def predict_masks(q, pixel_embeddings, layers) -> Tensor:
    """Sigmoid of segment embeddings dotted with per-pixel embeddings.

    ``pixel_embeddings`` is ``(C_m, H, W)``; returns ``(N, H, W)``.
    """
    c, h, w = pixel_embeddings.shape
    seg = mask_mlp(q, layers)
    if seg.shape[1] != c:
        raise DimensionError(f"segment embeddings have dim {seg.shape[1]}, pixel embeddings {c}")
    logits = seg @ pixel_embeddings.reshape(c, h * w)
    return nx.sigmoid(logits).reshape(seg.shape[0], h, w)


def predict_classes(q, w_p) -> Tensor:
    return nx.softmax_lastdim(q @ w_p.T)


def aggregate_logits(P, M) -> Tensor:
    """S_k(h, w) = sum_n P[n, k] M[n, h, w]."""
    n, h, w = M.shape
    if P.shape[0] != n:
        raise DimensionError(f"P has {P.shape[0]} rows but M has {n} masks")
    return (P.T @ M.reshape(n, h * w)).reshape(P.shape[1], h, w)


def rba_score(S) -> Tensor:
    """Rejected-by-all anomaly map; higher means more anomalous."""
    return -nx.tanh(S).sum(axis=0)


# -- the model ----------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, shape=None, gain=1.0):
    a = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


class POSModel:
    """Container for all parameters plus the forward pass.

    Parameters are created in a fixed order from ``config.seed`` so the same
    config always yields the same initial weights.
    """

    def __init__(self, config: ModelConfig):
        self.config = c = config
        if len(c.strides) != 4 or list(c.strides) != sorted(c.strides):
            raise ContractError(f"strides must be four non-decreasing ints, got {c.strides}")
        rng = np.random.default_rng([c.seed, 17])
        self.params: dict[str, Parameter] = {}
        P = self._add
        D, Cq, Cm, K = c.feature_dim, c.query_dim, c.mask_dim, c.num_classes

        # pixel decoder: weights act on (C, pixels) rasters, so shapes are (out, in)
        P("pd.f4.w", _xavier(rng, D, Cq, (Cq, D)), "pixel-decoder")
        P("pd.f4.b", np.zeros((Cq, 1)), "pixel-decoder")
        P("pd.lat_f4.w", _xavier(rng, Cq, Cm, (Cm, Cq)), "pixel-decoder")
        for s in ("c16", "c8", "c4"):
            P(f"pd.lat_{s}.w", _xavier(rng, D, Cm, (Cm, D)), "pixel-decoder")
        P("pd.lat.b", np.zeros((Cm, 1)), "pixel-decoder")
        P("pd.out.w", _xavier(rng, Cm, Cm, (Cm, Cm)), "pixel-decoder")
        P("pd.out.b", np.zeros((Cm, 1)), "pixel-decoder")

        P("query.feat", rng.standard_normal((c.num_queries, Cq)), "query-init")
        self.positional = Tensor(np.random.default_rng([c.seed, 23]).standard_normal((c.num_queries, Cq)))

        qscale = 1.0 / np.sqrt(Cq)
        for li in range(c.num_layers):
            pre = f"layer{li}."
            for name in ("ma", "sa"):
                P(pre + f"{name}.wq", _xavier(rng, Cq, Cq) * qscale, "pra")
                P(pre + f"{name}.wk", _xavier(rng, Cq, Cq), "pra")
                P(pre + f"{name}.wv", _xavier(rng, Cq, Cq), "pra")
            P(pre + "pc.wq", _xavier(rng, Cq, Cq) * qscale, "pra")
            P(pre + "pc.wk", _xavier(rng, Cm, Cq), "pra")
            P(pre + "pc.wv", _xavier(rng, Cm, Cq), "pra")
            P(pre + "gate", np.zeros(()), "pra")
            for name in ("corr", "ffn"):
                P(pre + f"{name}.w1", _xavier(rng, Cq, c.ffn_dim), "pra")
                P(pre + f"{name}.b1", np.zeros(c.ffn_dim), "pra")
                P(pre + f"{name}.w2", _xavier(rng, c.ffn_dim, Cq), "pra")
                P(pre + f"{name}.b2", np.zeros(Cq), "pra")
            for name in ("ln_ma", "ln_pc", "ln_corr", "ln_sa", "ln_ffn"):
                P(pre + f"{name}.g", np.ones(Cq), "pra")
                P(pre + f"{name}.b", np.zeros(Cq), "pra")

        dims = [Cq, Cq, Cq, Cm]
        for i in range(3):
            P(f"mlp.{i}.w", _xavier(rng, dims[i], dims[i + 1]), "mask-mlp")
            P(f"mlp.{i}.b", np.zeros(dims[i + 1]), "mask-mlp")
        P("cls.w", _xavier(rng, Cq, K, (K, Cq)), "class-linear")
        P("prompt.proj", _xavier(rng, c.text_dim, Cm), "prompt-projection")

        ids = list(range(K + 1)) + list(DIST_IDS)
        if c.text_embeddings:
            raw = load_text_embeddings(c.text_embeddings, K, c.text_dim)
        else:
            raw = synth_text_encode(ids, c.template_count, seed=c.seed, dim=c.text_dim)
        P("prompt.void", raw[:1].copy(), "void-embedding")
        self.class_text = Tensor(raw[1 : K + 1])
        P("prompt.dist", raw[K + 1 :].copy(), "distribution-prompts")

    def _add(self, name, value, group):
        self.params[name] = Parameter(value, name=name, group=group)

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def parameters(self) -> list:
        return list(self.params.values())

    def set_trainable(self, groups):
        groups = set(groups)
        for p in self.params.values():
            p.trainable = p.group in groups

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- stages ---------------------------------------------------------------

    def prompts(self) -> PromptSet:
        raw = nx.concat([self["prompt.void"], self.class_text, self["prompt.dist"]], axis=0)
        return project_prompts(raw, self["prompt.proj"], self.config.num_classes)

    def _decode_coarse(self, bundle: FeatureBundle):
        s4, s8, s16, s32 = self.config.strides
        bundle.check(self.config.strides)
        r = bundle.rasters

        def flat(s):
            d, h, w = r[s].shape
            if d != self.config.feature_dim:
                raise DimensionError(f"stride-{s} raster has {d} channels, model expects {self.config.feature_dim}")
            return Tensor(r[s].reshape(d, h * w)), (h, w)

        c32, (h32, w32) = flat(s32)
        f4_cols = self["pd.f4.w"] @ c32 + self["pd.f4.b"]  # (Cq, L)
        _, h4, w4 = r[s4].shape
        Cm = self.config.mask_dim

        def lateral(cols, hw, s):
            up = (s // s4, s // s4)
            grid = cols.reshape(Cm, hw[0], hw[1])
            return grid if up == (1, 1) else nx.upsample_nearest(grid, up)

        fused = lateral(self["pd.lat_f4.w"] @ f4_cols, (h32, w32), s32)
        for name, s in (("c16", s16), ("c8", s8), ("c4", s4)):
            cols, hw = flat(s)
            fused = fused + lateral(self[f"pd.lat_{name}.w"] @ cols, hw, s)
        fused = fused.reshape(Cm, h4 * w4) + self["pd.lat.b"]
        fm = (self["pd.out.w"] @ fused + self["pd.out.b"]).reshape(Cm, h4, w4)
        return f4_cols.T, fm

    def pixel_decode(self, bundle: FeatureBundle):
        """Returns ``f4`` as ``(L, C_q)`` and full-resolution ``F_m`` ``(C_m, H, W)``."""
        f4, fm = self._decode_coarse(bundle)
        s = self.config.strides[0]
        return f4, (fm if s == 1 else nx.upsample_nearest(fm, (s, s)))

    def _mlp_layers(self):
        return [(self[f"mlp.{i}.w"], self[f"mlp.{i}.b"]) for i in range(3)]

    def _mask_for(self, queries, fm_coarse, f4_hw):
        with nx.no_grad():
            m = predict_masks(queries, fm_coarse, self._mlp_layers()).data
        n, h, w = m.shape
        fh, fw = h // f4_hw[0], w // f4_hw[1]
        pooled = m.reshape(n, f4_hw[0], fh, f4_hw[1], fw).mean(axis=(2, 4))
        return build_attention_mask(pooled)

    def pra_layer(self, state: QueryState, f4, mask, prompts: PromptSet, layer=0, correction=True) -> QueryState:
        pre = f"layer{layer}."
        g = lambda n: self[pre + n]  # noqa: E731
        x = state.queries
        pos = state.positional
        xi = nx.layer_norm(
            x + masked_attention(x, f4, mask, g("ma.wq"), g("ma.wk"), g("ma.wv"), pos=pos),
            g("ln_ma.g"),
            g("ln_ma.b"),
        )
        xl = xi
        if self.config.use_pra:
            xl = nx.layer_norm(
                xi + prompt_cross_attention(xi, prompts.rows, g("pc.wq"), g("pc.wk"), g("pc.wv")),
                g("ln_pc.g"),
                g("ln_pc.b"),
            )
            if correction:
                xl = self_adaptive_correction(
                    xl, g("gate"), g("ln_corr.g"), g("ln_corr.b"), g("corr.w1"), g("corr.b1"), g("corr.w2"), g("corr.b2")
                )
        xs = nx.layer_norm(xl + self_attention(xl, g("sa.wq"), g("sa.wk"), g("sa.wv"), pos=pos), g("ln_sa.g"), g("ln_sa.b"))
        out = nx.layer_norm(xs + ffn(xs, g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2")), g("ln_ffn.g"), g("ln_ffn.b"))
        return QueryState(out, pos)

    def forward(self, bundle: FeatureBundle, prompts: PromptSet | None = None) -> SegOutput:
        prompts = self.prompts() if prompts is None else prompts
        f4, fm = self._decode_coarse(bundle)
        s32 = self.config.strides[3]
        f4_hw = (bundle.height // s32, bundle.width // s32)
        state = QueryState(self["query.feat"], self.positional)
        for li in range(self.config.num_layers):
            mask = self._mask_for(state.queries, fm, f4_hw)
            state = self.pra_layer(state, f4, mask, prompts, layer=li)
        layers = self._mlp_layers()
        m_coarse = predict_masks(state.queries, fm, layers)
        P = predict_classes(state.queries, self["cls.w"])
        s = self.config.strides[0]
        up = (lambda t: t) if s == 1 else (lambda t: nx.upsample_nearest(t, (s, s)))
        M = up(m_coarse)
        S = up(aggregate_logits(P, m_coarse))
        return SegOutput(M, P, S, rba_score(S), pixel_embeddings=fm, stride=s, extras={"prompts": prompts})


def forward_scene(model: POSModel, features: FeatureBundle, prompts: PromptSet | None = None) -> SegOutput:
    return model.forward(features, prompts)
