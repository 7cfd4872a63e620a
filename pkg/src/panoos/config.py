"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import os

from .bpdl import BpdlConfig
from .decoder import ModelConfig
from .errors import ConfigError
from .synthdata import SceneConfig
from .training import FINETUNE_GROUPS, TrainConfig

# key -> (default, description)
DEFAULTS = {
    "seed": (7, "master seed for model init, training and sampling"),
    "world_seed": (0, "seed of the class mean vectors shared by all scenes"),
    "height": (64, "scene height in pixels (multiple of 32)"),
    "width": (256, "scene width in pixels (multiple of 32)"),
    "num_classes": (6, "number of inlier classes K"),
    "feature_dim": (16, "channels of the synthetic image features"),
    "snr": (1.0, "class signal-to-noise ratio (noise std is 1/snr)"),
    "distortion": (0.5, "border noise inflation gamma"),
    "boundary_jitter": (3.0, "amplitude in pixels of band boundary waves"),
    "outlier_blend": (0.5, "how far outlier means lean toward an inlier mean"),
    "outliers_per_scene": (0, "outlier objects pasted into each generated scene"),
    "num_queries": (100, "object queries N"),
    "query_dim": (256, "query embedding width C_q"),
    "mask_dim": (256, "pixel embedding width C_m"),
    "text_dim": (768, "raw prompt embedding width"),
    "ffn_dim": (512, "hidden width of decoder FFNs"),
    "template_count": (14, "prompt templates averaged per class"),
    "num_layers": (1, "transformer decoder layers"),
    "use_pra": (True, "enable prompt cross-attention and gated correction"),
    "text_embeddings": ("", "optional POSE file with (K+3) raw prompt embeddings"),
    "iterations": (2000, "closed-set training iterations"),
    "finetune_iterations": (1000, "outlier-exposure fine-tuning iterations"),
    "learning_rate": (1e-4, "initial AdamW learning rate (polynomial decay, power 0.9)"),
    "weight_decay": (0.05, "decoupled weight decay"),
    "batch_size": (4, "scenes per optimisation step"),
    "lambda_bce": (5.0, "mask BCE weight"),
    "lambda_dice": (5.0, "mask Dice weight"),
    "lambda_cls": (2.0, "classification weight"),
    "lambda_bpdl": (0.01, "prompt distribution loss weight (0 disables it)"),
    "margin_s": (1.0, "inter-class margin s"),
    "margin_d": (1.0, "distribution margin d"),
    "alpha": (0.1, "weight of the inlier-prompt compactness term"),
    "p_out": (0.3, "per-image probability of pasting an outlier during fine-tuning"),
    "bank_size": (64, "patches in the fine-tuning outlier bank"),
    "max_pixels": (4096, "cap on sampled inlier / outlier pixels per scene"),
    "trainable_groups": (",".join(FINETUNE_GROUPS), "comma-separated groups tuned during fine-tuning"),
}


def _coerce(key, raw: str):
    default = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig(dict):
    """Mapping of every known key to its effective value."""

    @classmethod
    def from_text(cls, text: str, source="<config>"):
        cfg = cls({k: v[0] for k, v in DEFAULTS.items()})
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            cfg[key] = _coerce(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls.from_text("")
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        return cls.from_text(text, source=path)

    def override(self, **kw):
        out = RunConfig(self)
        for k, v in kw.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            out[k] = v
        out.validate()
        return out

    def validate(self):
        try:
            self.scene()
            self.model()
            self.train(finetune=True)
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return self

    def to_text(self) -> str:
        lines = []
        for key in DEFAULTS:
            v = self[key]
            v = str(v).lower() if isinstance(v, bool) else (repr(v) if isinstance(v, float) else str(v))
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "config.resolved")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        return path

    # -- typed views ------------------------------------------------------------

    def scene(self) -> SceneConfig:
        return SceneConfig(
            height=self["height"],
            width=self["width"],
            num_classes=self["num_classes"],
            feature_dim=self["feature_dim"],
            snr=self["snr"],
            distortion=self["distortion"],
            boundary_jitter=self["boundary_jitter"],
            outlier_blend=self["outlier_blend"],
            world_seed=self["world_seed"],
        ).validate()

    def model(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self["num_classes"],
            feature_dim=self["feature_dim"],
            num_queries=self["num_queries"],
            query_dim=self["query_dim"],
            mask_dim=self["mask_dim"],
            text_dim=self["text_dim"],
            ffn_dim=self["ffn_dim"],
            template_count=self["template_count"],
            num_layers=self["num_layers"],
            use_pra=self["use_pra"],
            seed=self["seed"],
            text_embeddings=self["text_embeddings"],
        )

    def bpdl(self) -> BpdlConfig:
        return BpdlConfig(s=self["margin_s"], d=self["margin_d"], alpha=self["alpha"], lambda_bpdl=self["lambda_bpdl"])

    def train(self, finetune=False) -> TrainConfig:
        groups = tuple(g.strip() for g in self["trainable_groups"].split(",") if g.strip())
        return TrainConfig(
            iterations=self["finetune_iterations" if finetune else "iterations"],
            learning_rate=self["learning_rate"],
            weight_decay=self["weight_decay"],
            batch_size=self["batch_size"],
            lambda_bce=self["lambda_bce"],
            lambda_dice=self["lambda_dice"],
            lambda_cls=self["lambda_cls"],
            p_out=self["p_out"],
            bpdl=self.bpdl(),
            seed=self["seed"],
            trainable_groups=groups,
            max_pixels=self["max_pixels"],
        )
