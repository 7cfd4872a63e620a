"""Component ablation on the default synthetic benchmark.

Three variants are trained per seed:

``full``
    prompt-restoration decoder, fine-tuned with the prompt distribution loss
``no_bpdl``
    same closed-set model, fine-tuned with ``lambda_bpdl = 0``
``masked_only``
    decoder reduced to masked attention (no prompt cross-attention or
    correction), fine-tuned with the prompt distribution loss

All variants are scored on one fixed evaluation set whose outliers come from
a pool never used in training.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, replace

from . import numerics as nx
from .bpdl import BpdlConfig
from .decoder import FeatureBundle, ModelConfig, POSModel
from .evaluation import evaluate_maps
from .synthdata import SceneConfig, generate_scene, make_outlier_bank
from .training import TrainConfig, anomaly_mix, checkpoint_bytes, finetune_oe, load_checkpoint_bytes, train_closed_set

VARIANTS = ("full", "no_bpdl", "masked_only")
EVAL_SCENE_OFFSET = 900_000
EVAL_BANK_SEED = 99


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    train_scenes: int = 64
    eval_scenes: int = 200
    bank_size: int = 32
    closed_iterations: int = 500
    finetune_iterations: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 2
    lambda_bpdl: float = 0.01
    num_queries: int = 16
    query_dim: int = 32
    mask_dim: int = 32
    ffn_dim: int = 64
    text_dim: int = 64
    scene: SceneConfig = SceneConfig()


def evaluation_set(cfg: AblationConfig):
    bank = make_outlier_bank(cfg.scene, cfg.bank_size, EVAL_BANK_SEED, pool="eval")
    return [
        anomaly_mix(generate_scene(cfg.scene, EVAL_SCENE_OFFSET + i), bank, 1.0, [EVAL_BANK_SEED, i])
        for i in range(cfg.eval_scenes)
    ]


def score_model(model: POSModel, scenes, num_classes):
    scores, labels, preds = [], [], []
    with nx.no_grad():
        for s in scenes:
            out = model.forward(FeatureBundle.from_scene(s, model.config.strides))
            scores.append(out.A.data)
            labels.append(s.labels)
            preds.append(out.semantic())
    return evaluate_maps(scores, labels, preds, num_classes)


def _model_config(cfg, seed, use_pra):
    return ModelConfig(
        num_classes=cfg.scene.num_classes,
        feature_dim=cfg.scene.feature_dim,
        num_queries=cfg.num_queries,
        query_dim=cfg.query_dim,
        mask_dim=cfg.mask_dim,
        text_dim=cfg.text_dim,
        ffn_dim=cfg.ffn_dim,
        use_pra=use_pra,
        seed=seed,
    )


def run_seed(cfg: AblationConfig, seed, eval_scenes=None, log=None):
    """``{variant: EvalReport}`` for one seed."""
    log = log or (lambda msg: None)
    eval_scenes = evaluation_set(cfg) if eval_scenes is None else eval_scenes
    train = [generate_scene(cfg.scene, 10_000 * (seed + 1) + i) for i in range(cfg.train_scenes)]
    bank = make_outlier_bank(cfg.scene, cfg.bank_size, seed, pool="bank")
    base = TrainConfig(
        iterations=cfg.closed_iterations,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        seed=seed,
        bpdl=BpdlConfig(lambda_bpdl=cfg.lambda_bpdl),
    )
    tune = replace(base, iterations=cfg.finetune_iterations)
    no_bpdl = replace(tune, bpdl=BpdlConfig(lambda_bpdl=0.0))
    K = cfg.scene.num_classes
    reports = {}

    for use_pra in (True, False):
        t0 = time.perf_counter()
        model = POSModel(_model_config(cfg, seed, use_pra))
        train_closed_set(model, train, base)
        closed = checkpoint_bytes(model)
        log(f"seed {seed} closed-set (pra={use_pra}) {time.perf_counter() - t0:.1f}s")
        runs = (("full", tune), ("no_bpdl", no_bpdl)) if use_pra else (("masked_only", tune),)
        for name, tcfg in runs:
            t0 = time.perf_counter()
            load_checkpoint_bytes(model, closed)
            finetune_oe(model, train, bank, tcfg)
            reports[name] = score_model(model, eval_scenes, K)
            log(f"seed {seed} {name}: AuPRC {reports[name].auprc:.4f} ({time.perf_counter() - t0:.1f}s)")
    return reports


def run_ablation(cfg: AblationConfig = AblationConfig(), log=None):
    """``{seed: {variant: EvalReport}}`` over ``cfg.seeds``."""
    eval_scenes = evaluation_set(cfg)
    return {seed: run_seed(cfg, seed, eval_scenes, log) for seed in cfg.seeds}


def summarize(results):
    """Per-variant mean AuPRC and per-seed direction checks."""
    seeds = sorted(results)
    mean = {v: sum(results[s][v].auprc for s in seeds) / len(seeds) for v in VARIANTS}
    bpdl_wins = sum(results[s]["full"].auprc >= results[s]["no_bpdl"].auprc for s in seeds)
    pra_wins = sum(results[s]["full"].auprc >= results[s]["masked_only"].auprc for s in seeds)
    return {"mean_auprc": mean, "bpdl_wins": bpdl_wins, "pra_wins": pra_wins, "n_seeds": len(seeds)}


if __name__ == "__main__":
    res = run_ablation(log=lambda m: print(m, file=sys.stderr, flush=True))
    print(summarize(res))
