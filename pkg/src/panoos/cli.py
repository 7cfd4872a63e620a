"""Command-line entry point: ``panoos <command> [options]``.

Exit codes: 0 success, 2 configuration or input contract error, 3 I/O or
file-format error, 4 numeric failure. Progress goes to stderr; everything
machine-readable is written to files.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import numerics as nx
from .config import DEFAULTS, RunConfig
from .decoder import FeatureBundle, POSModel
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericDomainError, PanoosError
from .evaluation import evaluate_run, score_name
from .gradcheck import TOLERANCE, format_table, run_suite
from .synthdata import generate_scene, load_dataset, make_outlier_bank, read_manifest, write_manifest, write_raster, write_scene
from .training import anomaly_mix, finetune_oe, load_checkpoint, save_checkpoint, train_closed_set, write_trace

CHECKPOINT = "model.ckpt"
TRACE = "loss.csv"


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _progress(label, total):
    step = max(1, total // 20)

    def report(row):
        it = row[0]
        if it % step == 0 or it == total - 1:
            _log(f"[{label}] iter {it + 1}/{total} loss {row[1]:.4f}")

    return report


def _checkpoint_config(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    resolved = os.path.join(os.path.dirname(os.path.abspath(path)), "config.resolved")
    if not os.path.isfile(resolved):
        raise ConfigError(f"no config.resolved next to checkpoint {path}")
    return RunConfig.load(resolved)


def _load_model(cfg, checkpoint):
    model = POSModel(cfg.model())
    load_checkpoint(model, checkpoint)
    return model


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = RunConfig.load(args.config).override(seed=args.seed)
    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    scfg = cfg.scene()
    bank = make_outlier_bank(scfg, cfg["bank_size"], args.seed, pool="eval") if cfg["outliers_per_scene"] else []
    os.makedirs(args.out, exist_ok=True)
    pairs = []
    for i in range(args.count):
        scene = generate_scene(scfg, args.seed + i)
        for j in range(cfg["outliers_per_scene"]):
            scene = anomaly_mix(scene, bank, 1.0, np.random.default_rng([args.seed, i, j, 3]))
        pairs.append(write_scene(args.out, scene))
    write_manifest(os.path.join(args.out, "manifest.txt"), pairs)
    cfg.write_resolved(args.out)
    _log(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    scenes = load_dataset(args.data)
    model = POSModel(cfg.model())
    tcfg = cfg.train()
    trace = train_closed_set(model, scenes, tcfg, _progress("train", tcfg.iterations))
    os.makedirs(args.out, exist_ok=True)
    cfg.write_resolved(args.out)
    save_checkpoint(model, os.path.join(args.out, CHECKPOINT))
    write_trace(os.path.join(args.out, TRACE), trace)
    return 0


def cmd_finetune(args):
    cfg = RunConfig.load(args.config)
    scenes = load_dataset(args.data)
    model = _load_model(cfg, args.checkpoint)
    bank = make_outlier_bank(cfg.scene(), cfg["bank_size"], cfg["seed"], pool="bank")
    tcfg = cfg.train(finetune=True)
    trace = finetune_oe(model, scenes, bank, tcfg, _progress("finetune", tcfg.iterations))
    os.makedirs(args.out, exist_ok=True)
    cfg.write_resolved(args.out)
    save_checkpoint(model, os.path.join(args.out, CHECKPOINT))
    write_trace(os.path.join(args.out, TRACE), trace)
    return 0


def cmd_score(args):
    cfg = _checkpoint_config(args.checkpoint)
    model = _load_model(cfg, args.checkpoint)
    root = args.data
    pairs = read_manifest(os.path.join(root, "manifest.txt"))
    scenes = load_dataset(root)
    os.makedirs(args.out, exist_ok=True)
    for (_, label_file), scene in zip(pairs, scenes):
        with nx.no_grad():
            out = model.forward(FeatureBundle.from_scene(scene, model.config.strides))
        write_raster(os.path.join(args.out, score_name(label_file, ".score.posm")), out.A.data, "score")
        write_raster(os.path.join(args.out, score_name(label_file, ".pred.posl")), out.semantic(), "label")
    cfg.write_resolved(args.out)
    _log(f"scored {len(scenes)} scenes into {args.out}")
    return 0


def cmd_eval(args):
    resolved = os.path.join(args.scores, "config.resolved")
    cfg = RunConfig.load(resolved) if os.path.isfile(resolved) else RunConfig.load()
    k = cfg["num_classes"] if os.path.isfile(resolved) else None
    report = evaluate_run(args.scores, args.labels, args.manifest, k)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    cfg.write_resolved(args.out)
    _log(report.to_text().rstrip())
    return 0


def cmd_gradcheck(args):
    rows = run_suite(args.seed, args.size)
    sys.stdout.write(format_table(rows))
    return 0 if all(err < TOLERANCE for _, err in rows) else 4


# -- parser -------------------------------------------------------------------


def build_parser():
    keys = "\n".join(f"  {k} (default {v[0]!r}): {v[1]}" for k, v in DEFAULTS.items())
    parser = argparse.ArgumentParser(
        prog="panoos",
        description="Prompt-guided out-of-distribution segmentation on synthetic panoramic scenes.",
        epilog="config keys ('key = value' lines, '#' comments):\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="closed-set training")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="outlier-exposure fine-tuning of a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("score", help="anomaly and class maps for every scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AuPRC, FPR95 and mIoU over a scored dataset")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as err:
        _log(f"panoos {args.command}: I/O error: {err}")
        return 3
    except NumericDomainError as err:
        _log(f"panoos {args.command}: numeric failure: {err}")
        return 4
    except (ConfigError, ContractError, DimensionError) as err:
        _log(f"panoos {args.command}: configuration error: {err}")
        return 2
    except PanoosError as err:
        _log(f"panoos {args.command}: {err}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
