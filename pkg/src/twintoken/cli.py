"""Command-line entry point.

Verbs:
  run       execute both training stages from a JSON config
  ablate    run the full method plus named variants and tabulate results
  diagnose  token-similarity histogram and cross-head accuracy table
  gen-data  generate and save a synthetic two-domain dataset

Exit codes: 0 success, 1 configuration error, 2 runtime error.
Log level comes from the TWINTOKEN_LOG_LEVEL environment variable.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate, load_dataset, save_dataset
from .errors import CheckpointError, ConfigurationError
from .model import load_checkpoint, save_checkpoint, token_cosine_similarity
from .train import evaluate, forward_full, run_experiment

logger = logging.getLogger("twintoken")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

VARIANTS = (
    "no_mask", "no_ls_con", "no_lt_con", "no_both_con",
    "knn_refine", "mmd", "mstn", "target_oriented_refine",
    "shared_classifier", "shared_objective",
)


def apply_variant(config: RunConfig, variant: str) -> RunConfig:
    """Return a copy of the config with one ablation applied."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    cfg = copy.deepcopy(config)
    if variant == "no_mask":
        cfg.mask_enabled = False
    elif variant == "no_ls_con":
        cfg.use_source_transfer = False
    elif variant == "no_lt_con":
        cfg.use_target_transfer = False
    elif variant == "no_both_con":
        cfg.lam = 0.0
    elif variant == "knn_refine":
        cfg.refinement_method = "knn"
    elif variant == "mmd":
        cfg.transfer_method = "mmd"
    elif variant == "mstn":
        cfg.transfer_method = "mstn"
    elif variant == "target_oriented_refine":
        cfg.refinement_representation = "target_oriented"
    elif variant == "shared_classifier":
        cfg.classifier_mode = "shared"
    elif variant == "shared_objective":
        cfg.objective_mode = "shared"
    return cfg


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    config.validate()
    return config


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_outputs(config: RunConfig, result, out: Path):
    result.report.to_csv(out / "report.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(result.stage1_model, out / "stage1.npz")
    save_checkpoint(result.model, out / "final.npz")
    config.to_json(out / "config.json")
    with open(out / "timing.txt", "w") as fh:
        fh.write(f"stage2_wall_clock_seconds={result.report.wall_clock:.3f}\n")


def cmd_run(args) -> int:
    config = _load_config(args)
    result = run_experiment(config)
    _write_run_outputs(config, result, _out_dir(config))
    logger.info("final target accuracy: %.4f", result.report.last()["tgt_acc"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    variants = args.variant or list(VARIANTS)
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    out = _out_dir(config)
    rows = []
    for name in ["full"] + list(variants):
        cfg = copy.deepcopy(config) if name == "full" else apply_variant(config, name)
        cfg.out_dir = str(out / name)
        result = run_experiment(cfg)
        _write_run_outputs(cfg, result, _out_dir(cfg))
        last = result.report.last()
        rows.append({
            "variant": name,
            "tgt_acc": last["tgt_acc"],
            "src_acc": last["src_acc"],
            "pseudo_acc": last["pseudo_acc"],
            "mean_token_cos": last["mean_token_cos"],
            "stage1_tgt_acc": result.stage1_target_acc,
        })
        logger.info("%s: tgt_acc=%.4f", name, last["tgt_acc"])
    cols = ["variant", "tgt_acc", "src_acc", "pseudo_acc", "mean_token_cos", "stage1_tgt_acc"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) if isinstance(row[c], str) else repr(row[c]) for c in cols) + "\n")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model = load_checkpoint(args.checkpoint)
    base = Path(args.dataset)
    source = load_dataset(base / "source")
    target = load_dataset(base / "target")
    if source.images.shape[1:] != (model.config.channels, model.config.image_side, model.config.image_side):
        raise CheckpointError(
            f"dataset image shape {source.images.shape[1:]} does not match model config"
        )
    out = Path(args.out or "diagnostics")
    out.mkdir(parents=True, exist_ok=True)

    feat_s, feat_t, _, _ = forward_full(model, target.images)
    sims = token_cosine_similarity(feat_s, feat_t)
    counts, edges = np.histogram(sims, bins=20, range=(-1.0, 1.0))
    table = {
        "src_head_on_source": evaluate(model, source, "src"),
        "src_head_on_target": evaluate(model, target, "src"),
        "tgt_head_on_source": evaluate(model, source, "tgt"),
        "tgt_head_on_target": evaluate(model, target, "tgt"),
    }
    payload = {
        "token_similarity": {
            "mean": float(sims.mean()),
            "bin_edges": edges.tolist(),
            "bin_counts": counts.tolist(),
            "num_samples": int(len(sims)),
        },
        "cross_head_accuracy": table,
    }
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "token_similarity_hist.csv", "w", newline="") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo!r},{hi!r},{int(count)}\n")
    with open(out / "cross_head_accuracy.csv", "w", newline="") as fh:
        fh.write("head,source_acc,target_acc\n")
        fh.write(f"src,{table['src_head_on_source']!r},{table['src_head_on_target']!r}\n")
        fh.write(f"tgt,{table['tgt_head_on_source']!r},{table['tgt_head_on_target']!r}\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    spec = config.dataset
    if args.seed is not None:
        spec.seed = args.seed
    source, target = generate(spec)
    out = Path(args.out or config.out_dir or "dataset")
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    logger.info("wrote %d source and %d target samples to %s", len(source), len(target), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twintoken")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="run both training stages")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run the full method plus variants")
    common(p_abl)
    p_abl.add_argument("--variant", action="append", default=None,
                       help=f"variant name (repeatable); one of: {', '.join(VARIANTS)}")
    p_abl.set_defaults(func=cmd_ablate)

    p_diag = sub.add_parser("diagnose", help="token-similarity and cross-head diagnostics")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--dataset", required=True, help="directory with source/ and target/ subsets")
    p_diag.add_argument("--out", default=None)
    p_diag.set_defaults(func=cmd_diagnose)

    p_gen = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TWINTOKEN_LOG_LEVEL", "INFO"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to exit code 2
        logger.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
