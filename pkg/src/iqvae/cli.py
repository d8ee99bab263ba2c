"""Command-line harness wiring datasets, training stages, and evaluation.

Commands:

  gen-data     write a synthetic paired dataset
  train-iqvae  fit the quantized autoencoder, write checkpoint + metrics
  train-ar     fit the autoregressor on top of an autoencoder checkpoint
  sample       decode several sampled images for one dataset condition
  eval         held-out metrics for a trained pipeline, as JSON
  ot           transport costs between point sets taken from a dataset file
  ablate       2x2 grid over {regularizer, scheduled sampling} across seeds

Every run directory gets the resolved config and a metrics.jsonl stream, so
re-running from that config reproduces the run.  Failures exit nonzero with a
single JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import ar as ar_mod
from . import checkpoint, data, gumbel, ot, vae
from .config import ConfigError, RunConfig, load_config, save_config
from .rng import Rng, derive_seed


class CliError(RuntimeError):
    """User-facing failure with a stable message."""


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _dataset_spec(cfg: RunConfig) -> data.DatasetSpec:
    d = cfg.data
    return data.DatasetSpec(
        n_samples=d.n_samples, seed=cfg.seed, mode=d.mode,
        shape_min=d.shape_min, shape_max=d.shape_max,
        intensity_min=d.intensity_min, intensity_max=d.intensity_max,
        geometry_pool=d.geometry_pool)


def _require_file(path: str, stage: str) -> str:
    if os.path.isdir(path):
        for name in ("iqvae.iqvc", "ar.iqvc"):
            candidate = os.path.join(path, name)
            if os.path.exists(candidate):
                return candidate
        raise CliError("no checkpoint found in %r; run %s first" % (path, stage))
    if not os.path.exists(path):
        raise CliError("missing checkpoint %r; run %s first" % (path, stage))
    return path


def _load_vae(path: str, cfg: RunConfig) -> vae.VaeModel:
    tensors = checkpoint.load_checkpoint(_require_file(path, "train-iqvae"))
    model = vae.VaeModel(cfg.vae, Rng(0))
    model.load_params(tensors)
    return model


def _load_ar(path: str, cfg: RunConfig) -> ar_mod.ARModel:
    tensors = checkpoint.load_checkpoint(_require_file(path, "train-ar"))
    n_tokens = (data.GRID // cfg.vae.patch) ** 2
    model = ar_mod.ARModel(cfg.ar, cfg.vae.codebook_size, n_tokens, Rng(0))
    model.load_params(tensors)
    return model


def _metrics_writer(path: str):
    fh = open(path, "w", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return write, fh


def _prepare_out_dir(out: str, cfg: RunConfig) -> None:
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.toml"))


def _split_holdout(samples: list, holdout: int):
    if holdout <= 0 or holdout >= len(samples):
        raise CliError("holdout size %d invalid for %d samples"
                       % (holdout, len(samples)))
    return samples[:-holdout], samples[-holdout:]


def _write_pgm(path: str, grid: np.ndarray) -> None:
    g = np.clip(grid, 0.0, 1.0)
    byte = (g * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (byte.shape[1], byte.shape[0]))
        f.write(byte.tobytes())


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    samples = data.generate_dataset(_dataset_spec(cfg))
    data.save_dataset(samples, args.out)
    print(json.dumps({"written": args.out, "samples": len(samples),
                      "mode": cfg.data.mode}))
    return 0


def cmd_train_iqvae(args) -> int:
    cfg = _load_run_config(args)
    samples = data.load_dataset(args.data)
    train, _ = _split_holdout(samples, cfg.eval.holdout)
    _prepare_out_dir(args.out, cfg)
    write, fh = _metrics_writer(os.path.join(args.out, "metrics.jsonl"))
    try:
        model, history = vae.train_iqvae(train, cfg, metrics_cb=write)
    finally:
        fh.close()
    ck = os.path.join(args.out, "iqvae.iqvc")
    checkpoint.save_checkpoint(ck, {k: t.data for k, t in model.params().items()})
    print(json.dumps({"checkpoint": ck, "epochs": len(history),
                      "final": history[-1]}, sort_keys=True))
    return 0


def cmd_train_ar(args) -> int:
    cfg = _load_run_config(args)
    samples = data.load_dataset(args.data)
    train, _ = _split_holdout(samples, cfg.eval.holdout)
    vmodel = _load_vae(args.iqvae, cfg)
    cond_tok, img_tok = vae.encode_tokens(vmodel, train)
    _prepare_out_dir(args.out, cfg)
    write, fh = _metrics_writer(os.path.join(args.out, "metrics.jsonl"))
    gumbel_enabled = cfg.gumbel.enabled and not args.no_gumbel
    try:
        model, history = gumbel.train_ar(cond_tok, img_tok,
                                         vmodel.codebook_image.data, cfg,
                                         gumbel_enabled=gumbel_enabled,
                                         metrics_cb=write)
    finally:
        fh.close()
    ck = os.path.join(args.out, "ar.iqvc")
    checkpoint.save_checkpoint(ck, {k: t.data for k, t in model.params().items()})
    print(json.dumps({"checkpoint": ck, "epochs": len(history),
                      "gumbel": gumbel_enabled, "final": history[-1]},
                     sort_keys=True))
    return 0


def cmd_sample(args) -> int:
    cfg = _load_run_config(args)
    samples = data.load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise CliError("index %d outside dataset of %d samples"
                       % (args.index, len(samples)))
    vmodel = _load_vae(args.iqvae, cfg)
    amodel = _load_ar(args.ar, cfg)
    _, conds = vae.normalize_conditions(samples)
    cond_tok, _ = vae.encode_tokens(vmodel, samples)
    count = args.count or cfg.eval.samples_per_condition

    rng = Rng(derive_seed(cfg.seed, 0x53414D50, args.index))
    cond_rows = np.repeat(cond_tok[args.index][None, :], count, axis=0)
    tokens = ar_mod.generate_batch(amodel, cond_rows, rng,
                                   cfg.ar.top_k, cfg.ar.temperature)
    cond_grids = np.repeat(conds[args.index][None], count, axis=0)
    images = vae.decode_image_tokens(vmodel, tokens, cond_grids)

    os.makedirs(args.out, exist_ok=True)
    _write_pgm(os.path.join(args.out, "condition.pgm"), conds[args.index])
    for i in range(count):
        base = os.path.join(args.out, "sample_%02d" % i)
        images[i].astype("<f4").tofile(base + ".f32")
        _write_pgm(base + ".pgm", images[i])
    flat = images.reshape(count, -1)
    diffs = flat[:, None, :] - flat[None, :, :]
    spread = float(np.sum(diffs * diffs) / (count * (count - 1) * flat.shape[1])) \
        if count > 1 else 0.0
    print(json.dumps({"out": args.out, "count": count,
                      "diversity_spread": spread}, sort_keys=True))
    return 0


def _eval_metrics(cfg: RunConfig, samples: list, vmodel: vae.VaeModel,
                  amodel: ar_mod.ARModel) -> dict:
    train, held = _split_holdout(samples, cfg.eval.holdout)
    imgs_h = np.stack([s.image for s in held])
    recon = vae.reconstruct_images(vmodel, held)
    recon_mse = float(np.mean((recon - imgs_h) ** 2))

    cond_h, img_h = vae.encode_tokens(vmodel, held)
    teacher = ar_mod.nll(amodel, cond_h, img_h)
    fr_rng = Rng(derive_seed(cfg.seed, 0x46524545))
    free_running = ar_mod.free_running_nll(amodel, cond_h, img_h, fr_rng,
                                           cfg.ar.top_k, cfg.ar.temperature)

    latent_cost = vae.latent_transport_cost(vmodel, held, cfg.eval.projections,
                                            cfg.seed)

    gen_rng = Rng(derive_seed(cfg.seed, 0x47454E45))
    gen_tokens = ar_mod.generate_batch(amodel, cond_h, gen_rng,
                                       cfg.ar.top_k, cfg.ar.temperature)
    _, conds_all = vae.normalize_conditions(samples)
    gen_images = vae.decode_image_tokens(vmodel, gen_tokens,
                                         conds_all[-cfg.eval.holdout:])
    dir_rng = Rng(derive_seed(cfg.seed, 0x53574453))
    dirs = ot.sample_directions(dir_rng, cfg.eval.projections, data.GRID * data.GRID)
    swd = ot.sliced_wasserstein(gen_images.reshape(len(held), -1),
                                imgs_h.reshape(len(held), -1), dirs)
    return {
        "recon_mse": recon_mse,
        "teacher_nll": teacher,
        "free_running_nll": free_running,
        "latent_transport_cost": latent_cost,
        "generated_swd": swd,
        "holdout": len(held),
    }


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    samples = data.load_dataset(args.data)
    vmodel = _load_vae(args.iqvae, cfg)
    amodel = _load_ar(args.ar, cfg)
    metrics = _eval_metrics(cfg, samples, vmodel, amodel)
    text = json.dumps(metrics, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_ot(args) -> int:
    cfg = _load_run_config(args)
    samples = data.load_dataset(args.data)
    count = args.count
    if count > len(samples):
        raise CliError("dataset has only %d samples" % len(samples))
    imgs = np.stack([s.image for s in samples[:count]]).reshape(count, -1)
    conds = np.stack([s.condition for s in samples[:count]]).reshape(count, -1)
    if args.op == "gw-bruteforce":
        value, perm = ot.gw_bruteforce(conds, imgs)
        out = {"op": args.op, "count": count, "value": value,
               "assignment": list(perm)}
    else:
        rng = Rng(derive_seed(cfg.seed, 0x4F540000))
        dirs = ot.sample_directions(rng, args.projections, imgs.shape[1])
        if args.op == "sliced-gw":
            value = ot.sliced_gw(conds, imgs, dirs)
        else:
            value = ot.sliced_wasserstein(conds, imgs, dirs)
        out = {"op": args.op, "count": count,
               "projections": args.projections, "value": value}
    print(json.dumps(out, sort_keys=True))
    return 0


def run_ablation(cfg: RunConfig, seeds: list[int], progress=None) -> list[dict]:
    """Train and evaluate the 2x2 {regularizer, scheduled sampling} grid.

    The autoencoder is shared between the two sampling settings of each
    (seed, regularizer) cell, since scheduled sampling only affects the
    autoregressor.
    """
    rows = []
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        samples = data.generate_dataset(_dataset_spec(run_cfg))
        train, _ = _split_holdout(samples, run_cfg.eval.holdout)
        for reg_on in (True, False):
            vcfg = dataclasses.replace(
                run_cfg.vae, lambda_reg=run_cfg.vae.lambda_reg if reg_on else 0.0)
            cell_cfg = dataclasses.replace(run_cfg, vae=vcfg)
            vmodel, _ = vae.train_iqvae(train, cell_cfg)
            cond_tok, img_tok = vae.encode_tokens(vmodel, train)
            for gumbel_on in (True, False):
                amodel, _ = gumbel.train_ar(cond_tok, img_tok,
                                            vmodel.codebook_image.data,
                                            cell_cfg, gumbel_enabled=gumbel_on)
                metrics = _eval_metrics(cell_cfg, samples, vmodel, amodel)
                row = {"seed": seed, "regularizer": reg_on, "gumbel": gumbel_on}
                row.update(metrics)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def summarize_ablation(rows: list[dict]) -> dict:
    """Per-cell means plus the three directional comparisons."""
    def cell(reg, gs):
        sel = [r for r in rows if r["regularizer"] == reg and r["gumbel"] == gs]
        return {k: float(np.mean([r[k] for r in sel]))
                for k in ("latent_transport_cost", "teacher_nll",
                          "free_running_nll", "generated_swd")}

    def per_seed(metric, a, b):
        """How many seeds have cell a <= cell b on the metric."""
        seeds = sorted({r["seed"] for r in rows})
        wins = 0
        for s in seeds:
            va = [r[metric] for r in rows
                  if r["seed"] == s and (r["regularizer"], r["gumbel"]) == a]
            vb = [r[metric] for r in rows
                  if r["seed"] == s and (r["regularizer"], r["gumbel"]) == b]
            if va and vb and va[0] <= vb[0]:
                wins += 1
        return wins, len(seeds)

    summary = {
        "cells": {
            "reg+gumbel": cell(True, True),
            "reg_only": cell(True, False),
            "gumbel_only": cell(False, True),
            "baseline": cell(False, False),
        }
    }
    reg_wins, n_seeds = per_seed("latent_transport_cost", (True, False), (False, False))
    gs_wins, _ = per_seed("free_running_nll", (True, True), (True, False))
    swd_wins, _ = per_seed("generated_swd", (True, True), (False, False))
    summary["directions"] = {
        "regularizer_lowers_latent_cost": {"wins": reg_wins, "seeds": n_seeds},
        "gumbel_lowers_free_running_nll": {"wins": gs_wins, "seeds": n_seeds},
        "full_method_lowers_swd": {"wins": swd_wins, "seeds": n_seeds},
    }
    return summary


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.toml"))
    started = time.time()

    def progress(row):
        print(json.dumps(row, sort_keys=True), flush=True)

    rows = run_ablation(cfg, seeds, progress=progress)
    summary = summarize_ablation(rows)
    summary["elapsed_seconds"] = time.time() - started
    payload = {"rows": rows, "summary": summary}
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iqvae",
        description="Quantized paired autoencoding with transport alignment "
                    "and a scheduled-sampling autoregressor.")
    sub = parser.add_subparsers(dest="command")

    def common(p, seed=True):
        p.add_argument("--config", help="TOML config file (defaults used otherwise)")
        if seed:
            p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    common(p)
    p.add_argument("--out", required=True, help="output .iqds path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-iqvae", help="train the quantized autoencoder")
    common(p)
    p.add_argument("--data", required=True, help="input .iqds dataset")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_train_iqvae)

    p = sub.add_parser("train-ar", help="train the autoregressor")
    common(p)
    p.add_argument("--data", required=True, help="input .iqds dataset")
    p.add_argument("--iqvae", required=True, help="autoencoder checkpoint or run dir")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--no-gumbel", action="store_true",
                   help="plain teacher forcing regardless of config")
    p.set_defaults(fn=cmd_train_ar)

    p = sub.add_parser("sample", help="decode sampled images for one condition")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iqvae", required=True)
    p.add_argument("--ar", required=True)
    p.add_argument("--index", type=int, required=True, help="dataset sample index")
    p.add_argument("--count", type=int, help="samples to draw (default from config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="held-out metrics for a trained pipeline")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iqvae", required=True)
    p.add_argument("--ar", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ot", help="transport costs between dataset point sets")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--op", required=True,
                   choices=["gw-bruteforce", "sliced-gw", "sliced-w"])
    p.add_argument("--count", type=int, default=4,
                   help="points per set, from the first samples")
    p.add_argument("--projections", type=int, default=512)
    p.set_defaults(fn=cmd_ot)

    p = sub.add_parser("ablate", help="2x2 component grid across seeds")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help()
            return 2
        return args.fn(args)
    except SystemExit as e:
        # argparse usage failures; keep its message, normalize the code.
        return int(e.code or 0)
    except (CliError, ConfigError, ValueError, OSError,
            checkpoint.CheckpointFormatError, data.DatasetFormatError,
            vae.TrainingDiverged) as e:
        sys.stderr.write(json.dumps(
            {"error": type(e).__name__, "detail": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
