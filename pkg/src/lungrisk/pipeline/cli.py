"""Command-line entry point: ``lungrisk <subcommand> --config cfg.yaml ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import REGIMES, ConfigError, ExperimentConfig, load_config
from .formats import DataError, load_checkpoint, read_volume, write_volume
from .train import NumericError

log = logging.getLogger("lungrisk")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg.seed = s
        cfg.data.phantom = replace(cfg.data.phantom, seed=s)
        cfg.pretrain = replace(cfg.pretrain, seed=s)
        cfg.finetune = replace(cfg.finetune, seed=s)
    if getattr(args, "regime", None):
        cfg = cfg.with_regime(args.regime)
    return cfg


def cmd_synth_data(args):
    from .data import synth_data

    cfg = _config(args)
    spec = cfg.data.phantom
    if args.nodule_probability is not None:
        spec = replace(spec, nodule_probability=args.nodule_probability)
    n = args.n if args.n is not None else cfg.data.n_train
    synth_data(args.out, spec, n, start=args.start)
    print(f"wrote {n} samples to {args.out}")


def cmd_pretrain(args):
    from .train import pretrain

    cfg = _config(args)
    ck = pretrain(args.data, cfg, args.out)
    print(f"pretrain done: {ck.path} (final loss {ck.history[-1]['loss']:.5f})")


def cmd_finetune(args):
    from .train import finetune

    cfg = _config(args)
    ck = finetune(args.data, args.pretrained, cfg, args.out)
    print(f"finetune done: {ck.path} (final loss {ck.history[-1]['loss']:.5f})")


def cmd_predict(args):
    from ..preproc import preprocess
    from .train import model_from_checkpoint

    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    vol = read_volume(args.volume)
    mask = read_volume(args.mask)
    v, _, _ = preprocess(vol, mask, cfg.preprocess)
    with torch.no_grad():
        pred, amap = model(torch.from_numpy(v.data.astype(np.float32))[None])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    probs = pred.cum_probs[0].tolist()
    result = {"volume": str(args.volume), "cum_probs": {f"year{y + 1}": p for y, p in enumerate(probs)},
              "attention_map": str(out.with_name(out.name + "_attention.raw"))}
    from ..types import Volume

    grid = cfg.grid_dims
    spacing = tuple(s * p for s, p in zip(v.spacing, cfg.model.patch_size))
    write_volume(out.with_name(out.name + "_attention"), Volume(amap.pooled_weights[0].reshape(grid).numpy(), spacing))
    out.with_name(out.name + "_risk.json").write_text(json.dumps(result, indent=1))
    print(json.dumps(result["cum_probs"]))


def cmd_evaluate(args):
    from .data import load_dataset
    from .evaluate import metric_rows, save_plots, write_metrics
    from .train import model_from_checkpoint, predict_dataset

    model, ck_cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    cfg = load_config(args.config) if args.config else ck_cfg
    ds = load_dataset(args.data, ck_cfg.preprocess, ck_cfg.model.patch_size)
    probs, _, _ = predict_dataset(model, ds)
    rows = metric_rows(probs, ds, cfg.eval, args.seed if args.seed is not None else cfg.seed)
    write_metrics(rows, args.out)
    if args.plots:
        save_plots(probs, ds.records, args.plots)
    print(Path(args.out).read_text(), end="")


def cmd_run_experiment(args):
    from .experiment import run_experiment

    cfg = _config(args)
    if args.regime:
        cfg.regimes = [args.regime]
    run_experiment(cfg, args.out)
    print((Path(args.out) / "report.tsv").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lungrisk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, regime=False):
        sp.add_argument("--config", help="YAML config file (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        if regime:
            sp.add_argument("--regime", choices=sorted(REGIMES))

    sp = sub.add_parser("synth-data", help="write synthetic phantoms and a manifest")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--nodule-probability", type=float)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="risk fine-tuning from a pretrained checkpoint")
    common(sp, regime=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pretrained")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("predict", help="yearly risks + attention map for one volume")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--mask", required=True, help="lobe label volume for lung cropping")
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("evaluate", help="metrics table with bootstrap CIs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--plots", help="directory for ROC/PR SVG plots")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("run-experiment", help="synth-data -> pretrain -> finetune (per regime) -> evaluate")
    common(sp, regime=True)
    sp.set_defaults(fn=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .experiment import StageError

    try:
        args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e.cause)
    except (ConfigError, DataError, NumericError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e)
    return 0


def _code(e: Exception) -> int:
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    if isinstance(e, (DataError, ValueError)):
        return EXIT_DATA
    return 1


if __name__ == "__main__":
    sys.exit(main())
