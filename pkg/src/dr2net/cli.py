"""Command-line entry point: ``dr2net <command> [flags]``.

Every command echoes its fully resolved configuration (as ``# key = value``
lines) before running. Flags may also come from ``--config FILE``, a
``key = value`` file whose keys are flag names; explicit flags win over the
file, and the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, Dr2Error
from .sensing import DEFAULT_SCALES, DEFAULT_STRIDE, m_for_rate

log = logging.getLogger("dr2net")


def _floats(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dr2net", description="Block compressive-sensing reconstruction with residual learning.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", help="key = value file supplying flag defaults")
        p.add_argument("--threads", type=int, default=0, help="cap BLAS threads (0 = library default)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = command("gen-data", "build a training set from an image corpus")
    p.add_argument("--corpus", required=True, help="directory of training images")
    p.add_argument("--mr", type=float, default=0.25, help="measurement rate")
    p.add_argument("--m", type=int, default=0, help="measurement count (overrides --mr)")
    p.add_argument("--seed", type=int, default=0, help="operator seed")
    p.add_argument("--scales", type=_floats, default=list(DEFAULT_SCALES), help="resize scales")
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE, help="patch stride")
    p.add_argument("--out", required=True, help="output dataset file")

    p = command("train", "two-stage training")
    p.add_argument("--dataset", required=True, help="dataset file from gen-data")
    p.add_argument("--blocks", type=int, default=4, help="residual block count")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk", help="iteration budget preset")
    p.add_argument("--stages", choices=("1", "2", "both"), default="both", help="stages to run")
    p.add_argument("--init", help="starting model (required for --stages 2)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--seed", type=int, default=0, help="init, split and batch-order seed")
    p.add_argument("--batch-size", type=int, default=None, help="overrides the --profile value")
    p.add_argument("--momentum", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--weight-decay", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--val-fraction", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--stage1-iters", type=int, default=None, help="overrides the --profile value")
    p.add_argument("--stage1-lr", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--step-size", type=int, default=None, help="overrides the --profile value")
    p.add_argument("--gamma", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--stage2-iters", type=int, default=None, help="overrides the --profile value")
    p.add_argument("--stage2-lr", type=float, default=None, help="overrides the --profile value")
    p.add_argument("--stage2-warmup", type=int, default=None,
                   help="linear ramp length before the fixed stage-2 rate (overrides the --profile value)")
    p.add_argument("--eval-every", type=int, default=None, help="overrides the --profile value")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save to --out every N iterations (0 = off)")

    p = command("reconstruct", "reconstruct one image")
    p.add_argument("--model", required=True, help="model checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="ground-truth image to measure and reconstruct")
    src.add_argument("--measurements", help="measurement file (DR2MS)")
    p.add_argument("--out", required=True, help="output image (.png is 16-bit)")
    p.add_argument("--save-measurements", help="also write the measurements taken from --image")
    p.add_argument("--denoiser", help="external command template with {input} and {output}")

    p = command("eval", "PSNR report over a test set")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--images", required=True, help="image directory or dataset file")
    p.add_argument("--denoiser", help="external command template with {input} and {output}")
    p.add_argument("--csv", help="write the report as CSV")
    p.add_argument("--model-id", default="", help="label for the report")

    p = command("bench", "median reconstruction time for one image")
    p.add_argument("--model", required=True, nargs="+", help="one or more checkpoints")
    p.add_argument("--size", type=int, default=256, help="square image side")
    p.add_argument("--repetitions", type=int, default=10, help="timed runs (>= 5)")

    p = command("noise-sweep", "PSNR under measurement noise")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--sigmas", type=_floats, default=[0.01, 0.05, 0.1, 0.25, 0.5],
                   help="noise standard deviations (sigma 0 is always added)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", help="gnuplot data file")

    p = command("hist-residual", "histogram of estimated residual values")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--dataset", required=True, help="dataset whose measurements are used")
    p.add_argument("--max-samples", type=int, default=2000, help="measurements sampled")
    p.add_argument("--bin-width", type=float, default=0.01, help="histogram bin width")
    p.add_argument("--limit", type=float, default=0.2, help="histogram range is [-limit, limit]")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", help="gnuplot data file")

    p = command("baseline", "closed-form linear fit or ISTA reconstruction")
    p.add_argument("--method", choices=("closed-form", "ista"), default="closed-form", help="baseline solver")
    p.add_argument("--dataset", help="training set for closed-form")
    p.add_argument("--lam", type=float, default=None, help="ridge / sparsity weight")
    p.add_argument("--image", help="image for ista")
    p.add_argument("--mr", type=float, default=0.25, help="measurement rate for ista")
    p.add_argument("--seed", type=int, default=0, help="operator seed for ista")
    p.add_argument("--iters", type=int, default=500, help="ista iterations")
    p.add_argument("--out", required=True, help="DR2LB file (closed-form) or image (ista)")
    return parser


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    """Parse ``argv``; values from ``--config`` become subcommand defaults
    (so required flags may come from the file) and explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    if argv and argv[0] in commands:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        path = pre.parse_known_args(argv[1:])[0].config
        if path:
            _apply_overlay(commands[argv[0]], read_config_file(path), path)
    return parser.parse_args(argv)


def _apply_overlay(sub, overlay, path):
    known = {a.dest: a for a in sub._actions}
    for key, value in overlay.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown key {key!r} in {path}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in {path}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{key!r} in {path} must be one of {sorted(action.choices)}")
        overlay[key] = value
        action.required = False
    sub.set_defaults(**overlay)


def echo_config(args) -> None:
    print(f"# dr2net {args.command}")
    for key, value in sorted(vars(args).items()):
        if key != "command":
            print(f"# {key} = {value}")
    sys.stdout.flush()


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    from .sensing import build_dataset, make_operator, save_dataset

    m = args.m or m_for_rate(args.mr)
    op = make_operator(m, seed=args.seed)
    ds = build_dataset(args.corpus, op, args.scales, args.stride)
    save_dataset(ds, args.out)
    print(ds.manifest.summary())
    for s in ds.manifest.skipped:
        print(f"skipped: {s}")
    print(f"wrote {args.out}")


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.profile(args.profile, seed=args.seed)
    for flag, attr in (("batch_size", "batch_size"), ("momentum", "momentum"),
                       ("weight_decay", "weight_decay"), ("val_fraction", "val_fraction"),
                       ("eval_every", "eval_every")):
        if getattr(args, flag) is not None:
            setattr(cfg, attr, getattr(args, flag))
    for flag, attr in (("stage1_iters", "max_iters"), ("stage1_lr", "base_lr"),
                       ("step_size", "step_size"), ("gamma", "gamma")):
        if getattr(args, flag) is not None:
            setattr(cfg.stage1, attr, getattr(args, flag))
    for flag, attr in (("stage2_iters", "max_iters"), ("stage2_lr", "lr"),
                       ("stage2_warmup", "warmup_iters")):
        if getattr(args, flag) is not None:
            setattr(cfg.stage2, attr, getattr(args, flag))
    if args.checkpoint_every:
        cfg.checkpoint_every = args.checkpoint_every
        cfg.checkpoint_path = args.out
    cfg.validate()
    return cfg


def cmd_train(args):
    from .model import load_model, save_model
    from .sensing import load_dataset
    from .training import train

    cfg = _train_config(args)
    for key, value in sorted(_flatten(cfg.to_dict()).items()):
        print(f"# train.{key} = {value}")
    ds = load_dataset(args.dataset)
    model = load_model(args.init) if args.init else None
    if model is not None and model.m != ds.m:
        from .pipeline import RateMismatchError
        raise RateMismatchError(f"--init model has m={model.m}, dataset has m={ds.m}")
    if args.stages == "2" and model is None:
        raise ConfigError("--stages 2 needs --init")
    model, tlog = train(ds, cfg, block_count=args.blocks, stages=args.stages, model=model)
    model.info["profile"] = args.profile
    save_model(model, args.out)
    if args.log:
        tlog.to_csv(args.log)
    last = tlog.records[-1]
    print(f"final val loss: linear {last.val_loss_fc:.5f}  full {last.val_loss_full:.5f}")
    print(f"wrote {args.out}")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _denoiser(args):
    if not getattr(args, "denoiser", None):
        return None
    from .pipeline import ExternalDenoiser
    return ExternalDenoiser(args.denoiser)


def cmd_reconstruct(args):
    from .model import load_model
    from .pipeline import acquire, load_measurements, reconstruct_image, save_measurements
    from .sensing import load_image, save_image

    model = load_model(args.model)
    if args.measurements:
        source = load_measurements(args.measurements)
    else:
        img = load_image(args.image)
        source = acquire(img, model.operator)
        if args.save_measurements:
            save_measurements(source, args.save_measurements)
    image = reconstruct_image(source, model, _denoiser(args))
    save_image(args.out, image)
    if args.image:
        from .evaluation import psnr
        print(f"PSNR {psnr(img, image):.2f} dB")
    print(f"wrote {args.out}")


def _is_container(path, magic):
    p = Path(path)
    if not p.is_file():
        return False
    with open(p, "rb") as fh:
        return fh.read(5) == magic


def cmd_eval(args):
    from .evaluation import ReconstructionReport, evaluate_testset, psnr
    from .model import load_model
    from .pipeline import check_compatible, reconstruct_patches
    from .sensing import load_dataset

    model = load_model(args.model)
    model_id = args.model_id or Path(args.model).stem
    if _is_container(args.images, b"DR2MS"):
        from .pipeline import load_measurements
        meas = load_measurements(args.images)
        check_compatible(model, meas.m, meas.operator_seed)
        raise ConfigError("a measurement file has no ground truth to score; "
                          "use `reconstruct --measurements` or pass images")
    if _is_container(args.images, b"DR2DS"):
        ds = load_dataset(args.images)
        check_compatible(model, ds.m, ds.manifest.operator_seed)
        rec = np.clip(reconstruct_patches(model, ds.measurements), 0, 1)
        scores = [psnr(x, r) for x, r in zip(ds.patches, rec)]
        report = ReconstructionReport([f"{Path(args.images).stem} ({len(ds)} patches)"],
                                      [float(np.mean(scores))], [0.0],
                                      model.measurement_rate, model_id)
    else:
        if not Path(args.images).is_dir():
            raise ConfigError(f"--images {args.images} is neither a directory nor a dataset file")
        report = evaluate_testset(model, args.images, _denoiser(args), model_id)
    print(report.table())
    if args.csv:
        report.to_csv(args.csv)
        print(f"wrote {args.csv}")


def cmd_bench(args):
    from .evaluation import benchmark_speed
    from .model import load_model

    for path in args.model:
        model = load_model(path)
        t = benchmark_speed(model, (args.size, args.size), args.repetitions)
        print(f"{path}: blocks={model.block_count} MR={model.measurement_rate:.2f} "
              f"median {t:.4f} s per {args.size}x{args.size} image")


def cmd_noise_sweep(args):
    from .evaluation import noise_sweep, write_sweep
    from .model import load_model

    model = load_model(args.model)
    sweep = noise_sweep(model, args.images, args.sigmas, args.seed)
    for s, p in sweep.items():
        print(f"sigma={s:g}  mean PSNR {p:.2f} dB")
    if args.out:
        write_sweep(sweep, args.out)


def cmd_hist_residual(args):
    from .evaluation import default_edges, residual_histogram
    from .model import load_model
    from .pipeline import check_compatible
    from .sensing import load_dataset, rng_for

    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    check_compatible(model, ds.m, ds.manifest.operator_seed)
    idx = np.arange(len(ds))
    if len(ds) > args.max_samples:
        idx = np.sort(rng_for(args.seed).choice(len(ds), args.max_samples, replace=False))
    hist = residual_histogram(model, ds.measurements[idx], default_edges(args.bin_width, args.limit))
    print(f"{hist.total} residual values; {100 * hist.fraction_within(-0.05, 0.05):.2f}% "
          f"within [-0.05, 0.05]")
    if args.out:
        hist.write(args.out)


def cmd_baseline(args):
    if args.method == "closed-form":
        from .baselines import fit_closed_form, save_linear
        from .sensing import load_dataset, operator_for

        if not args.dataset:
            raise ConfigError("closed-form baseline needs --dataset")
        ds = load_dataset(args.dataset)
        rec = fit_closed_form(ds.patches.T, ds.measurements.T, args.lam, ds.manifest.operator_seed)
        save_linear(rec, args.out, operator_for(ds))
        print(f"lambda {rec.lam:.3e}  training loss {rec.train_loss:.5f}")
    else:
        from .baselines import ista_reconstruct
        from .evaluation import psnr
        from .pipeline import split_image, stitch_image
        from .sensing import load_image, make_operator, measure, save_image

        if not args.image:
            raise ConfigError("ista baseline needs --image")
        img = load_image(args.image)
        op = make_operator(m_for_rate(args.mr), seed=args.seed)
        patches, layout = split_image(img)
        lam = 0.1 if args.lam is None else args.lam
        rec = np.array([ista_reconstruct(y, op, lam, args.iters) for y in measure(patches, op)])
        out = np.clip(stitch_image(rec, layout), 0, 1)
        save_image(args.out, out)
        print(f"ISTA PSNR {psnr(img, out):.2f} dB")
    print(f"wrote {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "reconstruct": cmd_reconstruct,
    "eval": cmd_eval, "bench": cmd_bench, "noise-sweep": cmd_noise_sweep,
    "hist-residual": cmd_hist_residual, "baseline": cmd_baseline,
}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"dr2net: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    echo_config(args)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except (Dr2Error, OSError) as exc:
        print(f"dr2net: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
