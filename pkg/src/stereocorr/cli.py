"""Command-line entry point: simulate, train, eval, infer.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .correction import (
    ALWAYS,
    GATED,
    NEVER,
    CorrectorStack,
    estimate_distance,
    load_stack,
    records_to_arrays,
    run_stack,
    save_stack,
)
from .errors import StereoError
from .evaluation import make_report, write_plot_data
from .geometry import BoundingBox, StereoRig, triangulate
from .simdata import (
    DeviationModel,
    SceneConfig,
    baseline_predictions,
    generate_dataset,
    read_dataset,
    read_rig,
    rig_sidecar_path,
    write_dataset,
    write_rig,
)
from .training import LOG_COLUMNS, TrainConfig, train

log = logging.getLogger("stereocorr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

_TRAIN_DEFAULTS = TrainConfig()
_DEV_DEFAULTS = DeviationModel()
_SCENE_DEFAULTS = SceneConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    # fixed width so --help output does not depend on the terminal
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=100)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return value


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rig", type=Path, default=None,
                   help="rig JSON (baseline_m, focal_px, cx, cy, width, height); built-in default if omitted")
    p.add_argument("--seed", type=_u64, default=0, help="master seed (u64)")
    p.add_argument("--config", type=Path, default=None,
                   help="flat 'key = value' file; keys are long flag names, flags given on the command line win")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stereocorr", formatter_class=_formatter,
                     description="Stereo distance estimation with learned position correction.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic stereo dataset", formatter_class=_formatter)
    _shared(p)
    p.add_argument("--out", type=Path, required=True, help="dataset JSONL path; rig sidecar written next to it")
    p.add_argument("--n", type=int, default=_SCENE_DEFAULTS.n_samples, help="number of records")
    p.add_argument("--d-min", type=float, default=_SCENE_DEFAULTS.d_min, help="nearest target depth (m)")
    p.add_argument("--d-max", type=float, default=_SCENE_DEFAULTS.d_max, help="farthest target depth (m)")
    p.add_argument("--target-width", type=float, default=_SCENE_DEFAULTS.target_width_m, help="target width (m)")
    p.add_argument("--target-height", type=float, default=_SCENE_DEFAULTS.target_height_m,
                   help="target height (m)")
    p.add_argument("--alpha-l", type=float, default=_DEV_DEFAULTS.alpha_l, help="left constant x bias (px)")
    p.add_argument("--alpha-r", type=float, default=_DEV_DEFAULTS.alpha_r, help="right constant x bias (px)")
    p.add_argument("--beta", type=float, default=_DEV_DEFAULTS.beta, help="radial distortion strength (px)")
    p.add_argument("--sigma-vib", type=float, default=_DEV_DEFAULTS.sigma_vib, help="vibration jitter std (px)")
    p.add_argument("--sigma-px", type=float, default=_DEV_DEFAULTS.sigma_px, help="detector noise std (px)")
    p.add_argument("--no-deviation", action="store_true", help="ideal pinhole projection, no deviation")

    p = sub.add_parser("train", help="train a corrector stack", formatter_class=_formatter)
    _shared(p)
    p.add_argument("--data", type=Path, required=True, help="training dataset JSONL")
    p.add_argument("--out", type=Path, required=True, help="stack weights JSON")
    p.add_argument("--log-out", type=Path, default=None, help="per-epoch training log CSV")
    p.add_argument("--val-data", type=Path, default=None, help="validation dataset JSONL for the log")
    p.add_argument("--init-only", action="store_true", help="write a freshly initialized stack, no training")
    c = _TRAIN_DEFAULTS
    p.add_argument("--stages", type=int, default=c.stages, help="number of PCM stages")
    p.add_argument("--epochs", type=int, default=c.epochs, help="epochs per module")
    p.add_argument("--batch-size", type=int, default=c.batch_size, help="samples per step")
    p.add_argument("--lr-max", type=float, default=c.lr_max, help="peak learning rate")
    p.add_argument("--warmup-frac", type=float, default=c.warmup_frac, help="fraction of steps in linear warmup")
    p.add_argument("--momentum", type=float, default=c.momentum, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=c.weight_decay, help="L2 weight decay on weights")
    p.add_argument("--clip-norm", type=float, default=c.clip_norm, help="global gradient norm clip")
    p.add_argument("--t-err", type=float, default=c.T_err, help="hard-sample error threshold")
    p.add_argument("--lam", type=float, default=c.lam, help="gate loss weight")
    p.add_argument("--gate-threshold", type=float, default=c.gate_threshold, help="gate score to continue")
    p.add_argument("--offset-scale", type=float, default=c.offset_scale, help="pixels per unit PCM output")
    p.add_argument("--embed-dim", type=int, default=c.embed_dim, help="Mixer channel width")
    p.add_argument("--token-hidden", type=int, default=c.token_hidden, help="token-mixing hidden size")
    p.add_argument("--channel-hidden", type=int, default=c.channel_hidden, help="channel-mixing hidden size")
    p.add_argument("--layers", type=int, default=c.layers, help="Mixer blocks")

    p = sub.add_parser("eval", help="evaluate a stack (or the uncorrected baseline) on a dataset",
                       formatter_class=_formatter)
    _shared(p)
    p.add_argument("--data", type=Path, required=True, help="dataset JSONL")
    p.add_argument("--stack", type=Path, default=None, help="stack weights JSON (not needed with --baseline)")
    p.add_argument("--baseline", action="store_true", help="evaluate plain triangulation instead of a stack")
    p.add_argument("--mode", choices=[GATED, ALWAYS, NEVER], default=GATED,
                   help="gated loop, every stage, or first stage only")
    p.add_argument("--out", type=Path, default=None, help="report CSV")
    p.add_argument("--text-out", type=Path, default=None, help="report as aligned text")
    p.add_argument("--plot-out", type=Path, default=None, help="(distance, prediction) CSV sorted by distance")

    p = sub.add_parser("infer", help="estimate the distance of one observation", formatter_class=_formatter)
    _shared(p)
    p.add_argument("--stack", type=Path, default=None, help="stack weights JSON")
    p.add_argument("--boxes", default=None, help='"x,y,w,h;x,y,w,h" for the left and right boxes')
    p.add_argument("--record", type=Path, default=None, help="dataset JSONL to take one record from")
    p.add_argument("--index", type=int, default=0, help="record index within --record")
    p.add_argument("--xl", type=float, default=None, help="left x; with --xr gives plain triangulation")
    p.add_argument("--xr", type=float, default=None, help="right x")
    p.add_argument("--mode", choices=[GATED, ALWAYS, NEVER], default=GATED, help="correction loop mode")
    return parser


def _read_config(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key.replace("_", "-"), value))
    return pairs


def _config_argv(sub: argparse.ArgumentParser, pairs) -> list[str]:
    """Turn config pairs into flags placed before the real ones, so real flags override them."""
    by_flag = {opt: a for a in sub._actions for opt in a.option_strings}
    argv = []
    for key, value in pairs:
        action = by_flag.get(f"--{key}")
        if action is None or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
        else:
            argv += [f"--{key}", value]
    return argv


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing COMMAND (simulate, train, eval, infer)")
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        extra = _config_argv(sub, _read_config(args.config))
        # the subcommand is always argv[0]; top-level parser has no other options
        args = parser.parse_args([argv[0]] + extra + argv[1:])
    return args


def _rig(args, dataset: Path | None = None) -> StereoRig:
    if args.rig is not None:
        return read_rig(args.rig)
    if dataset is not None and rig_sidecar_path(dataset).exists():
        return read_rig(rig_sidecar_path(dataset))
    return StereoRig.default()


def cmd_simulate(args) -> int:
    if args.no_deviation:
        dev = DeviationModel.none()
    else:
        dev = DeviationModel(args.alpha_l, args.alpha_r, args.beta, args.sigma_vib, args.sigma_px)
    try:
        config = SceneConfig(rig=_rig(args), target_width_m=args.target_width, target_height_m=args.target_height,
                             d_min=args.d_min, d_max=args.d_max, n_samples=args.n, seed=args.seed, deviation=dev)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = generate_dataset(config)
    write_dataset(records, args.out)
    write_rig(config.rig, rig_sidecar_path(args.out))
    log.info("wrote %d records to %s", len(records), args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            lr_max=args.lr_max, momentum=args.momentum, weight_decay=args.weight_decay, clip_norm=args.clip_norm,
            epochs=args.epochs, warmup_frac=args.warmup_frac, T_err=args.t_err, lam=args.lam, stages=args.stages,
            batch_size=args.batch_size, seed=args.seed, gate_threshold=args.gate_threshold,
            offset_scale=args.offset_scale, embed_dim=args.embed_dim, token_hidden=args.token_hidden,
            channel_hidden=args.channel_hidden, layers=args.layers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    config = _train_config(args)
    rig = _rig(args, args.data)
    if args.init_only:
        stack = CorrectorStack.init(rig, config.stages, config.seed, config.gate_threshold,
                                    config.mixer_config(1), config.mixer_config(2), config.offset_scale)
        save_stack(stack, args.out)
        return EXIT_OK
    records = read_dataset(args.data)
    if not records:
        raise StereoError(f"{args.data}: no records")
    val = read_dataset(args.val_data) if args.val_data else None
    result = train(records, rig, config, val)
    save_stack(result.stack, args.out)
    if args.log_out is not None:
        with open(args.log_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(result.log)
    log.info("stack with %d stage(s) written to %s", result.stack.n_stages, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.baseline and args.stack is None:
        raise UsageError("eval needs --stack unless --baseline is given")
    records = read_dataset(args.data)
    if not records:
        raise StereoError(f"{args.data}: no records")
    gt = np.array([r.distance_m for r in records])
    if args.baseline:
        preds = baseline_predictions(_rig(args, args.data), records)
        report = make_report(preds, gt, label="baseline")
    else:
        stack = load_stack(args.stack)
        left, right, _ = records_to_arrays(records)
        out = run_stack(stack, left, right, args.mode)
        preds = out["distance"]
        c_pcm = float(nn.count_flops(stack.stages[0].mixer.config))
        c_gate = float(nn.count_flops(stack.gates[0].mixer.config)) if stack.gates else 0.0
        report = make_report(preds, gt, stages=out["stages"], n_stages=stack.n_stages,
                             c_pcm=c_pcm, c_gate=c_gate, label=f"stack/{args.mode}")
    sys.stdout.write(report.to_text())
    if args.out is not None:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    if args.text_out is not None:
        Path(args.text_out).write_text(report.to_text(), encoding="utf-8")
    if args.plot_out is not None:
        write_plot_data(args.plot_out, gt, preds)
    return EXIT_OK


def _parse_boxes(text: str) -> tuple[BoundingBox, BoundingBox]:
    parts = text.split(";")
    if len(parts) != 2:
        raise UsageError('--boxes expects "x,y,w,h;x,y,w,h"')
    boxes = []
    for part in parts:
        try:
            vals = [float(v) for v in part.split(",")]
        except ValueError as exc:
            raise UsageError(f"--boxes: {exc}") from exc
        if len(vals) != 4:
            raise UsageError('--boxes expects four numbers per box')
        boxes.append(BoundingBox(*vals))
    return boxes[0], boxes[1]


def cmd_infer(args) -> int:
    sources = sum(x is not None for x in (args.boxes, args.record)) + (args.xl is not None or args.xr is not None)
    if sources != 1:
        raise UsageError("give exactly one of --boxes, --record, or --xl/--xr")
    if args.xl is not None or args.xr is not None:
        if args.xl is None or args.xr is None:
            raise UsageError("--xl and --xr go together")
        d = triangulate(_rig(args), args.xl, args.xr)
        print(f"{d!r} m")
        print("uncorrected (no boxes given)")
        return EXIT_OK
    if args.stack is None:
        raise UsageError("infer needs --stack with --boxes or --record")
    stack = load_stack(args.stack)
    if args.rig is not None:
        stack.rig = read_rig(args.rig)
    if args.boxes is not None:
        box_l, box_r = _parse_boxes(args.boxes)
    else:
        records = read_dataset(args.record)
        if not 0 <= args.index < len(records):
            raise UsageError(f"--index {args.index} outside 0..{len(records) - 1}")
        box_l, box_r = records[args.index].left, records[args.index].right
    d, trace = estimate_distance(stack, box_l, box_r, args.mode)
    print(f"{d!r} m")
    for k, ((o_l, o_r), (xl, xr)) in enumerate(zip(trace.offsets, trace.corrected_x), start=1):
        print(f"stage {k}: O_L={o_l:.6f} O_R={o_r:.6f} x_l={xl:.6f} x_r={xr:.6f}")
        if k - 1 < len(trace.gate_scores):
            print(f"gate {k}: score={trace.gate_scores[k - 1]:.6f}")
    print(f"stages executed: {trace.stages_executed}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StereoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
