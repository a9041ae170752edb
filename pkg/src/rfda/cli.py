"""Command line: synth / degrade / train / enhance / evaluate / check.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("rfda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _add_video_args(p, required_dims: bool = True):
    p.add_argument("--width", type=int, required=required_dims)
    p.add_argument("--height", type=int, required=required_dims)
    p.add_argument("--format", choices=["y", "yuv420"], default="y",
                   help="raw input layout: Y-only planes (default) or planar 4:2:0")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a procedural Y-only test clip")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=15)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("degrade", help="blockwise DCT quantisation of raw video")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--q", type=float, required=True)
    _add_video_args(p)

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--data-dir", required=True, help="directory holding manifest.json")
    p.add_argument("--config-preset", choices=["tiny", "standard"], default="tiny")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--in-weights", help="stage-1 weights (required for stage 2)")
    p.add_argument("--lr", type=float, help="stage-1 base lr / stage-2 RF lr (default 1e-4)")
    p.add_argument("--lr-stdf-qe", type=float, help="stage-2 lr of STDF and QE (default 1e-5)")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--crop", type=int, default=48)
    p.add_argument("--clip-len", type=int, default=15)
    p.add_argument("--truncate", type=int, help="stage 2: cut gradients through the state every N frames")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--log", help="CSV progress log (default: <out-weights>.log.csv)")

    p = sub.add_parser("enhance", help="enhance a raw video with trained weights")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-attention", metavar="DIR")
    p.add_argument("--no-rf", action="store_true", help="disable the recursion (stage-1 behaviour)")
    _add_video_args(p)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report of enhanced vs compressed")
    p.add_argument("--enhanced", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="JSON path; CSV and PNG are written alongside")
    _add_video_args(p)

    sub.add_parser("check", help="run the invariant and gradient self-checks")
    return parser


def _read(path, args):
    from .fileio import read_y4_raw

    return read_y4_raw(path, args.width, args.height, y_only=args.format == "y").frames


def load_dataset(data_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read ``manifest.json``: ``{"width", "height", "format", "pairs": [{"gt", "compressed"}]}``."""
    from .fileio import read_y4_raw

    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
    w, h = int(manifest["width"]), int(manifest["height"])
    y_only = manifest.get("format", "y") == "y"
    pairs = []
    for entry in manifest["pairs"]:
        gt = read_y4_raw(data_dir / entry["gt"], w, h, y_only).frames
        comp = read_y4_raw(data_dir / entry["compressed"], w, h, y_only).frames
        if gt.shape != comp.shape:
            raise ValueError(f"{entry}: ground truth and compressed clips differ in shape")
        pairs.append((comp, gt))
    if not pairs:
        raise ValueError(f"{data_dir}: manifest lists no pairs")
    return pairs


def cmd_synth(args) -> None:
    from .fileio import write_y_raw
    from .synthetic import synthetic_clip

    write_y_raw(synthetic_clip(args.frames, args.height, args.width, args.seed), args.out)


def cmd_degrade(args) -> None:
    from .degrade import degrade_clip
    from .fileio import write_y_raw

    write_y_raw(degrade_clip(_read(args.inp, args), args.q), args.out)


def cmd_train(args) -> None:
    from .config import preset
    from .fileio import load_weights, save_weights
    from .plotting import plot_loss_curve
    from .trainer import TrainConfig, train_stage1, train_stage2

    data = load_dataset(args.data_dir)
    common = dict(stage=args.stage, total_iters=args.iters, batch_size=args.batch_size, crop=args.crop,
                  clip_len=args.clip_len, seed=args.seed, augment=not args.no_augment,
                  truncate=args.truncate, log_every=args.log_every)
    log_path = args.log or f"{args.out_weights}.log.csv"
    val = data[0]
    if args.stage == 1:
        cfg = TrainConfig(base_lr=args.lr or 1e-4, **common)
        init = load_weights(args.in_weights, with_rf=False) if args.in_weights else None
        result = train_stage1(data, cfg, preset(args.config_preset), params=init, val=val, log_path=log_path)
    else:
        if not args.in_weights:
            raise UsageError("stage 2 needs --in-weights")
        cfg = TrainConfig(stage2_lr_rf=args.lr or 1e-4, stage2_lr_stdf_qe=args.lr_stdf_qe or 1e-5, **common)
        start = load_weights(args.in_weights, with_rf=True, init_missing_rf=True, seed=args.seed)
        result = train_stage2(data, start, cfg, val=val, log_path=log_path)
    save_weights(result.params, args.out_weights)
    plot_loss_curve(result.losses, Path(log_path).with_suffix(".png"), result.log_rows)
    print(f"stage {args.stage}: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")


def cmd_enhance(args) -> None:
    from .fileio import load_weights, write_pgm, write_y_raw
    from .model import enhance_video

    frames = _read(args.inp, args)
    params = load_weights(args.weights)
    sink = None
    if args.dump_attention:
        out_dir = Path(args.dump_attention)
        out_dir.mkdir(parents=True, exist_ok=True)

        def sink(t, masks):
            for i, m in enumerate(masks):
                write_pgm(m, out_dir / f"frame{t + 1:04d}_block{i + 1}.pgm")

    write_y_raw(enhance_video(frames, params, use_rf=not args.no_rf, attention_sink=sink), args.out)


def cmd_evaluate(args) -> None:
    from .metrics import MetricsReport
    from .plotting import plot_psnr_curves

    report = MetricsReport.build(_read(args.enhanced, args), _read(args.compressed, args), _read(args.gt, args))
    path = Path(args.report)
    report.to_json(path)
    report.to_csv(path.with_suffix(".csv"))
    plot_psnr_curves(report, path.with_name(path.stem + "_psnr.png"))
    print(f"dPSNR {report.delta_psnr:+.4f} dB  dSSIM {report.delta_ssim:+.5f}  SD {report.sd:.4f}  PVD {report.pvd}")


def cmd_check(args) -> int:
    from .selfcheck import run_checks

    return 0 if run_checks() == 0 else 2


COMMANDS = {
    "synth": cmd_synth,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "check": cmd_check,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rfda: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report, no traceback
        print(f"rfda: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2
    return code or 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
