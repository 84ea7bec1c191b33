"""Command line entry point: ``eval``, ``forward``, ``gradcheck`` and ``overfit``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck, train
from .io import DataError, load_gray_png, load_rgb, pair_directories, save_gray_png, write_reports
from .io import format_summary
from .metrics import METRIC_NAMES, MetricError, aggregate, evaluate_pair
from .model import ConfigError, Model, load_config
from .tensor import Tensor, bilinear_resize

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

log = logging.getLogger("msacod")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _kernels(value: str) -> list[int]:
    try:
        ks = [int(v) for v in _csv_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"kernel sizes must be integers: {value!r}") from None
    if any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError(f"kernel sizes must be positive: {value!r}")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msacod", description="Masked separable attention COD toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("eval", help="score prediction maps against ground truth")
    e.add_argument("--pred", required=True, help="directory of predicted maps")
    e.add_argument("--gt", required=True, help="directory of ground-truth masks")
    e.add_argument("--metrics", default=",".join(METRIC_NAMES), help="comma list of sm,wf,em,mae")
    e.add_argument("--br", type=_kernels, default=[], help="border-band kernel sizes, e.g. 15,30")
    e.add_argument("--out", help="output directory for summary.txt / per_image.csv / curves.csv")
    e.add_argument("--jobs", type=int, default=1, help="pairs evaluated concurrently")

    f = sub.add_parser("forward", help="run the model on one image")
    f.add_argument("--config", required=True, help="key=value model config")
    f.add_argument("--image", required=True)
    f.add_argument("--out", required=True, help="output PNG for P1")
    f.add_argument("--dump-all", action="store_true", help="also write P1..P5 next to --out")
    f.add_argument("--resize", action="store_true", help="resize the image to the configured input size")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--suite", help="suite file (default: every registered target)")

    o = sub.add_parser("overfit", help="gradient descent on the synthetic set")
    o.add_argument("--steps", type=int, default=train.DEFAULT_STEPS)
    o.add_argument("--lr", type=float, default=train.DEFAULT_LR)
    o.add_argument("--seed", type=int, default=7)
    o.add_argument("--out", help="trajectory file (step,total_loss); default stdout")
    return p


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_one(stem, pred_path, gt_path, metrics, kernels):
    pred = load_gray_png(pred_path)
    gt = load_gray_png(gt_path)
    if pred.shape != gt.shape:
        return stem, None
    return stem, evaluate_pair(pred, gt, name=stem, metrics=metrics, border_kernels=kernels)


def cmd_eval(args) -> int:
    metrics = _csv_list(args.metrics)
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if not metrics or unknown:
        raise UsageError(f"--metrics must name at least one of {','.join(METRIC_NAMES)}; got {args.metrics!r}")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    pairing = pair_directories(args.pred, args.gt)
    if not pairing.pairs:
        raise DataError(f"no matching file stems between {args.pred} and {args.gt}")
    for name in pairing.skipped:
        log.warning("skipped %s: no ground truth", name)

    def work(pair):
        return _eval_one(*pair, metrics, args.br)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        outcomes = list(pool.map(work, pairing.pairs))
    reports, mismatched = [], []
    for stem, rep in outcomes:
        if rep is None:
            log.warning("skipped %s: prediction and ground truth differ in size", stem)
            mismatched.append(stem)
        else:
            reports.append(rep)
    if not reports:
        raise DataError("every pair was skipped because of size mismatches")
    report = aggregate(reports)
    if args.out:
        write_reports(args.out, report, pairing, mismatched)
    else:
        sys.stdout.write(format_summary(report, pairing, mismatched))
    return EXIT_DATA if mismatched else EXIT_OK


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def cmd_forward(args) -> int:
    cfg = load_config(args.config)
    img = load_rgb(args.image)
    h, w = img.shape[1:]
    if args.resize and (h, w) != tuple(cfg.input_size):
        img = bilinear_resize(Tensor(img), *cfg.input_size).data
    elif h % 32 or w % 32:
        raise DataError(f"image size {h}x{w} is not divisible by 32; pass --resize to use {cfg.input_size}")
    preds = Model(cfg)(Tensor(img))
    out = Path(args.out)
    save_gray_png(out, preds.upsampled[0].data[0])
    if args.dump_all:
        for i, p in enumerate(preds.upsampled, 1):
            save_gray_png(out.with_name(f"{out.stem}_p{i}.png"), p.data[0])
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / overfit
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cases = None
    if args.suite:
        try:
            cases = gradcheck.load_suite(args.suite)
        except OSError as exc:
            raise DataError(f"cannot read suite {args.suite}: {exc}") from None
        except gradcheck.GradCheckError as exc:
            raise DataError(str(exc)) from None
    report = gradcheck.check_suite(cases)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_overfit(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be non-negative")
    try:
        result = train.overfit(steps=args.steps, lr=args.lr, seed=args.seed)
    except train.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    text = "step,total_loss\n" + "".join(f"{i},{v:.10f}\n" for i, v in enumerate(result.losses))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    status = "converged" if result.converged else "did not converge"
    print(f"final loss {result.final:.6f} after {result.steps} steps: {status}", file=sys.stderr)
    return EXIT_OK if result.converged else EXIT_CHECK


COMMANDS = {"eval": cmd_eval, "forward": cmd_forward, "gradcheck": cmd_gradcheck, "overfit": cmd_overfit}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"msacod {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, MetricError) as exc:
        print(f"msacod {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
