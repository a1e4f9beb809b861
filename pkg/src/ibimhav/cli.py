"""Command-line entry point: ``ibimhav <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine
from .config import ConfigError, RunConfig, load_config
from .engine import ShapeError
from .network import IBIMHAVNet, load_model
from .phantom import PhantomSpec, generate_phantom
from .profiler import cost_report
from .training import (
    NumericalError,
    evaluate_case,
    infer_sliding,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .volume import (
    CaseRecord,
    DegenerateError,
    FormatError,
    load_volume,
    preprocess_case,
    save_volume,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _snapshot(directory: Path, args: argparse.Namespace, cfg: RunConfig | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    snap = {"command": args.command,
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                     if k != "func"}}
    if cfg is not None:
        snap["config"] = cfg.to_dict()
    (directory / "run_config.json").write_text(json.dumps(snap, indent=1, default=str))


def _read_case(directory: Path, case_id: str | None = None) -> CaseRecord:
    return CaseRecord(
        load_volume(directory / "image.rvol"),
        load_volume(directory / "liver.rvol"),
        load_volume(directory / "vessel.rvol"),
        case_id or directory.name,
    )


def _write_case(c: CaseRecord, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(c.image, directory / "image.rvol", "f32")
    save_volume(c.liver_mask, directory / "liver.rvol", "u8")
    save_volume(c.vessel_mask, directory / "vessel.rvol", "u8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    spec = PhantomSpec(extents=args.extents, tubes=args.tubes, noise=args.noise, seed=args.seed)
    case = generate_phantom(spec)
    out = Path(args.out)
    _write_case(case, out)
    _snapshot(out, args)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    case = _read_case(Path(args.case))
    processed, truth = preprocess_case(case, target=args.target)
    out = Path(args.out)
    _write_case(processed, out)
    save_volume(truth, out / "truth.rvol", "u8")
    _snapshot(out, args)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    engine.set_threads(args.threads or cfg.threads)
    cases = [_read_case(Path(c)) for c in args.case]
    out = Path(args.out)
    _snapshot(out, args, cfg)
    if args.resume:
        model, opt, start = load_checkpoint(args.resume, cfg.train)
    else:
        model, opt, start = IBIMHAVNet(cfg.model), None, 0
    result, opt = train(model, cases, cfg.train, optimizer=opt, start_step=start)
    save_checkpoint(out, model, opt, result.step)
    write_loss_curve(result.losses, out / "loss.csv", start_step=start)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.model)
    engine.set_threads(args.threads or 1)
    image = load_volume(args.image)
    prob = infer_sliding(model, image, stride=args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(prob, out, "f32")
    _snapshot(out.parent, args)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_volume(args.pred)
    truth = load_volume(args.truth)
    if pred.extents != truth.extents:
        raise ShapeError(
            f"--pred {args.pred} extents {pred.extents} do not match --truth {args.truth} "
            f"extents {truth.extents}"
        )
    row = evaluate_case(
        pred, truth, args.threshold, not args.no_postprocess, args.min_component_mm3,
        args.connectivity, args.close_radius, args.case_id or Path(args.pred).stem,
    )
    line = json.dumps({k: row[k] for k in ("case_id", "precision", "sensitivity", "dice")})
    print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "a") as fh:
            fh.write(line + "\n")
        _snapshot(out.parent, args)
    return EXIT_OK


def cmd_profile(args) -> int:
    report = cost_report(args.grid, args.dim, args.window)
    print(report.to_json())
    if args.table:
        print(report.table(), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ibimhav", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="pin torch thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic vessel case")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--extents", type=_triple, default=(32, 32, 32))
    s.add_argument("--tubes", type=int, default=3)
    s.add_argument("--noise", type=float, default=15.0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="crop/resize, clamp, supplement, normalize a case")
    s.add_argument("--case", required=True, help="directory with image/liver/vessel .rvol")
    s.add_argument("--out", required=True)
    s.add_argument("--target", type=_triple, default=(256, 256, 192))
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train on preprocessed cases")
    s.add_argument("--config", default="desk", help="JSON config path or preset name (desk, paper)")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. train.lr=0.01")
    s.add_argument("--case", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="sliding-window inference")
    s.add_argument("--model", required=True, help="checkpoint directory")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=24)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="threshold, post-process and score a probability volume")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--min-component-mm3", type=float, default=180.0)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--close-radius", type=int, default=0)
    s.add_argument("--no-postprocess", action="store_true")
    s.add_argument("--case-id", default=None)
    s.add_argument("--out", default=None, help="append the JSON row to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="attention cost model")
    s.add_argument("--grid", type=_triple, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--window", type=_triple, default=(4, 4, 4))
    s.add_argument("--table", action="store_true", help="also print a table on stderr")
    s.set_defaults(func=cmd_profile)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        engine.set_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, DegenerateError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
