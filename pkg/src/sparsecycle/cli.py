"""``sparsecycle`` command line: make-dataset, train, deblur, eval, gradcheck.

Exit codes: 0 ok, 2 numeric failure, 3 data mismatch, 64 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .config import (
    ConfigError,
    DIRECTIVES,
    all_keys,
    describe_keys,
    dump_config,
    parse_config_text,
    resolve,
)
from .data import (
    DataMismatchError,
    ImageFormatError,
    generate_synthetic_dataset,
    list_images,
    load_image,
    load_paired_dir,
    make_psf,
    match_directories,
    save_image,
    write_paired_dir,
)
from .gradcheck import CASES_PER_OP, REGISTRY, run_suite
from .metrics import MetricReport, to_unit_range
from .training import NonFiniteLossError, Trainer, load_generator, write_trace

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_DATA = 3
EXIT_USAGE = 64

log = logging.getLogger("sparsecycle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- make-dataset -------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    psf = make_psf(args.blur_len, args.blur_angle)
    pairs = generate_synthetic_dataset(args.n, args.size, psf, seed=args.seed)
    manifest = {
        "n": args.n, "size": args.size, "blur_len": args.blur_len,
        "blur_angle": args.blur_angle, "seed": args.seed,
    }
    try:
        write_paired_dir(args.out, pairs, manifest)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """Accept ``key=value``, ``--key value`` and ``--key=value``."""
    out: Dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.startswith("--"):
            body = tok[2:]
            if "=" in body:
                key, value = body.split("=", 1)
            else:
                if i + 1 >= len(tokens):
                    raise UsageError(f"option {tok} needs a value")
                key, value = body, tokens[i + 1]
                i += 1
        elif "=" in tok:
            key, value = tok.split("=", 1)
        else:
            raise UsageError(f"unexpected argument {tok!r}; use key=value or --key value")
        out[key.strip()] = value.strip()
        i += 1
    return out


def _train_values(args, extra: Sequence[str]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        values.update(parse_config_text(text, args.config))
    values.update(parse_overrides(extra))
    known = set(all_keys()) | set(DIRECTIVES)
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)} (see 'train --help')")
    return values


def cmd_train(args, extra: Sequence[str]) -> int:
    net, config, run = resolve(_train_values(args, extra))
    if not run.data:
        raise UsageError("train needs a dataset directory: data=DIR")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dump_config(net, config, run)
    (out / "config.txt").write_text(resolved, encoding="utf-8")
    log.info("resolved config:\n%s", resolved.rstrip())

    pairs = load_paired_dir(run.data, resize=config.resize or None)
    if not pairs:
        raise DataMismatchError(f"no image pairs found in {run.data}")
    shapes = {p.sharp.shape for p in pairs}
    if len(shapes) != 1:
        raise DataMismatchError(f"training images differ in shape: {sorted(shapes)}")

    if run.resume:
        trainer = Trainer.from_checkpoint(run.resume, config)
        log.info("resumed from %s at epoch %d", run.resume, trainer.epoch)
    else:
        trainer = Trainer(net, config, pairs[0].sharp.shape)
    trace = out / "loss.csv"
    append = bool(run.resume) and trace.exists()
    if not append:
        write_trace(trace, [])

    def on_epoch_end(tr: Trainer, records):
        write_trace(trace, records, append=True)
        if run.save_every and tr.epoch % run.save_every == 0:
            tr.save_checkpoint(out / f"epoch{tr.epoch:04d}.ckpt")

    trainer.fit(pairs, on_epoch_end=on_epoch_end)
    trainer.save_checkpoint(out / "final.ckpt")
    print(f"trained {trainer.epoch} epochs; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


# -- deblur ---------------------------------------------------------------------

def cmd_deblur(args) -> int:
    gen = load_generator(args.ckpt, "gx")
    channels = gen.spec.image_channels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name, path in list_images(args.inp).items():
        try:
            image = load_image(path)
        except ImageFormatError as exc:
            log.warning("skipping %s: %s", name, exc)
            failures += 1
            continue
        c, h, w = image.shape
        if c != channels or h % 4 or w % 4:
            log.warning(
                "skipping %s: %dx%dx%d image, need %d channels and sides divisible by 4",
                name, c, h, w, channels,
            )
            failures += 1
            continue
        with torch.no_grad():
            restored = gen(torch.from_numpy(image)[None])[0].numpy()
        save_image(out / name, restored)
    return EXIT_DATA if failures else EXIT_OK


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    names = match_directories(args.pred, args.ref)
    report = MetricReport()
    for name in names:
        pred, ref = load_image(Path(args.pred) / name), load_image(Path(args.ref) / name)
        if pred.shape != ref.shape:
            raise DataMismatchError(f"{name}: prediction {pred.shape} vs reference {ref.shape}", [name])
        report.add(name, to_unit_range(pred), to_unit_range(ref), data_range=1.0)
    print(report.to_table())
    if args.tsv:
        tsv = report.to_tsv()
        if args.tsv == "-":
            sys.stdout.write(tsv)
        else:
            Path(args.tsv).write_text(tsv, encoding="utf-8")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.corrupt and args.corrupt not in REGISTRY:
        raise UsageError(f"unknown op {args.corrupt!r}")
    report = run_suite(seed=args.seed, cases=args.cases, corrupt=args.corrupt)
    print(report.to_text())
    if not report.passed:
        print(f"FAILED: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsecycle", description="Sparse-learning cycle-consistent deblurring.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="write a synthetic paired blur/sharp dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--blur-len", type=float, default=7)
    p.add_argument("--blur-angle", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser(
        "train",
        help="train both generators and critics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (set in --config FILE, as key=value or as --key value):\n"
        + "\n".join(describe_keys()),
    )
    p.add_argument("--config", help="key = value config file")

    p = sub.add_parser("deblur", help="restore every image of a directory with G_X")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR / SSIM / MS-SSIM of filename-matched directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--tsv", help="also write tab-separated metrics to this file ('-' for stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=CASES_PER_OP)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(message)s",
        )
        if args.command == "make-dataset":
            return cmd_make_dataset(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "deblur":
            return cmd_deblur(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_gradcheck(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for name in exc.unmatched:
            print(f"  unmatched: {name}", file=sys.stderr)
        return EXIT_DATA
    except (ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
