"""Command line entry point: ``seada <subcommand> [options]``.

Every failure prints exactly one line, ``SEADA-E###: message``, on stderr
and exits nonzero.

    E000 usage   E001 config   E002 output exists   E003 missing/corrupt input
    E004 method not valid for this command   E005 unseen ComBat batch
    E006 numerical failure during training   E007 no baseline   E010 invalid value
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .combat import UnknownBatchError
from .config import HARMONIZERS, ConfigError, load_config
from .data import StoreError, load_volume_store, read_store_header
from .evaluation import Report
from .experiment import (
    BAD_METHOD,
    PipelineError,
    RunLayout,
    claim_output,
    describe,
    evaluate,
    extract,
    gen_data,
    harmonize_combat,
    harmonize_noise,
    load_split,
    load_store,
    require,
    run_all,
    train_method,
    write_report,
)
from .ldr import load_ldrs, save_ldrs
from .nets import METHODS as TRAINED

log = logging.getLogger("seada")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=default, help="run directory (overrides the config)")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="overwrite existing outputs")


def _named_paths(items, flag):
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{flag} expects NAME=PATH, got {item!r}")
        out[name.upper()] = Path(path)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seada", description="Latent-space domain harmonization on phantom brain volumes.")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    cmd("gen-data", "generate the phantom volume store")

    sp = cmd("train", "train one model")
    sp.add_argument("--method", required=True, type=str.upper, help=f"one of {', '.join(TRAINED)}")

    sp = cmd("extract", "encode every stored volume")
    sp.add_argument("--method", type=str.upper, help="use <out>/models/<METHOD>.ckpt")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--store", type=Path, help="volume store (default <out>/data)")
    sp.add_argument("--output", type=Path, help="LDR file (default <out>/ldrs/<METHOD>.ldr)")

    sp = cmd("harmonize", "post-hoc harmonization of extracted latents")
    sp.add_argument("--method", required=True, type=str.upper, help="NOISE or COMBAT")
    sp.add_argument("--input", type=Path, help="LDR file (default <out>/ldrs/CAE.ldr)")
    sp.add_argument("--output", type=Path, help="default <out>/ldrs/<METHOD>.ldr")
    sp.add_argument("--sigma", type=float, help="noise standard deviation (default from config)")
    sp.add_argument("--include-test-domains", action="store_true",
                    help="fit ComBat on unseen domains too (transductive, reference only)")
    sp.add_argument("--no-covariates", action="store_true", help="ComBat without disease covariates")
    sp.add_argument("--no-eb", action="store_true", help="ComBat without empirical-Bayes shrinkage")

    sp = cmd("evaluate", "compute the metrics report")
    sp.add_argument("--ldr", action="append", metavar="NAME=PATH",
                    help="latents per row (default: every file in <out>/ldrs)")
    sp.add_argument("--checkpoint", action="append", metavar="NAME=PATH",
                    help="checkpoints for RMSE/SSIM (default: <out>/models)")

    sp = cmd("report", "print a saved report")
    sp.add_argument("--input", type=Path, help="report.json (default <out>/report.json)")
    sp.add_argument("--format", choices=("text", "json"), default="text")

    cmd("run-all", "gen-data, train, extract, harmonize and evaluate in one go")
    return p


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _context(args):
    cfg_path = args.config
    if cfg_path is None and args.out is not None and (Path(args.out) / "config.yaml").exists() \
            and args.command != "gen-data" and args.command != "run-all":
        cfg_path = Path(args.out) / "config.yaml"
    cfg = load_config(cfg_path, seed=args.seed, output=None if args.out is None else str(args.out))
    return cfg, RunLayout(Path(cfg.output))


def cmd_gen_data(args) -> int:
    cfg, layout = _context(args)
    manifest = gen_data(cfg, layout, args.force)
    print(describe(manifest))
    print(f"{len(manifest.samples)} volumes written to {layout.store}")
    return 0


def cmd_train(args) -> int:
    if args.method in HARMONIZERS:
        raise PipelineError(BAD_METHOD, f"{args.method} is not trainable: it transforms extracted latents "
                                        "directly; run 'seada harmonize --method "
                                        f"{args.method}' on CAE latents")
    if args.method not in TRAINED:
        raise PipelineError(BAD_METHOD, f"unknown method {args.method!r}; trainable methods are {', '.join(TRAINED)}")
    cfg, layout = _context(args)
    _, ckpt = train_method(cfg, layout, args.method, args.force)
    rows = sum(1 for _ in open(layout.history(args.method))) - 1
    print(f"{args.method}: checkpoint {ckpt}, {rows} loss records in {layout.history(args.method)}")
    return 0


def cmd_extract(args) -> int:
    cfg, layout = _context(args)
    if args.checkpoint is None and args.method is None:
        raise UsageError("extract needs --method or --checkpoint")
    ckpt = args.checkpoint or layout.checkpoint(args.method)
    name = args.method or Path(ckpt).stem
    manifest = load_volume_store(require(args.store, "volume store")) if args.store else load_store(layout)
    out = args.output or layout.ldr(name)
    store = extract(ckpt, manifest, out, args.force)
    print(f"{len(store)} x {store.dim} latents written to {out}")
    return 0


def cmd_harmonize(args) -> int:
    if args.method not in HARMONIZERS:
        raise PipelineError(BAD_METHOD, f"harmonize supports {', '.join(HARMONIZERS)}, got {args.method!r}")
    cfg, layout = _context(args)
    src = require(args.input or layout.ldr("CAE"), "input latents")
    ldrs = load_ldrs(src)
    out = args.output or layout.ldr(args.method)
    claim_output(out, args.force)
    if args.method == "NOISE":
        sigma = cfg.evaluation.noise_sigma if args.sigma is None else args.sigma
        save_ldrs(out, harmonize_noise(ldrs, sigma, cfg.seed))
        print(f"NOISE sigma={sigma}: {len(ldrs)} rows written to {out}")
        return 0
    header = read_store_header(require(layout.store, "volume store (needed for domain roles)"))
    train_domains = [d["index"] for d in header["domains"] if d["role"] == "train"]
    fit = sorted(set(ldrs.domain)) if args.include_test_domains else train_domains
    harmonized, skipped = harmonize_combat(ldrs, fit, eb=cfg.evaluation.combat_eb and not args.no_eb,
                                           covariates=cfg.evaluation.combat_covariates and not args.no_covariates)
    save_ldrs(out, harmonized)
    print(f"COMBAT: {len(harmonized)} rows harmonized, written to {out}")
    if skipped:
        print(f"COMBAT: skipped {len(skipped)} rows from domains absent at fit time "
              f"(ComBat cannot harmonize unseen domains): {', '.join(skipped)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, layout = _context(args)
    manifest = load_store(layout)
    ldrs = _named_paths(args.ldr, "--ldr")
    if not ldrs:
        ldr_dir = layout.root / "ldrs"
        found = {p.stem.replace("_", " "): p for p in sorted(ldr_dir.glob("*.ldr"))} if ldr_dir.is_dir() else {}
        order = ["CAE", "NOISE", "COMBAT", "COMBAT no-cov", "ADA", "MDADA", "SEADA"]
        ldrs = {n: found[n] for n in order if n in found}
        ldrs.update({n: p for n, p in found.items() if n not in ldrs})
    ckpts = _named_paths(args.checkpoint, "--checkpoint")
    if not args.checkpoint:
        ckpts = {m: layout.checkpoint(m) for m in TRAINED if layout.checkpoint(m).exists()}
    report = evaluate(ldrs, ckpts, manifest, load_split(layout, manifest, cfg), cfg.seed)
    write_report(report, layout, args.force)
    print(report.render(), end="")
    return 0


def cmd_report(args) -> int:
    _, layout = _context(args)
    src = require(args.input or layout.report_json, "report")
    try:
        report = Report.from_json(src.read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise PipelineError("SEADA-E003", f"cannot parse report {src}: {exc}") from None
    print(report.to_json() if args.format == "json" else report.render(), end="")
    return 0


def cmd_run_all(args) -> int:
    cfg, layout = _context(args)
    report = run_all(cfg, layout.root, args.force)
    print(report.render(), end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "harmonize": cmd_harmonize,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def _code(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "SEADA-E000"
    if isinstance(exc, ConfigError):
        return "SEADA-E001"
    if isinstance(exc, PipelineError):
        return exc.code
    if isinstance(exc, (StoreError, FileNotFoundError)):
        return "SEADA-E003"
    if isinstance(exc, UnknownBatchError):
        return "SEADA-E005"
    if isinstance(exc, FloatingPointError):
        return "SEADA-E006"
    return "SEADA-E010"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PipelineError, ValueError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{_code(exc)}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
