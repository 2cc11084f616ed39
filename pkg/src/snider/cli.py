"""Command-line entry point: ``snider {synth,train,recover,eval,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, read_checkpoint
from .config import FIELD_NAMES, ConfigError, RunConfig, load_config_file, resolve
from .data.dataset import make_dataset, read_manifest
from .data.font import digit_glyphs
from .data.imageio import read_ppm, write_ppm
from .data.synthesis import default_scale
from .evaluation import evaluate_pipeline, identity_recover, model_recover_fn
from .gradcheck import DEFAULT_H, DEFAULT_TOL, check_model_gradients
from .networks import SPECS, Variant
from .training import NonFiniteLossError, train

log = logging.getLogger("snider")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "SNIDER_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this contract reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="key = value settings file (flags override it)")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help=f"BLAS threads (default 1; env {THREADS_ENV})")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="snider", description="Synthetic plate recovery: data, training, recovery, evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic plate dataset")
    p.add_argument("--plates", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--min-digits", dest="min_digits", type=int)
    p.add_argument("--max-digits", dest="max_digits", type=int)
    p.add_argument("--variant", help="variant whose size divisibility is enforced (default tiny)")
    p.add_argument("--out", dest="data", help="dataset directory")

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    p.add_argument("--data", help="dataset directory holding train.tsv")
    p.add_argument("--out", help="run directory for metrics, checkpoints and figures")
    p.add_argument("--variant")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-initial", dest="lr_initial", type=float)
    p.add_argument("--lr-final", dest="lr_final", type=float)
    p.add_argument("--lr-switch-epoch", dest="lr_switch_epoch", type=int)
    p.add_argument("--lr-switch-iter", dest="lr_switch_iter", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    for term in ("gd", "gr", "ds", "dc"):
        p.add_argument(f"--lambda-{term}", dest=f"lambda_{term}", type=float)
    p.add_argument("--denoise-until", dest="denoise_until", type=float, help="fraction of iters")
    p.add_argument("--rectify-until", dest="rectify_until", type=float, help="fraction of iters")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-plots", dest="plots", action="store_const", const=False)

    p = sub.add_parser("recover", parents=[common], help="recover PPM images with a trained model")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", help="expected variant of the checkpoint")
    p.add_argument("--no-rectify", action="store_true", help="denoise only")
    p.add_argument("inputs", nargs="+", help="PPM files or directories of PPM files")

    p = sub.add_parser("eval", parents=[common], help="score recognition before and after recovery")
    p.add_argument("--data", help="dataset directory holding test.tsv")
    p.add_argument("--split-name", default="test", choices=("train", "test"))
    p.add_argument("--checkpoint")
    p.add_argument("--variant", help="expected variant of the checkpoint")
    p.add_argument("--model", choices=("checkpoint", "identity"), default="checkpoint",
                   help="'identity' skips recovery (test hook)")
    p.add_argument("--no-rectify", action="store_true")
    p.add_argument("--report", help="report CSV path (default <out>/report.csv)")
    p.add_argument("--out")
    p.add_argument("--recovered-dir", help="also write recovered images here")
    p.add_argument("--no-plots", dest="plots", action="store_const", const=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--variant", default="tiny")
    p.add_argument("--h", type=float, default=DEFAULT_H)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--entries", type=int, default=2, help="random entries per parameter tensor")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items() if k in FIELD_NAMES}
    if overrides.get("threads") is None and os.environ.get(THREADS_ENV):
        try:
            overrides["threads"] = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    return resolve(file_values, overrides)


def _require_size(size: int, variant: str) -> None:
    div = SPECS[Variant.parse(variant)].divisor
    if size < 32 or size % div:
        raise UsageError(f"--size {size} must be >= 32 and a multiple of {div} for variant {variant}")


def cmd_synth(args, cfg: RunConfig) -> int:
    _require_size(cfg.size, cfg.variant)
    try:
        train_m, test_m = make_dataset(cfg.data, cfg.plates, cfg.size, cfg.seed, cfg.split, cfg.noise,
                                       cfg.min_digits, cfg.max_digits)
    except OSError as exc:
        log.error("cannot write dataset to %s: %s", cfg.data, exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"train\t{len(train_m)} samples")
    print(f"test\t{len(test_m)} samples")
    print(f"total\t{len(train_m) + len(test_m)} samples in {cfg.data}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest_path = Path(cfg.data) / "train.tsv"
    if not manifest_path.is_file():
        log.error("missing manifest %s", manifest_path)
        return EXIT_RUNTIME
    manifest = read_manifest(manifest_path)
    if len(manifest):
        # the model is built for whatever size the dataset was rendered at
        cfg = dataclasses.replace(cfg, size=manifest.load(0).i_lq.shape[-1])
        _require_size(cfg.size, cfg.variant)
    tc = cfg.train_config()
    try:
        result = train(tc, manifest, out_dir=cfg.out, resume=cfg.resume or None)
    except (NonFiniteLossError, RuntimeError, CheckpointError, OSError) as exc:
        log.error("training failed: %s", exc)
        return EXIT_RUNTIME
    print(f"iterations\t{result.iteration}")
    print(f"checkpoint\t{result.checkpoint_path}")
    print(f"metrics\t{result.metrics_path}")
    if result.history:
        it, stage, losses, norm = result.history[-1]
        print(f"final_total\t{losses.total:.6g}")
        print(f"final_l_gd\t{losses.l_gd:.6g}")
    if cfg.plots and result.metrics_path is not None and result.history:
        from .plotting import plot_loss_curves

        print(f"figure\t{plot_loss_curves(result.metrics_path)}")
    return EXIT_OK


def _load_model(cfg: RunConfig, args):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = read_checkpoint(cfg.checkpoint, expect_variant=getattr(args, "variant", None))
    return model


def _expand_inputs(inputs: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.glob("*.ppm") if not q.stem.endswith("_rec")))
        else:
            paths.append(p)
    return paths


def cmd_recover(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args)
    run = model_recover_fn(model, rectify=not args.no_rectify)
    for path in _expand_inputs(args.inputs):
        image = read_ppm(path)
        if image.shape != (3, model.input_size, model.input_size):
            log.error("%s: image %s does not match model input %d", path, image.shape[1:], model.input_size)
            return EXIT_RUNTIME
        out = path.with_name(f"{path.stem}_rec.ppm")
        write_ppm(out, np.clip(run(image[None])[0], 0.0, 1.0))
        print(out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest_path = Path(cfg.data) / f"{args.split_name}.tsv"
    if not manifest_path.is_file():
        log.error("missing manifest %s", manifest_path)
        return EXIT_RUNTIME
    manifest = read_manifest(manifest_path)
    if args.model == "identity":
        recover_fn = identity_recover
    else:
        recover_fn = model_recover_fn(_load_model(cfg, args), rectify=not args.no_rectify)
    if not len(manifest):
        log.error("manifest %s is empty", manifest_path)
        return EXIT_RUNTIME
    size = manifest.load(0).i_lq.shape[-1]
    glyphs = digit_glyphs(default_scale(size))
    report_path = Path(cfg.report) if cfg.report else Path(cfg.out) / "report.csv"
    report = evaluate_pipeline(recover_fn, manifest, glyphs, report_path=report_path, recovered_dir=args.recovered_dir)
    for key, val in report.summary().items():
        print(f"{key}\t{val:.6g}" if isinstance(val, float) else f"{key}\t{val}")
    print(f"report\t{report_path}")
    if cfg.plots and report.rows:
        from .plotting import plot_eval_summary, plot_recoveries

        print(f"figure\t{plot_eval_summary(report.summary(), report_path.with_name('eval_summary.png'))}")
        samples = [manifest.load(i) for i in range(min(6, len(manifest)))]
        lq = np.stack([s.i_lq for s in samples]).astype(np.float32)
        rec = np.clip(recover_fn(lq), 0.0, 1.0)
        fig = plot_recoveries(lq, rec, [s.i_hq_0 for s in samples], report_path.with_name("recoveries.png"),
                              titles=[s.digits for s in samples])
        print(f"figure\t{fig}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    result = check_model_gradients(args.variant, args.size, cfg.seed, h=args.h, random_entries=args.entries)
    for name, index, ana, num, err in result.worst(5):
        print(f"{name}{list(index)}\tanalytic={ana:.9g}\tnumeric={num:.9g}\trel_err={err:.3e}")
    for ana, num, err in result.directional:
        print(f"direction\tanalytic={ana:.9g}\tnumeric={num:.9g}\trel_err={err:.3e}")
    print(f"parameters_checked\t{result.n_params_checked}")
    print(f"entries_checked\t{len(result.entries)}")
    print(f"kink_crossings\t{result.kink_crossings}")
    print(f"max_rel_error\t{result.max_rel_error:.3e}")
    failures = result.failures(args.tol)
    print(f"status\t{'FAIL' if failures else 'PASS'} (tol {args.tol:g})")
    return EXIT_RUNTIME if failures else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "recover": cmd_recover, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"snider: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"snider: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"snider: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
