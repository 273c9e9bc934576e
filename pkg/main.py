from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from rich.console import Console

from adversarial import save_discriminators, train_svc
from config import RunConfig, Settings, config_hash, load_run_config, validate_run_config
from content_ctc import load_content_model, save_content_model, train_content_model
from conversion_model import (
    CONTENT_CKPT,
    MELODY_CKPT,
    SVC_CKPT,
    VARIANTS,
    ConversionPipeline,
    RobustMelodySource,
    SvcModels,
    convert,
    generate_gta_dataset,
    load_models,
    melody_source_for,
    require_checkpoints,
    save_conversion_model,
)
from corpus import describe, generate_corpus, load_manifest
from errors import ConfigError, SvcError
from evalkit import (
    EvalReport,
    ablation_run,
    f0_rmse,
    melody_feature_comparison,
    over_seeds,
    overall_evaluation,
    snr_sweep,
    train_variant,
)
from gradcheck import run_grad_checks, summarize
from io_reports import print_report, write_report
from io_wav import read_wav, write_wav
from melody_extractor import load_melody_extractor, save_melody_extractor, train_melody_extractor
from progress import setup_logging


log = logging.getLogger("main")
console = Console(stderr=True)


# -----------------------------
# Argument parsing
# -----------------------------
def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}") from e


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}") from e


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="INI run config; built-in desk defaults when omitted")
    p.add_argument("--out-dir", default="work", help="artifact root")
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("--progress", action="store_true", help="show a live progress line on stderr")
    return p


def _with_corpus(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", default=None, help="corpus directory (default: <out-dir>/corpus)")


def _with_ckpt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoints", default=None, help="checkpoint directory (default: <out-dir>/checkpoints)")


def _with_seeds(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seeds", type=_ints, default=None, help="comma list of seeds (default: [eval] seeds)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="svc", description="Noise-robust any-to-one singing voice conversion", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _common()

    p = sub.add_parser("datagen", parents=[common], formatter_class=fmt, help="render the synthetic corpus")
    _with_corpus(p)

    p = sub.add_parser("train-content", parents=[common], formatter_class=fmt, help="train the CTC content model")
    _with_corpus(p)
    _with_ckpt(p)
    p.add_argument("--steps", type=int, default=None, help="overrides [content] steps (desk 2000)")

    p = sub.add_parser("train-melody", parents=[common], formatter_class=fmt, help="train the noise-robust melody extractor")
    _with_corpus(p)
    _with_ckpt(p)
    p.add_argument("--steps", type=int, default=None, help="overrides [melody] total_steps (desk 3000)")

    p = sub.add_parser("train-svc", parents=[common], formatter_class=fmt, help="adversarial training of the conversion model")
    _with_corpus(p)
    _with_ckpt(p)
    p.add_argument("--steps", type=int, default=None, help="overrides [adversarial] total_steps (desk 1500)")
    p.add_argument("--warmup-steps", type=int, default=None, help="overrides [adversarial] warmup_steps (desk 500, full scale 50000)")
    p.add_argument("--variant", choices=VARIANTS, default="proposed", help="melody input of the conversion model")

    p = sub.add_parser("gta-gen", parents=[common], formatter_class=fmt, help="write the ground-truth-aligned mel cache")
    _with_corpus(p)
    _with_ckpt(p)

    p = sub.add_parser("convert", parents=[common], formatter_class=fmt, help="convert one WAV to the target singer")
    _with_ckpt(p)
    p.add_argument("--in", dest="inp", required=True, help="source WAV (may contain accompaniment)")
    p.add_argument("--out", required=True, help="converted WAV")

    p = sub.add_parser("eval-f0", parents=[common], formatter_class=fmt, help="F0 RMSE of a pair, or of the test split")
    _with_corpus(p)
    _with_ckpt(p)
    p.add_argument("--in", dest="inp", default=None, help="converted WAV (pair mode)")
    p.add_argument("--ref", default=None, help="source WAV (pair mode)")

    p = sub.add_parser("sweep-snr", parents=[common], formatter_class=fmt, help="F0 RMSE across input SNRs")
    _with_corpus(p)
    _with_ckpt(p)
    _with_seeds(p)
    p.add_argument("--snrs", type=_floats, default=None, help="comma list of SNRs in dB (default: [eval] snrs = 0,5,10,15)")

    for name, text in (
        ("compare-melody-features", "F0 RMSE per melody input variant"),
        ("ablate", "COS-SIM and F0 RMSE per ablation"),
        ("overall-eval", "clean vs. random-accompaniment F0 RMSE"),
    ):
        p = sub.add_parser(name, parents=[common], formatter_class=fmt, help=text)
        _with_corpus(p)
        _with_ckpt(p)
        _with_seeds(p)

    p = sub.add_parser("grad-check", parents=[common], formatter_class=fmt, help="finite-difference audit of all gradients")
    _with_seeds(p)
    p.add_argument("--shapes", type=int, default=20, help="random shapes per primitive and seed")
    p.add_argument("--tolerance", type=float, default=1e-5, help="max relative error (64-bit build)")
    return parser


# -----------------------------
# Helpers
# -----------------------------
def _cfg(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _corpus_dir(args: argparse.Namespace) -> Path:
    return Path(args.corpus) if getattr(args, "corpus", None) else Path(args.out_dir) / "corpus"


def _ckpt_dir(args: argparse.Namespace) -> Path:
    return Path(args.checkpoints) if getattr(args, "checkpoints", None) else Path(args.out_dir) / "checkpoints"


def _seeds(args: argparse.Namespace, cfg: RunConfig) -> tuple[int, ...]:
    return args.seeds if args.seeds else cfg.eval.seeds


def _upstream(ckpt: Path, stage: str):
    require_checkpoints(ckpt, (CONTENT_CKPT, MELODY_CKPT), stage)
    return load_content_model(ckpt / CONTENT_CKPT), load_melody_extractor(ckpt / MELODY_CKPT)


def _emit(report: EvalReport, args: argparse.Namespace, stem: str) -> None:
    paths = write_report(report, Path(args.out_dir) / "reports", stem)
    print_report(report, Console())
    log.info("report %s written: %s", stem, ", ".join(str(p) for p in paths.values()))


# -----------------------------
# Commands
# -----------------------------
def cmd_datagen(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    manifest = generate_corpus(cfg.corpus, _corpus_dir(args), seed=cfg.seed, settings=settings, show_progress=args.progress)
    console.print(describe(manifest))
    return 0


def cmd_train_content(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    if args.steps is not None:
        cfg = replace(cfg, content=replace(cfg.content, steps=args.steps))
        validate_run_config(cfg)
    manifest = load_manifest(_corpus_dir(args))
    ckpt = _ckpt_dir(args)
    res = train_content_model(manifest, cfg, metrics_path=ckpt / "content_metrics.log", show_progress=args.progress)
    save_content_model(res.model, ckpt / CONTENT_CKPT, cfg, cfg.content.steps)
    console.print(f"content model: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}, dev TER {res.dev_token_error_rate}")
    return 0


def cmd_train_melody(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    if args.steps is not None:
        cfg = replace(cfg, melody=replace(cfg.melody, total_steps=args.steps))
        validate_run_config(cfg)
    manifest = load_manifest(_corpus_dir(args))
    ckpt = _ckpt_dir(args)
    res = train_melody_extractor(
        manifest, manifest.noise_audio(), cfg, metrics_path=ckpt / "melody_metrics.log", show_progress=args.progress
    )
    save_melody_extractor(res.model, ckpt / MELODY_CKPT, cfg, cfg.melody.total_steps)
    console.print(f"melody extractor: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}, dev {res.dev_metrics}")
    return 0


def cmd_train_svc(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    adv = cfg.adversarial
    if args.steps is not None:
        adv = replace(adv, total_steps=args.steps)
    if args.warmup_steps is not None:
        adv = replace(adv, warmup_steps=args.warmup_steps)
    cfg = replace(cfg, adversarial=adv)
    validate_run_config(cfg)

    ckpt = _ckpt_dir(args)
    content, melody = _upstream(ckpt, "adversarial")
    manifest = load_manifest(_corpus_dir(args))
    source = melody_source_for(args.variant, melody, cfg.seed)
    res = train_svc(
        content, melody, manifest, cfg,
        melody_source=source, metrics_path=ckpt / f"svc_{args.variant}_metrics.log", show_progress=args.progress,
    )
    name = SVC_CKPT if args.variant == "proposed" else f"svc-{args.variant}.rsvc"
    save_conversion_model(res.conversion, ckpt / name, cfg, args.variant)
    save_discriminators(res.discriminators, ckpt / f"disc-{args.variant}.rsvc", cfg)
    for w in res.warnings:
        console.print(f"[yellow]warning:[/yellow] {w}")
    console.print(f"conversion model ({args.variant}): L_rec {res.curves[0]['L_rec']:.4f} -> {res.curves[-1]['L_rec']:.4f}")
    return 0


def cmd_gta_gen(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    models = load_models(_ckpt_dir(args))
    cache = generate_gta_dataset(models, load_manifest(_corpus_dir(args)), Path(args.out_dir) / "gta")
    for w in cache.warnings:
        console.print(f"[yellow]warning:[/yellow] {w}")
    console.print(f"GTA cache: {len(cache.entries)} utterances -> {cache.index_path}")
    return 0


def cmd_convert(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    models = load_models(_ckpt_dir(args))
    result = convert(models, read_wav(args.inp), cfg.eval.griffin_lim_iters)
    write_wav(args.out, result.audio)
    console.print(f"converted {args.inp} -> {args.out} ({result.audio.duration_s:.2f} s)")
    return 0


def _robust_pipeline(ckpt: Path, cfg: RunConfig) -> ConversionPipeline:
    models: SvcModels = load_models(ckpt)
    return ConversionPipeline(models.content, RobustMelodySource(models.melody), models.conversion, cfg.eval.griffin_lim_iters)


def cmd_eval_f0(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    if args.inp or args.ref:
        if not (args.inp and args.ref):
            raise ConfigError("eval-f0 pair mode needs both --in and --ref")
        value = f0_rmse(read_wav(args.inp), read_wav(args.ref))
        print(f"f0_rmse={value:.6f}")
        return 0
    manifest = load_manifest(_corpus_dir(args))
    report = snr_sweep([_robust_pipeline(_ckpt_dir(args), cfg)], manifest, manifest.noise_audio(), cfg,
                       snrs=(), include_clean=True, settings=settings, show_progress=args.progress)
    report.title = "eval-f0"
    _emit(report, args, "eval-f0")
    return 0


def _multi_seed(
    args: argparse.Namespace,
    cfg: RunConfig,
    harness: Callable[[RunConfig], EvalReport],
) -> EvalReport:
    seeds = _seeds(args, cfg)
    log.info("harness seeds: %s", ",".join(str(s) for s in seeds))
    return over_seeds(harness, cfg, seeds)


def cmd_sweep_snr(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    content, melody = _upstream(_ckpt_dir(args), "evalkit")
    manifest = load_manifest(_corpus_dir(args))
    noises = manifest.noise_audio()
    snrs = args.snrs if args.snrs is not None else cfg.eval.snrs

    def harness(c: RunConfig) -> EvalReport:
        pipelines = [train_variant(content, melody, manifest, c, v, show_progress=args.progress) for v in ("pitch-energy", "proposed")]
        return snr_sweep(pipelines, manifest, noises, c, snrs=snrs, settings=settings, show_progress=args.progress)

    _emit(_multi_seed(args, cfg, harness), args, "sweep-snr")
    return 0


def cmd_compare(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    content, melody = _upstream(_ckpt_dir(args), "evalkit")
    manifest = load_manifest(_corpus_dir(args))
    report = _multi_seed(
        args, cfg,
        lambda c: melody_feature_comparison(content, melody, manifest, c, settings=settings, show_progress=args.progress),
    )
    _emit(report, args, "compare-melody-features")
    return 0


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    content, melody = _upstream(_ckpt_dir(args), "evalkit")
    manifest = load_manifest(_corpus_dir(args))
    report = _multi_seed(
        args, cfg,
        lambda c: ablation_run(content, melody, manifest, c, settings=settings, show_progress=args.progress),
    )
    _emit(report, args, "ablate")
    return 0


def cmd_overall(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    content, melody = _upstream(_ckpt_dir(args), "evalkit")
    manifest = load_manifest(_corpus_dir(args))
    noises = manifest.noise_audio()

    def harness(c: RunConfig) -> EvalReport:
        pipelines = [train_variant(content, melody, manifest, c, v, show_progress=args.progress) for v in ("pitch-energy", "proposed")]
        return overall_evaluation(pipelines, manifest, noises, c, settings=settings, show_progress=args.progress)

    _emit(_multi_seed(args, cfg, harness), args, "overall-eval")
    return 0


def cmd_grad_check(args: argparse.Namespace, cfg: RunConfig, settings: Settings) -> int:
    seeds = args.seeds if args.seeds else (0, 1, 2, 3, 4)
    results = run_grad_checks(seeds, args.shapes, args.tolerance)
    for name, worst in sorted(summarize(results).items()):
        mark = "ok" if worst < args.tolerance else "FAIL"
        print(f"{name:34s} max_rel_err={worst:.3e} {mark}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results)} checks, {failed} failed")
    return 0 if failed == 0 else 1


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig, Settings], int]] = {
    "datagen": cmd_datagen,
    "train-content": cmd_train_content,
    "train-melody": cmd_train_melody,
    "train-svc": cmd_train_svc,
    "gta-gen": cmd_gta_gen,
    "convert": cmd_convert,
    "eval-f0": cmd_eval_f0,
    "sweep-snr": cmd_sweep_snr,
    "compare-melody-features": cmd_compare,
    "ablate": cmd_ablate,
    "overall-eval": cmd_overall,
    "grad-check": cmd_grad_check,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run one subcommand; 0 on success, 1 on a failed module contract, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    settings = Settings()
    setup_logging(settings.log_path, console_level=logging.ERROR)
    logging.getLogger().setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))

    try:
        cfg = _cfg(args)
        log.info("command=%s config_hash=%s seed=%d threads=%d", args.command, config_hash(cfg), cfg.seed, settings.max_threads)
        return COMMANDS[args.command](args, cfg, settings)
    except SvcError as e:
        log.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(dispatch())
