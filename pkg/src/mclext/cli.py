"""Command-line entry point: ``mclext <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as runcfg
from . import plotting
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, estimate_flops, extract, load_model
from .model.checkpoint import load_tensors
from .dsp import StftConfig
from .objectives import score_utterance, summarize
from .scenesim import WavSourceBank, build_corpus, load_pair, read_manifest
from .trainer import Trainer, gradcheck_suite, predict
from .wavio import read_wav, write_wav

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
log = logging.getLogger("mclext")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat dotted-key YAML file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_split(manifest: Path, sample_rate: int):
    records = read_manifest(manifest)
    if not records:
        raise DataError(f"manifest {manifest} has no records")
    return [load_pair(r, manifest.parent, sample_rate) for r in records]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = runcfg.load_run_config(args.config, args.overrides)
    neg = args.neg_fraction if args.neg_fraction is not None else cfg.train.neg_fraction
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise DataError(f"output directory {out} is not empty (use --overwrite)")
    source = WavSourceBank(args.wav_root, cfg.scene.sample_rate) if args.wav_root else None
    manifests = build_corpus(
        args.n_train, args.n_val, args.n_test, neg, cfg.scene, out, args.seed,
        geometry=cfg.geometry, source=source, overwrite=args.overwrite,
    )
    _write_atomic(out / "config.yaml", runcfg.dump_flat(cfg))
    for split, path in manifests.items():
        print(f"{split}\t{path}")
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.loss is not None:
        extra["loss.kind"] = args.loss
    if args.max_steps is not None:
        extra["train.max_steps"] = args.max_steps
    if args.epochs is not None:
        extra["train.max_epochs"] = args.epochs
    cfg = runcfg.load_run_config(args.config, args.overrides, extra)
    corpus = Path(args.corpus)
    train_pairs = _load_split(corpus / "train.jsonl", cfg.stft.sample_rate)
    val_path = corpus / "val.jsonl"
    val_pairs = _load_split(val_path, cfg.stft.sample_rate) if val_path.exists() else []
    out = Path(args.out)
    if args.resume:
        tr = Trainer.load(args.resume, train_pairs, val_pairs, cfg.train)
    else:
        tr = Trainer(cfg.model, cfg.train, train_pairs, val_pairs, cfg.stft)
    history = tr.fit(out, out / "train_log.jsonl")
    plotting.plot_training(history, out / "train_loss.png")
    print(f"steps\t{tr.global_step}\nlr\t{tr.lr}\nbest\t{tr.best_metric}\ncheckpoint\t{out / 'last.ckpt'}")
    return 0


def _checkpoint_stft(path) -> StftConfig:
    _, header = load_tensors(path)
    return StftConfig(**header["stft"]) if "stft" in header else StftConfig()


def cmd_eval(args) -> int:
    if not args.oracle and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint unless --oracle is given")
    manifest = Path(args.manifest)
    if args.checkpoint is not None:
        cfg, params, _ = load_model(args.checkpoint)
        stft_cfg = _checkpoint_stft(args.checkpoint)
        ref = cfg.ref_channel
    else:
        cfg, params, stft_cfg, ref = None, None, StftConfig(sample_rate=args.sample_rate), 0
    pairs = _load_split(manifest, stft_cfg.sample_rate)
    if args.oracle:
        ests = [p.target for p in pairs]
    else:
        if pairs[0].mixture.shape[0] != cfg.channels:
            raise DataError(f"manifest mixtures have {pairs[0].mixture.shape[0]} channels, checkpoint expects C={cfg.channels}")
        ests = predict(params, cfg, pairs, stft_cfg, args.batch_size)
    records = [score_utterance(p.pair_id, p.polarity, e, p.target, p.mixture[ref]) for p, e in zip(pairs, ests)]
    summary = summarize(records)
    report = Path(args.report)
    lines = [r.to_json() for r in records] + [json.dumps(summary)]
    _write_atomic(report, "\n".join(lines) + "\n")
    figure = Path(args.figure) if args.figure else report.with_suffix(".png")
    plotting.plot_eval(records, figure)
    for key in ("n", "n_positive", "n_negative", "si_sdr_mean", "si_sdri_mean", "snri_mean", "esr_mean"):
        print(f"{key}\t{summary[key]}")
    return 0


def cmd_extract(args) -> int:
    cfg, params, _ = load_model(args.checkpoint)
    stft_cfg = _checkpoint_stft(args.checkpoint)
    mix, _ = read_wav(args.mixture, stft_cfg.sample_rate)
    enroll, _ = read_wav(args.enrollment, stft_cfg.sample_rate)
    if mix.shape[0] != cfg.channels:
        raise DataError(f"{args.mixture} has {mix.shape[0]} channels; the checkpoint expects C={cfg.channels}")
    if enroll.shape[0] != 1:
        raise DataError(f"{args.enrollment} must be mono, got {enroll.shape[0]} channels")
    est = extract(mix, enroll[0], cfg, params, stft_cfg)
    write_wav(args.out, est, stft_cfg.sample_rate, args.subtype)
    print(f"samples\t{est.shape[-1]}\nout\t{args.out}")
    return 0


def flops_table(model: ModelConfig, stft_cfg: StftConfig, mix_s: float, enroll_s: float) -> list[dict]:
    depths = sorted({0, max(model.downsample_depth, 1)})
    rows = []
    for g in depths:
        for ell in range(1, model.n_blocks + 1):
            m = replace(model, enroll_blocks=ell, downsample_depth=g)
            macs = estimate_flops(m, stft_cfg, mix_s, enroll_s)
            rows.append({"G": g, "enroll_blocks": ell, "gmac_per_s": macs / 1e9})
    return rows


def cmd_flops(args) -> int:
    cfg = runcfg.load_run_config(args.config, args.overrides)
    model = cfg.model
    if args.preset:
        model = ModelConfig.preset(
            args.preset, channels=model.channels, downsample_depth=model.downsample_depth, fusion=model.fusion
        )
    rows = flops_table(model, cfg.stft, args.mix_seconds, args.enroll_seconds)
    lines = ["G\tenroll_blocks\tgmac_per_s"] + [f"{r['G']}\t{r['enroll_blocks']}\t{r['gmac_per_s']:.6f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_atomic(Path(args.out), text)
        plotting.plot_flops(rows, Path(args.figure) if args.figure else Path(args.out).with_suffix(".png"))
    elif args.figure:
        plotting.plot_flops(rows, Path(args.figure))
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(tolerance=args.tolerance, max_entries=args.max_entries, seed=args.seed)
    print("loss\tgroup\tmax_rel_err\tpassed")
    for r in results:
        print(f"{r.loss}\t{r.group}\t{r.max_rel_err:.3e}\t{r.passed}")
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericalError("gradient check failed for " + ", ".join(f"{r.loss}:{r.group}" for r in failed))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mclext", description="Prompted multi-channel target speaker extraction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus with manifests")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--neg-fraction", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wav-root", help="use real speech from <root>/<speaker>/*.wav instead of synthetic sources")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a corpus directory")
    _add_config_args(p)
    p.add_argument("--corpus", required=True, help="directory with train.jsonl (and optionally val.jsonl)")
    p.add_argument("--out", required=True, help="directory for checkpoints and the training log")
    p.add_argument("--loss", choices=("si_sdr", "log_mse"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSONL output: one record per row plus a summary")
    p.add_argument("--figure", help="PNG path (default: report path with .png)")
    p.add_argument("--oracle", action="store_true", help="score the reference itself as the estimate")
    p.add_argument("--sample-rate", type=int, default=8000, help="expected rate in --oracle mode without a checkpoint")
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="extract the enrolled speaker from one mixture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--enrollment", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subtype", choices=("float32", "pcm16"), default="float32")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("flops", help="MAC table across enrollment blocks and downsampler depth")
    _add_config_args(p)
    p.add_argument("--preset", choices=("desk", "v1", "v2"))
    p.add_argument("--mix-seconds", type=float, default=4.0)
    p.add_argument("--enroll-seconds", type=float, default=4.0)
    p.add_argument("--out", help="TSV output path (the table is always printed)")
    p.add_argument("--figure", help="PNG path (default: TSV path with .png)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline on a tiny config")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--max-entries", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
