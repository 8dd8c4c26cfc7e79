"""Command-line entry points.

Subcommands: gen-data, train, eval, analyze, params.  Exit codes: 0 on
success, 1 on runtime errors, 2 on usage errors (bad flags, missing
files).  Values may come from flags, a JSON --config file, or built-in
defaults, in that precedence order.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import (
    average_binnings,
    bin_by_t60,
    collect_attention,
    default_t60_edges,
    write_t60_bins_csv,
)
from .dsp import generate_corpus, load_manifest, load_manifest_samples, write_corpus
from .model import ModelConfig, count_parameters, init_model, load_model
from .training import TrainConfig, mean_sisdr, train, write_loss_curve

__all__ = ["main"]


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dereverb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--variant", choices=["tcn", "wd-tcn"])
        p.add_argument("--x", type=int, help="conv blocks per stack")
        p.add_argument("--r", type=int, help="stack repeats")
        p.add_argument("--n", type=int, help="encoder channels")
        p.add_argument("--b", type=int, help="bottleneck channels")
        p.add_argument("--h", type=int, help="block channels")
        p.add_argument("--p", type=int, help="depthwise kernel size")
        p.add_argument("--l-bl", type=int, help="encoder frame length")
        p.add_argument("--seed", type=int)

    gen = sub.add_parser("gen-data", help="generate a synthetic reverberant corpus")
    gen.add_argument("--config", help="JSON file with default flag values")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--count", type=int)
    gen.add_argument("--duration", type=float, help="clip length in seconds")
    gen.add_argument("--fs", type=int, help="sample rate in Hz")
    gen.add_argument("--t60-lo", type=float)
    gen.add_argument("--t60-hi", type=float)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train a model on a corpus manifest")
    add_model_flags(tr)
    tr.add_argument("--corpus", required=True, help="manifest.jsonl path")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and reports")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--clip-seconds", type=float)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="mean SISDR over a manifest")
    ev.add_argument("--config", help="JSON file with default flag values")
    ev.add_argument("--corpus", required=True, help="manifest.jsonl path")
    ev.add_argument("--checkpoint", help="model checkpoint; without it the unprocessed input is scored")
    ev.set_defaults(func=_cmd_eval)

    an = sub.add_parser("analyze", help="attention weights binned by T60")
    an.add_argument("--config", help="JSON file with default flag values")
    an.add_argument("--corpus", required=True, help="manifest.jsonl path")
    an.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        help="wd-tcn checkpoint (repeat to average over several models)",
    )
    an.add_argument("--out", required=True, help="output directory")
    an.add_argument("--t60-bins", help="comma-separated bin edges, e.g. 0.1,0.25,0.4,0.55,0.7,0.85,1.0")
    an.set_defaults(func=_cmd_analyze)

    pa = sub.add_parser("params", help="itemised trainable-parameter counts")
    add_model_flags(pa)
    pa.set_defaults(func=_cmd_params)

    return parser


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _get(args, config: dict, key: str, default=None):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _model_config(args, config: dict) -> ModelConfig:
    x = _get(args, config, "x")
    r = _get(args, config, "r")
    if x is None or r is None:
        raise UsageError("--x and --r are required (flags or config file)")
    return ModelConfig(
        X=int(x),
        R=int(r),
        variant=_get(args, config, "variant", "wd-tcn"),
        N=int(_get(args, config, "n", 512)),
        B=int(_get(args, config, "b", 128)),
        H=int(_get(args, config, "h", 512)),
        P=int(_get(args, config, "p", 3)),
        L_BL=int(_get(args, config, "l-bl", 16)),
    )


def _cmd_gen_data(args) -> int:
    config = _load_config_file(args)
    samples = generate_corpus(
        count=int(_get(args, config, "count", 16)),
        duration_s=float(_get(args, config, "duration", 4.0)),
        fs=int(_get(args, config, "fs", 8000)),
        t60_range=(float(_get(args, config, "t60-lo", 0.1)), float(_get(args, config, "t60-hi", 1.0))),
        seed=int(_get(args, config, "seed", 0)),
    )
    manifest = write_corpus(samples, args.out)
    print(f"wrote {len(samples)} sample pairs and {manifest}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config_file(args)
    model_cfg = _model_config(args, config)
    seed = int(_get(args, config, "seed", 0))
    train_cfg = TrainConfig(
        epochs=int(_get(args, config, "epochs", 100)),
        batch_size=int(_get(args, config, "batch-size", 4)),
        lr_initial=float(_get(args, config, "lr", 0.001)),
        clip_seconds=float(_get(args, config, "clip-seconds", 4.0)),
        seed=seed,
        max_steps=(lambda v: int(v) if v is not None else None)(_get(args, config, "max-steps")),
    )
    corpus = load_manifest_samples(args.corpus)
    model = init_model(model_cfg, seed=seed)
    out = Path(args.out)
    state = train(model, corpus, train_cfg, out_dir=out)

    from .plotting import save_loss_curve_figure

    write_loss_curve(out / "loss_curve.csv", state.history)
    save_loss_curve_figure(state.history, out / "loss_curve.png")
    last = state.history[-1]
    print(
        f"trained {model_cfg.variant} X={model_cfg.X} R={model_cfg.R} for {last.epoch} epochs "
        f"({state.adam.step_count} steps): train loss {last.train_loss_db:.2f} dB, "
        f"val loss {last.val_loss_db:.2f} dB"
    )
    print(f"reports in {out}: loss_curve.csv, loss_curve.png, checkpoint_best.json")
    return 0


def _cmd_eval(args) -> int:
    samples = load_manifest_samples(args.corpus)
    model = load_model(args.checkpoint) if args.checkpoint else None
    value = mean_sisdr(samples, model)
    print(f"mean SISDR: {value:.2f} dB")
    return 0


def _cmd_analyze(args) -> int:
    config = _load_config_file(args)
    edges_text = _get(args, config, "t60-bins")
    if edges_text:
        edges = [float(v) for v in str(edges_text).split(",") if v.strip()]
    else:
        edges = default_t60_edges()
    samples = load_manifest_samples(args.corpus)
    ids = [rec["path_in"] for rec in load_manifest(args.corpus)]

    per_model = []
    spill_total = 0
    for ckpt in args.checkpoint:
        model = load_model(ckpt)
        records = collect_attention(model, samples, ids=ids)
        result = bin_by_t60(records, edges)
        per_model.append(result.bins)
        if result.spilled:
            spill_total += len(result.spilled)
            spilled_utts = sorted({r.utterance_id for r in result.spilled})
            print(
                f"warning: {len(result.spilled)} records from {ckpt} fall outside the bins: "
                + ", ".join(f"{u} (t60={next(r.t60 for r in result.spilled if r.utterance_id == u):.3f})" for u in spilled_utts),
                file=sys.stderr,
            )
    bins = average_binnings(per_model)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_t60_bins_csv(out / "t60_bins.csv", bins)

    from .plotting import save_attention_figure

    save_attention_figure(bins, out / "t60_bins.png")
    for b in bins:
        print(
            f"t60 [{b.bin_lo:.2f}, {b.bin_hi:.2f}]: mean_a1={float(b.mean_a[0]):.4f} "
            f"mean_a2={float(b.mean_a[1]):.4f} (n={b.count})"
        )
    print(f"reports in {out}: t60_bins.csv, t60_bins.png")
    return 0 if spill_total == 0 else 0


def _cmd_params(args) -> int:
    config = _load_config_file(args)
    report = count_parameters(_model_config(args, config))
    print(report.format_table())
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed the message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
