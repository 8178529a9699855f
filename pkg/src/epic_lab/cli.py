"""Command-line entry point: ``epic-lab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 integrity failure
(corrupt checkpoint or dataset file).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError, UsageError
from .checkpoint import IntegrityError, load_checkpoint, save_checkpoint
from .generator import ConfigurationError, STRATEGIES
from .world import DatasetFormatError, generate_dataset, read_dataset, split_records, write_dataset

log = logging.getLogger("epic_lab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CLIUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIUsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------- parser


TRAIN_FLAGS = {
    # flag: (TrainConfig field, type)
    "--seed": ("seed", int), "--mask-ratio": ("mask_ratio", float), "--lambda": ("lambda_itc", float),
    "--steps": ("steps", int), "--batch": ("batch", int), "--lr": ("lr", float),
    "--generator": ("generator", str), "--objectives": ("objectives", str),
    "--teacher": ("teacher", str), "--generator-checkpoint": ("generator_checkpoint", str),
}


def _add_train_flags(p: argparse.ArgumentParser, generator=True) -> None:
    p.add_argument("--data", help="dataset JSONL path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--teacher", help="frozen saliency teacher checkpoint")
    if generator:
        p.add_argument("--mask-ratio", type=float)
        p.add_argument("--lambda", type=float, dest="lambda_")
        p.add_argument("--generator", choices=[s for s in STRATEGIES])
        p.add_argument("--objectives", help="comma list from itm,mlm,itc,gen")
        p.add_argument("--generator-checkpoint", help="LM checkpoint for the fixed strategy")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epic-lab", description="Desk-scale lab for inconsistency-aware vision-language pre-training.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene/caption dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)

    for name, help_ in (("train-teacher", "train the ITM + CMLM teacher"),
                        ("train-baseline", "train the ITM + CMLM baseline"),
                        ("train-dagger-cmlm", "ITM + CMLM with saliency-sampled CMLM masks")):
        _add_train_flags(sub.add_parser(name, help=help_), generator=False)
    _add_train_flags(sub.add_parser("train-epic", help="full inconsistency-aware training"))

    lm = sub.add_parser("train-lm", help="fit a caption-only language model")
    lm.add_argument("--data")
    lm.add_argument("--out")
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--steps", type=int, default=1500)

    pb = sub.add_parser("probe-bias", help="VLM vs LM masked-token accuracy per epoch")
    pb.add_argument("--data")
    pb.add_argument("--out")
    pb.add_argument("--seed", type=int, default=0, help="first seed")
    pb.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    pb.add_argument("--steps", type=int, default=1200)
    pb.add_argument("--batch", type=int, default=32)

    pc = sub.add_parser("probe-corruption", help="accuracy drop under corrupted context")
    pc.add_argument("--data")
    pc.add_argument("--out")
    pc.add_argument("--models", help="probe-bias output directory")
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--seeds", type=int, default=3)
    pc.add_argument("--taus", default="0.1,0.3,0.5")

    sw = sub.add_parser("sweep-mask-ratio", help="one training run per mask ratio")
    _add_train_flags(sw)
    sw.add_argument("--ratios", default="0.15,0.25,0.35,0.45")

    ev = sub.add_parser("eval", help="consistency detection and retrieval on the held-out split")
    ev.add_argument("--data")
    ev.add_argument("--model", help="VLM checkpoint")
    ev.add_argument("--out", help="optional JSON output path")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--head", choices=["probe", "model"], default="probe")

    ex = sub.add_parser("export-saliency", help="per-token saliency table")
    ex.add_argument("--data")
    ex.add_argument("--model")
    ex.add_argument("--out")

    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    return p


# ---------------------------------------------------------------- helpers


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.lstrip("-").replace("-", "_"), None) in (None, ""):
            raise CLIUsageError(f"missing required flag {name}")


def _require_file(args, flag: str) -> Path:
    _require(args, flag)
    path = Path(getattr(args, flag.lstrip("-").replace("-", "_")))
    if not path.is_file():
        raise CLIUsageError(f"{flag}: no such file: {path}")
    return path


def _train_config(args, base: dict | None = None):
    from .trainer import TrainConfig, read_config

    values = dict(base or {})
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise CLIUsageError(f"--config: no such file: {args.config}")
        values.update(read_config(args.config))
    for flag, (field, _) in TRAIN_FLAGS.items():
        attr = "lambda_" if flag == "--lambda" else flag[2:].replace("-", "_")
        value = getattr(args, attr, None)
        if value is not None:
            values[field] = value
    try:
        return TrainConfig.from_mapping(values)
    except TypeError as exc:
        raise CLIUsageError(str(exc)) from exc


def _manifest(out_dir: Path, argv, command: str, config: dict, seed, data: Path | None, outputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "dataset": str(data) if data else None,
        "dataset_sha256": _sha256(data) if data else None,
        "code_version": __version__,
        "outputs": [str(o) for o in outputs],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _print_paths(*paths) -> None:
    for p in paths:
        print(p)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    if args.n < 1:
        raise CLIUsageError("--n must be >= 1")
    records = generate_dataset(args.n, args.seed)
    write_dataset(records, args.out)
    _print_paths(args.out)
    return EXIT_OK


def _run_training(args, argv, overrides: dict) -> int:
    from .trainer import train, write_metrics

    data = _require_file(args, "--data")
    _require(args, "--out")
    cfg = _train_config(args)
    cfg = dataclasses.replace(cfg, **overrides) if overrides else cfg
    if args.command == "train-dagger-cmlm" and not cfg.teacher:
        raise CLIUsageError("missing required flag --teacher")
    out = Path(args.out)
    ckpt, metrics = out / "vlm.ckpt", out / "metrics.jsonl"
    _manifest(out, argv, args.command, cfg.to_dict(), cfg.seed, data, [ckpt, metrics, out / "epochs"])
    records = read_dataset(data)
    (out / "epochs").mkdir(exist_ok=True)
    with open(metrics, "w") as fh:
        def sink(rec):
            fh.write(json.dumps(rec) + "\n")
            log.debug("step %d l_total %.4f", rec["step"], rec["l_total"])
        result = train(cfg, records, sink=sink, checkpoint_dir=out / "epochs")
    save_checkpoint(result.model, ckpt)
    log.info("finished %d steps, final l_total %.4f", cfg.steps, result.metrics[-1]["l_total"])
    _print_paths(ckpt, metrics)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    overrides = {}
    if args.command in ("train-teacher", "train-baseline"):
        overrides = {"objectives": ("itm", "mlm"), "cmlm_masking": "uniform"}
    elif args.command == "train-dagger-cmlm":
        overrides = {"objectives": ("itm", "mlm"), "cmlm_masking": "saliency"}
    return _run_training(args, argv, overrides)


def cmd_train_lm(args, argv) -> int:
    from .analysis import fit_text_lm

    data = _require_file(args, "--data")
    _require(args, "--out")
    out = Path(args.out)
    _manifest(out, argv, args.command, {"steps": args.steps}, args.seed, data, [out / "lm.ckpt"])
    lm = fit_text_lm(read_dataset(data), args.seed, steps=args.steps)
    save_checkpoint(lm, out / "lm.ckpt")
    _print_paths(out / "lm.ckpt")
    return EXIT_OK


def cmd_probe_bias(args, argv) -> int:
    from .analysis import aggregate_curves, probe_modality_bias_seed, write_curves

    data = _require_file(args, "--data")
    _require(args, "--out")
    out = Path(args.out)
    seeds = list(range(args.seed, args.seed + args.seeds))
    csv_path = out / "modality_bias.csv"
    _manifest(out, argv, args.command, {"steps": args.steps, "batch": args.batch, "seeds": seeds},
              args.seed, data, [csv_path] + [out / f"{k}-seed{s}.ckpt" for s in seeds for k in ("vlm", "lm")])
    records = read_dataset(data)
    vcs, lcs = [], []
    for s in seeds:
        vc, lc, vlm, lm = probe_modality_bias_seed(records, s, steps=args.steps, batch=args.batch)
        vcs.append(vc)
        lcs.append(lc)
        save_checkpoint(vlm, out / f"vlm-seed{s}.ckpt")
        save_checkpoint(lm, out / f"lm-seed{s}.ckpt")
    write_curves([aggregate_curves(vcs), aggregate_curves(lcs)], csv_path)
    _print_paths(csv_path)
    return EXIT_OK


def cmd_probe_corruption(args, argv) -> int:
    from .analysis import fit_text_lm, probe_corruption, write_curves

    data = _require_file(args, "--data")
    _require(args, "--out", "--models")
    models = Path(args.models)
    seeds = list(range(args.seed, args.seed + args.seeds))
    for s in seeds:
        for k in ("vlm", "lm"):
            if not (models / f"{k}-seed{s}.ckpt").is_file():
                raise CLIUsageError(f"--models: missing {k}-seed{s}.ckpt (run probe-bias first)")
    out = Path(args.out)
    csv_path = out / "corruption.csv"
    _manifest(out, argv, args.command, {"taus": _csv_floats(args.taus), "seeds": seeds}, args.seed, data,
              [csv_path])
    records = read_dataset(data)
    _, held = split_records(records)
    vlms = [load_checkpoint(models / f"vlm-seed{s}.ckpt", expect="vlm") for s in seeds]
    lms = [load_checkpoint(models / f"lm-seed{s}.ckpt", expect="lm") for s in seeds]
    # the recovery LM is trained separately from the probed LM
    recoveries = [fit_text_lm(records, 1000 + s) for s in seeds]
    _, curves = probe_corruption(vlms, lms, recoveries, held, _csv_floats(args.taus), seeds)
    write_curves(list(curves), csv_path)
    _print_paths(csv_path)
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    from .analysis import mask_ratio_sweep

    data = _require_file(args, "--data")
    _require(args, "--out")
    cfg = _train_config(args)
    ratios = _csv_floats(args.ratios)
    out = Path(args.out)
    csv_path = out / "mask_ratio_sweep.csv"
    _manifest(out, argv, args.command, dict(cfg.to_dict(), ratios=ratios), cfg.seed, data, [csv_path])
    teacher = load_checkpoint(cfg.teacher, expect="vlm") if cfg.teacher else None
    rows = mask_ratio_sweep(cfg, read_dataset(data), teacher, ratios, eval_seed=cfg.seed)
    with open(csv_path, "w") as fh:
        keys = list(rows[0])
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[k]) for k in keys) + "\n")
    _print_paths(csv_path)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .analysis import corrupt_heldout, eval_consistency_detection, eval_retrieval, fit_text_lm

    data = _require_file(args, "--data")
    model_path = _require_file(args, "--model")
    model = load_checkpoint(model_path, expect="vlm")
    records = read_dataset(data)
    _, held = split_records(records)
    fill = fit_text_lm(records, args.seed)
    det = eval_consistency_detection(model, corrupt_heldout(held, fill, args.seed), head=args.head,
                                     seed=args.seed)
    ret = eval_retrieval(model, held, seed=args.seed)
    result = {"detection": det, "retrieval": ret}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _print_paths(args.out)
    else:
        print(text)
    return EXIT_OK


def cmd_export_saliency(args, argv) -> int:
    from .analysis import saliency_table

    data = _require_file(args, "--data")
    model_path = _require_file(args, "--model")
    _require(args, "--out")
    model = load_checkpoint(model_path, expect="vlm")
    rows = saliency_table(model, read_dataset(data))
    with open(args.out, "w") as fh:
        fh.write("record_seed,position,word,alpha,ground_truth_salient\n")
        for seed, pos, word, alpha, sal in rows:
            fh.write(f"{seed},{pos},{word},{alpha!r},{int(sal)}\n")
    _print_paths(args.out)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise CLIUsageError(f"manifest: no such file: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("dataset") and _sha256(manifest["dataset"]) != manifest["dataset_sha256"]:
        raise IntegrityError("dataset checksum differs from the manifest")
    return main(manifest["argv"])


COMMANDS = {
    "gen-data": cmd_gen_data, "train-teacher": cmd_train, "train-baseline": cmd_train,
    "train-epic": cmd_train, "train-dagger-cmlm": cmd_train, "train-lm": cmd_train_lm,
    "probe-bias": cmd_probe_bias, "probe-corruption": cmd_probe_corruption,
    "sweep-mask-ratio": cmd_sweep, "eval": cmd_eval, "export-saliency": cmd_export_saliency,
    "replay": cmd_replay,
}


def _configure_logging() -> None:
    level = os.environ.get("EPIC_LAB_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise CLIUsageError(f"EPIC_LAB_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("epic_lab").setLevel(LOG_LEVELS[level])


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CLIUsageError("a subcommand is required")
        return COMMANDS[args.command](args, argv)
    except CLIUsageError as exc:
        print(f"epic-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigurationError) as exc:
        print(f"epic-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, DatasetFormatError) as exc:
        print(f"epic-lab: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (NumericError, OSError, RuntimeError) as exc:
        print(f"epic-lab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
