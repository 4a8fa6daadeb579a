"""Command line entry point: generate data, train variants, evaluate, compare.

Every command writes a manifest.json snapshotting its configuration, the
input data fingerprint, and library versions; two runs with equal
manifests produce equal results. Config files are JSON; flags override
file values, and all randomness flows from one top-level seed.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data_model import build_bow_features, build_vocabularies, ingest_interactions, temporal_split, write_interactions
from .evaluation import DEFAULT_KS, MetricsReport, evaluate
from .synthgen import SynthConfig, generate
from .towers import ModelConfig, Variant, build_model
from .trainer import (
    TrainConfig,
    load_checkpoint,
    read_log_jsonl,
    save_checkpoint,
    steps_to_threshold,
    train,
    write_log_csv,
    write_log_jsonl,
)


class ConfigError(ValueError):
    pass


class MissingReportError(FileNotFoundError):
    pass


DEFAULT_CONFIG = {
    "synth": {
        "n_users": 20_000,
        "n_stores": 1_000,
        "n_clusters": 20,
        "zipf_exponent": 1.0,
        "days": 127,
        "orders_per_user_mean": 12.0,
        "user_sample_fraction": 1.0,
        "noise": 0.1,
    },
    "data": {"format": "jsonl", "validation_days": 7, "window_days": 120, "max_bag_len": 50},
    "model": {"dim": 32, "temperature": 0.1, "pooling": "mean"},
    "train": {
        "batch_size": 256,
        "epochs": 10,
        "lr": 0.02,
        "cache_capacity": 6144,
        "eval_every_steps": 50,
        "eval_sample_users": 512,
        "use_logq": True,
        "use_cache": True,
        "use_mask": True,
        "bag_anchor": "global",
    },
    "eval": {"ks": list(DEFAULT_KS)},
    "seed": 0,
}


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for section, values in user_cfg.items():
            if section == "seed":
                cfg["seed"] = values
                continue
            if section not in cfg:
                raise ConfigError(f"unknown config section: {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key: {section}.{key}")
                cfg[section][key] = value
    if seed_override is not None:
        cfg["seed"] = seed_override
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(path: Path, command: str, cfg: dict, artifacts: dict, data_path: Path | None = None):
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "data_sha256": _sha256(data_path) if data_path else None,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "versions": {
            "ttr": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _make_out_dir(out: Path, force: bool) -> None:
    try:
        out.mkdir(parents=True, exist_ok=False)
    except FileExistsError:
        if not force:
            raise ConfigError(f"output directory {out} exists; pass --force to reuse it") from None


def _prepare(data_path: Path, cfg: dict):
    records = ingest_interactions(data_path, cfg["data"]["format"])
    user_vocab, store_vocab = build_vocabularies(records)
    split = temporal_split(records, cfg["data"]["validation_days"])
    features = build_bow_features(
        split.train,
        user_vocab,
        store_vocab,
        as_of=split.split_time,
        window_days=cfg["data"]["window_days"],
        max_bag_len=cfg["data"]["max_bag_len"],
    )
    return records, user_vocab, store_vocab, split, features


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"output file {out} exists; pass --force to overwrite")
    try:
        synth = SynthConfig(seed=cfg["seed"], **cfg["synth"])
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    records = generate(synth)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_interactions(records, out, cfg["data"]["format"])
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "generate", cfg, {"data": out}, data_path=out)
    print(f"wrote {len(records)} interactions to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    variant = Variant.parse(args.variant)
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    out = Path(args.out)
    _make_out_dir(out, args.force)

    _, user_vocab, store_vocab, split, features = _prepare(data_path, cfg)
    model = build_model(
        ModelConfig(variant=variant, seed=cfg["seed"], **cfg["model"]),
        n_users=user_vocab.n,
        n_stores=store_vocab.n,
    )
    train_cfg = TrainConfig(
        seed=cfg["seed"],
        window_days=cfg["data"]["window_days"],
        max_bag_len=cfg["data"]["max_bag_len"],
        **cfg["train"],
    )
    print(
        f"training {variant.value}: {len(split.train)} pairs, {user_vocab.n} users, "
        f"{store_vocab.n} stores, {train_cfg.epochs} epochs"
    )
    model, log = train(model, split, features, train_cfg, user_vocab, store_vocab)

    checkpoint = out / "checkpoint.ttr"
    save_checkpoint(model, checkpoint)
    write_log_jsonl(log, out / "training_log.jsonl")
    write_log_csv(log, out / "training_log.csv")
    _write_manifest(
        out / "manifest.json",
        f"train:{variant.value}",
        cfg,
        {"checkpoint": checkpoint, "log_jsonl": out / "training_log.jsonl", "log_csv": out / "training_log.csv"},
        data_path=data_path,
    )
    if log.evals:
        final = log.evals[-1].hit_rate
        print("final validation-subsample hit rate: " + ", ".join(f"@{k}={v:.4f}" for k, v in sorted(final.items())))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.ks:
        try:
            cfg["eval"]["ks"] = [int(k) for k in args.ks.split(",")]
        except ValueError:
            raise ConfigError(f"--ks must be comma-separated integers, got {args.ks!r}") from None
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")

    model = load_checkpoint(checkpoint)
    _, user_vocab, store_vocab, split, features = _prepare(data_path, cfg)
    report = evaluate(model, split.validation, features, user_vocab, store_vocab, ks=cfg["eval"]["ks"])

    out = Path(args.out) if args.out else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    header, row = report.csv_row()
    (out / "metrics.csv").write_text(",".join(header) + "\n" + ",".join(row) + "\n", encoding="utf-8")
    _write_manifest(
        out / "evaluate.manifest.json",
        "evaluate",
        cfg,
        {"metrics": out / "metrics.json", "checkpoint": checkpoint},
        data_path=data_path,
    )
    print(report.to_json())
    return 0


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least 2 run directories")
    rows = []
    for run in args.runs:
        run_dir = Path(run)
        metrics_path = run_dir / "metrics.json"
        if not metrics_path.exists():
            raise MissingReportError(f"run {run_dir} has no metrics.json (run `ttr evaluate` first)")
        report = MetricsReport.load(metrics_path)
        log_path = run_dir / "training_log.jsonl"
        steps = None
        if log_path.exists():
            log = read_log_jsonl(log_path)
            if log.evals and args.threshold_k in log.evals[0].hit_rate:
                steps = steps_to_threshold(log, "hit_rate", args.threshold_k, args.threshold)
        rows.append((run_dir.name, report, steps))

    ks = sorted(rows[0][1].hit_rate)
    max_k = ks[-1]
    rows.sort(key=lambda r: -r[1].hit_rate[max_k])

    header = ["run", "model"] + [f"hit_rate_at_{k}" for k in ks] + ["parameter_count", "steps_to_threshold"]
    table = [
        [name, rep.variant]
        + [f"{rep.hit_rate[k]:.4f}" for k in ks]
        + [str(rep.parameter_count), "" if steps is None else str(steps)]
        for name, rep, steps in rows
    ]

    widths = [max(len(header[i]), *(len(r[i]) for r in table)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in table]
    print("\n".join(lines))

    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join([",".join(header)] + [",".join(r) for r in table]) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttr", description="Two-tower retrieval experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a synthetic interaction file")
    p_gen.add_argument("--config", help="JSON config file")
    p_gen.add_argument("--seed", type=int, help="override the config seed")
    p_gen.add_argument("--out", required=True, help="output interaction file")
    p_gen.add_argument("--force", action="store_true", help="overwrite an existing output file")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train one model variant")
    p_train.add_argument("--variant", required=True, choices=["dmf", "bow", "bow-shared"])
    p_train.add_argument("--data", required=True, help="interaction file from `ttr generate`")
    p_train.add_argument("--config", help="JSON config file")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", required=True, help="run directory (must not exist unless --force)")
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the validation split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--config", help="JSON config file")
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--ks", help="comma-separated cutoffs, e.g. 5,20,100")
    p_eval.add_argument("--out", help="directory for metrics files (default: checkpoint dir)")
    p_eval.set_defaults(func=cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="tabulate metrics across run directories")
    p_cmp.add_argument("runs", nargs="+", help="run directories containing metrics.json")
    p_cmp.add_argument("--out", help="also write the table as CSV")
    p_cmp.add_argument("--threshold", type=float, default=0.35, help="hit-rate threshold for steps_to_threshold")
    p_cmp.add_argument("--threshold-k", type=int, default=20, dest="threshold_k")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
