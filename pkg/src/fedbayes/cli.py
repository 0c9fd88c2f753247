"""Command-line entry point: ``fedbayes run|validate|version``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from fedbayes import __version__
from fedbayes.attacks import AttackSpec, cross_trigger, poison_test_set
from fedbayes.config import ConfigError, ExperimentFile, ExperimentSpec, parse_config, to_dict
from fedbayes.datasets import (
    Dataset,
    PartitionPlan,
    load_idx_files,
    partition_iid,
    split_holdout,
    subsample_per_class,
    synth_generate,
)
from fedbayes.federation import FederationConfig, MetricsRecord, pretrain, run_experiment
from fedbayes.nn import TrainConfig

log = logging.getLogger("fedbayes")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def csv_header(client_count: int) -> list[str]:
    return ["round", "strategy", "clean_accuracy", "clean_loss", "triggered_accuracy",
            "attack_success_rate"] + [f"client_{i}_acc" for i in range(client_count)]


def metrics_csv(records: Sequence[MetricsRecord], client_count: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(client_count))
    for r in records:
        writer.writerow([r.round, r.strategy, _fmt(r.clean_accuracy), _fmt(r.clean_loss),
                         _fmt(r.triggered_accuracy), _fmt(r.attack_success_rate),
                         *(_fmt(a) for a in r.per_client_accuracy)])
    return buf.getvalue()


def federation_config(spec: ExperimentSpec) -> FederationConfig:
    return FederationConfig(
        rounds=spec.rounds, local_epochs=spec.local_epochs, client_count=spec.client_count,
        strategy=spec.strategy,
        train_cfg=TrainConfig(spec.local_epochs, spec.batch_size, spec.learning_rate, spec.master_seed),
        attack_assignments=spec.attacks, master_seed=spec.master_seed,
        pretrain_epochs=spec.pretrain_epochs, pretrain_target_accuracy=spec.pretrain_target_accuracy,
        pretrain_learning_rate=spec.pretrain_learning_rate,
        hidden_sizes=spec.hidden_sizes, server_lr=spec.server_lr, beta1=spec.beta1,
        beta2=spec.beta2, tau=spec.tau, penalty=spec.penalty, granularity=spec.granularity,
        workers=spec.workers,
    )


def load_data(spec: ExperimentSpec) -> tuple[list[Dataset], Dataset]:
    """Partitions (pretrain + clients) and the clean test set for one experiment."""
    src = spec.data
    subsets = spec.client_count + 1
    if src.kind == "synthetic":
        per_class = math.ceil(src.per_client_examples * subsets / src.class_count)
        full = synth_generate(src.synthetic_seed, per_class + src.test_per_class, src.class_count,
                              src.image_size * src.image_size, src.synthetic_noise)
        train, test = split_holdout(full, src.test_per_class, src.synthetic_seed + 1)
    else:
        train = load_idx_files(src.resolve(src.train_images), src.resolve(src.train_labels))
        test = load_idx_files(src.resolve(src.test_images), src.resolve(src.test_labels))
        train = subsample_per_class(train, src.per_client_examples * subsets, src.partition_seed)
        if src.test_examples:
            test = subsample_per_class(test, src.test_examples, src.partition_seed + 1)
    return partition_iid(train, PartitionPlan(subsets, src.partition_seed)), test


def triggered_test_set(spec: ExperimentSpec, test: Dataset) -> Dataset | None:
    backdoors = [a for _, a in sorted(spec.attacks.items()) if a.kind == "backdoor"]
    if not backdoors:
        return None
    trigger = backdoors[0].trigger or cross_trigger(test.image_height, test.image_width)
    stamp = AttackSpec("backdoor", spec.data.test_trigger_fraction, backdoors[0].target_label,
                       trigger, 1.0, spec.data.test_trigger_seed)
    return poison_test_set(test, stamp)


def summary(spec: ExperimentSpec, records: Sequence[MetricsRecord]) -> dict:
    last = records[-1]
    asr = [r.attack_success_rate for r in records[1:] if r.attack_success_rate is not None]
    return {
        "experiment": spec.name,
        "version": __version__,
        "pretrained_accuracy": records[0].clean_accuracy,
        "final_clean_accuracy": last.clean_accuracy,
        "final_clean_loss": last.clean_loss,
        "final_triggered_accuracy": last.triggered_accuracy,
        "final_attack_success_rate": last.attack_success_rate,
        "peak_attack_success_rate": max(asr) if asr else None,
        "final_client_accuracy": last.per_client_accuracy,
        "config": to_dict(spec),
    }


def run_one(spec: ExperimentSpec, out_dir: Path, cache: dict) -> None:
    partitions, test = load_data(spec)
    triggered = triggered_test_set(spec, test)
    cfg = federation_config(spec)
    key = (dataclasses.astuple(spec.data), spec.client_count, spec.master_seed, spec.learning_rate,
           spec.batch_size, spec.pretrain_epochs, spec.pretrain_target_accuracy,
           spec.pretrain_learning_rate, spec.hidden_sizes)
    if key not in cache:
        cache[key] = pretrain(partitions[0], test, cfg)
    records = run_experiment(cfg, partitions, test, triggered, initial_params=cache[key])
    (out_dir / f"{spec.name}.csv").write_text(metrics_csv(records, spec.client_count))
    (out_dir / f"{spec.name}.json").write_text(json.dumps(summary(spec, records), indent=2) + "\n")
    log.info("%s: final accuracy %.4f", spec.name, records[-1].clean_accuracy)


def run(config: ExperimentFile, output_dir: str | None = None) -> int:
    """Execute every experiment in order; returns a process exit status."""
    if not config.experiments:
        log.warning("no experiments defined in %s; nothing to do", config.path)
        return 0
    out_dir = Path(output_dir or config.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out_dir / "run.log", mode="w")
    except OSError as exc:
        log.error("output directory %s is not writable: %s", out_dir, exc)
        return 1
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    try:
        cache: dict = {}
        for spec in config.experiments:
            log.info("experiment %s (strategy=%s, seed=%d)", spec.name, spec.strategy, spec.master_seed)
            run_one(spec, out_dir, cache)
    except (OSError, ValueError) as exc:
        log.error("experiment failed: %s", exc)
        return 1
    finally:
        root.removeHandler(handler)
        handler.close()
    return 0


def _override_seed(config: ExperimentFile, seed: int) -> ExperimentFile:
    return dataclasses.replace(
        config, experiments=[dataclasses.replace(e, master_seed=seed) for e in config.experiments]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbayes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run every experiment in a config file")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", help="override the output directory")
    p_run.add_argument("--seed", type=int, help="override master_seed for every experiment")
    p_val = sub.add_parser("validate", help="check a config file and print the effective settings")
    p_val.add_argument("config")
    sub.add_parser("version", help="print the package version")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "version":
        print(__version__)
        return 0
    try:
        config = parse_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        print(json.dumps([to_dict(e) for e in config.experiments], indent=2))
        return 0
    if args.seed is not None:
        config = _override_seed(config, args.seed)
    return run(config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
