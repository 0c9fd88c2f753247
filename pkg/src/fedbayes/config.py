"""Experiment files: sectioned ``key = value`` text read with :mod:`configparser`.

Grammar::

    [run]                         ; optional, global settings
    output_dir = results

    [experiment:NAME]             ; one section per experiment
    strategy = fedbayes           ; comma list expands into one run per value
    master_seed = 0               ; comma list expands likewise
    rounds = 20
    data = synthetic              ; or "idx"
    ...

    [experiment:NAME:LABEL]       ; attack block for experiment NAME
    clients = 0                   ; ids, comma list or ranges like 0-4
    kind = backdoor
    fraction = 0.7
    target_label = 2
    weight_multiplier = 2
    trigger = cross               ; or "r,c; r,c; ..."

Unknown sections and keys are rejected.  Every numeric field is range
checked and errors name the section, key and value.
"""

from __future__ import annotations

import configparser
import dataclasses
import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from fedbayes.aggregation import STRATEGIES
from fedbayes.attacks import ATTACK_KINDS, AttackSpec, TriggerPattern, cross_trigger

DATA_DIR_ENV = "FEDBAYES_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSource:
    kind: str = "synthetic"
    # synthetic
    synthetic_seed: int = 1
    synthetic_noise: float = 0.8
    image_size: int = 28
    class_count: int = 10
    test_per_class: int = 100
    # idx
    train_images: str = "train-images-idx3-ubyte.gz"
    train_labels: str = "train-labels-idx1-ubyte.gz"
    test_images: str = "t10k-images-idx3-ubyte.gz"
    test_labels: str = "t10k-labels-idx1-ubyte.gz"
    data_dir: str | None = None
    test_examples: int = 0
    # both
    per_client_examples: int = 2000
    partition_seed: int = 0
    test_trigger_fraction: float = 0.5
    test_trigger_seed: int = 1

    def resolve(self, name: str) -> Path:
        path = Path(name)
        if path.is_absolute():
            return path
        base = self.data_dir or os.environ.get(DATA_DIR_ENV) or "."
        return Path(base) / path


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    strategy: str = "fedbayes"
    rounds: int = 100
    local_epochs: int = 5
    client_count: int = 8
    master_seed: int = 0
    learning_rate: float = 0.003
    batch_size: int = 128
    pretrain_epochs: int = 50
    pretrain_target_accuracy: float | None = 0.8
    pretrain_learning_rate: float = 0.01
    hidden_sizes: tuple[int, ...] = (64,)
    server_lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    penalty: float = 100.0
    granularity: str = "element"
    workers: int = 1
    data: DataSource = field(default_factory=DataSource)
    attacks: dict[int, AttackSpec] = field(default_factory=dict)
    output_dir: str = "results"


@dataclass(frozen=True)
class ExperimentFile:
    path: str
    experiments: list[ExperimentSpec]
    output_dir: str = "results"


def _as_int(v: str) -> int:
    return int(v.strip())


def _as_float(v: str) -> float:
    return float(v.strip())


def _as_opt_float(v: str) -> float | None:
    v = v.strip()
    return None if v.lower() in ("", "none") else float(v)


def _as_int_tuple(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _as_str(v: str) -> str:
    return v.strip()


def _positive(x: float) -> bool:
    return x > 0


def _at_least(n: int) -> Callable[[float], bool]:
    return lambda x: x >= n


def _fraction(x: float) -> bool:
    return 0.0 <= x <= 1.0


# key -> (parser, check or None, description of valid range)
EXPERIMENT_KEYS: dict[str, tuple[Callable[[str], Any], Callable[[Any], bool] | None, str]] = {
    "rounds": (_as_int, _at_least(1), ">= 1"),
    "local_epochs": (_as_int, _at_least(1), ">= 1"),
    "client_count": (_as_int, _at_least(1), ">= 1"),
    "learning_rate": (_as_float, _positive, "> 0"),
    "batch_size": (_as_int, _at_least(1), ">= 1"),
    "pretrain_epochs": (_as_int, _at_least(1), ">= 1"),
    "pretrain_learning_rate": (_as_float, _positive, "> 0"),
    "pretrain_target_accuracy": (_as_opt_float, lambda x: x is None or _fraction(x), "in [0, 1] or none"),
    "hidden_sizes": (_as_int_tuple, lambda t: len(t) > 0 and min(t) >= 1, "comma list of sizes >= 1"),
    "server_lr": (_as_float, _positive, "> 0"),
    "beta1": (_as_float, lambda x: 0 <= x < 1, "in [0, 1)"),
    "beta2": (_as_float, lambda x: 0 <= x < 1, "in [0, 1)"),
    "tau": (_as_float, _positive, "> 0"),
    "penalty": (_as_float, _positive, "> 0"),
    "granularity": (_as_str, lambda s: s in ("layer", "element"), "one of layer, element"),
    "workers": (_as_int, _at_least(1), ">= 1"),
    "output_dir": (_as_str, None, ""),
}
# Keys allowed to hold a comma list that expands into several experiments.
MATRIX_KEYS = ("strategy", "master_seed")

DATA_KEYS: dict[str, tuple[Callable[[str], Any], Callable[[Any], bool] | None, str]] = {
    "data": (_as_str, lambda s: s in ("synthetic", "idx"), "one of synthetic, idx"),
    "synthetic_seed": (_as_int, None, ""),
    "synthetic_noise": (_as_float, lambda x: x >= 0, ">= 0"),
    "image_size": (_as_int, _at_least(4), ">= 4"),
    "class_count": (_as_int, _at_least(2), ">= 2"),
    "test_per_class": (_as_int, _at_least(1), ">= 1"),
    "train_images": (_as_str, None, ""),
    "train_labels": (_as_str, None, ""),
    "test_images": (_as_str, None, ""),
    "test_labels": (_as_str, None, ""),
    "data_dir": (_as_str, None, ""),
    "test_examples": (_as_int, _at_least(0), ">= 0 (0 keeps the full test set)"),
    "per_client_examples": (_as_int, _at_least(1), ">= 1"),
    "partition_seed": (_as_int, None, ""),
    "test_trigger_fraction": (_as_float, _fraction, "in [0, 1]"),
    "test_trigger_seed": (_as_int, None, ""),
}

ATTACK_KEYS = ("clients", "kind", "fraction", "target_label", "weight_multiplier", "seed",
               "trigger", "trigger_value")
RUN_KEYS = ("output_dir", "data_dir")


def _parse_value(section: str, key: str, raw: str, table: dict) -> Any:
    parser, check, desc = table[key]
    try:
        value = parser(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: not a valid value ({desc or 'text'})") from None
    if check is not None and not check(value):
        raise ConfigError(f"[{section}] {key} = {raw!r}: out of range, must be {desc}")
    return value


def _parse_clients(section: str, raw: str) -> list[int]:
    ids: list[int] = []
    try:
        for part in raw.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                ids.extend(range(lo, hi + 1))
            else:
                ids.append(int(part))
    except ValueError:
        raise ConfigError(f"[{section}] clients = {raw!r}: expected ids like '0' or '0,3' or '0-4'") from None
    if not ids or min(ids) < 0:
        raise ConfigError(f"[{section}] clients = {raw!r}: need at least one id >= 0")
    return ids


def _parse_trigger(section: str, raw: str, value: float, h: int, w: int) -> TriggerPattern:
    raw = raw.strip()
    if raw == "cross":
        return cross_trigger(h, w, value)
    try:
        coords = [tuple(int(x) for x in pair.split(",")) for pair in raw.split(";") if pair.strip()]
        if any(len(c) != 2 for c in coords):
            raise ValueError
        trigger = TriggerPattern(tuple(coords), value)  # type: ignore[arg-type]
        trigger.flat_indices(h, w)
        return trigger
    except ValueError as exc:
        raise ConfigError(f"[{section}] trigger = {raw!r}: {exc or 'expected cross or r,c; r,c'}") from None


def _parse_attack(section: str, items: dict[str, str], data: DataSource) -> tuple[list[int], AttackSpec]:
    unknown = sorted(set(items) - set(ATTACK_KEYS))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s) {unknown}; valid keys: {list(ATTACK_KEYS)}")
    if "clients" not in items:
        raise ConfigError(f"[{section}] missing required key 'clients'")
    clients = _parse_clients(section, items["clients"])
    kind = items.get("kind", "none").strip()
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"[{section}] kind = {kind!r}: must be one of {list(ATTACK_KINDS)}")
    num = {"fraction": (_as_float, _fraction, "in [0, 1]"),
           "target_label": (_as_int, lambda x: 0 <= x < data.class_count, f"in [0, {data.class_count})"),
           "weight_multiplier": (_as_float, _positive, "> 0"),
           "seed": (_as_int, None, ""),
           "trigger_value": (_as_float, _fraction, "in [0, 1]")}
    vals = {k: _parse_value(section, k, items[k], num) for k in num if k in items}
    trigger = None
    if kind == "backdoor":
        if "trigger" not in items:
            raise ConfigError(f"[{section}] kind = backdoor requires the 'trigger' key (e.g. trigger = cross)")
        if "fraction" not in items:
            raise ConfigError(f"[{section}] kind = backdoor requires the 'fraction' key")
        trigger = _parse_trigger(section, items["trigger"], vals.get("trigger_value", 1.0),
                                 data.image_size, data.image_size)
    if kind == "label_flip" and "fraction" not in items:
        raise ConfigError(f"[{section}] kind = label_flip requires the 'fraction' key")
    spec = AttackSpec(
        kind=kind, fraction=vals.get("fraction", 0.0), target_label=vals.get("target_label", 2),
        trigger=trigger, weight_multiplier=vals.get("weight_multiplier", 1.0), seed=vals.get("seed", 0),
    )
    return clients, spec


def _split_list(raw: str) -> list[str]:
    return [x.strip() for x in raw.split(",") if x.strip()]


def parse_text(text: str, source: str = "<string>") -> ExperimentFile:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # type: ignore[assignment]
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    run_items = dict(cp["run"]) if cp.has_section("run") else {}
    unknown = sorted(set(run_items) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"[run] unknown key(s) {unknown}; valid keys: {list(RUN_KEYS)}")
    output_dir = run_items.get("output_dir", "results").strip()

    experiments: dict[str, dict[str, str]] = {}
    attack_sections: list[tuple[str, str]] = []
    for section in cp.sections():
        if section == "run":
            continue
        parts = section.split(":")
        if parts[0] != "experiment" or len(parts) not in (2, 3) or not all(parts):
            raise ConfigError(
                f"unknown section [{section}]; expected [run], [experiment:NAME] or [experiment:NAME:LABEL]"
            )
        if len(parts) == 2:
            experiments[parts[1]] = dict(cp[section])
        else:
            attack_sections.append((parts[1], section))
    for name, section in attack_sections:
        if name not in experiments:
            raise ConfigError(f"[{section}] refers to undefined experiment {name!r}")

    specs: list[ExperimentSpec] = []
    for name, items in experiments.items():
        section = f"experiment:{name}"
        valid = set(EXPERIMENT_KEYS) | set(DATA_KEYS) | set(MATRIX_KEYS)
        unknown = sorted(set(items) - valid)
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s) {unknown}; valid keys: {sorted(valid)}")
        if "strategy" not in items:
            raise ConfigError(f"[{section}] missing required key 'strategy'")
        strategies = _split_list(items["strategy"])
        for s in strategies:
            if s not in STRATEGIES:
                raise ConfigError(
                    f"[{section}] strategy = {s!r}: must be one of {', '.join(STRATEGIES)}"
                )
        try:
            seeds = [int(x) for x in _split_list(items.get("master_seed", "0"))]
        except ValueError:
            raise ConfigError(f"[{section}] master_seed = {items['master_seed']!r}: expected integers") from None

        data_vals = {k: _parse_value(section, k, v, DATA_KEYS) for k, v in items.items() if k in DATA_KEYS}
        data_kind = data_vals.pop("data", "synthetic")
        if "data_dir" not in data_vals and "data_dir" in run_items:
            data_vals["data_dir"] = run_items["data_dir"].strip()
        data = DataSource(kind=data_kind, **data_vals)
        exp_vals = {k: _parse_value(section, k, v, EXPERIMENT_KEYS) for k, v in items.items()
                    if k in EXPERIMENT_KEYS}
        exp_vals.setdefault("output_dir", output_dir)

        attacks: dict[int, AttackSpec] = {}
        for owner, asec in attack_sections:
            if owner != name:
                continue
            clients, spec = _parse_attack(asec, dict(cp[asec]), data)
            for cid in clients:
                if cid in attacks:
                    raise ConfigError(f"[{asec}] client {cid} already has an attack assigned")
                attacks[cid] = spec
        client_count = exp_vals.get("client_count", 8)
        bad = [c for c in attacks if c >= client_count]
        if bad:
            raise ConfigError(f"[{section}] attacks assigned to clients {bad} but client_count = {client_count}")

        multi = len(strategies) > 1 or len(seeds) > 1
        for strategy, seed in itertools.product(strategies, seeds):
            run_name = f"{name}-{strategy}-s{seed}" if multi else name
            specs.append(ExperimentSpec(
                name=run_name, strategy=strategy, master_seed=seed, data=data,
                attacks=dict(attacks), **exp_vals,
            ))
    return ExperimentFile(source, specs, output_dir)


def parse_config(path: str | os.PathLike[str]) -> ExperimentFile:
    """Read and validate an experiment file, applying every default."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def to_dict(spec: ExperimentSpec) -> dict[str, Any]:
    """Plain-data echo of every effective setting (for JSON summaries)."""
    out = dataclasses.asdict(spec)
    out["hidden_sizes"] = list(spec.hidden_sizes)
    out["attacks"] = {
        str(cid): {
            "kind": a.kind, "fraction": a.fraction, "target_label": a.target_label,
            "weight_multiplier": a.weight_multiplier, "seed": a.seed,
            "trigger": None if a.trigger is None else {
                "pixel_coords": [list(rc) for rc in a.trigger.pixel_coords],
                "value": a.trigger.value,
            },
        }
        for cid, a in sorted(spec.attacks.items())
    }
    return out
