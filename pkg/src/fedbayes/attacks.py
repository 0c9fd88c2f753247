"""Data poisoners (backdoor trigger, targeted label flip) and the weight attack."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from fedbayes.aggregation import ClientUpdate
from fedbayes.datasets import Dataset

ATTACK_KINDS = ("none", "backdoor", "label_flip")


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class TriggerPattern:
    pixel_coords: tuple[tuple[int, int], ...]
    value: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "pixel_coords", tuple((int(r), int(c)) for r, c in self.pixel_coords)
        )
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"trigger value must be in [0, 1], got {self.value}")
        if not self.pixel_coords:
            raise ValueError("trigger needs at least one pixel")

    def flat_indices(self, height: int, width: int) -> np.ndarray:
        for r, c in self.pixel_coords:
            if not (0 <= r < height and 0 <= c < width):
                raise ValueError(f"trigger pixel ({r}, {c}) outside a {height}x{width} image")
        return np.array([r * width + c for r, c in self.pixel_coords], dtype=np.int64)


def cross_trigger(height: int = 28, width: int = 28, value: float = 1.0) -> TriggerPattern:
    """Plus sign in the upper-left corner.

    On a 28x28 grid: rows 1..5 of column 3 and columns 1..5 of row 3.
    Other grid sizes scale the coordinates proportionally.
    """
    base = [(r, 3) for r in range(1, 6)] + [(3, c) for c in range(1, 6)]
    coords: list[tuple[int, int]] = []
    for r, c in base:
        rc = (min(height - 1, round_half_away(r * height / 28)),
              min(width - 1, round_half_away(c * width / 28)))
        if rc not in coords:
            coords.append(rc)
    return TriggerPattern(tuple(coords), value)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    fraction: float = 0.0
    target_label: int = 2
    trigger: TriggerPattern | None = None
    weight_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind {self.kind!r} not one of {ATTACK_KINDS}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.kind == "backdoor" and self.trigger is None:
            raise ValueError("backdoor attack requires a trigger")
        if not self.weight_multiplier > 0:
            raise ValueError(f"weight_multiplier must be > 0, got {self.weight_multiplier}")
        if self.target_label < 0:
            raise ValueError(f"target_label must be >= 0, got {self.target_label}")

    @property
    def is_attack(self) -> bool:
        return self.kind != "none" or self.weight_multiplier != 1.0

    def with_seed(self, seed: int) -> AttackSpec:
        return dataclasses.replace(self, seed=seed)


BENIGN = AttackSpec()


def _require(spec: AttackSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got kind={spec.kind!r}")


def _stamp(data: Dataset, spec: AttackSpec, relabel: bool) -> Dataset:
    assert spec.trigger is not None
    pixels = spec.trigger.flat_indices(data.image_height, data.image_width)
    count = round_half_away(spec.fraction * data.n)
    if count == 0:
        return data
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(data.n, size=count, replace=False))
    features = np.array(data.features)
    features[np.ix_(chosen, pixels)] = spec.trigger.value
    labels = np.array(data.labels)
    if relabel:
        if spec.target_label >= data.class_count:
            raise ValueError(f"target_label {spec.target_label} >= class_count {data.class_count}")
        labels[chosen] = spec.target_label
    return data.with_arrays(features, labels)


def apply_backdoor(data: Dataset, spec: AttackSpec) -> Dataset:
    """Stamp the trigger on a seeded sample and relabel it to the target."""
    _require(spec, "backdoor")
    return _stamp(data, spec, relabel=True)


def poison_test_set(data: Dataset, spec: AttackSpec) -> Dataset:
    """Stamp the trigger on a seeded sample, keeping the true labels."""
    _require(spec, "backdoor")
    return _stamp(data, spec, relabel=False)


def triggered_mask(clean: Dataset, triggered: Dataset) -> np.ndarray:
    """Rows whose features differ between a dataset and its stamped copy."""
    return np.any(clean.features != triggered.features, axis=1)


def apply_label_flip(data: Dataset, spec: AttackSpec) -> Dataset:
    """Relabel a seeded sample of non-target examples to the target label.

    The sample size is ``round(fraction * n)`` over the whole dataset, drawn
    only from examples whose label differs from the target.
    """
    _require(spec, "label_flip")
    count = round_half_away(spec.fraction * data.n)
    if count == 0:
        return data
    if spec.target_label >= data.class_count:
        raise ValueError(f"target_label {spec.target_label} >= class_count {data.class_count}")
    eligible = np.flatnonzero(data.labels != spec.target_label)
    if eligible.size < count:
        raise ValueError(
            f"only {eligible.size} non-target examples, cannot flip {count} "
            f"(fraction={spec.fraction})"
        )
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(eligible, size=count, replace=False)
    labels = np.array(data.labels)
    labels[chosen] = spec.target_label
    return data.with_arrays(data.features, labels)


def apply_attack(data: Dataset, spec: AttackSpec) -> Dataset:
    """Dispatch on ``spec.kind``; benign specs return the data unchanged."""
    if spec.kind == "backdoor":
        return apply_backdoor(data, spec)
    if spec.kind == "label_flip":
        return apply_label_flip(data, spec)
    return data


def inflate_report(update: ClientUpdate, multiplier: float) -> ClientUpdate:
    """Claim ``multiplier`` times the real example count."""
    if not multiplier > 0:
        raise ValueError(f"multiplier must be > 0, got {multiplier}")
    reported = max(1, round_half_away(multiplier * update.reported_examples))
    return dataclasses.replace(update, reported_examples=reported)
