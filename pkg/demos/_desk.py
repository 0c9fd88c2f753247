"""Shared set-up for the demos: desk-scale synthetic digits and a pretrained model."""

import dataclasses

from fedbayes.cli import federation_config, load_data, triggered_test_set
from fedbayes.config import parse_text
from fedbayes.federation import pretrain, run_experiment


def spec(text, **overrides):
    (s,) = parse_text(text).experiments
    return dataclasses.replace(s, **overrides)


def run(s, strategies):
    partitions, test = load_data(s)
    initial = pretrain(partitions[0], test, federation_config(s))
    triggered = triggered_test_set(s, test)
    return {
        name: run_experiment(federation_config(dataclasses.replace(s, strategy=name)),
                             partitions, test, triggered, initial_params=initial)
        for name in strategies
    }
