"""
How many attackers can FedBayes take?
=====================================

Twenty clients, a growing number of them running the backdoor.  Once the
attackers are a large share of the federation the prior itself starts to
drift toward them.
"""

import dataclasses

from _desk import run, spec

BASE = """
[experiment:sweep]
strategy = fedbayes
rounds = 8
client_count = 20
per_client_examples = 500

[experiment:sweep:attackers]
clients = 0-{last}
kind = backdoor
fraction = 0.7
target_label = 2
trigger = cross
"""

for k in (2, 5, 8, 11):
    recs = run(spec(BASE.format(last=k - 1)), ["fedbayes"])["fedbayes"]
    series = " ".join(f"{r.attack_success_rate:.2f}" for r in recs)
    print(f"{k:2d}/20 malicious  final acc {recs[-1].clean_accuracy:.3f}  ASR by round: {series}")
