"""
Label flipping
==============

Client 0 relabels 85% of its non-"2" images as "2" and reports three times
its data size.  FedAvg's clean accuracy dips and wobbles; FedBayes keeps
climbing.
"""

import numpy as np

from _desk import run, spec

s = spec("""
[experiment:flip]
strategy = fedavg
rounds = 12
per_client_examples = 1000

[experiment:flip:attacker]
clients = 0
kind = label_flip
fraction = 0.85
target_label = 2
weight_multiplier = 3
""")

runs = run(s, ["fedavg", "fedbayes"])
for name, recs in runs.items():
    acc = np.array([r.clean_accuracy for r in recs])
    print(f"{name:9s}", " ".join(f"{a:.3f}" for a in acc[::2]),
          f"| std of last half {acc[len(acc) // 2:].std():.4f}")
