"""
How FedBayes weighs a client
============================

A toy prior layer and three client versions of it: one unchanged, one
nudged, one dragged far away.  Each gets a CDF gap and a penalized weight.
"""

import numpy as np

from fedbayes.aggregation import (
    ClientUpdate,
    client_layer_probability,
    fedavg_aggregate,
    fedbayes_aggregate,
    layer_stats,
)
from fedbayes.nn import ModelParams

prior_w = np.array([[-1.0, -0.3, 0.2, 1.0]])
stats = layer_stats(prior_w).floored()
print(f"prior layer mean {stats.mean:+.3f}, std {stats.stddev:.3f}")

clients = {
    "same": prior_w.copy(),
    "nudged": prior_w + 0.002,
    "dragged": prior_w + np.array([[0.0, 0.0, 0.0, 4.0]]),
}
for name, w in clients.items():
    p = client_layer_probability(w, prior_w, stats)
    print(f"{name:8s} gap {p.raw_cdf_gap:.5f} -> weight {p.penalized:.3f}")

# Aggregate with a model made of just this layer (plus a zero bias row).
def wrap(w):
    return ModelParams.from_arrays((1, 4), [w, np.zeros((1, 4))])

prior = wrap(prior_w)
updates = [ClientUpdate(i, wrap(w), 100) for i, w in enumerate(clients.values())]
print("FedBayes :", fedbayes_aggregate(prior, updates, granularity="layer").tensors[0].round(4))
print("FedAvg   :", fedavg_aggregate(updates).tensors[0].round(4))

# The dragged client now claims 1000x the data.  FedAvg follows it,
# FedBayes never reads the reported count.
liar = [u if u.client_id != 2 else ClientUpdate(2, u.params, 100_000) for u in updates]
print("FedAvg   with inflated report:", fedavg_aggregate(liar).tensors[0].round(4))
print("FedBayes with inflated report:", fedbayes_aggregate(prior, liar, granularity="layer").tensors[0].round(4))
