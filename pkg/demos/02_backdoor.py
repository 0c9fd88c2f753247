"""
Backdoor with an inflated report
================================

Client 0 stamps a small cross on 70% of its images, relabels them as "2"
and claims twice its real data size.  We watch clean accuracy and the
attack success rate (triggered non-2 images classified as 2).
"""

from _desk import run, spec

s = spec("""
[experiment:backdoor]
strategy = fedavg
rounds = 12
per_client_examples = 1000

[experiment:backdoor:attacker]
clients = 0
kind = backdoor
fraction = 0.7
target_label = 2
weight_multiplier = 2
trigger = cross
""")

runs = run(s, ["fedavg", "fedbayes"])
print("round  " + "  ".join(f"{k:>17s}" for k in runs))
for i in range(0, s.rounds + 1, 2):
    cells = [f"acc {r[i].clean_accuracy:.3f} asr {r[i].attack_success_rate:.2f}" for r in runs.values()]
    print(f"{i:5d}  " + "  ".join(cells))

# Per-client view for the last round: the attacker's own model is poisoned
# in both runs, but only FedAvg lets it leak into the global model.
last = runs["fedbayes"][-1]
print("FedBayes mean weight per layer, attacker :", last.client_weights[0].round(2))
print("FedBayes mean weight per layer, others   :", last.client_weights[1:].mean(0).round(2))
