"""
Vanilla, metric adversarial training and the full defense
=========================================================

Same data, same seeds, same attack budget. Takes a few minutes on one core.
"""

import numpy as np
import torch

from robust_reid.attacks import AttackSpec
from robust_reid.dataset import SyntheticSpec, make_synthetic, split_query_gallery
from robust_reid.evaluation import bias_stats, evaluate, robust_eval
from robust_reid.meta import TrainConfig, fit, prepare_training_data

torch.set_num_threads(1)

train = make_synthetic(SyntheticSpec(num_ids=20, count=16), 0)
test = make_synthetic(SyntheticSpec(num_ids=20, count=16, id_offset=100, split="gallery"), 1)
query, gallery = split_query_gallery(test, np.random.default_rng(0), 4)
attack = AttackSpec("fna", "8/255", 16)

desk = dict(epochs=30, lr=1e-3, milestones=[21], seed=0)
for mode in ("vanilla", "metric-at", "full"):
    cfg = TrainConfig(mode=mode, **desk)
    model = fit(prepare_training_data(train, cfg), cfg).bundle
    clean = evaluate(model, query, gallery)
    robust = robust_eval(model, query, gallery, attack)
    print(f"{mode:<10} clean {clean.summary()}   {attack.label} {robust.summary()}"
          f"   per-ID AP std {100 * bias_stats(robust)['std']:.2f}")
