"""
Balancing a long-tailed, camera-skewed training set
===================================================

Inter-ID filling tops every identity up to delta1 images; intra-ID
diversification adds pseudo samples under the cameras an identity rarely visits.
"""

import numpy as np

from robust_reid.balancing import AugmentationGenerator, BalanceConfig, balance, balance_report
from robust_reid.dataset import SyntheticSpec, identity_stats, make_synthetic

spec = SyntheticSpec(num_ids=12, imbalance={"kind": "long_tail", "max": 30, "min": 2},
                     camera_skew=0.8)
ds = make_synthetic(spec, 0)
counts = identity_stats(ds).per_id_count
print("images per identity:", list(counts.values()))

cfg = BalanceConfig.default_for(ds, delta2=0.5)  # delta1 = rounded mean count
print("delta1 =", cfg.delta1, " delta2 =", cfg.delta2)

out = balance(ds, cfg, AugmentationGenerator(ds), np.random.default_rng(0))
print(f"{len(ds)} real images -> {len(out)} images ({out.pseudo_mask().sum()} pseudo)")

print(f"{'id':>3} {'before':>6} {'after':>6} {'cam':>4} {'share before':>13} {'after':>6}")
for r in balance_report(ds, out):
    print(f"{r['identity']:>3} {r['count_before']:>6} {r['count_after']:>6} {r['dominant_camera']:>4} "
          f"{r['dominant_prop_before']:>13.2f} {r['dominant_prop_after']:>6.2f}"
          + ("  *" if r["camera_treated"] else ""))
