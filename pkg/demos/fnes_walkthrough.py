"""
Farthest negative extension softening, by hand
==============================================

FNES stretches an adversarial perturbation, blends it back with the clean image
and softens the label toward the identity the attack was pulling to.
"""

import numpy as np

from robust_reid.fnes import FNESConfig, apply_fnes, mix_inputs, redistribute, smooth_label

cfg = FNESConfig()  # gamma 1.5, omega ~ U(0.3, 0.8), lambda1 0.9, lambda2 0.95, upsilon 0.01
print(cfg)

# one pixel: clean 0.20, attacked 0.28
print("x_adv for omega = 0.5:", mix_inputs(np.array(0.20), np.array(0.28), 1.5, 0.5))  # 0.26

# the label side, k = 4 classes, true class 0, farthest negative class 3
print("phi(y, 0.9)       ", smooth_label(0, 0.9, 4))
print("tau(phi(y, 0.95)) ", redistribute(smooth_label(0, 0.95, 4), 0.01, 3, 0))

x = np.full(3, 0.2)
x_hat = x + 0.03
x_adv, y_adv, omega = apply_fnes(x, x_hat, 0, 3, 4, cfg, omega=0.5)
print("y_adv             ", y_adv)  # (0.92, 0.025, 0.025, 0.03)

# with omega drawn per sample, the effective budget spreads over [0.3, 1.05] x epsilon
rng = np.random.default_rng(0)
scales = [(1 - rng.uniform(*cfg.omega_range)) * cfg.gamma for _ in range(10_000)]
print("effective perturbation scale: min %.2f  mean %.2f  max %.2f"
      % (min(scales), np.mean(scales), max(scales)))
