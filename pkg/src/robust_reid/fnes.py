"""Farthest negative extension softening.

After an attack, the perturbation is stretched by ``gamma`` and blended back
with the clean image using a per-sample weight ``omega ~ U(a, b)``. The same
``omega`` blends two soft labels: the smoothed clean label and a more confident
smoothed label that hands ``upsilon`` of its true-class mass to the farthest
negative identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import InvalidK, InvalidSpec, InvalidTransfer


@dataclass(frozen=True)
class FNESConfig:
    gamma: float = 1.5
    omega_range: tuple[float, float] = (0.3, 0.8)
    lambda1: float = 0.9
    lambda2: float = 0.95
    upsilon: float = 0.01

    def __post_init__(self):
        a, b = (float(v) for v in self.omega_range)
        object.__setattr__(self, "omega_range", (a, b))
        if self.gamma < 1:
            raise InvalidSpec("gamma must be >= 1")
        if not 0 < a < b < 1:
            raise InvalidSpec("omega_range must satisfy 0 < a < b < 1")
        if not (0 < self.lambda1 < 1 and 0 < self.lambda2 < 1):
            raise InvalidSpec("lambda1 and lambda2 must lie in (0, 1)")
        if not 0 < self.upsilon < self.lambda2:
            raise InvalidSpec("upsilon must lie in (0, lambda2)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["omega_range"] = list(self.omega_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FNESConfig":
        return cls(**d)


def smooth_label(true_class: int, lam: float, k: int) -> np.ndarray:
    if k < 2:
        raise InvalidK(f"label smoothing needs k >= 2, got {k}")
    if not 0 < lam < 1:
        raise InvalidSpec("lambda must lie in (0, 1)")
    out = np.full(k, (1.0 - lam) / (k - 1))
    out[true_class] = lam
    return out


def redistribute(soft: np.ndarray, upsilon: float, farthest_class: int, true_class: int) -> np.ndarray:
    if farthest_class == true_class:
        raise InvalidTransfer("farthest negative class equals the true class")
    if upsilon < 0 or (upsilon > 0 and soft[true_class] <= upsilon):
        raise InvalidTransfer(f"cannot move {upsilon} out of mass {soft[true_class]}")
    out = np.array(soft, dtype=np.float64)
    out[true_class] -= upsilon
    out[farthest_class] += upsilon
    return out


def soften_label(true_class: int, farthest_class: int, k: int, omega: float,
                 cfg: FNESConfig) -> np.ndarray:
    clean = smooth_label(true_class, cfg.lambda1, k)
    pulled = redistribute(smooth_label(true_class, cfg.lambda2, k), cfg.upsilon, farthest_class,
                          true_class)
    return omega * clean + (1.0 - omega) * pulled


def mix_inputs(x, x_hat, gamma: float, omega):
    """Stretch the perturbation by ``gamma``, blend with the clean input, clip to [0, 1]."""
    x_temp = x + gamma * (x_hat - x)
    mixed = omega * x + (1.0 - omega) * x_temp
    if isinstance(mixed, torch.Tensor):
        return mixed.clamp(0.0, 1.0)
    return np.clip(mixed, 0.0, 1.0)


def apply_fnes(x, x_hat, true_class: int, farthest_class: int, k: int, cfg: FNESConfig,
               rng: np.random.Generator | None = None, omega: float | None = None):
    """Single sample. Returns ``(x_adv, y_adv, omega)``; ``omega`` is drawn when not given."""
    if tuple(np.shape(x)) != tuple(np.shape(x_hat)):
        raise InvalidSpec("x and x_hat must have the same shape")
    if omega is None:
        omega = float(np.random.default_rng(rng).uniform(*cfg.omega_range))
    return mix_inputs(x, x_hat, cfg.gamma, omega), soften_label(true_class, farthest_class, k, omega, cfg), omega


def apply_fnes_batch(x: torch.Tensor, x_hat: torch.Tensor, labels, farthest, k: int,
                     cfg: FNESConfig, rng: np.random.Generator):
    """Batched version: one ``omega`` per sample, shared by its input and label mix.

    Returns ``(x_adv, y_adv, omegas)`` with ``y_adv`` a ``(N, k)`` tensor in ``x``'s dtype.
    """
    labels = np.asarray(labels)
    farthest = np.asarray(farthest)
    omegas = rng.uniform(*cfg.omega_range, size=len(labels))
    w = torch.as_tensor(omegas, dtype=x.dtype).reshape(-1, *([1] * (x.dim() - 1)))
    x_adv = mix_inputs(x, x_hat, cfg.gamma, w)
    y_adv = np.stack([soften_label(int(t), int(f), k, float(o), cfg)
                      for t, f, o in zip(labels, farthest, omegas)])
    return x_adv, torch.as_tensor(y_adv, dtype=x.dtype), omegas


def smooth_labels(labels, k: int, lam: float, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([smooth_label(int(t), lam, k) for t in np.asarray(labels)]),
                           dtype=dtype)
