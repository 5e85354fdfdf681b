"""L-inf metric attacks on the embedding space.

Three objectives share one signed-gradient ascent driver:

* ``fna``    sum of distances to same-identity references minus the sum of
             distances to references of the farthest negative identity
* ``sma``    distance to the anchor's own clean feature
* ``mifgsm`` sum of distances to same-identity references

All distances are Euclidean on raw (unnormalised) embeddings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
import torch

from .errors import InvalidSpec, MissingContext, NoNegativeAvailable, NonFiniteGradient

KINDS = ("fna", "sma", "mifgsm")


def parse_fraction(value) -> float:
    """Accept ``8/255``-style strings as well as plain numbers."""
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise InvalidSpec(f"cannot parse {value!r} as a number or fraction") from None


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "fna"
    epsilon: float = 8 / 255
    steps: int = 16
    kappa: float | None = None  # step size; defaults to min(epsilon, 2 * epsilon / steps)
    random_init: bool = True
    distance: str = "euclidean"

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        object.__setattr__(self, "epsilon", parse_fraction(self.epsilon))
        if self.kappa is None:
            object.__setattr__(self, "kappa", min(1.0, 2.0 / max(self.steps, 1)) * self.epsilon)
        else:
            object.__setattr__(self, "kappa", parse_fraction(self.kappa))
        if self.kind not in KINDS:
            raise InvalidSpec(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.distance != "euclidean":
            raise InvalidSpec("only the euclidean distance is supported")
        if not 0.0 <= self.epsilon < 1.0:
            raise InvalidSpec("epsilon must lie in [0, 1)")
        if self.steps < 1:
            raise InvalidSpec("steps must be >= 1")
        # epsilon = 0 is the degenerate no-op ball, where kappa = 0 is the only valid step
        if self.epsilon > 0 and not 0.0 < self.kappa <= self.epsilon + 1e-12:
            raise InvalidSpec("kappa must lie in (0, epsilon]")
        if self.epsilon == 0 and self.kappa != 0:
            raise InvalidSpec("kappa must be 0 when epsilon is 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)

    @property
    def label(self) -> str:
        frac = Fraction(self.epsilon).limit_denominator(1000)
        return f"{self.kind.upper()} {frac.numerator}/{frac.denominator}-{self.steps}"


def pairwise_euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(N, M)`` distances. Exactly 0 for equal rows, with a zero (not NaN) gradient there."""
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def farthest_negative_ids(anchors: torch.Tensor, labels: torch.Tensor,
                          ref_features: torch.Tensor, ref_labels: torch.Tensor) -> torch.Tensor:
    """For each anchor, the other identity with the largest mean distance to it.

    Ties go to the smallest identity label.
    """
    labels = torch.as_tensor(labels)
    ref_labels = torch.as_tensor(ref_labels)
    with torch.no_grad():
        dist = pairwise_euclidean(anchors.detach(), ref_features.detach())
        ids = torch.unique(ref_labels)  # sorted ascending
        onehot = (ref_labels[None, :] == ids[:, None]).to(dist.dtype)  # (U, M)
        mean = dist @ onehot.T / onehot.sum(1)
        mean = mean.masked_fill(labels[:, None] == ids[None, :], float("-inf"))
        if torch.isneginf(mean).all(dim=1).any():
            raise NoNegativeAvailable("references hold no identity other than the anchor's")
        return ids[mean.argmax(dim=1)]


def farthest_negative_id(anchor: torch.Tensor, label: int, ref_features: torch.Tensor,
                         ref_labels) -> int:
    anchor = torch.as_tensor(anchor).reshape(1, -1)
    ref_features = torch.as_tensor(ref_features, dtype=anchor.dtype).reshape(len(ref_labels), -1)
    return int(farthest_negative_ids(anchor, torch.tensor([label]), ref_features,
                                     torch.as_tensor(ref_labels))[0])


@dataclass
class AttackContext:
    """Frozen reference information the attack objective is measured against."""

    labels: torch.Tensor  # (N,) anchor identities
    ref_features: torch.Tensor | None = None  # (M, d) accessible set
    ref_labels: torch.Tensor | None = None  # (M,)
    clean_features: torch.Tensor | None = None  # (N, d)
    farthest: torch.Tensor | None = None  # (N,) farthest negative identity per anchor

    def __post_init__(self):
        for name in ("ref_features", "clean_features"):
            t = getattr(self, name)
            if t is not None:
                setattr(self, name, t.detach())


def _encoder_of(model):
    return model.encoder if hasattr(model, "encoder") else model


def _dtype_of(model, fallback=torch.float32):
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    return params[0].dtype if params else fallback


def build_context(model, x: torch.Tensor, labels, ref_features: torch.Tensor | None = None,
                  ref_labels=None) -> AttackContext:
    """Context for anchors ``x``. Without explicit references the anchors' own clean
    features form the accessible set (the training-batch case)."""
    encoder = _encoder_of(model)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    with torch.no_grad():
        clean = encoder(x)
    if ref_features is None:
        ref_features, ref_labels = clean, labels
    ref_labels = torch.as_tensor(np.asarray(ref_labels), dtype=torch.int64)
    ctx = AttackContext(labels, ref_features, ref_labels, clean)
    if (ref_labels[None, :] != labels[:, None]).any(dim=1).all():
        ctx.farthest = farthest_negative_ids(clean, labels, ref_features, ref_labels)
    return ctx


def metric_attack_loss(kind: str, features: torch.Tensor, ctx: AttackContext,
                       reduction: str = "sum") -> torch.Tensor:
    """Objective the attacker maximises, per anchor or summed."""
    if kind == "sma":
        if ctx.clean_features is None:
            raise MissingContext("sma needs the clean anchor features")
        diff = ((features - ctx.clean_features) ** 2).sum(-1)
        pos = diff > 0
        per = torch.where(pos, torch.where(pos, diff, torch.ones_like(diff)).sqrt(),
                          torch.zeros_like(diff))
    elif kind in ("fna", "mifgsm"):
        if ctx.ref_features is None or ctx.ref_labels is None:
            raise MissingContext(f"{kind} needs reference features and labels")
        dist = pairwise_euclidean(features, ctx.ref_features.to(features.dtype))
        same = (ctx.ref_labels[None, :] == ctx.labels[:, None]).to(dist.dtype)
        per = (dist * same).sum(1)
        if kind == "fna":
            if ctx.farthest is None:
                raise MissingContext("fna needs a farthest-negative identity per anchor")
            far = (ctx.ref_labels[None, :] == ctx.farthest[:, None]).to(dist.dtype)
            per = per - (dist * far).sum(1)
    else:
        raise InvalidSpec(f"unknown attack kind {kind!r}")
    return per.sum() if reduction == "sum" else per


def pgd_metric_attack(model, x, ctx: AttackContext, spec: AttackSpec,
                      rng: np.random.Generator | None = None,
                      init: torch.Tensor | None = None) -> torch.Tensor:
    """Signed-gradient ascent on ``metric_attack_loss`` inside the epsilon ball.

    ``model`` is a :class:`~robust_reid.model.ModelBundle` or any feature map.
    ``init`` overrides the random start perturbation. Every iterate is clipped to
    the epsilon ball around ``x`` and to the pixel range [0, 1].
    """
    encoder = _encoder_of(model)
    x = torch.as_tensor(x, dtype=_dtype_of(model)).detach() if not isinstance(x, torch.Tensor) \
        else x.detach()
    eps, kappa = spec.epsilon, spec.kappa
    if init is not None:
        eta = torch.as_tensor(init, dtype=x.dtype)
    elif spec.random_init and eps > 0:
        rng = np.random.default_rng(rng)
        eta = torch.as_tensor(rng.uniform(-eps, eps, size=tuple(x.shape)), dtype=x.dtype)
    else:
        eta = torch.zeros_like(x)
    lower, upper = (x - eps).clamp(0.0, 1.0), (x + eps).clamp(0.0, 1.0)
    x_adv = torch.min(torch.max(x + eta, lower), upper)
    for _ in range(spec.steps):
        x_adv.requires_grad_(True)
        loss = metric_attack_loss(spec.kind, encoder(x_adv), ctx)
        (grad,) = torch.autograd.grad(loss, x_adv)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient("attack gradient contains NaN/Inf")
        x_adv = torch.min(torch.max(x_adv.detach() + kappa * grad.sign(), lower), upper)
    return x_adv.detach()


def attack(model, x, labels, spec: AttackSpec, rng=None, ref_features=None,
           ref_labels=None) -> tuple[torch.Tensor, AttackContext]:
    """Build the context and run the attack in one go."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x), dtype=_dtype_of(model))
    ctx = build_context(model, x, labels, ref_features, ref_labels)
    return pgd_metric_attack(model, x, ctx, spec, rng), ctx
