"""Bi-adversarial self-meta training.

One training step, in order:

1. attack the clean batch with the training attack (FNA by default)
2. stretch/blend the perturbation and soften labels (FNES)
3. update the discriminator on frozen clean/adversarial features
4. split the batch into meta-train and meta-test halves, clean and adversarial
   copies of a sample always on the same side
5. take a virtual gradient step on the meta-train loss, evaluate the meta-test
   loss at the virtual parameters, and update G on the sum; gradients flow
   through the virtual step (second order) unless ``first_order`` is set

``mode`` picks a baseline: ``vanilla`` (clean data only), ``metric-at`` (plain
adversarial training on FNA samples) or ``full``; in ``full`` mode the
``use_*`` switches drop individual components for ablations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from .attacks import AttackSpec, attack
from .balancing import AugmentationGenerator, BalanceConfig, balance
from .dataset import ReIDDataset, sample_pk_indices
from .errors import (DegenerateBatch, InvalidSpec, MissingAdversarialHalf, NonFiniteGradient,
                     NonFiniteLoss, ShapeMismatch)
from .fnes import FNESConfig, apply_fnes_batch, smooth_labels
from .losses import (LossReport, discriminator_loss, encoder_confusion_loss, soft_cross_entropy,
                     triplet_hard)
from .model import ArchSpec, ModelBundle, discriminate, init_models, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("vanilla", "metric-at", "full")
IO_FIELDS = ("train_dir", "out_dir", "resume", "keep_checkpoints")


@dataclass
class TrainConfig:
    mode: str = "full"
    epochs: int = 120
    P: int = 16
    K: int = 4
    lr: float = 0.00035  # outer rate (beta) for G
    inner_lr: float = 0.01  # virtual-step rate (alpha)
    disc_lr: float | None = None  # defaults to lr
    milestones: list[int] = field(default_factory=lambda: [20, 40, 60, 80, 100])
    lr_decay: float = 0.1
    disc_lr_decay: float = 0.5
    weight_decay: float = 0.0005
    disc_weight_decay: float = 0.0005
    margin: float = 0.3
    attack: dict = field(default_factory=lambda: {"kind": "fna", "epsilon": "5/255", "steps": 8})
    fnes: dict = field(default_factory=dict)
    enc_scale: float = 0.001
    meta_ratio: list[int] = field(default_factory=lambda: [3, 1])
    meta_split: str = "identity"  # "identity" or "stratified"
    first_order: bool = False
    use_fnes: bool = True
    use_meta: bool = True
    use_advinv: bool = True
    use_balance: bool = True
    delta1: int | None = None  # None: rounded mean identity count
    delta2: float = 0.5
    arch: dict = field(default_factory=dict)
    batches_per_epoch: int | None = None  # None: len(train) // (P * K)
    seed: int = 0
    train_dir: str | None = None
    out_dir: str | None = None
    resume: str | None = None
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidSpec(f"mode must be one of {MODES}")
        if self.lr <= 0 or self.inner_lr < 0:
            raise InvalidSpec("learning rates must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise InvalidSpec("milestones must be strictly increasing")
        if self.epochs < 0 or self.P < 2 or self.K < 1:
            raise InvalidSpec("epochs >= 0, P >= 2, K >= 1 required")
        if len(self.meta_ratio) != 2 or min(self.meta_ratio) < 0 or self.meta_ratio[0] <= 0:
            raise InvalidSpec("meta_ratio must be [train > 0, test >= 0]")
        if self.meta_split not in ("identity", "stratified"):
            raise InvalidSpec("meta_split must be 'identity' or 'stratified'")
        if self.meta_on and self.meta_ratio[1]:
            test_frac = self.meta_ratio[1] / sum(self.meta_ratio)
            if self.meta_split == "identity" and self.P < 4:
                raise InvalidSpec("identity meta split needs P >= 4 (two identities per side)")
            if self.meta_split == "stratified" and np.floor(self.K * test_frac) < 2:
                raise InvalidSpec("stratified meta split leaves meta-test without positive pairs "
                                  "(needs floor(K * test share) >= 2)")
        self.attack_spec  # noqa: B018 - validates
        self.fnes_config  # noqa: B018

    @property
    def attack_spec(self) -> AttackSpec:
        return AttackSpec.from_dict(self.attack)

    @property
    def fnes_config(self) -> FNESConfig:
        return FNESConfig.from_dict(self.fnes)

    # effective switches once the mode is taken into account
    @property
    def adversarial(self) -> bool:
        return self.mode != "vanilla"

    @property
    def fnes_on(self) -> bool:
        return self.mode == "full" and self.use_fnes

    @property
    def meta_on(self) -> bool:
        return self.mode == "full" and self.use_meta

    @property
    def advinv_on(self) -> bool:
        return self.mode == "full" and self.use_advinv

    @property
    def balance_on(self) -> bool:
        return self.mode == "full" and self.use_balance

    def to_dict(self) -> dict:
        return asdict(self)

    def training_dict(self) -> dict:
        """Everything that influences the trained weights (no file paths)."""
        return {k: v for k, v in asdict(self).items() if k not in IO_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Meta split and losses


@dataclass(frozen=True)
class MetaSplit:
    train_indices: np.ndarray
    test_indices: np.ndarray
    ratio: tuple[int, int]


def partition_batch(labels, ratio=(3, 1), rng: np.random.Generator | None = None,
                    mode: str = "identity") -> MetaSplit:
    """Split batch positions into meta-train / meta-test.

    ``identity`` mode sends whole identities to one side (with P x K batches both
    sides keep positives for triplet mining). ``stratified`` mode splits every
    identity's samples at the ratio. Rounding remainders go to meta-train.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng)
    n_tr, n_te = (int(r) for r in ratio)
    ids = np.unique(labels)
    if n_te == 0:
        return MetaSplit(np.arange(len(labels)), np.arange(0), (n_tr, n_te))
    if len(ids) < 2:
        raise DegenerateBatch("meta split needs at least two identities")
    frac = n_te / (n_tr + n_te)
    if mode == "identity":
        # both sides need two identities for triplet mining whenever the batch allows it
        lo = 2 if len(ids) >= 4 else 1
        k_test = min(max(lo, int(np.floor(len(ids) * frac))), len(ids) - lo)
        test_ids = rng.choice(ids, size=k_test, replace=False)
        test_mask = np.isin(labels, test_ids)
    elif mode == "stratified":
        test_mask = np.zeros(len(labels), dtype=bool)
        for i in ids:
            pos = np.flatnonzero(labels == i)
            k = int(np.floor(len(pos) * frac))
            if len(pos) >= 2:
                k = min(max(k, 1), len(pos) - 1)
            test_mask[rng.choice(pos, size=k, replace=False)] = True
    else:
        raise InvalidSpec(f"unknown split mode {mode!r}")
    return MetaSplit(np.flatnonzero(~test_mask), np.flatnonzero(test_mask), (n_tr, n_te))


def _forward(bundle: ModelBundle, params: dict | None, x: torch.Tensor):
    if params is None:
        return bundle(x)
    return functional_call(bundle, params, (x,))


def total_loss(bundle: ModelBundle, x, y_soft, labels, x_adv=None, y_adv=None, *,
               margin: float = 0.3, enc_scale: float = 0.001, params: dict | None = None,
               advinv: bool = True) -> tuple[torch.Tensor, dict]:
    """``l(G, x, y) + l(G, x_adv, y_adv)`` with ``l = L_cls + L_tri + enc_scale * L_E``.

    The encoder confusion term couples the clean and adversarial halves, so it is
    counted once per pair set. ``params`` substitutes G's parameters functionally.
    Returns the loss tensor and its parts (as tensors).
    """
    if x_adv is None or y_adv is None:
        raise MissingAdversarialHalf("total_loss needs both the clean and the adversarial half")
    n = len(x)
    feats, logits = _forward(bundle, params, torch.cat([x, x_adv]))
    cls = soft_cross_entropy(logits[:n], y_soft) + soft_cross_entropy(logits[n:], y_adv)
    tri = triplet_hard(feats[:n], labels, margin) + triplet_hard(feats[n:], labels, margin)
    if advinv and enc_scale:
        enc = encoder_confusion_loss(discriminate(bundle, feats[:n]), discriminate(bundle, feats[n:]))
    else:
        enc = feats.new_zeros(())
    total = cls + tri + enc_scale * enc
    return total, {"cls": cls, "tri": tri, "enc_adv": enc}


def clean_loss(bundle: ModelBundle, x, y_soft, labels, *, margin: float = 0.3,
               params: dict | None = None) -> tuple[torch.Tensor, dict]:
    """Vanilla objective: cross-entropy plus triplet on clean data."""
    feats, logits = _forward(bundle, params, x)
    cls = soft_cross_entropy(logits, y_soft)
    tri = triplet_hard(feats, labels, margin)
    return cls + tri, {"cls": cls, "tri": tri, "enc_adv": feats.new_zeros(())}


def temp_params(theta: dict[str, torch.Tensor], grads, alpha: float) -> dict[str, torch.Tensor]:
    """One plain gradient-descent step, ``theta - alpha * grad``; ``theta`` is left as is."""
    grads = dict(zip(theta, grads)) if not isinstance(grads, dict) else grads
    out = {}
    for name, p in theta.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite inner gradient for {name}")
        out[name] = p - alpha * g
    return out


def self_meta_objective(params: dict[str, torch.Tensor], train_loss: Callable[[dict], torch.Tensor],
                        test_loss: Callable[[dict], torch.Tensor] | None, alpha: float,
                        first_order: bool = False):
    """``L_train(theta) + L_test(theta - alpha * grad L_train(theta))``.

    Differentiating the result w.r.t. ``params`` follows the inner gradient
    (a Hessian-vector product) unless ``first_order`` treats it as a constant.
    Returns ``(objective, train_value, test_value)``.
    """
    lt = train_loss(params)
    if test_loss is None:
        return lt, lt, lt.new_zeros(())
    if alpha == 0:
        temp = params
    else:
        names = list(params)
        grads = torch.autograd.grad(lt, [params[n] for n in names], create_graph=not first_order,
                                    retain_graph=True, allow_unused=True)
        if first_order:
            grads = [None if g is None else g.detach() for g in grads]
        temp = temp_params(params, dict(zip(names, grads)), alpha)
    le = test_loss(temp)
    return lt + le, lt, le


# ---------------------------------------------------------------------------
# Trainer


def _lr_at(base: float, epoch: int, milestones, decay: float) -> float:
    return base * decay ** sum(1 for m in milestones if epoch >= m)


class Trainer:
    """Owns the bundle and both optimizers for one training run."""

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        self.k = bundle.arch.num_classes
        self.opt_g = torch.optim.Adam(list(bundle.g_params().values()), lr=cfg.lr,
                                      weight_decay=cfg.weight_decay)
        self.opt_d = torch.optim.Adam(list(bundle.d_params().values()), lr=cfg.disc_lr or cfg.lr,
                                      weight_decay=cfg.disc_weight_decay)

    def set_epoch(self, epoch: int) -> None:
        c = self.cfg
        for grp in self.opt_g.param_groups:
            grp["lr"] = _lr_at(c.lr, epoch, c.milestones, c.lr_decay)
        for grp in self.opt_d.param_groups:
            grp["lr"] = _lr_at(c.disc_lr or c.lr, epoch, c.milestones, c.disc_lr_decay)

    # -- one step ----------------------------------------------------------
    def adversarial_batch(self, x, labels, rng):
        """Attack + FNES. Returns ``(x_adv, y_adv)``."""
        cfg, dtype = self.cfg, x.dtype
        spec = cfg.attack_spec
        x_hat, ctx = attack(self.bundle, x, labels, spec, rng)
        if cfg.fnes_on:
            x_adv, y_adv, _ = apply_fnes_batch(x, x_hat, labels, ctx.farthest.numpy(), self.k,
                                               cfg.fnes_config, rng)
        else:
            x_adv, y_adv = x_hat, smooth_labels(labels, self.k, cfg.fnes_config.lambda1, dtype)
        return x_adv, y_adv

    def discriminator_step(self, x, x_adv) -> float:
        bundle = self.bundle
        with torch.no_grad():
            f_clean, f_adv = bundle.encoder(x), bundle.encoder(x_adv)
        loss = discriminator_loss(discriminate(bundle, f_clean), discriminate(bundle, f_adv))
        if not torch.isfinite(loss):
            raise NonFiniteLoss("discriminator loss is not finite")
        self.opt_d.zero_grad(set_to_none=True)
        grads = torch.autograd.grad(loss, list(bundle.d_params().values()))
        for p, g in zip(bundle.d_params().values(), grads):
            p.grad = g
        self.opt_d.step()
        return float(loss.detach())

    def train_step(self, x: torch.Tensor, labels, rng: np.random.Generator) -> LossReport:
        cfg, bundle = self.cfg, self.bundle
        labels = np.asarray(labels)
        lab_t = torch.as_tensor(labels)
        y = smooth_labels(labels, self.k, cfg.fnes_config.lambda1, x.dtype)
        theta = bundle.g_params()
        disc = 0.0
        if not cfg.adversarial:
            loss, parts = clean_loss(bundle, x, y, lab_t, margin=cfg.margin)
        else:
            x_adv, y_adv = self.adversarial_batch(x, labels, rng)
            if cfg.advinv_on:
                disc = self.discriminator_step(x, x_adv)
            kw = dict(margin=cfg.margin, enc_scale=cfg.enc_scale, advinv=cfg.advinv_on)
            if cfg.meta_on:
                split = partition_batch(labels, cfg.meta_ratio, rng, cfg.meta_split)
                parts_acc: dict[str, torch.Tensor] = {}

                def part_loss(idx):
                    def fn(params):
                        val, parts = total_loss(bundle, x[idx], y[idx], lab_t[idx], x_adv[idx],
                                                y_adv[idx], params=params, **kw)
                        for k, v in parts.items():
                            parts_acc[k] = parts_acc.get(k, 0) + v.detach()
                        return val
                    return fn

                te = split.test_indices
                loss, _, _ = self_meta_objective(theta, part_loss(split.train_indices),
                                                 part_loss(te) if len(te) else None,
                                                 cfg.inner_lr, cfg.first_order)
                parts = parts_acc
            else:
                loss, parts = total_loss(bundle, x, y, lab_t, x_adv, y_adv, **kw)
        if not torch.isfinite(loss):
            raise NonFiniteLoss("training loss is not finite")
        grads = torch.autograd.grad(loss, list(theta.values()))
        self.opt_g.zero_grad(set_to_none=True)
        for p, g in zip(theta.values(), grads):
            p.grad = g
        self.opt_g.step()
        scale = cfg.enc_scale if cfg.advinv_on else 0.0
        val = {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
        return LossReport(cls=val["cls"], tri=val["tri"], enc_adv=val["enc_adv"], disc=disc,
                          total=float(loss.detach()),
                          enc_scale=scale)

    # -- state -------------------------------------------------------------
    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for tag, opt, named in (("opt_g", self.opt_g, self.bundle.g_params()),
                                ("opt_d", self.opt_d, self.bundle.d_params())):
            for name, p in named.items():
                for key, val in opt.state.get(p, {}).items():
                    out[f"{tag}.{name}.{key}"] = torch.as_tensor(val)
        return out

    def load_optimizer_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for tag, opt, named in (("opt_g", self.opt_g, self.bundle.g_params()),
                                ("opt_d", self.opt_d, self.bundle.d_params())):
            for name, p in named.items():
                state = {}
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    t = tensors.get(f"{tag}.{name}.{key}")
                    if t is not None:
                        state[key] = t.clone()
                if state:
                    opt.state[p] = state


def train_step(trainer: Trainer, x, labels, rng) -> LossReport:
    return trainer.train_step(x, labels, rng)


# ---------------------------------------------------------------------------
# Epoch loop


def prepare_training_data(ds: ReIDDataset, cfg: TrainConfig) -> ReIDDataset:
    """Apply data balancing when the configuration asks for it (and it has not run yet)."""
    if not cfg.balance_on or ds.meta.get("balanced"):
        return ds
    bcfg = (BalanceConfig(cfg.delta1, cfg.delta2) if cfg.delta1
            else BalanceConfig.default_for(ds, cfg.delta2))
    out = balance(ds, bcfg, AugmentationGenerator(ds), np.random.default_rng([cfg.seed, 101]))
    out.meta["balanced"] = True
    return out


def default_arch(ds: ReIDDataset, cfg: TrainConfig) -> ArchSpec:
    _, h, w = ds.image_shape
    return ArchSpec(num_classes=ds.num_classes, height=h, width=w, **cfg.arch)


@dataclass
class FitResult:
    bundle: ModelBundle
    log: list[dict]
    epochs_done: int


def _checkpoint_info(cfg: TrainConfig) -> dict:
    return {"config": cfg.training_dict()}


def fit(ds: ReIDDataset, cfg: TrainConfig, out_dir: str | Path | None = None,
        resume: str | Path | None = None, bundle: ModelBundle | None = None,
        keep_checkpoints: bool | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs of P x K batches.

    Randomness is derived from ``(seed, epoch, step)`` so a run resumed from the
    checkpoint of epoch ``e`` continues bit-exactly. Checkpoints go to
    ``out_dir/last.ckpt`` after each epoch (and ``epoch_XXX.ckpt`` when kept).
    ``ds`` must already be balanced if balancing is wanted; see
    :func:`prepare_training_data`.
    """
    keep = cfg.keep_checkpoints if keep_checkpoints is None else keep_checkpoints
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        bundle, start = ck.bundle, ck.epoch
        trainer = Trainer(bundle, cfg)
        trainer.load_optimizer_tensors(ck.tensors)
    else:
        bundle = bundle or init_models(default_arch(ds, cfg), seed=cfg.seed)
        trainer = Trainer(bundle, cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    labels_all = ds.labels()
    images_all = torch.as_tensor(ds.images(), dtype=next(bundle.parameters()).dtype)
    n_batches = cfg.batches_per_epoch or max(1, len(ds) // (cfg.P * cfg.K))
    rows: list[dict] = []
    log_path = out / "train_log.csv" if out else None
    if log_path and log_path.exists():
        kept = [r for r in _read_csv(log_path) if int(r["epoch"]) < start]
        log_path.unlink()
        for r in kept:
            _append_csv(log_path, r)
    for epoch in range(start, cfg.epochs):
        trainer.set_epoch(epoch)
        erng = np.random.default_rng([cfg.seed, epoch])
        for step in range(n_batches):
            idx = sample_pk_indices(ds, cfg.P, cfg.K, erng)
            srng = np.random.default_rng([cfg.seed, epoch, step, 1])
            report = trainer.train_step(images_all[idx], labels_all[idx], srng)
            row = {"epoch": epoch, "step": step, **report.as_row()}
            rows.append(row)
            if log_path:
                _append_csv(log_path, row)
        done = epoch + 1
        ep = [r for r in rows if r["epoch"] == epoch]
        log.info("epoch %d  cls %.4f  tri %.4f  total %.4f", epoch,
                 np.mean([r["cls"] for r in ep]), np.mean([r["tri"] for r in ep]),
                 np.mean([r["total"] for r in ep]))
        if out:
            save_checkpoint(out / "last.ckpt", bundle, done, trainer.optimizer_tensors(),
                            _checkpoint_info(cfg))
            if keep:
                save_checkpoint(out / f"epoch_{done:03d}.ckpt", bundle, done,
                                trainer.optimizer_tensors(), _checkpoint_info(cfg))
    return FitResult(bundle, rows, max(start, cfg.epochs))


def _append_csv(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def epoch_means(rows: list[dict], key: str) -> list[float]:
    epochs = sorted({r["epoch"] for r in rows})
    return [float(np.mean([r[key] for r in rows if r["epoch"] == e])) for e in epochs]
