"""Data balancing: fill under-represented identities up to a count threshold, then
add pseudo samples under other cameras for identities dominated by one camera.

Pseudo samples come from a generator. The default :class:`AugmentationGenerator`
re-projects real images of the identity into the target camera; a diffusion
sampler can replace it as long as it honours :class:`PseudoSampleGenerator`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .dataset import ReIDDataset, Sample, identity_stats, shift_image
from .errors import GenerationFailed, InvalidSpec, UnknownIdentity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BalanceConfig:
    delta1: int
    delta2: float = 0.5

    def __post_init__(self):
        if int(self.delta1) < 1:
            raise InvalidSpec("delta1 must be >= 1")
        if not 0.0 < self.delta2 < 1.0:
            raise InvalidSpec("delta2 must lie in (0, 1)")

    @classmethod
    def default_for(cls, ds: ReIDDataset, delta2: float = 0.5) -> "BalanceConfig":
        counts = list(identity_stats(ds).per_id_count.values())
        return cls(max(1, int(np.floor(np.mean(counts) + 0.5))), delta2)


@dataclass(frozen=True)
class GeneratorRequest:
    identity: int  # class index in the source dataset
    camera: int
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise InvalidSpec("count must be >= 1")


class PseudoSampleGenerator(Protocol):
    def generate(self, req: GeneratorRequest, rng: np.random.Generator) -> list[Sample]: ...


class AugmentationGenerator:
    """Crop/flip/brightness jitter of real images of the requested identity.

    When the source dataset carries a camera model (procedural data), the image
    is first moved from its own camera to the requested one by undoing the source
    tint/shift and applying the target's.
    """

    def __init__(self, source: ReIDDataset, max_shift: int = 1, flip: bool | None = None,
                 brightness: float = 0.1):
        self.source = source
        self.max_shift = max_shift
        self.camera_model = source.meta.get("camera_model")
        # flipping mirrors identity-defining asymmetric patterns of procedural data
        self.flip = (self.camera_model is None) if flip is None else flip
        self.brightness = brightness
        self._raw = {c: r for r, c in source.identities.items()}
        self._real = {}
        for i, s in enumerate(source.samples):
            if not s.is_pseudo and not s.is_distractor:
                self._real.setdefault(s.identity, []).append(i)

    def generate(self, req: GeneratorRequest, rng: np.random.Generator) -> list[Sample]:
        if req.identity not in self._raw:
            raise UnknownIdentity(f"class index {req.identity} not in source dataset")
        raw = self._raw[req.identity]
        pool = self._real.get(raw)
        if not pool:
            raise GenerationFailed(f"identity {raw} has no real samples to derive from")
        if self.camera_model is not None and req.camera not in self.camera_model:
            raise GenerationFailed(f"camera {req.camera} missing from camera model")
        out = []
        for _ in range(req.count):
            src = self.source.samples[pool[int(rng.integers(len(pool)))]]
            img = src.image.astype(np.float64)
            if self.camera_model is not None:
                s_cam, t_cam = self.camera_model[src.camera], self.camera_model[req.camera]
                img = img / np.asarray(s_cam["gain"])[:, None, None]
                dy = t_cam["shift"][0] - s_cam["shift"][0]
                dx = t_cam["shift"][1] - s_cam["shift"][1]
                img = shift_image(img, dy, dx) * np.asarray(t_cam["gain"])[:, None, None]
            if self.max_shift:
                dy, dx = (int(v) for v in rng.integers(-self.max_shift, self.max_shift + 1, size=2))
                img = shift_image(img, dy, dx)
            if self.flip and rng.random() < 0.5:
                img = img[:, :, ::-1]
            img = img * rng.uniform(1 - self.brightness, 1 + self.brightness)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            if not np.all(np.isfinite(img)):
                raise GenerationFailed("non-finite pixels in generated sample")
            out.append(Sample(np.ascontiguousarray(img), raw, req.camera, is_pseudo=True))
        return out


def _request(gen: PseudoSampleGenerator, ds: ReIDDataset, raw: int, cam: int, count: int,
             rng: np.random.Generator) -> list[Sample]:
    samples = gen.generate(GeneratorRequest(ds.identities[raw], cam, count), rng)
    if len(samples) != count or any(s.identity != raw or s.camera != cam or not s.is_pseudo
                                    for s in samples):
        raise GenerationFailed(f"generator broke its contract for identity {raw}, camera {cam}")
    return samples


def balance_inter_id(ds: ReIDDataset, cfg: BalanceConfig, gen: PseudoSampleGenerator,
                     rng: np.random.Generator) -> ReIDDataset:
    """Append ``delta1 - n_i`` pseudo samples to every identity with ``n_i < delta1``."""
    stats = identity_stats(ds)
    extra: list[Sample] = []
    for raw, n in stats.per_id_count.items():
        missing = cfg.delta1 - n
        if missing <= 0:
            continue
        observed = sorted(c for (i, c) in stats.per_id_camera_count if i == raw)
        drawn = rng.choice(observed, size=missing, replace=True)
        for cam in sorted(set(drawn.tolist())):
            extra += _request(gen, ds, raw, int(cam), int((drawn == cam).sum()), rng)
    return ds.extend(extra) if extra else ds


def camera_set(ds: ReIDDataset) -> tuple[int, ...]:
    """Cameras of the deployment: those observed plus any listed in the camera model."""
    return tuple(sorted(set(ds.cameras) | {int(c) for c in ds.meta.get("camera_model", {})}))


def diversify_counts(ds: ReIDDataset, cfg: BalanceConfig) -> dict[int, dict[int, int]]:
    """Planned pseudo counts ``{identity: {camera: count}}`` for camera-dominated identities."""
    cams = camera_set(ds)
    if len(cams) < 2:
        return {}
    stats = identity_stats(ds)
    plan = {}
    for raw, (dom_cam, prop) in stats.dominant_camera.items():
        if prop <= cfg.delta2:
            continue
        per_cam = max(1, int(np.floor(stats.per_id_count[raw] / len(cams) + 0.5)))
        plan[raw] = {c: per_cam for c in cams if c != dom_cam}
    return plan


def diversify_intra_id(ds: ReIDDataset, cfg: BalanceConfig, gen: PseudoSampleGenerator,
                       rng: np.random.Generator) -> ReIDDataset:
    if len(camera_set(ds)) < 2:
        log.warning("dataset has a single camera; intra-ID diversification skipped")
        return ds
    plan = diversify_counts(ds, cfg)
    extra: list[Sample] = []
    for raw, per_cam in plan.items():
        for cam, count in per_cam.items():
            extra += _request(gen, ds, raw, cam, count, rng)
    meta = dict(ds.meta, camera_treated=sorted(plan))
    return ReIDDataset(ds.samples + tuple(extra), ds.split, meta)


def balance(ds: ReIDDataset, cfg: BalanceConfig, gen: PseudoSampleGenerator | None = None,
            rng: np.random.Generator | int = 0) -> ReIDDataset:
    rng = np.random.default_rng(rng)
    gen = gen or AugmentationGenerator(ds)
    return diversify_intra_id(balance_inter_id(ds, cfg, gen, rng), cfg, gen, rng)


def balance_report(before: ReIDDataset, after: ReIDDataset) -> list[dict]:
    """Per-identity before/after counts and dominant-camera shares."""
    treated = set(after.meta.get("camera_treated", []))
    sb, sa = identity_stats(before), identity_stats(after)
    rows = []
    for raw, n in sb.per_id_count.items():
        rows.append({
            "identity": raw,
            "count_before": n,
            "count_after": sa.per_id_count[raw],
            "pseudo_added": sa.per_id_count[raw] - n,
            "dominant_camera": sb.dominant_camera[raw][0],
            "dominant_prop_before": round(sb.dominant_camera[raw][1], 6),
            "dominant_prop_after": round(sa.dominant_camera[raw][1], 6),
            "camera_treated": raw in treated,
        })
    return rows


def write_balance_report(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["identity"])
        writer.writeheader()
        writer.writerows(rows)
