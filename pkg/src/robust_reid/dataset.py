"""Sample/dataset model, directory ingestion, procedural desk-scale data and P x K sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import EmptyDataset, InsufficientIdentities, InvalidSpec, MalformedName

log = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^(-?\d+)_c(\d+).*\.(jpg|jpeg|png)$", re.IGNORECASE)
PSEUDO_PATTERN = re.compile(r"^-?\d+_c\d+p")
SPLITS = ("train", "query", "gallery")
MANIFEST = "manifest.json"
DISTRACTOR = -1


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    identity: int
    camera: int
    is_pseudo: bool = False
    source: str | None = None

    @property
    def is_distractor(self) -> bool:
        return self.identity == DISTRACTOR


@dataclass(frozen=True)
class IdentityStats:
    per_id_count: dict[int, int]
    per_id_camera_count: dict[tuple[int, int], int]
    dominant_camera: dict[int, tuple[int, float]]


class ReIDDataset:
    """An immutable, ordered collection of samples plus identity/camera registries.

    ``identities`` maps raw identity labels to contiguous class indices. Distractors
    (identity -1) are kept as samples but never get a class index.
    """

    def __init__(self, samples: Iterable[Sample], split: str = "train", meta: dict | None = None):
        if split not in SPLITS:
            raise InvalidSpec(f"unknown split {split!r}")
        self.samples: tuple[Sample, ...] = tuple(samples)
        self.split = split
        self.meta = dict(meta or {})
        raw = sorted({s.identity for s in self.samples if not s.is_distractor})
        self.identities: dict[int, int] = {r: i for i, r in enumerate(raw)}
        self.cameras: tuple[int, ...] = tuple(sorted({s.camera for s in self.samples}))

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __repr__(self) -> str:
        return (f"ReIDDataset(split={self.split!r}, samples={len(self)}, "
                f"ids={self.num_classes}, cameras={list(self.cameras)})")

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].image.shape

    def class_index(self, identity: int) -> int:
        return self.identities.get(identity, -1)

    def labels(self) -> np.ndarray:
        """Class indices, -1 for distractors."""
        return np.array([self.class_index(s.identity) for s in self.samples], dtype=np.int64)

    def raw_ids(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def camera_ids(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def pseudo_mask(self) -> np.ndarray:
        return np.array([s.is_pseudo for s in self.samples], dtype=bool)

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        if not chosen:
            return np.zeros((0,) + (self.image_shape if self.samples else (3, 0, 0)), np.float32)
        return np.stack([s.image for s in chosen]).astype(np.float32, copy=False)

    def indices_by_identity(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for i, s in enumerate(self.samples):
            if not s.is_distractor:
                out[s.identity].append(i)
        return dict(sorted(out.items()))

    def extend(self, extra: Iterable[Sample]) -> "ReIDDataset":
        return ReIDDataset(self.samples + tuple(extra), self.split, self.meta)

    def subset(self, indices: Iterable[int], split: str | None = None) -> "ReIDDataset":
        return ReIDDataset([self.samples[i] for i in indices], split or self.split, self.meta)


# ---------------------------------------------------------------------------
# Ingestion


def parse_sample_name(filename: str) -> tuple[int, int]:
    """Parse ``<id>_c<cam>_*.<ext>``. Identity -1 marks a distractor."""
    m = NAME_PATTERN.match(Path(filename).name)
    if m is None:
        raise MalformedName(f"{filename!r} does not match <id>_c<cam>_*.<ext>")
    return int(m.group(1)), int(m.group(2))


def is_pseudo_name(filename: str) -> bool:
    return PSEUDO_PATTERN.match(Path(filename).name) is not None


def sample_filename(identity: int, camera: int, index: int, pseudo: bool = False) -> str:
    ident = f"{identity:04d}" if identity >= 0 else str(identity)
    return f"{ident}_c{camera}{'p' if pseudo else 's1'}_{index:06d}_00.png"


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def load_folder(folder: str | Path, split: str, meta: dict | None = None) -> ReIDDataset:
    """Read a flat folder of images named per the ``<id>_c<cam>_*`` grammar."""
    if split not in SPLITS:
        raise InvalidSpec(f"unknown split {split!r}")
    folder = Path(folder)
    if not folder.is_dir():
        raise EmptyDataset(f"{folder} does not exist")
    samples = []
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() not in (".jpg", ".jpeg", ".png"):
            continue
        try:
            identity, camera = parse_sample_name(path.name)
        except MalformedName as exc:
            raise MalformedName(f"{path}: {exc}") from None
        if identity == DISTRACTOR and split == "train":
            continue
        samples.append(Sample(read_image(path), identity, camera, is_pseudo_name(path.name), str(path)))
    if not samples:
        raise EmptyDataset(f"no usable images under {folder}")
    return ReIDDataset(samples, split, meta)


def load_dataset(root: str | Path, split: str) -> ReIDDataset:
    """Load ``root/<split>/``; camera metadata comes from ``root/manifest.json`` if present."""
    manifest = read_manifest(root)
    meta = {k: manifest[k] for k in ("camera_model", "synthetic_spec", "balanced") if k in manifest}
    if "camera_model" in meta:
        meta["camera_model"] = {int(c): v for c, v in meta["camera_model"].items()}
    return load_folder(Path(root) / split, split, meta)


def save_dataset(ds: ReIDDataset, root: str | Path, extra_manifest: dict | None = None) -> dict:
    """Write ``ds`` under ``root/<split>/`` and (re)write ``root/manifest.json``.

    Returns the manifest. Manifests of several splits written to the same root are merged.
    """
    root = Path(root)
    folder = root / ds.split
    folder.mkdir(parents=True, exist_ok=True)
    counters: Counter = Counter()
    files = []
    for s in ds.samples:
        key = (s.identity, s.camera, s.is_pseudo)
        name = sample_filename(s.identity, s.camera, counters[key], s.is_pseudo)
        counters[key] += 1
        write_image(folder / name, s.image)
        digest = hashlib.sha256((folder / name).read_bytes()).hexdigest()
        files.append({"file": f"{ds.split}/{name}", "identity": s.identity,
                      "camera": s.camera, "pseudo": s.is_pseudo, "sha256": digest})
    manifest = read_manifest(root)
    manifest.setdefault("splits", {})[ds.split] = files
    for key in ("camera_model", "synthetic_spec", "balanced"):
        if key in ds.meta:
            manifest[key] = ds.meta[key]
    if extra_manifest:
        manifest.update(extra_manifest)
    text = json.dumps(manifest, indent=1, sort_keys=True, default=_json_default)
    (root / MANIFEST).write_text(text)
    return json.loads(text)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))


# ---------------------------------------------------------------------------
# Statistics and sampling


def identity_stats(ds: ReIDDataset) -> IdentityStats:
    per_id: Counter = Counter()
    per_cam: Counter = Counter()
    for s in ds.samples:
        if s.is_distractor:
            continue
        per_id[s.identity] += 1
        per_cam[(s.identity, s.camera)] += 1
    dominant = {}
    for ident, n in per_id.items():
        cams = sorted((c, k) for (i, c), k in per_cam.items() if i == ident)
        best_cam, best = cams[0]
        for c, k in cams[1:]:
            if k > best:  # strict: ties keep the smaller camera id
                best_cam, best = c, k
        dominant[ident] = (best_cam, best / n)
    return IdentityStats(dict(sorted(per_id.items())), dict(sorted(per_cam.items())),
                         dict(sorted(dominant.items())))


def sample_pk_indices(ds: ReIDDataset, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    groups = ds.indices_by_identity()
    if len(groups) < P:
        raise InsufficientIdentities(f"need {P} identities, dataset has {len(groups)}")
    ids = list(groups)
    chosen = rng.choice(len(ids), size=P, replace=False)
    out = []
    for j in chosen:
        members = np.asarray(groups[ids[j]])
        if len(members) >= K:
            pick = rng.choice(members, size=K, replace=False)
        else:
            pick = np.concatenate([members, rng.choice(members, size=K - len(members), replace=True)])
        out.append(pick)
    out = np.concatenate(out)
    rng.shuffle(out)
    return out


def sample_pk_batch(ds: ReIDDataset, P: int, K: int, rng: np.random.Generator) -> list[Sample]:
    return [ds.samples[i] for i in sample_pk_indices(ds, P, K, rng)]


def split_query_gallery(ds: ReIDDataset, rng: np.random.Generator,
                        queries_per_id: int = 1) -> tuple[ReIDDataset, ReIDDataset]:
    """Hold out query images so that every query identity has a gallery match
    under a different camera."""
    query, gallery = [], []
    for ident, members in ds.indices_by_identity().items():
        members = list(members)
        order = rng.permutation(len(members))
        picked: list[int] = []
        for j in order:
            if len(picked) == queries_per_id:
                break
            cand = members[j]
            rest = [m for m in members if m != cand and m not in picked]
            if any(ds.samples[m].camera != ds.samples[cand].camera for m in rest):
                picked.append(cand)
        query.extend(picked)
        gallery.extend(m for m in members if m not in picked)
    gallery.extend(i for i, s in enumerate(ds.samples) if s.is_distractor)
    return ds.subset(sorted(query), "query"), ds.subset(sorted(gallery), "gallery")


# ---------------------------------------------------------------------------
# Procedural data


@dataclass
class SyntheticSpec:
    """Recipe for a procedural ReID dataset.

    Either ``per_id_counts`` (explicit), ``imbalance`` (a profile) or the flat
    ``count`` decides how many images each identity gets. Imbalance profiles:
    ``{"kind": "bimodal", "low": 2, "high": 20, "fraction_low": 0.5}`` and
    ``{"kind": "long_tail", "max": 30, "min": 2}``.
    ``camera_skew`` is the probability that an image comes from the identity's
    home camera instead of a uniformly drawn one.
    """

    num_ids: int = 20
    count: int = 16
    per_id_counts: list[int] | None = None
    imbalance: dict | None = None
    cameras: int = 4
    height: int = 32
    width: int = 16
    noise: float = 0.03
    camera_skew: float = 0.0
    id_offset: int = 0
    world_seed: int = 0
    split: str = "train"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def counts(self) -> list[int]:
        if self.per_id_counts is not None:
            if len(self.per_id_counts) != self.num_ids:
                raise InvalidSpec("per_id_counts length must equal num_ids")
            return [int(c) for c in self.per_id_counts]
        if self.imbalance is None:
            return [self.count] * self.num_ids
        kind = self.imbalance.get("kind", "bimodal")
        if kind == "bimodal":
            n_low = int(round(self.imbalance.get("fraction_low", 0.5) * self.num_ids))
            low, high = int(self.imbalance["low"]), int(self.imbalance["high"])
            # interleave so identity order carries no signal
            low_ids = set(np.linspace(0, self.num_ids - 1, n_low).round().astype(int)) if n_low else set()
            return [low if i in low_ids else high for i in range(self.num_ids)]
        if kind == "long_tail":
            hi, lo = int(self.imbalance["max"]), int(self.imbalance["min"])
            rank = np.arange(self.num_ids)
            vals = hi * (lo / hi) ** (rank / max(self.num_ids - 1, 1))
            perm = np.random.default_rng([self.world_seed, 31]).permutation(self.num_ids)
            return [int(round(v)) for v in vals[perm]]
        raise InvalidSpec(f"unknown imbalance kind {kind!r}")

    def validate(self) -> None:
        if self.num_ids < 2:
            raise InvalidSpec("num_ids must be >= 2")
        if self.cameras < 2:
            raise InvalidSpec("need >= 2 cameras")
        if self.height < 8 or self.width < 4:
            raise InvalidSpec("image too small")
        if not 0.0 <= self.camera_skew <= 1.0 or self.noise < 0:
            raise InvalidSpec("camera_skew must be in [0, 1] and noise >= 0")
        if self.split not in SPLITS:
            raise InvalidSpec(f"unknown split {self.split!r}")
        if min(self.counts()) < 1:
            raise InvalidSpec("every identity needs >= 1 image")


def camera_model(num_cameras: int, world_seed: int) -> dict[int, dict]:
    """Per-camera nuisance: channel gain (tint) and a fixed pixel shift. Cameras are 1-based."""
    rng = np.random.default_rng([world_seed, 7919])
    model = {}
    for c in range(1, num_cameras + 1):
        gain = rng.uniform(0.6, 1.4, size=3)
        shift = [int(rng.integers(-2, 3)), int(rng.integers(-1, 2))]
        model[c] = {"gain": [round(float(g), 6) for g in gain], "shift": shift}
    return model


def identity_appearance(raw_id: int, world_seed: int) -> dict:
    rng = np.random.default_rng([world_seed, 104729, raw_id + 1])
    return {
        "head": rng.uniform(0.1, 0.9, 3),
        "torso": rng.uniform(0.05, 0.95, 3),
        "legs": rng.uniform(0.05, 0.95, 3),
        "band": rng.uniform(0.05, 0.95, 3),
        "band_pos": rng.uniform(0.15, 0.7),
        "band_height": rng.uniform(0.12, 0.3),
        "band_side": int(rng.integers(0, 3)),  # 0 full width, 1 left half, 2 right half
        "leg_split": rng.uniform(0.0, 1.0) < 0.5,
    }


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a (C, H, W) image, replicating edge pixels into the gap."""
    if dy == 0 and dx == 0:
        return img.copy()
    _, h, w = img.shape
    pad = max(abs(dy), abs(dx))
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    return padded[:, pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def render_identity(app: dict, height: int, width: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    img = np.empty((3, height, width))
    rows = (np.arange(height) / height)[:, None]
    img[:] = 0.45 + 0.1 * rows[None]  # soft vertical gradient background
    ys = lambda a, b: slice(int(round(a * height)), int(round(b * height)))  # noqa: E731
    xs = lambda a, b: slice(int(round(a * width)), int(round(b * width)))  # noqa: E731
    img[:, ys(0.05, 0.2), xs(0.34, 0.66)] = app["head"][:, None, None]
    img[:, ys(0.2, 0.56), xs(0.2, 0.8)] = app["torso"][:, None, None]
    top = 0.2 + 0.36 * app["band_pos"]
    bot = min(top + 0.36 * app["band_height"], 0.56)
    left, right = [(0.2, 0.8), (0.2, 0.5), (0.5, 0.8)][app["band_side"]]
    img[:, ys(top, bot), xs(left, right)] = app["band"][:, None, None]
    img[:, ys(0.56, 0.96), xs(0.27, 0.73)] = app["legs"][:, None, None]
    if app["leg_split"]:
        img[:, ys(0.7, 0.96), xs(0.46, 0.54)] = 0.45 + 0.1 * rows[ys(0.7, 0.96)][None]
    return shift_image(img, dy, dx)


def apply_camera(img: np.ndarray, cam: dict) -> np.ndarray:
    dy, dx = cam["shift"]
    return shift_image(img, dy, dx) * np.asarray(cam["gain"])[:, None, None]


def make_synthetic(spec: SyntheticSpec | dict, rng: np.random.Generator | int) -> ReIDDataset:
    """Render a procedural dataset. A pure function of ``(spec, seed)``.

    Identity appearance and the camera model depend only on ``spec.world_seed``
    so train and test sets drawn with different seeds live in the same world.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(rng)
    cams = camera_model(spec.cameras, spec.world_seed)
    samples = []
    for i, n in enumerate(spec.counts()):
        raw = spec.id_offset + i
        app = identity_appearance(raw, spec.world_seed)
        home = raw % spec.cameras + 1
        for _ in range(n):
            if rng.random() < spec.camera_skew:
                cam = home
            else:
                cam = int(rng.integers(1, spec.cameras + 1))
            dy, dx = (int(v) for v in rng.integers(-1, 2, size=2))
            img = apply_camera(render_identity(app, spec.height, spec.width, dy, dx), cams[cam])
            img = img * rng.uniform(0.9, 1.1)
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, size=img.shape)
            samples.append(Sample(np.clip(img, 0.0, 1.0).astype(np.float32), raw, cam))
    meta = {"camera_model": cams, "synthetic_spec": spec.to_dict()}
    return ReIDDataset(samples, spec.split, meta)
