"""Encoder E, classifier H and feature discriminator D, plus the checkpoint format.

All three networks live in one :class:`ModelBundle`. The ReID model G = H(E(.))
owns every parameter under the ``encoder.`` and ``classifier.`` prefixes; the
discriminator owns ``discriminator.``. ``ModelBundle.forward`` only touches G, so
``torch.func.functional_call`` with a G-parameter dict gives the functional view
the meta step differentiates through.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"RRIDCKPT"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"version", "epoch", "arch", "info",
              "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    ...       concatenated raw tensor bytes, offsets relative to payload start

The header is written with sorted keys and no timestamps, so identical state
gives byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, InvalidSpec, ShapeMismatch

PROB_CLAMP = 1e-7
MAGIC = b"RRIDCKPT"
FORMAT_VERSION = 1
G_PREFIXES = ("encoder.", "classifier.")
D_PREFIX = "discriminator."


@dataclass
class ArchSpec:
    num_classes: int
    embed_dim: int = 64
    channels: tuple[int, ...] = (16, 32)
    height: int = 32
    width: int = 16
    in_channels: int = 3
    disc_hidden: int = 64
    groups: int = 4  # GroupNorm groups; 0 disables normalisation

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise InvalidSpec("num_classes must be >= 1")
        if self.embed_dim < 1 or any(c < 1 for c in self.channels) or self.disc_hidden < 1:
            raise InvalidSpec("layer widths must be positive")
        if self.height < 4 or self.width < 4 or self.in_channels < 1:
            raise InvalidSpec("input too small")
        if self.groups and any(c % self.groups for c in (*self.channels, self.embed_dim)):
            raise InvalidSpec("channel counts must be divisible by groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _block(cin: int, cout: int, groups: int, pool: bool) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1)]
    if groups:
        layers.append(nn.GroupNorm(groups, cout))
    layers.append(nn.ReLU())
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


class Encoder(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        widths = (arch.in_channels, *arch.channels, arch.embed_dim)
        layers = []
        for j in range(len(widths) - 1):
            layers += _block(widths[j], widths[j + 1], arch.groups, pool=j < len(widths) - 2)
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class ModelBundle(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.classifier = nn.Linear(arch.embed_dim, arch.num_classes)
        self.discriminator = nn.Sequential(
            nn.Linear(arch.embed_dim, arch.disc_hidden), nn.ReLU(), nn.Linear(arch.disc_hidden, 1))

    def forward(self, images):
        """G only: returns ``(features, logits)``."""
        feats = self.encoder(images)
        return feats, self.classifier(feats)

    def g_params(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith(G_PREFIXES)}

    def d_params(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith(D_PREFIX)}

    def vector(self, part: str) -> torch.Tensor:
        """Flat copy of one parameter group: ``encoder``, ``classifier``, ``discriminator`` or ``G``."""
        if part == "G":
            params = self.g_params().values()
        else:
            params = [p for n, p in self.named_parameters() if n.startswith(part + ".")]
        return torch.cat([p.detach().reshape(-1) for p in params])


def init_models(arch: ArchSpec | dict, seed: int = 0, dtype=torch.float32) -> ModelBundle:
    if isinstance(arch, dict):
        arch = ArchSpec.from_dict(arch)
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle = ModelBundle(arch)
    return bundle.to(dtype).eval()


def _check_images(bundle: ModelBundle, images: torch.Tensor) -> None:
    a = bundle.arch
    if images.dim() != 4 or tuple(images.shape[1:]) != (a.in_channels, a.height, a.width):
        raise ShapeMismatch(f"expected images (N, {a.in_channels}, {a.height}, {a.width}), "
                            f"got {tuple(images.shape)}")


def _check_features(bundle: ModelBundle, features: torch.Tensor) -> None:
    if features.dim() != 2 or features.shape[1] != bundle.arch.embed_dim:
        raise ShapeMismatch(f"expected features (N, {bundle.arch.embed_dim}), "
                            f"got {tuple(features.shape)}")


def as_tensor(x, like: ModelBundle) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def encode(bundle: ModelBundle, images) -> torch.Tensor:
    images = as_tensor(images, bundle)
    _check_images(bundle, images)
    return bundle.encoder(images)


def classify(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    _check_features(bundle, features)
    return bundle.classifier(features)


def discriminate(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    """Probability that each feature row came from a clean image, kept inside (0, 1)."""
    _check_features(bundle, features)
    p = torch.sigmoid(bundle.discriminator(features).squeeze(-1))
    return p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# Checkpoints


_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def save_checkpoint(path: str | Path, bundle: ModelBundle, epoch: int,
                    extra_tensors: dict[str, torch.Tensor] | None = None,
                    info: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in bundle.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "epoch": int(epoch), "arch": bundle.arch.to_dict(),
                         "info": info or {}, "tensors": table}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


@dataclass
class Checkpoint:
    bundle: ModelBundle
    epoch: int
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[20:20 + hlen])
    payload = memoryview(data)[20 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    arch = ArchSpec.from_dict(header["arch"])
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    dtype = next(iter(model_state.values())).dtype
    bundle = ModelBundle(arch).to(dtype)
    bundle.load_state_dict(model_state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return Checkpoint(bundle.eval(), header["epoch"], extra, header["info"])
