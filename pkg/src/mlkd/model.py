"""Patch backbone + GAP + linear classifier, and the knowledge it exposes.

The backbone is one MLP shared across all patches of the scene grid, so its
output is a feature-map tensor ``X`` of shape ``[HW, C]`` exactly as a CNN's
last block would give. Everything distillation needs (feature, logits, soft
target, attention map, CAMs) is read off ``X`` and the classifier head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor

_MAGIC = b"MLKDCKPT"
_VERSION = 1

TEACHER_WIDTHS = (64, 128, 64)
STUDENT_WIDTHS = (32, 16)


@dataclass
class PatchBackbone:
    patch_grid: tuple[int, int]
    patch_px: int
    widths: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def channels(self) -> int:
        return self.widths[-1]

    @property
    def hw(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """``[B, H, W]`` images to ``[B, HW, patch_px**2]`` row-major patches."""
        images = np.asarray(images, dtype=np.float64)
        rows, cols = self.patch_grid
        px = self.patch_px
        b, h, w = images.shape
        if h != rows * px or w != cols * px:
            raise ShapeError(
                f"forward: image {h}x{w} does not tile into a {rows}x{cols} grid of {px}px patches"
            )
        x = images.reshape(b, rows, px, cols, px).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, rows * cols, px * px)

    def __call__(self, patches: np.ndarray | Tensor) -> Tensor:
        h = patches if isinstance(patches, Tensor) else Tensor(patches)
        for w, b in zip(self.weights, self.biases):
            h = (h @ w + b).relu()
        return h


@dataclass
class ClassifierHead:
    weight: Tensor  # [C, K]
    bias: Tensor  # [K]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass
class Model:
    backbone: PatchBackbone
    head: ClassifierHead

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            out.append((f"backbone.{i}.weight", w))
            out.append((f"backbone.{i}.bias", b))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def metadata(self) -> dict:
        return {
            "patch_grid": list(self.backbone.patch_grid),
            "patch_px": self.backbone.patch_px,
            "widths": list(self.backbone.widths),
            "num_classes": self.head.num_classes,
        }


def init_model(
    num_classes: int,
    widths: tuple[int, ...],
    patch_grid: tuple[int, int] = (4, 4),
    patch_px: int = 8,
    seed: int = 0,
    stream: int = 0,
) -> Model:
    """He-initialised backbone and a small-weight head with zero bias.

    ``stream`` separates teacher and student draws made from the same seed.
    """
    rng = np.random.default_rng([seed, 0xB0, stream])
    fan_in = patch_px * patch_px
    weights, biases = [], []
    for width in widths:
        weights.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width)), requires_grad=True))
        biases.append(Tensor(np.zeros(width), requires_grad=True))
        fan_in = width
    head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(num_classes), requires_grad=True)
    backbone = PatchBackbone(tuple(patch_grid), patch_px, tuple(widths), weights, biases)
    return Model(backbone, ClassifierHead(head_w, head_b))


@dataclass
class KnowledgeBundle:
    """Everything one forward pass exposes; leading batch axis optional."""

    feature_maps: Tensor  # [..., HW, C]
    feature: Tensor  # [..., C]
    logits: Tensor  # [..., K]
    probs: Tensor  # [..., K]
    soft_target: Tensor  # [..., K]
    attention: Tensor  # [..., HW]
    cams: Tensor  # [..., K, HW]


def extract_soft_target(z: Tensor, tau: float) -> Tensor:
    """Temperature-softened sigmoid ``sigmoid(z / tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return (z * (1.0 / tau)).sigmoid()


def extract_attention(x: Tensor) -> Tensor:
    """Channel-wise sum of squares of ``[..., HW, C]`` feature maps."""
    return x.square().sum(axis=-1)


def extract_cams(x: Tensor, head: ClassifierHead) -> Tensor:
    """Per-class activation maps ``[..., K, HW]``: each channel weighted by the class column of W."""
    if x.shape[-1] != head.weight.shape[0]:
        raise ShapeError(
            f"extract_cams: feature maps have {x.shape[-1]} channels, classifier expects {head.weight.shape[0]}"
        )
    return (x @ head.weight).swapaxes(-1, -2)


def forward(model: Model, images: np.ndarray | Tensor, tau: float = 1.0) -> KnowledgeBundle:
    """Run a single ``[H, W]`` image or a ``[B, H, W]`` batch."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = data.ndim == 2
    if single:
        data = data[None]
    if data.ndim != 3:
        raise ShapeError(f"forward: expected [H, W] or [B, H, W] input, got {data.shape}")

    x = model.backbone(model.backbone.patchify(data))
    f = x.mean(axis=-2)
    z = f @ model.head.weight + model.head.bias
    bundle = KnowledgeBundle(
        feature_maps=x,
        feature=f,
        logits=z,
        probs=z.sigmoid(),
        soft_target=extract_soft_target(z, tau),
        attention=extract_attention(x),
        cams=extract_cams(x, model.head),
    )
    if single:
        for name, value in vars(bundle).items():
            setattr(bundle, name, value.reshape(value.shape[1:]))
    return bundle


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Gradient-free logits for a stack of images."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(model, images[start:start + batch_size]).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.head.num_classes))


def save_checkpoint(path: str | Path, params: list[tuple[str, Tensor]], metadata: dict) -> None:
    """Write named float64 tensors behind a versioned header with a JSON metadata block."""
    meta = json.dumps(metadata, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    metadata = json.loads(raw[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return tensors, metadata


def save_model(path: str | Path, model: Model, extra: dict | None = None) -> None:
    meta = model.metadata()
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.named_parameters(), meta)


def load_model(path: str | Path) -> Model:
    tensors, meta = load_checkpoint(path)
    widths = tuple(meta["widths"])
    backbone = PatchBackbone(
        tuple(meta["patch_grid"]),
        meta["patch_px"],
        widths,
        [Tensor(tensors[f"backbone.{i}.weight"]) for i in range(len(widths))],
        [Tensor(tensors[f"backbone.{i}.bias"]) for i in range(len(widths))],
    )
    return Model(backbone, ClassifierHead(Tensor(tensors["head.weight"]), Tensor(tensors["head.bias"])))
