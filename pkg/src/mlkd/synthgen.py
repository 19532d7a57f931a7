"""Seeded glyph-grid scenes for multi-label classification, plus label corruption.

Each image is a grid of cells. An occupied cell shows the fixed binary glyph
of one class; ``y_full[k]`` is 1 when glyph ``k`` appears anywhere. Training
labels can then be degraded by dropping positives (``corrupt_missing``) or by
keeping a single positive per image (``to_single_label``).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

_GLYPH_SALT = 0x61C8
_MAGIC = b"MLKDDATA"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")  # magic, version, K, H, W, count


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 6
    grid: tuple[int, int] = (4, 4)
    cell_px: int = 8
    glyph_density: float = 0.3
    noise_sigma: float = 0.8
    n_train: int = 2000
    n_val: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.glyph_density < 1.0:
            raise ValueError(
                f"glyph_density must lie in (0, 1), got {self.glyph_density}; "
                "at 0 the rejection loop for empty images never terminates"
            )
        if self.grid[0] < 1 or self.grid[1] < 1 or self.cell_px < 1:
            raise ValueError(f"invalid grid {self.grid} / cell_px {self.cell_px}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("split sizes must be >= 0")

    def to_dict(self) -> dict:
        return {**asdict(self), "grid": list(self.grid)}

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid[0] * self.cell_px, self.grid[1] * self.cell_px


@dataclass
class Example:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    y_full: np.ndarray  # (K,) uint8
    y_obs: np.ndarray  # (K,) uint8
    cells: np.ndarray | None = field(default=None, repr=False)  # (rows, cols) class id, -1 empty

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Example):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.y_full, other.y_full)
            and np.array_equal(self.y_obs, other.y_obs)
        )


def glyph_masks(num_classes: int, cell_px: int) -> np.ndarray:
    """Fixed pseudo-random binary glyphs, one per class, shape (K, cell_px, cell_px)."""
    masks = []
    seen: set[bytes] = set()
    for k in range(num_classes):
        attempt = 0
        while True:
            rng = np.random.default_rng([_GLYPH_SALT, k, attempt])
            m = rng.random((cell_px, cell_px)) < 0.5
            key = m.tobytes()
            if m.any() and not m.all() and key not in seen:
                break
            attempt += 1
        seen.add(key)
        masks.append(m)
    return np.stack(masks).astype(np.float64)


def render(cells: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Noise-free image for a cell assignment."""
    rows, cols = cells.shape
    px = masks.shape[1]
    img = np.zeros((rows * px, cols * px))
    for r in range(rows):
        for c in range(cols):
            k = cells[r, c]
            if k >= 0:
                img[r * px:(r + 1) * px, c * px:(c + 1) * px] = masks[k]
    return img


def labels_from_cells(cells: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.uint8)
    present = cells[cells >= 0]
    y[present] = 1
    return y


def _sample_cells(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    while True:
        occupied = rng.random(spec.grid) < spec.glyph_density
        classes = rng.integers(0, spec.num_classes, size=spec.grid)
        if occupied.any():
            return np.where(occupied, classes, -1)


def _make_split(rng: np.random.Generator, spec: DatasetSpec, masks: np.ndarray, n: int) -> list[Example]:
    out = []
    for _ in range(n):
        cells = _sample_cells(rng, spec)
        clean = render(cells, masks)
        noise = rng.normal(0.0, spec.noise_sigma, size=clean.shape) if spec.noise_sigma > 0 else 0.0
        image = np.clip(clean + noise, 0.0, 1.0)
        y = labels_from_cells(cells, spec.num_classes)
        out.append(Example(image=image, y_full=y, y_obs=y.copy(), cells=cells))
    return out


def generate(spec: DatasetSpec) -> tuple[list[Example], list[Example]]:
    """Generate ``(train, val)`` deterministically from ``spec.seed``."""
    spec.validate()
    masks = glyph_masks(spec.num_classes, spec.cell_px)
    train_rng = np.random.default_rng([spec.seed, 0])
    val_rng = np.random.default_rng([spec.seed, 1])
    return _make_split(train_rng, spec, masks, spec.n_train), _make_split(val_rng, spec, masks, spec.n_val)


def corrupt_missing(examples: list[Example], keep_ratio: float, seed: int) -> list[Example]:
    """Keep each positive label independently with probability ``keep_ratio``.

    One uniform draw per (example, class) slot is compared against the ratio,
    so for a fixed seed the kept positives shrink monotonically as the ratio
    decreases.
    """
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must lie in [0, 1], got {keep_ratio}")
    if not examples:
        return []
    rng = np.random.default_rng([seed, 0xC0])
    u = rng.random((len(examples), len(examples[0].y_full)))
    out = []
    for ex, draws in zip(examples, u):
        keep = (draws < keep_ratio).astype(np.uint8)
        out.append(replace(ex, y_obs=(ex.y_full & keep).astype(np.uint8)))
    return out


def to_single_label(examples: list[Example], seed: int) -> list[Example]:
    """Reduce every example to exactly one observed positive, chosen uniformly."""
    rng = np.random.default_rng([seed, 0x51])
    out = []
    for i, ex in enumerate(examples):
        pos = np.flatnonzero(ex.y_full)
        if pos.size == 0:
            raise ValueError(f"example {i} has no positive labels")
        y = np.zeros_like(ex.y_full)
        y[pos[rng.integers(pos.size)]] = 1
        out.append(replace(ex, y_obs=y))
    return out


def stack(examples: list[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Arrays ``(images[N,H,W], y_full[N,K], y_obs[N,K])``."""
    images = np.stack([e.image for e in examples])
    y_full = np.stack([e.y_full for e in examples]).astype(np.float64)
    y_obs = np.stack([e.y_obs for e in examples]).astype(np.float64)
    return images, y_full, y_obs


def save_dataset(path: str | Path, examples: list[Example]) -> None:
    if not examples:
        raise ValueError("cannot save an empty dataset")
    h, w = examples[0].image.shape
    k = len(examples[0].y_full)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, k, h, w, len(examples)))
        for ex in examples:
            fh.write(np.ascontiguousarray(ex.image, dtype="<f8").tobytes())
            fh.write(np.asarray(ex.y_full, dtype=np.uint8).tobytes())
            fh.write(np.asarray(ex.y_obs, dtype=np.uint8).tobytes())


def load_dataset(path: str | Path) -> list[Example]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, k, h, w, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    rec = h * w * 8 + 2 * k
    if len(raw) != _HEADER.size + count * rec:
        raise ValueError(f"{path}: expected {count} records of {rec} bytes")
    out = []
    off = _HEADER.size
    for _ in range(count):
        image = np.frombuffer(raw, dtype="<f8", count=h * w, offset=off).reshape(h, w).astype(np.float64)
        off += h * w * 8
        y_full = np.frombuffer(raw, dtype=np.uint8, count=k, offset=off).copy()
        off += k
        y_obs = np.frombuffer(raw, dtype=np.uint8, count=k, offset=off).copy()
        off += k
        out.append(Example(image=image, y_full=y_full, y_obs=y_obs))
    return out
