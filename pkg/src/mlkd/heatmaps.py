"""Plain-text PGM heatmaps of attention maps and CAMs.

Each map is min-max normalised to 0..255 and written as a P2 graymap; a JSON
sidecar next to it records the ``min``/``max`` needed to undo the scaling.
Convert for viewing with e.g. ``magick ex0000_attention.pgm -scale 800% out.png``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Model, forward

DISPLAY_THRESHOLD = 0.5


def quantize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max scale to integers in 0..255; a constant map becomes uniform mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8), lo, hi
    q = np.rint((values - lo) / (hi - lo) * 255.0)
    return q.astype(np.uint8), lo, hi


def dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full(q.shape, lo, dtype=np.float64)
    return lo + q.astype(np.float64) / 255.0 * (hi - lo)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain-text PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:4 + w * h]], dtype=np.int64)
    if data.size != w * h or maxval != 255:
        raise ValueError(f"{path}: malformed PGM body")
    return data.reshape(h, w).astype(np.uint8)


def write_map(path: Path, values: np.ndarray, meta: dict | None = None) -> None:
    q, lo, hi = quantize(values)
    write_pgm(path, q)
    sidecar = {"min": lo, "max": hi, "shape": list(values.shape), **(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_map(path: str | Path) -> np.ndarray:
    """Reconstruct map values from a PGM and its sidecar."""
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    return dequantize(read_pgm(path), side["min"], side["max"])


def emit_heatmaps(
    model: Model,
    images: np.ndarray,
    indices: list[int],
    outdir: str | Path,
    threshold: float = DISPLAY_THRESHOLD,
) -> list[Path]:
    """Write image, attention map and per-class CAMs (classes with probability > threshold)."""
    if not indices:
        raise ValueError("no examples selected")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows, cols = model.backbone.patch_grid
    written = []
    for idx in indices:
        bundle = forward(model, images[idx])
        stem = f"ex{idx:04d}"
        path = outdir / f"{stem}_image.pgm"
        write_map(path, images[idx], {"kind": "image", "example": idx})
        written.append(path)

        path = outdir / f"{stem}_attention.pgm"
        write_map(path, bundle.attention.data.reshape(rows, cols), {"kind": "attention", "example": idx})
        written.append(path)

        probs = bundle.probs.data
        for k in np.flatnonzero(probs > threshold):
            p = float(probs[k])
            path = outdir / f"{stem}_cam_k{k}_p{p:.3f}.pgm"
            write_map(
                path, bundle.cams.data[k].reshape(rows, cols),
                {"kind": "cam", "example": idx, "class": int(k), "prob": p},
            )
            written.append(path)
    return written
