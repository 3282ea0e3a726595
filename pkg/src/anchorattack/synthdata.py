"""Seeded synthetic fixture images: colored shapes on textured backgrounds.

The class of an image is the identity of its single foreground shape
(square, disk, cross, triangle). Each class draws its fill color from a
class-specific palette so that mean-pooled encoder features stay linearly
separable even under a randomly initialized encoder; backgrounds are a
muted two-color gradient plus low-amplitude pixel noise. Everything about
an image is a pure function of (seed, image name), which keeps datasets
reproducible without shipping any files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .containers import read_tensor, write_tensor
from .seeding import derive_seed

SHAPE_CLASSES = ("square", "disk", "cross", "triangle")

# fill-color box per class: (channel lows, channel highs)
PALETTES = (
    ((0.75, 0.10, 0.10), (1.00, 0.30, 0.30)),  # square: reds
    ((0.10, 0.75, 0.10), (0.30, 1.00, 0.30)),  # disk: greens
    ((0.10, 0.10, 0.75), (0.30, 0.30, 1.00)),  # cross: blues
    ((0.75, 0.75, 0.10), (1.00, 1.00, 0.30)),  # triangle: yellows
)


def _background(rng, height: int, width: int) -> np.ndarray:
    c0 = rng.uniform(0.15, 0.45, size=3)
    c1 = rng.uniform(0.15, 0.45, size=3)
    axis = rng.integers(2)
    ramp = np.linspace(0.0, 1.0, height if axis == 0 else width)
    ramp = ramp[:, None] if axis == 0 else ramp[None, :]
    img = c0[:, None, None] * (1.0 - ramp) + c1[:, None, None] * ramp
    return img + rng.normal(0.0, 0.02, size=(3, height, width))


def _shape_mask(rng, label: int, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    cy = rng.uniform(0.38, 0.62) * height
    cx = rng.uniform(0.38, 0.62) * width
    r = rng.uniform(0.24, 0.27) * min(height, width)
    name = SHAPE_CLASSES[label]
    if name == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if name == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if name == "cross":
        bar = max(1.0, r / 2.5)
        horiz = (np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= r)
        vert = (np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= r)
        return horiz | vert
    # triangle: downward-narrowing wedge
    rel = (yy - (cy - r)) / (2.0 * r)
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * r)


def generate_image(label: int, seed: int, height: int = 32, width: int = 32) -> np.ndarray:
    if not 0 <= label < len(SHAPE_CLASSES):
        raise ValueError(f"label {label} outside [0, {len(SHAPE_CLASSES)})")
    rng = np.random.Generator(np.random.PCG64(seed))
    img = _background(rng, height, width)
    mask = _shape_mask(rng, label, height, width)
    lo, hi = PALETTES[label]
    color = rng.uniform(lo, hi)
    img = np.where(mask[None, :, :], color[:, None, None], img)
    return np.clip(img, 0.0, 1.0)


def make_dataset(
    n: int,
    seed: int,
    height: int = 32,
    width: int = 32,
    id_prefix: str = "img",
    n_classes: int = len(SHAPE_CLASSES),
) -> list[tuple[str, np.ndarray, int]]:
    """(image_id, pixels, label) triples; labels cycle through the classes."""
    out = []
    for i in range(n):
        image_id = f"{id_prefix}{i:04d}"
        label = i % n_classes
        img = generate_image(label, derive_seed(seed, image_id), height, width)
        out.append((image_id, img, label))
    return out


def write_dataset(directory, n: int, seed: int, **kwargs) -> Path:
    """Materialize a fixture dataset: tensor containers plus labels.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = make_dataset(n, seed, **kwargs)
    manifest = directory / "labels.csv"
    with open(manifest, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["image_id", "label", "path"])
        for image_id, img, label in rows:
            fname = f"{image_id}.att"
            write_tensor(directory / fname, img)
            writer.writerow([image_id, label, fname])
    return manifest


def load_labels(directory) -> list[tuple[str, int, str]]:
    manifest = Path(directory) / "labels.csv"
    rows = []
    with open(manifest, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append((rec["image_id"], int(rec["label"]), rec["path"]))
    return rows


def load_dataset(directory) -> list[tuple[str, np.ndarray, int]]:
    directory = Path(directory)
    return [
        (image_id, read_tensor(directory / path), label)
        for image_id, label, path in load_labels(directory)
    ]
