"""Synthetic "aging shapes": discs whose radius encodes the age group and whose
fill (solid or ring) is an attribute that must survive translation.

Analytic oracles read group, attribute and position straight off the raster,
so evaluation does not depend on any learned classifier.
"""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

SIZE = 32
CENTER = 16
RADII = (4, 7, 10, 13)
RING_WIDTH = 2
N_GROUPS = len(RADII)
N_ATTRS = 2
MAX_SHIFT = 3
NOISE_STD = 8.0
THRESHOLD = 128

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE]


class OracleError(ValueError):
    """Raised when an oracle cannot read an image (e.g. empty foreground)."""


@dataclass
class ToySample:
    image: np.ndarray  # (1, 32, 32) uint8
    g: int
    a: int
    dx: int
    dy: int
    radius: float


def rasterize(radius, a, cx, cy):
    """Boolean foreground mask: pixel centres at integer coordinates."""
    d = np.hypot(_XX - cx, _YY - cy)
    if a == 0:
        return d < radius
    return (d >= radius - RING_WIDTH) & (d < radius)


def synth_image(g, a, dx, dy, rng, noise=True, jitter=True):
    if g not in range(N_GROUPS):
        raise ValueError(f"age group {g} out of range")
    if a not in (0, 1):
        raise ValueError(f"attribute {a} out of range")
    if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT:
        raise ValueError(f"shift ({dx}, {dy}) outside [-{MAX_SHIFT}, {MAX_SHIFT}]")
    radius = RADII[g] + (rng.uniform(-0.5, 0.5) if jitter else 0.0)
    img = rasterize(radius, a, CENTER + dx, CENTER + dy).astype(np.float64) * 255.0
    if noise:
        img = img + rng.normal(0.0, NOISE_STD, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ToySample(img[None], int(g), int(a), int(dx), int(dy), float(radius))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def _foreground(image):
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    fg = img >= THRESHOLD
    if not fg.any():
        raise OracleError("empty foreground")
    return img, fg


def oracle_center(image):
    """Foreground centroid ``(cx, cy)`` in pixel coordinates."""
    _, fg = _foreground(image)
    return float(_XX[fg].mean()), float(_YY[fg].mean())


def oracle_attr(image):
    """1 (ring) if the 3x3 patch around the centroid is dark, else 0 (solid)."""
    img, _ = _foreground(image)
    cx, cy = oracle_center(image)
    ix, iy = int(round(cx)), int(round(cy))
    patch = img[max(iy - 1, 0):iy + 2, max(ix - 1, 0):ix + 2].astype(np.float64)
    return int(patch.mean() < THRESHOLD)


def oracle_radius(image):
    """Outer-radius estimate: from area for solids, from the farthest
    foreground pixel for rings."""
    _, fg = _foreground(image)
    if oracle_attr(image) == 0:
        return float(np.sqrt(fg.sum() / np.pi))
    cx, cy = oracle_center(image)
    return float(np.hypot(_XX[fg] - cx, _YY[fg] - cy).max() + 0.5)


def oracle_age(image):
    r = oracle_radius(image)
    return int(np.argmin([abs(r - ref) for ref in RADII]))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3:
        img = img[0]
    Image.fromarray(img, mode="L").save(path, format="PPM")


def read_pgm(path):
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected an 8-bit grayscale PGM, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)[None]


def split_of(index, test_fraction=0.2):
    """Deterministic train/test assignment from a hash of the sample index."""
    h = int(hashlib.sha256(str(index).encode()).hexdigest()[:8], 16)
    return "test" if (h % 1000) < test_fraction * 1000 else "train"


MANIFEST = "manifest.csv"
FIELDS = ("file", "g", "a", "dx", "dy", "split")


def dataset_generate(count, seed, out_dir):
    """Write ``count`` balanced samples as PGM files plus ``manifest.csv``."""
    cells = N_GROUPS * N_ATTRS
    if count <= 0 or count % cells:
        raise ValueError(f"count must be a positive multiple of {cells}")
    from .numerics import make_rng

    rng = make_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        cell = i % cells
        g, a = divmod(cell, N_ATTRS)
        dx, dy = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
        sample = synth_image(g, a, dx, dy, rng)
        name = f"img_{i:05d}.pgm"
        write_pgm(os.path.join(out_dir, name), sample.image)
        rows.append({"file": name, "g": g, "a": a, "dx": dx, "dy": dy, "split": split_of(i)})
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 1, 32, 32) uint8
    g: np.ndarray
    a: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    files: list

    def __len__(self):
        return len(self.g)

    def subset(self, idx):
        idx = np.asarray(idx)
        return ToyDataset(self.images[idx], self.g[idx], self.a[idx], self.dx[idx], self.dy[idx],
                          [self.files[i] for i in idx])


def load_dataset(data_dir, split=None):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if split is None or r["split"] == split]
    if not rows:
        raise ValueError(f"no samples for split {split!r} in {data_dir}")
    images = np.stack([read_pgm(os.path.join(data_dir, r["file"])) for r in rows])
    col = lambda k: np.array([int(r[k]) for r in rows])
    return ToyDataset(images, col("g"), col("a"), col("dx"), col("dy"), [r["file"] for r in rows])
