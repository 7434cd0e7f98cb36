"""Procedural labeled toy-image corpus, persistence and splits.

Each image is one class-defining object (shape x stripe texture x hue
family) at a random position and scale over cluttered, class-agnostic
background, so object patches are discriminative and background patches are
not. Generation is deterministic given the spec seed.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PCRP"
VERSION = 1

_SHAPES = ("disk", "square", "triangle", "cross", "ring")


@dataclass
class CorpusSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    channels: int = 3
    height: int = 64
    width: int = 64
    seed: int = 0

    def to_dict(self):
        return dict(num_classes=self.num_classes, samples_per_class=self.samples_per_class,
                    channels=self.channels, height=self.height, width=self.width, seed=self.seed)


@dataclass
class Corpus:
    spec: CorpusSpec
    pixels: np.ndarray   # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray   # (N,) int32
    ids: np.ndarray      # (N,) int32

    def __len__(self):
        return self.pixels.shape[0]

    def subset(self, idx) -> "Corpus":
        return Corpus(self.spec, self.pixels[idx], self.labels[idx], self.ids[idx])


def _hsv_to_rgb(h, s, v):
    h = h % 1.0
    i = int(h * 6)
    f = h * 6 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def _background(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    base = 0.45 + 0.1 * rng.random(3)
    for c in range(3):
        fx, fy = rng.uniform(0.03, 0.12, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        img[c] = base[c] + 0.06 * np.sin(2 * np.pi * fx * xx + ph[0]) \
                         + 0.06 * np.sin(2 * np.pi * fy * yy + ph[1])
    # sprinkle small gray blobs shared across classes
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2, 6)
        shade = rng.uniform(0.3, 0.7)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = 0.7 * img[:, mask] + 0.3 * shade
    img += rng.normal(0, 0.015, size=img.shape)
    return np.clip(img, 0, 1)


def _shape_mask(kind, h, w, cy, cx, r, yy, xx):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx < r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) < r * 0.85
    if kind == "triangle":
        return (dy > -r) & (dy < r * 0.8) & (np.abs(dx) < (r * 0.8 - dy) * 0.75)
    if kind == "cross":
        return ((np.abs(dx) < r * 0.3) & (np.abs(dy) < r)) | \
               ((np.abs(dy) < r * 0.3) & (np.abs(dx) < r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 < r * r) & (d2 > (0.55 * r) ** 2)
    raise ValueError(kind)


def _render_sample(spec: CorpusSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = _background(h, w, rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    shape = _SHAPES[label % len(_SHAPES)]
    striped = label >= len(_SHAPES)
    hue = label / spec.num_classes + rng.uniform(-0.03, 0.03)
    color = np.array(_hsv_to_rgb(hue, 0.9, 0.95))
    alt = np.array(_hsv_to_rgb(hue + 0.08, 0.9, 0.55))

    r = rng.uniform(0.14, 0.24) * min(h, w)
    cy = rng.uniform(r, h - r)
    cx = rng.uniform(r, w - r)
    mask = _shape_mask(shape, h, w, cy, cx, r, yy, xx)
    fill = np.broadcast_to(color[:, None, None], (3, h, w)).copy()
    if striped:
        stripes = np.sin((yy + xx) * (2 * np.pi / 6.0)) > 0
        fill[:, stripes] = alt[:, None]
    img[:, mask] = fill[:, mask]
    if spec.channels == 1:
        img = img.mean(axis=0, keepdims=True)
    return img.astype(np.float32)


def generate(spec: CorpusSpec) -> Corpus:
    n = spec.num_classes * spec.samples_per_class
    pixels = np.empty((n, spec.channels, spec.height, spec.width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int32)
    i = 0
    for cls in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, cls, j)))
            pixels[i] = _render_sample(spec, cls, rng)
            labels[i] = cls
            i += 1
    return Corpus(spec, pixels, labels, np.arange(n, dtype=np.int32))


def split(corpus: Corpus, val_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified, disjoint, deterministic train/val split."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
    train_idx, val_idx = [], []
    for cls in np.unique(corpus.labels):
        idx = np.flatnonzero(corpus.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, round(val_fraction * idx.size))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return corpus.subset(np.sort(train_idx)), corpus.subset(np.sort(val_idx))


def save(corpus: Corpus, path):
    header = json.dumps({"spec": corpus.spec.to_dict(), "n": len(corpus)}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(corpus.labels.astype("<i4").tobytes())
        fh.write(corpus.ids.astype("<i4").tobytes())
        fh.write(corpus.pixels.astype("<f4").tobytes())


def load(path) -> Corpus:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad corpus magic: expected {MAGIC!r}, found {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported corpus version: expected {VERSION}, found {version}")
        header = json.loads(fh.read(hlen))
        spec = CorpusSpec(**header["spec"])
        n = header["n"]
        labels = np.frombuffer(fh.read(4 * n), dtype="<i4")
        ids = np.frombuffer(fh.read(4 * n), dtype="<i4")
        npix = n * spec.channels * spec.height * spec.width
        raw = fh.read(4 * npix)
        if len(raw) != 4 * npix:
            raise ValueError(f"truncated corpus file: expected {4 * npix} pixel bytes, found {len(raw)}")
        pixels = np.frombuffer(raw, dtype="<f4").reshape(n, spec.channels, spec.height, spec.width)
    if pixels.min() < 0 or pixels.max() > 1:
        raise ValueError("corpus pixels outside [0, 1]")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError("corpus labels outside class range")
    return Corpus(spec, pixels.copy(), labels.astype(np.int32), ids.astype(np.int32))


def import_directory(root) -> Corpus:
    """Build a corpus from a directory tree of image files, one subdir per label."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not dirs:
        raise ValueError(f"no label subdirectories under {root}")
    pixels, labels = [], []
    for cls, d in enumerate(dirs):
        for f in sorted(d.iterdir()):
            img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            pixels.append(img.transpose(2, 0, 1))
            labels.append(cls)
    pix = np.stack(pixels)
    spec = CorpusSpec(num_classes=len(dirs), samples_per_class=0, channels=3,
                      height=pix.shape[2], width=pix.shape[3], seed=0)
    return Corpus(spec, pix, np.asarray(labels, dtype=np.int32),
                  np.arange(len(labels), dtype=np.int32))
