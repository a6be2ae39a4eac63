"""Deterministic preprocessing, phantom corpus generation, and dataset builds.

Preprocessing is fully deterministic: aspect-preserving resize (short side to
the target), center crop, then a linear map of the declared input range to
exactly [-1, 1]. No stochastic augmentation anywhere.

Phantoms stand in for a private clean corpus: seeded compositions of
soft-edged ellipses and ribbons on a dark background, values in [0, 1].

A dataset build preprocesses each clean image, draws one or more SSIM-gated
corrupted partners, assigns TRAIN/VAL/TEST splits by clean-image identity
(no leakage), and persists everything under one directory:

    images/clean_00000.npy (+ .png preview)
    images/corr_00000_0.npy (+ .png)
    manifest.jsonl          # header line, then one PairRecord per line

The .npy sidecars are authoritative for exact reload; the PNGs are 8-bit
previews only. Rebuilding with the same seed reproduces the manifest
byte-for-byte.
"""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import expit

from .errors import BuildError, GateFailure, ParameterError, ShapeError
from .motion import (
    DEFAULT_DMAX_PIXELS,
    DEFAULT_THETA_MAX_RAD,
    GateSpec,
    PairRecord,
    generate_pair,
)

MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")


class Interpolation(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class Crop(str, Enum):
    CENTER = "center"


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int = 128
    interpolation: Interpolation = Interpolation.BILINEAR
    crop: Crop = Crop.CENTER

    def __post_init__(self):
        if self.target_size < 1:
            raise ParameterError(f"target_size must be positive, got {self.target_size}")

    def to_json(self):
        return {
            "target_size": self.target_size,
            "interpolation": self.interpolation.value,
            "crop": self.crop.value,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            target_size=int(obj["target_size"]),
            interpolation=Interpolation(obj["interpolation"]),
            crop=Crop(obj["crop"]),
        )


_PIL_RESAMPLE = {
    Interpolation.NEAREST: Image.Resampling.NEAREST,
    Interpolation.BILINEAR: Image.Resampling.BILINEAR,
}


def preprocess(image, spec, value_range=(0.0, 1.0)):
    """Resize, center-crop, and normalize an image to exactly [-1, 1].

    Args:
        image: 2-D array in the declared value range.
        spec: PreprocessSpec (target size, interpolation).
        value_range: (lo, hi) range of the input values.

    Returns:
        (target_size, target_size) float32 array in [-1, 1].
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ShapeError(f"preprocess expects a 2-D image, got ndim={img.ndim}")
    h, w = img.shape
    t = spec.target_size
    if min(h, w) < t:
        raise ShapeError(f"image {img.shape} smaller than target size {t}")

    if (h, w) != (t, t):
        scale = t / min(h, w)
        new_h = t if h <= w else int(round(h * scale))
        new_w = t if w <= h else int(round(w * scale))
        pil = Image.fromarray(img, mode="F")
        pil = pil.resize((new_w, new_h), resample=_PIL_RESAMPLE[spec.interpolation])
        img = np.asarray(pil, dtype=np.float32)
        top = (new_h - t) // 2
        left = (new_w - t) // 2
        img = img[top : top + t, left : left + t]

    lo, hi = value_range
    if hi <= lo:
        raise ParameterError(f"invalid value range {value_range}")
    out = (img - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _soft_ellipse(xx, yy, rng, min_axis=0.10, max_axis=0.55):
    cx, cy = rng.uniform(-0.45, 0.45, size=2)
    a = rng.uniform(min_axis, max_axis)
    b = rng.uniform(min_axis, max_axis)
    phi = rng.uniform(0.0, np.pi)
    softness = rng.uniform(0.02, 0.10)
    xr = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
    yr = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
    q = (xr / a) ** 2 + (yr / b) ** 2
    return expit((1.0 - q) / softness)


def _soft_ribbon(xx, yy, rng):
    phi = rng.uniform(0.0, np.pi)
    xr = xx * np.cos(phi) + yy * np.sin(phi)
    yr = -xx * np.sin(phi) + yy * np.cos(phi)
    c0 = rng.uniform(-0.4, 0.4)
    c1 = rng.uniform(-0.8, 0.8)
    c2 = rng.uniform(-1.5, 1.5)
    width = rng.uniform(0.03, 0.12)
    softness = rng.uniform(0.01, 0.05)
    dist = np.abs(yr - (c0 + c1 * xr + c2 * xr**2))
    return expit((width - dist) / softness)


def generate_phantom(seed, size=128):
    """Deterministic synthetic grayscale phantom in [0, 1].

    Composes 3-7 seeded soft-edged ellipses and ribbons of varying intensity
    on a dark background, loosely mimicking anatomical structure. One large
    dim body ellipse is always present so the mean intensity never collapses.
    """
    if size < 32:
        raise ParameterError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    coords = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(coords, coords)
    body = rng.uniform(0.25, 0.55) * _soft_ellipse(xx, yy, rng, min_axis=0.4, max_axis=0.7)
    canvas = body
    n_shapes = int(rng.integers(2, 7))
    for _ in range(n_shapes):
        intensity = rng.uniform(0.2, 0.95)
        if rng.random() < 0.3:
            mask = _soft_ribbon(xx, yy, rng)
        else:
            mask = _soft_ellipse(xx, yy, rng)
        canvas = np.maximum(canvas, intensity * mask)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


@dataclass
class DatasetManifest:
    """All persisted pairs of one build, each record tagged with its split."""

    records: list
    gate: GateSpec
    preprocess: PreprocessSpec
    seed: int
    root: Path | None = None

    def records_for(self, split):
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        header = {
            "kind": "header",
            "schema": 1,
            "gate": {"s0": self.gate.s0, "s1": self.gate.s1, "max_retries": self.gate.max_retries},
            "preprocess": self.preprocess.to_json(),
            "seed": self.seed,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for rec in self.records:
            lines.append(json.dumps({"kind": "pair", **rec.to_json()}, sort_keys=True))
        (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
        self.root = root
        return root / MANIFEST_NAME

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        records = []
        header = None
        for line in path.read_text().splitlines():
            obj = json.loads(line)
            if obj["kind"] == "header":
                header = obj
            else:
                records.append(PairRecord.from_json(obj))
        if header is None:
            raise BuildError(f"manifest {path} has no header line")
        return cls(
            records=records,
            gate=GateSpec(**header["gate"]),
            preprocess=PreprocessSpec.from_json(header["preprocess"]),
            seed=int(header["seed"]),
            root=path.parent,
        )

    def resolve(self, rel):
        if self.root is None:
            raise BuildError("manifest has no root directory; save or load it first")
        return Path(self.root) / rel


def save_image(path_base, image):
    """Persist an image as an exact .npy sidecar plus an 8-bit .png preview."""
    arr = np.asarray(image, dtype=np.float32)
    np.save(str(path_base) + ".npy", arr)
    view = np.clip((arr + 1.0) / 2.0 if arr.min() < 0 else arr, 0.0, 1.0)
    Image.fromarray((view * 255.0).round().astype(np.uint8)).save(str(path_base) + ".png")


def load_image(path):
    """Load an image; .npy sidecars are exact, anything else goes through PIL."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    img = Image.open(path).convert("F")
    arr = np.asarray(img, dtype=np.float32)
    if arr.max() > 1.5:  # 8/16-bit file: map to [0, 1]
        arr = arr / 255.0
    return arr


def _split_counts(n, fractions):
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def build_dataset(
    clean_sources,
    gate,
    preprocess_spec,
    out_dir,
    split_fractions=(0.8, 0.1, 0.1),
    seed=0,
    pairs_per_clean=1,
    failure_tolerance=0.0,
    dmax=DEFAULT_DMAX_PIXELS,
    theta_max=DEFAULT_THETA_MAX_RAD,
):
    """Build and persist a paired dataset.

    Args:
        clean_sources: either an int (number of phantoms to synthesize) or a
            list of image file paths.
        gate: SSIM acceptance interval for the corrupted partner.
        preprocess_spec: deterministic preprocessing configuration.
        out_dir: output directory (created if needed).
        split_fractions: (train, val, test) fractions summing to 1.
        seed: master seed; every derived draw is a function of it.
        pairs_per_clean: corrupted partners per clean image.
        failure_tolerance: fraction of clean images allowed to fail the gate
            before the build aborts.

    Returns:
        DatasetManifest covering all splits, already saved to out_dir.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    if isinstance(clean_sources, int):
        if clean_sources < 1:
            raise ParameterError("phantom count must be >= 1")
        loaders = [
            (lambda idx=i: generate_phantom(seed * 1_000_000 + idx, size=preprocess_spec.target_size))
            for i in range(clean_sources)
        ]
    else:
        if len(clean_sources) == 0:
            raise ParameterError("clean_sources must be non-empty")
        loaders = [(lambda p=path: load_image(p)) for path in clean_sources]

    n = len(loaders)
    split_rng = np.random.default_rng(seed)
    order = split_rng.permutation(n)
    counts = _split_counts(n, split_fractions)
    split_of = {}
    cursor = 0
    for split, count in zip(SPLITS, counts):
        for idx in order[cursor : cursor + count]:
            split_of[int(idx)] = split
        cursor += count

    records = []
    failures = []
    for idx in range(n):
        clean = preprocess(loaders[idx](), preprocess_spec)
        clean_base = images_dir / f"clean_{idx:05d}"
        save_image(clean_base, clean)
        for k in range(pairs_per_clean):
            pair_seed = seed + idx * max(pairs_per_clean, 1) + k
            try:
                rec = generate_pair(
                    clean, gate, pair_seed, value_range=(-1.0, 1.0), dmax=dmax, theta_max=theta_max
                )
            except GateFailure as exc:
                failures.append((idx, k, exc.best_ssim))
                continue
            corr_base = images_dir / f"corr_{idx:05d}_{k}"
            save_image(corr_base, rec.corrupted)
            rec.clean_path = str(clean_base.relative_to(out_dir)) + ".npy"
            rec.corrupted_path = str(corr_base.relative_to(out_dir)) + ".npy"
            rec.split = split_of[idx]
            records.append(rec)

    if failures and len(failures) > failure_tolerance * n * pairs_per_clean:
        listing = ", ".join(f"clean {i} pair {k} (best ssim {s:.3f})" for i, k, s in failures[:10])
        raise BuildError(f"{len(failures)} gate failures exceed tolerance: {listing}")

    manifest = DatasetManifest(
        records=records, gate=gate, preprocess=preprocess_spec, seed=seed, root=out_dir
    )
    manifest.save(out_dir)
    return manifest


def validate_manifest(manifest):
    """Check manifest <-> disk consistency; returns the number of records checked."""
    size = manifest.preprocess.target_size
    for rec in manifest.records:
        for rel in (rec.clean_path, rec.corrupted_path):
            path = manifest.resolve(rel)
            if not path.exists():
                raise BuildError(f"manifest references missing file {path}")
            arr = np.load(path)
            if arr.shape != (size, size):
                raise BuildError(f"{path} has shape {arr.shape}, expected {(size, size)}")
            if arr.min() < -1.0 or arr.max() > 1.0:
                raise BuildError(f"{path} holds values outside [-1, 1]")
    return len(manifest.records)
