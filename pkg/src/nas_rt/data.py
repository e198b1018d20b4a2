"""Synthetic 3D segmentation tasks, the V3DS volume format, and splits.

The generator stands in for real cardiac volumes at desk scale: each sample
is a noisy background plus K-1 nested ellipsoids (outermost = class 1) whose
exact generating mask is the label. Everything is a pure function of
(config, seed); per-sample RNGs derive from (seed, index) so generation order
never matters.

V3DS file layout (little-endian): magic "V3DS", u16 version, u32 D, H, W, K,
then the image as an f32 raster and the label as a u8 raster. Images are
stored f32 (memory math stays f64), labels round-trip exactly.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"V3DS"
VERSION = 1
HEADER = struct.Struct("<4sHIIII")
BACKGROUND_INTENSITY = 0.2


@dataclass
class VolumeSample:
    image: np.ndarray   # [1, D, H, W] float64 in [0, 1]
    label: np.ndarray   # [D, H, W] integer class ids
    num_classes: int

    def validate(self):
        if self.image.shape[1:] != self.label.shape:
            raise DataError(
                f"image {self.image.shape} vs label {self.label.shape}")
        if self.label.min() < 0 or self.label.max() >= self.num_classes:
            raise DataError("label values outside [0, K)")
        return self


@dataclass
class Dataset:
    samples: list
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)


def _make_sample(shape, num_classes, noise, rng):
    d, h, w = shape
    label = np.zeros(shape, dtype=np.int64)
    zz, yy, xx = np.ogrid[:d, :h, :w]
    rho_hi = min(0.9, (min(shape) - 1) / min(shape))
    base_rho = rng.uniform(0.5, rho_hi, size=3)
    center = [rng.uniform(0.42 * e, 0.58 * e) for e in shape]
    # class c+1 sits strictly inside class c, mimicking nested anatomy
    for c in range(1, num_classes):
        shrink = 1.0 - 0.35 * (c - 1) / max(1, num_classes - 2) if c > 1 else 1.0
        radii = np.maximum(base_rho * shrink * np.array(shape) / 2.0, 1.0)
        inside = (((zz - center[0]) / radii[0]) ** 2
                  + ((yy - center[1]) / radii[1]) ** 2
                  + ((xx - center[2]) / radii[2]) ** 2) <= 1.0
        label[inside] = c
    image = np.full(shape, BACKGROUND_INTENSITY)
    for c in range(1, num_classes):
        level = 0.55 + 0.35 * (c - 1) / max(1, num_classes - 2) if num_classes > 2 \
            else 0.75
        image[label == c] = level + rng.uniform(-0.04, 0.04)
    if noise > 0:
        image = image + noise * rng.standard_normal(shape)
    image = np.clip(image, 0.0, 1.0)
    return VolumeSample(image=image[None], label=label,
                        num_classes=num_classes).validate()


def gen_synthetic(num, shape, num_classes, seed, noise=0.05):
    """Deterministic dataset of `num` nested-ellipsoid volumes."""
    if num_classes < 2:
        raise ConfigError("need at least background + one foreground class")
    shape = tuple(int(v) for v in shape)
    if len(shape) != 3:
        raise ConfigError(f"shape must be (D,H,W), got {shape}")
    if min(shape) < 4:
        raise ConfigError(f"extents {shape} too small to hold an ellipsoid")
    samples = []
    for i in range(num):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        samples.append(_make_sample(shape, num_classes, noise, rng))
    return Dataset(samples=samples, num_classes=num_classes,
                   provenance={"kind": "synthetic", "seed": int(seed),
                               "shape": list(shape), "noise": noise, "num": num})


def split_half(dataset, seed):
    """Disjoint 1:1 split; an odd leftover sample goes to the weight half."""
    n = len(dataset.samples)
    if n < 2:
        raise DataError(f"cannot split {n} samples in half")
    perm = np.random.default_rng(seed).permutation(n)
    cut = (n + 1) // 2
    mk = lambda idx, part: Dataset(
        samples=[dataset.samples[i] for i in idx],
        num_classes=dataset.num_classes,
        provenance={"split": part, "seed": int(seed), "of": dataset.provenance})
    return mk(perm[:cut], "train_weight"), mk(perm[cut:], "train_arch")


def kfold(dataset, folds, seed):
    """Balanced fold assignment: list of index lists, sizes differing by <= 1."""
    n = len(dataset.samples)
    if folds < 2:
        raise DataError("need at least 2 folds")
    if n < folds:
        raise DataError(f"{n} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // folds + (1 if f < n % folds else 0) for f in range(folds)]
    out, start = [], 0
    for size in sizes:
        out.append(sorted(int(i) for i in perm[start:start + size]))
        start += size
    return out


def fold_datasets(dataset, assignments, fold):
    """(train, eval) datasets for one held-out fold."""
    eval_idx = set(assignments[fold])
    train = [s for i, s in enumerate(dataset.samples) if i not in eval_idx]
    evl = [dataset.samples[i] for i in sorted(eval_idx)]
    mk = lambda samples, part: Dataset(samples=samples,
                                       num_classes=dataset.num_classes,
                                       provenance={"fold": fold, "part": part})
    return mk(train, "train"), mk(evl, "eval")


def save_volume(sample, path):
    if sample.num_classes > 256:
        raise FormatError(f"u8 label raster holds at most 256 classes, "
                          f"got {sample.num_classes}")
    d, h, w = sample.label.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, d, h, w, sample.num_classes))
        fh.write(sample.image[0].astype("<f4").tobytes())
        fh.write(sample.label.astype(np.uint8).tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise FormatError("file shorter than the V3DS header", offset=len(raw))
    magic, version, d, h, w, k = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    voxels = d * h * w
    img_end = HEADER.size + 4 * voxels
    lab_end = img_end + voxels
    if len(raw) != lab_end:
        raise FormatError(
            f"expected {lab_end} bytes, found {len(raw)}",
            offset=min(len(raw), img_end))
    image = np.frombuffer(raw, dtype="<f4", count=voxels,
                          offset=HEADER.size).astype(np.float64).reshape(d, h, w)
    label = np.frombuffer(raw, dtype=np.uint8, count=voxels,
                          offset=img_end).astype(np.int64).reshape(d, h, w)
    sample = VolumeSample(image=image[None], label=label, num_classes=k)
    if label.max() >= k:
        raise FormatError(f"label {label.max()} outside [0,{k})", offset=img_end)
    return sample


def save_dataset(dataset, out_dir):
    """Write volumes plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, s in enumerate(dataset.samples):
        name = f"volume_{i:04d}.v3ds"
        save_volume(s, os.path.join(out_dir, name))
        names.append(name)
    manifest = {"num_classes": dataset.num_classes, "volumes": names,
                "provenance": dataset.provenance}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_dataset(manifest_path):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(manifest_path)
    samples = [load_volume(os.path.join(base, name))
               for name in manifest["volumes"]]
    for s in samples:
        if s.num_classes != manifest["num_classes"]:
            raise DataError("volume/manifest class count mismatch")
    return Dataset(samples=samples, num_classes=manifest["num_classes"],
                   provenance=manifest.get("provenance", {}))


def augment(sample, rng, max_crop_frac=0.1):
    """Random H/W flips plus a crop-and-pad jitter of up to 10% per axis,
    applied identically to image and label."""
    image, label = sample.image.copy(), sample.label.copy()
    if rng.random() < 0.5:
        image, label = image[:, :, ::-1, :], label[:, ::-1, :]
    if rng.random() < 0.5:
        image, label = image[..., ::-1], label[..., ::-1]
    shape = label.shape
    crops = [rng.integers(0, max(1, int(e * max_crop_frac)) + 1) for e in shape]
    shifts = [rng.integers(0, c + 1) if c else 0 for c in crops]
    for axis, (c, lead) in enumerate(zip(crops, shifts)):
        if c == 0:
            continue
        size = shape[axis]
        sl = [slice(None)] * 3
        sl[axis] = slice(lead, size - (c - lead))
        image = image[(slice(None),) + tuple(sl)]
        label = label[tuple(sl)]
        pads = (lead, c - lead)
        image = np.pad(image, [(0, 0)] + [pads if a == axis else (0, 0)
                                          for a in range(3)])
        label = np.pad(label, [pads if a == axis else (0, 0) for a in range(3)])
    return VolumeSample(image=np.ascontiguousarray(image),
                        label=np.ascontiguousarray(label),
                        num_classes=sample.num_classes).validate()
