"""Volume ingestion, preprocessing, and synthetic phantom generation.

The on-disk format is deliberately tiny and bit-exact:

    magic "ADVL" | version u32 LE | X, Y, Z u32 LE | label i32 LE (-1 =
    unlabeled) | X*Y*Z float32 LE, x fastest

A dataset directory is a flat folder of such files plus ``manifest.tsv``
with one ``filename<TAB>split`` line per volume.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_NC = 0
LABEL_AD = 1
LABEL_MCI = 2
LABEL_NAMES = {LABEL_NC: "nc", LABEL_AD: "ad", LABEL_MCI: "mci"}

MAGIC = b"ADVL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIi")

MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Malformed volume file: bad magic, truncation, or extent mismatch."""


class DegenerateVolumeError(ValueError):
    """Volume without enough variation for the requested operation."""


@dataclass
class Volume:
    """A 3D scalar field with an optional class label.

    ``voxels`` is float32 with shape (X, Y, Z), indexed [x, y, z].
    """

    voxels: np.ndarray
    label: int | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"voxels must be a 3-d array, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("voxels contain NaN or Inf")
        if self.label is not None and self.label not in LABEL_NAMES:
            raise ValueError(f"label must be one of {sorted(LABEL_NAMES)} or None")
        self.voxels = v

    @property
    def extents(self):
        return self.voxels.shape


def save_volume(vol, path):
    path = Path(path)
    x, y, z = vol.extents
    label = -1 if vol.label is None else vol.label
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, x, y, z, label)
    payload = np.ascontiguousarray(vol.voxels.ravel(order="F"), dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def load_volume(path):
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise VolumeFormatError(f"bad magic in {path}")
    if len(blob) < _HEADER.size:
        raise VolumeFormatError(f"truncated payload in {path}")
    _, version, x, y, z, label = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported format version {version} in {path}")
    body = blob[_HEADER.size :]
    if len(body) % 4:
        raise VolumeFormatError(f"truncated payload in {path}")
    count = len(body) // 4
    if count != x * y * z:
        raise VolumeFormatError(
            f"extent/payload mismatch in {path}: header says {x}*{y}*{z}, got {count} values"
        )
    vox = np.frombuffer(body, dtype="<f4").reshape((x, y, z), order="F")
    return Volume(np.ascontiguousarray(vox), label=None if label < 0 else int(label))


def write_manifest(directory, entries):
    """entries: iterable of (filename, split)."""
    lines = []
    for name, split in entries:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        lines.append(f"{name}\t{split}\n")
    (Path(directory) / MANIFEST_NAME).write_text("".join(lines))


def read_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise VolumeFormatError(f"{path}:{lineno}: bad manifest line {line!r}")
        entries.append((parts[0], parts[1]))
    return entries


def load_dataset(directory):
    """Load every manifest entry, grouped by split."""
    directory = Path(directory)
    out = {s: [] for s in SPLITS}
    for name, split in read_manifest(directory):
        out[split].append(load_volume(directory / name))
    return out


def resize_trilinear(vol, target):
    """Trilinear resample with corner-aligned sampling.

    Output index i along an axis of new extent E' samples the source at
    i*(E-1)/(E'-1), so both corners map exactly and affine fields are
    preserved. All extents must be >= 2 on both sides.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError(f"target must have 3 extents, got {target}")
    if min(vol.extents) < 2 or min(target) < 2:
        raise DegenerateVolumeError(
            f"resize needs extents >= 2 on both sides: {vol.extents} -> {target}"
        )
    data = vol.voxels.astype(np.float64)
    for axis in range(3):
        data = _lerp_axis(data, target[axis], axis)
    return Volume(data.astype(np.float32), label=vol.label, meta=dict(vol.meta))


def _lerp_axis(arr, new_len, axis):
    old = arr.shape[axis]
    if new_len == old:
        return arr
    pos = np.linspace(0.0, old - 1, new_len)
    lo = np.clip(np.floor(pos).astype(int), 0, old - 2)
    t = pos - lo
    shape = [1, 1, 1]
    shape[axis] = new_len
    t = t.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, lo + 1, axis=axis)
    return a + t * (b - a)


def normalize_zmuv(vol):
    """Zero-mean unit-variance intensity normalization."""
    v = vol.voxels.astype(np.float64)
    sd = v.std()
    if sd < 1e-12:
        raise DegenerateVolumeError("cannot normalize a constant volume")
    out = ((v - v.mean()) / sd).astype(np.float32)
    return Volume(out, label=vol.label, meta=dict(vol.meta))


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for synthetic head-like volumes with a class-dependent cavity.

    The cavity ("ventricle") radius interval must order NC < MCI < AD so
    the classes are separable by cavity volume at zero noise.
    """

    size: int = 64
    radius_nc: tuple[float, float] = (3.0, 5.0)
    radius_mci: tuple[float, float] = (6.5, 8.5)
    radius_ad: tuple[float, float] = (10.0, 12.0)
    noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("phantom size must be at least 8")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        for lo, hi in (self.radius_nc, self.radius_mci, self.radius_ad):
            if not 0 < lo <= hi:
                raise ValueError("radius intervals must be positive and ordered")
        if not (
            self.radius_nc[1] < self.radius_mci[0]
            and self.radius_mci[1] < self.radius_ad[0]
        ):
            raise ValueError("radius intervals must order NC < MCI < AD")

    @classmethod
    def scaled(cls, size, noise_sd=0.05, seed=0):
        """Default radii scaled proportionally from the 64-voxel baseline."""
        f = size / 64.0
        return cls(
            size=size,
            radius_nc=(3.0 * f, 5.0 * f),
            radius_mci=(6.5 * f, 8.5 * f),
            radius_ad=(10.0 * f, 12.0 * f),
            noise_sd=noise_sd,
            seed=seed,
        )

    def radius_interval(self, label):
        return {
            LABEL_NC: self.radius_nc,
            LABEL_MCI: self.radius_mci,
            LABEL_AD: self.radius_ad,
        }[label]


_BRAIN_INTENSITY = 1.0
_VENTRICLE_INTENSITY = 0.15


def generate_phantom(spec, label, rng):
    """Ellipsoidal bright "brain" with a central dark cavity plus noise.

    Deterministic for a given generator state; the cavity radius is drawn
    from the class interval of ``spec``.
    """
    if label not in (LABEL_NC, LABEL_AD, LABEL_MCI):
        raise ValueError(f"label must be NC/AD/MCI, got {label}")
    e = spec.size
    center = e / 2.0 + rng.uniform(-e / 32.0, e / 32.0, size=3)
    semi = 0.42 * e * (1.0 + rng.uniform(-0.05, 0.05, size=3))
    lo, hi = spec.radius_interval(label)
    radius = rng.uniform(lo, hi)
    vent_center = center + rng.uniform(-e / 32.0, e / 32.0, size=3)

    grid = np.indices((e, e, e), dtype=np.float64)
    brain = ((grid - center.reshape(3, 1, 1, 1)) / semi.reshape(3, 1, 1, 1)) ** 2
    inside_brain = brain.sum(axis=0) <= 1.0
    vent = ((grid - vent_center.reshape(3, 1, 1, 1)) / radius) ** 2
    inside_vent = vent.sum(axis=0) <= 1.0

    vox = np.zeros((e, e, e), dtype=np.float64)
    vox[inside_brain] = _BRAIN_INTENSITY
    vox[inside_vent & inside_brain] = _VENTRICLE_INTENSITY
    if spec.noise_sd > 0:
        vox += rng.normal(0.0, spec.noise_sd, size=vox.shape)
    return Volume(
        vox.astype(np.float32),
        label=label,
        meta={"ventricle_radius": f"{radius:.4f}"},
    )
