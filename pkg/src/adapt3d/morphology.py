"""Grayscale morphology and the label-aware augmentation policy.

Erosion grows low-intensity (CSF-like) regions, so it plays the role of
"atrophy expansion" on intensity images; dilation is the max-dual and
plays "atrophy reduction". Out-of-bounds samples use replicate padding,
which avoids artificial dark or bright frames at the image border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import LABEL_AD, LABEL_MCI, LABEL_NC, Volume


class UnlabeledVolumeError(ValueError):
    """Augmentation policy needs a class label."""


@dataclass(frozen=True)
class StructuringElement:
    """Neighborhood offsets (s, t) with per-offset values (0 for flat)."""

    offsets: tuple[tuple[int, int], ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.offsets) != len(self.values):
            raise ValueError("offsets and values must pair up")
        if not self.offsets:
            raise ValueError("structuring element must be nonempty")
        if (0, 0) not in self.offsets:
            raise ValueError("structuring element must contain the origin")

    @property
    def is_flat(self):
        return all(v == 0.0 for v in self.values)

    def reflected(self):
        return StructuringElement(
            tuple((-s, -t) for s, t in self.offsets), self.values
        )


def flat_square(radius):
    """Flat square element of the given radius; radius 0 is the identity."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    offsets = tuple(
        (s, t)
        for s in range(-radius, radius + 1)
        for t in range(-radius, radius + 1)
    )
    return StructuringElement(offsets, (0.0,) * len(offsets))


def _filter(arr, se, axes, mode):
    """Shared min/max neighborhood filter over two spatial axes of ``arr``.

    mode "erode":  out(x,y) = min f(x+s, y+t) - b(s,t)
    mode "dilate": out(x,y) = max f(x-s, y-t) + b(s,t)
    Replicate padding on both spatial axes.
    """
    ax0, ax1 = axes
    r0 = max(abs(s) for s, _ in se.offsets)
    r1 = max(abs(t) for _, t in se.offsets)
    pad = [(0, 0)] * arr.ndim
    pad[ax0] = (r0, r0)
    pad[ax1] = (r1, r1)
    padded = np.pad(arr, pad, mode="edge")
    n0, n1 = arr.shape[ax0], arr.shape[ax1]
    out = None
    pick = np.minimum if mode == "erode" else np.maximum
    for (s, t), b in zip(se.offsets, se.values):
        if mode == "erode":
            o0, o1 = r0 + s, r1 + t
        else:
            o0, o1 = r0 - s, r1 - t
        index = [slice(None)] * arr.ndim
        index[ax0] = slice(o0, o0 + n0)
        index[ax1] = slice(o1, o1 + n1)
        term = padded[tuple(index)]
        if b:
            term = term - b if mode == "erode" else term + b
        out = term.copy() if out is None else pick(out, term, out=out)
    return out


def erode(img, se):
    """Grayscale erosion of a 2D field; anti-extensive for flat elements."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a nonempty 2-d image, got shape {img.shape}")
    return _filter(img, se, (0, 1), "erode")


def dilate(img, se):
    """Grayscale dilation of a 2D field; extensive for flat elements."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a nonempty 2-d image, got shape {img.shape}")
    return _filter(img, se, (0, 1), "dilate")


def _volume_filter(vol, se, axis, mode):
    """Apply the 2D filter to every slice perpendicular to ``axis``."""
    axes = tuple(a for a in range(3) if a != axis)
    vox = _filter(vol.voxels, se, axes, mode)
    return Volume(vox, label=vol.label, meta=dict(vol.meta))


def expand_atrophy(vol, se, axis):
    """Grow low-intensity regions slicewise: erosion of intensity."""
    return _volume_filter(vol, se, axis, "erode")


def reduce_atrophy(vol, se, axis):
    """Shrink low-intensity regions slicewise: dilation of intensity."""
    return _volume_filter(vol, se, axis, "dilate")


def augment_sample(vol, rng, se=None):
    """Label-aware augmentation policy.

    MCI volumes yield two samples: atrophy-expanded relabeled AD and
    atrophy-reduced relabeled NC. AD and NC volumes are augmented with
    probability 0.5 (expansion resp. reduction) and keep their label.
    The 2D operation is applied to every slice along one axis drawn from
    ``rng`` per application.

    Returns a list of (Volume, label) pairs.
    """
    if vol.label not in (LABEL_NC, LABEL_AD, LABEL_MCI):
        raise UnlabeledVolumeError("augmentation policy needs an NC/AD/MCI label")
    if se is None:
        se = flat_square(1)
    if vol.label == LABEL_MCI:
        expanded = expand_atrophy(vol, se, int(rng.integers(3)))
        expanded.label = LABEL_AD
        reduced = reduce_atrophy(vol, se, int(rng.integers(3)))
        reduced.label = LABEL_NC
        return [(expanded, LABEL_AD), (reduced, LABEL_NC)]
    if rng.random() >= 0.5:
        return [(vol, vol.label)]
    axis = int(rng.integers(3))
    if vol.label == LABEL_AD:
        return [(expand_atrophy(vol, se, axis), LABEL_AD)]
    return [(reduce_atrophy(vol, se, axis), LABEL_NC)]
