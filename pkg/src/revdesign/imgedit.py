"""Parameterized image-edit engine and procedural source-image synthesis.

Images are 32x32x3 float arrays with channel values in [0, 1]; every edit
clamps back into that range, so composing edits is a plain left fold. Each
operation takes one normalized value in [-1, 1] where 0 is the identity.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import UnknownOpError

IMG_SIZE = 32
OP_NAMES = ("brightness", "contrast", "saturation", "hue", "gamma")

# NTSC luma weights, shared by the saturation and hue operations.
_LUMA = np.array([0.299, 0.587, 0.114])

# RGB -> YIQ (FCC NTSC) and its exact inverse, computed once.
_RGB_TO_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def stable_hash(*parts) -> int:
    """Platform-independent 64-bit hash of ints/strings, for seeding."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True)
class EditOp:
    """One named edit with a normalized value in [-1, 1] (0 = identity)."""

    name: str
    value: float

    def __post_init__(self):
        if self.name not in OP_NAMES:
            raise UnknownOpError(f"unknown operation name: {self.name!r}")
        if not -1.0 <= self.value <= 1.0:
            raise ValueError(f"op value {self.value} outside [-1, 1]")


@dataclass(frozen=True)
class EditSpec:
    """Ordered list of 1..3 EditOps with pairwise-distinct names.

    Application order is the list order; no commutation is assumed.
    """

    ops: tuple[EditOp, ...]

    def __post_init__(self):
        if not 1 <= len(self.ops) <= 3:
            raise ValueError(f"spec must hold 1..3 ops, got {len(self.ops)}")
        names = [op.name for op in self.ops]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate op names in spec: {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.ops)


def _brightness(img: np.ndarray, p: float) -> np.ndarray:
    return np.clip(img + 0.5 * p, 0.0, 1.0)


def _contrast(img: np.ndarray, p: float) -> np.ndarray:
    return np.clip((img - 0.5) * (1.0 + p) + 0.5, 0.0, 1.0)


def _saturation(img: np.ndarray, p: float) -> np.ndarray:
    luma = img @ _LUMA
    out = luma[..., None] + (img - luma[..., None]) * (1.0 + p)
    return np.clip(out, 0.0, 1.0)


def _hue(img: np.ndarray, p: float) -> np.ndarray:
    theta = p * (np.pi / 2.0)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    m = _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ
    return np.clip(img @ m.T, 0.0, 1.0)


def _gamma(img: np.ndarray, p: float) -> np.ndarray:
    return np.power(img, 2.0 ** (-p))


_OPS = {
    "brightness": _brightness,
    "contrast": _contrast,
    "saturation": _saturation,
    "hue": _hue,
    "gamma": _gamma,
}


def apply_op(img: np.ndarray, op: EditOp) -> np.ndarray:
    """Apply one edit; returns a new clamped image, never mutates the input.

    Value 0 short-circuits to an exact copy so the identity invariant holds
    bitwise for every operation (the hue matrix product and the saturation
    mix are not exact identities in floating point at p=0).
    """
    if op.name not in _OPS:
        raise UnknownOpError(f"unknown operation name: {op.name!r}")
    if op.value == 0.0:
        return img.copy()
    return _OPS[op.name](np.asarray(img, dtype=np.float64), float(op.value))


def apply_spec(img: np.ndarray, spec: EditSpec) -> np.ndarray:
    """Left fold of apply_op over spec.ops in list order."""
    out = np.asarray(img, dtype=np.float64).copy()
    for op in spec.ops:
        out = apply_op(out, op)
    return out


def synth_image(seed: int) -> np.ndarray:
    """Deterministic 32x32 RGB image from a seed.

    Two-color linear gradient background plus 1..3 filled primitives
    (axis-aligned rectangles / discs). Draws are repeated until every
    channel has variance >= 0.005 so that all five edits are visually
    detectable on the result.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64)
    for _ in range(1000):
        c0 = rng.uniform(0.0, 1.0, 3)
        c1 = rng.uniform(0.0, 1.0, 3)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        img = c0 + t[..., None] * (c1 - c0)

        for _ in range(rng.integers(1, 4)):
            color = rng.uniform(0.0, 1.0, 3)
            if rng.random() < 0.5:
                x0, y0 = rng.integers(0, IMG_SIZE - 4, 2)
                w, h = rng.integers(4, 17, 2)
                img[y0 : y0 + h, x0 : x0 + w] = color
            else:
                cx, cy = rng.uniform(4, IMG_SIZE - 4, 2)
                r = rng.uniform(3.0, 10.0)
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
                img[mask] = color

        img = np.clip(img, 0.0, 1.0)
        if img.var(axis=(0, 1)).min() >= 0.005:
            return img
    raise RuntimeError(f"could not reach variance floor for seed {seed}")


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] reals to 8-bit: round(v * 255)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    """Reconstruct the [0,1] real representation: v = byte / 255."""
    return raw.astype(np.float64) / 255.0


def write_png(img: np.ndarray, path) -> None:
    PILImage.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG")


def read_png_bytes(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_png(path) -> np.ndarray:
    return from_bytes(read_png_bytes(path))


def png_blob(img: np.ndarray) -> bytes:
    """PNG-encoded bytes of an image, for hashing without touching disk."""
    buf = io.BytesIO()
    PILImage.fromarray(to_bytes(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
