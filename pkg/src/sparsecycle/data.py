"""Motion-blur synthesis, synthetic paired datasets, PPM/PGM I/O and paired
augmentation.

Images are ``float32`` arrays shaped (C, H, W) with values in [-1, 1].
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

SUPERSAMPLE = 8
IMAGE_SUFFIXES = (".ppm", ".pgm")


class ImageFormatError(ValueError):
    """Malformed or unsupported PPM/PGM data."""


class DataMismatchError(ValueError):
    """Paired directories whose filenames do not match."""

    def __init__(self, message, unmatched=()):
        super().__init__(message)
        self.unmatched = list(unmatched)


@dataclass
class MotionPSF:
    length: float
    angle: float
    kernel: np.ndarray = field(repr=False)


@dataclass
class ImagePair:
    blurry: np.ndarray
    sharp: np.ndarray
    id: str = ""
    psf: Optional[MotionPSF] = None

    def __post_init__(self):
        if self.blurry.shape != self.sharp.shape:
            raise ValueError(
                f"pair {self.id!r}: blurry shape {self.blurry.shape} != sharp shape {self.sharp.shape}"
            )


def make_psf(length: float, angle: float) -> MotionPSF:
    """Line-segment blur kernel of the given length (pixels) and angle (degrees).

    The segment is centered in a ``(2*ceil(length/2)+1)``-wide square grid and
    rasterized by dropping ``SUPERSAMPLE`` points per pixel of length onto
    the cell that contains them; the kernel is then normalized to unit mass.
    Angles are counter-clockwise with rows growing downwards.
    """
    if length < 1:
        raise ValueError(f"blur length must be >= 1, got {length}")
    half = int(math.ceil(length / 2.0))
    size = 2 * half + 1
    n = max(1, int(math.ceil(SUPERSAMPLE * length)))
    t = -length / 2.0 + (np.arange(n) + 0.5) * (length / n)
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # snap near-zero trig values so axis-aligned kernels stay exactly on one row/column
    cos = 0.0 if abs(cos) < 1e-12 else cos
    sin = 0.0 if abs(sin) < 1e-12 else sin
    cols = np.floor(t * cos + 0.5).astype(int) + half
    rows = np.floor(-t * sin + 0.5).astype(int) + half
    kernel = np.zeros((size, size), dtype=np.float64)
    np.add.at(kernel, (rows, cols), 1.0)
    kernel /= kernel.sum()
    return MotionPSF(length=length, angle=angle, kernel=kernel)


def apply_blur(image: np.ndarray, psf) -> np.ndarray:
    """Convolve every channel of ``image`` (C, H, W) with the PSF, mirror padding."""
    kernel = psf.kernel if isinstance(psf, MotionPSF) else np.asarray(psf, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    out = np.stack([ndimage.convolve(ch, kernel, mode="mirror") for ch in img])
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def psnr_np(a, b, data_range=2.0):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 99.0 if mse == 0 else 10 * math.log10(data_range**2 / mse)


def _rotated_rect(rng, size, yy, xx):
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    hh, hw = rng.uniform(0.1, 0.35, size=2) * size
    theta = rng.uniform(0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def synthetic_sharp_image(rng: np.random.Generator, size: int, channels: int = 3) -> np.ndarray:
    """Random composition of a linear gradient, a rotated checkerboard patch
    and several rotated rectangles, values in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(theta) + yy * math.sin(theta)) / size
    lo, hi = rng.uniform(-0.9, 0.9, size=(2, channels, 1, 1))
    img = lo + (hi - lo) * ramp[None]

    # checkerboard inside a rotated rectangle; cells of 6+ px keep the pattern
    # period clear of the first spectral zero of short box blurs
    cell = rng.uniform(6.0, 10.0)
    phi = rng.uniform(0, math.pi)
    u = xx * math.cos(phi) + yy * math.sin(phi)
    v = -xx * math.sin(phi) + yy * math.cos(phi)
    board = (np.floor(u / cell) + np.floor(v / cell)) % 2
    region = _rotated_rect(rng, size, yy, xx)
    colors = rng.uniform(-1, 1, size=(2, channels, 1, 1))
    img = np.where(region[None], np.where(board[None] > 0, colors[0], colors[1]), img)

    for _ in range(int(rng.integers(2, 5))):
        region = _rotated_rect(rng, size, yy, xx)
        img = np.where(region[None], rng.uniform(-1, 1, size=(channels, 1, 1)), img)
    return np.clip(img, -1, 1).astype(np.float32)


def generate_synthetic_dataset(
    n: int,
    size: int,
    psf: MotionPSF,
    seed: int = 0,
    channels: int = 3,
) -> List[ImagePair]:
    """Deterministic list of (blurred, sharp) synthetic pairs."""
    if size % 4:
        raise ValueError(f"image size must be divisible by 4, got {size}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        sharp = synthetic_sharp_image(rng, size, channels)
        blurry = np.clip(apply_blur(sharp, psf), -1, 1)
        if psf.length >= 3:
            score = psnr_np(blurry, sharp)
            if not score < 60.0:
                raise RuntimeError(f"pair {i}: blur did not degrade the image (PSNR {score:.2f} dB)")
        pairs.append(ImagePair(blurry=blurry, sharp=sharp, id=f"{i:04d}", psf=psf))
    return pairs


# PPM / PGM -----------------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte {pos}")
    return buf[start:pos], pos


def decode_pnm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode binary P5/P6 bytes into a (C, H, W) uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{source}: unsupported magic {magic!r} at byte 0 (need P5 or P6)")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{source}: bad {name} {tok!r} ending at byte {pos}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{source}: maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{source}: empty image {width}x{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"{source}: missing whitespace after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = buf[pos:pos + expected]
    if len(payload) != expected:
        raise ImageFormatError(
            f"{source}: truncated payload at byte {pos}: expected {expected} bytes, got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode a (C, H, W) uint8 array, C in {1, 3}, as binary PGM/PPM."""
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ImageFormatError(f"can only write 1 or 3 channels, got {c}")
    magic = "P6" if c == 3 else "P5"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes()


def to_pixels(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8, rounding half away from zero."""
    v = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0 * 255.0
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def from_pixels(pixels: np.ndarray) -> np.ndarray:
    return (2.0 * (pixels.astype(np.float64) / 255.0) - 1.0).astype(np.float32)


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return from_pixels(decode_pnm(buf, str(path)))


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    with open(path, "wb") as fh:
        fh.write(encode_pnm(to_pixels(image)))


def image_suffix(image: np.ndarray) -> str:
    return ".ppm" if np.asarray(image).shape[0] == 3 else ".pgm"


def list_images(directory) -> Dict[str, Path]:
    directory = Path(directory)
    return {
        p.name: p for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def match_directories(a, b) -> List[str]:
    """Sorted common filenames; raises :class:`DataMismatchError` if any differ."""
    fa, fb = list_images(a), list_images(b)
    unmatched = sorted(set(fa) ^ set(fb))
    if unmatched:
        raise DataMismatchError(
            f"{len(unmatched)} unmatched file(s) between {a} and {b}: {', '.join(unmatched)}",
            unmatched,
        )
    return sorted(fa)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image (half-pixel centers)."""
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    return F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0].numpy()


def load_paired_dir(root, resize: Optional[int] = None) -> List[ImagePair]:
    """Load ``root/blur/*`` and ``root/sharp/*`` matched by filename."""
    root = Path(root)
    names = match_directories(root / "blur", root / "sharp")
    pairs = []
    for name in names:
        blurry, sharp = load_image(root / "blur" / name), load_image(root / "sharp" / name)
        if resize:
            blurry, sharp = resize_image(blurry, resize, resize), resize_image(sharp, resize, resize)
        pairs.append(ImagePair(blurry=blurry, sharp=sharp, id=Path(name).stem))
    return pairs


def write_paired_dir(root, pairs: List[ImagePair], manifest: Optional[Dict] = None) -> None:
    root = Path(root)
    for sub in ("blur", "sharp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for p in pairs:
        suffix = image_suffix(p.sharp)
        save_image(root / "blur" / f"{p.id}{suffix}", p.blurry)
        save_image(root / "sharp" / f"{p.id}{suffix}", p.sharp)
    if manifest is not None:
        lines = [f"{k} = {v}" for k, v in manifest.items()]
        (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def augment(pair: ImagePair, seed: int, flip: bool = True, min_crop: float = 1.0) -> ImagePair:
    """Apply the same random horizontal flip and crop-then-resize to both images.

    ``min_crop`` is the smallest crop side as a fraction of the image side;
    1.0 disables cropping.
    """
    rng = np.random.default_rng(seed)
    blurry, sharp = pair.blurry, pair.sharp
    if flip and rng.random() < 0.5:
        blurry, sharp = blurry[..., ::-1], sharp[..., ::-1]
    if min_crop < 1.0:
        _, h, w = sharp.shape
        frac = rng.uniform(min_crop, 1.0)
        ch, cw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        blurry = resize_image(blurry[:, top:top + ch, left:left + cw], h, w)
        sharp = resize_image(sharp[:, top:top + ch, left:left + cw], h, w)
    return ImagePair(
        blurry=np.ascontiguousarray(blurry, dtype=np.float32),
        sharp=np.ascontiguousarray(sharp, dtype=np.float32),
        id=pair.id,
        psf=pair.psf,
    )


def stack_pairs(pairs: List[ImagePair]):
    """(N, C, H, W) arrays of blurry and sharp images."""
    return (
        np.stack([p.blurry for p in pairs]).astype(np.float32),
        np.stack([p.sharp for p in pairs]).astype(np.float32),
    )


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
