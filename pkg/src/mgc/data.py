"""Image sources: a binary-PPM folder loader and a seeded synthetic generator."""
from __future__ import annotations

import os
from functools import lru_cache
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

PPM_EXTENSIONS = (".ppm", ".pnm")


class ImageFormatError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    i, n = 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise ImageFormatError("truncated header")
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return tokens, i + 1


def decode_ppm(data: bytes) -> Tuple[np.ndarray, int]:
    """Decode a binary P6 file into (H x W x 3 uint8 array, maxval)."""
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError(f"malformed header: {e}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError("image dimensions must be positive")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit PPM is supported")
    size = width * height * 3
    payload = data[offset:offset + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: expected {size} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy(), maxval


def encode_ppm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an H x W x 3 array")
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * maxval), 0, maxval).astype(np.uint8)
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n%d\n" % (w, h, maxval) + pixels.tobytes()


def read_ppm(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read a P6 file as float64 RGB in [0, 1]."""
    path = Path(path)
    try:
        pixels, maxval = decode_ppm(path.read_bytes())
    except ImageFormatError as e:
        raise ImageFormatError(f"{path.name}: {e}") from None
    return pixels.astype(np.float64) / maxval


def write_ppm(path: Union[str, os.PathLike], image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


class FolderSource:
    kind = "folder"

    def __init__(self, root: Union[str, os.PathLike]):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"{self.root} is not a directory")
        self.files = sorted(p for p in self.root.iterdir()
                            if p.is_file() and p.suffix.lower() in PPM_EXTENSIONS)
        if not self.files:
            raise ImageFormatError(f"no images in {self.root}")

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, index: int) -> np.ndarray:
        return read_ppm(self.files[index])


def load_folder(path: Union[str, os.PathLike]) -> FolderSource:
    return FolderSource(path)


@dataclass
class SyntheticSource:
    """Seeded images of rectangles and discs over a gradient background."""

    count: int
    seed: int = 0
    side: int = 256
    kind = "synthetic"

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return synthetic_image(self.seed, index, self.side)


def synthetic(count: int, seed: int = 0, side: int = 256) -> SyntheticSource:
    return SyntheticSource(count, seed, side)


def _gradient(rng, h, w, yy, xx):
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return c0 + (c1 - c0) * t[..., None]


def synthetic_image(seed: int, index: int, side: int = 256) -> np.ndarray:
    return _synthetic_image(seed, index, side).copy()


@lru_cache(maxsize=128)
def _synthetic_image(seed: int, index: int, side: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = _gradient(rng, side, side, yy, xx)
    for _ in range(int(rng.integers(3, 9))):
        fill = _gradient(rng, side, side, yy, xx) if rng.random() < 0.5 else rng.random(3)
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0, side * 0.8, size=2)
            w, h = rng.uniform(side * 0.1, side * 0.5, size=2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        else:
            cx, cy = rng.uniform(0, side, size=2)
            r = rng.uniform(side * 0.05, side * 0.25)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img = np.where(mask[..., None], fill, img)
    return np.clip(img, 0.0, 1.0)


def dataset_stats(source: Sequence[np.ndarray], limit: int = 64) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean/std over the first ``limit`` images."""
    n = min(len(source), limit)
    pix = np.concatenate([source[i].reshape(-1, 3) for i in range(n)])
    return tuple(float(v) for v in pix.mean(0)), tuple(float(v) for v in pix.std(0))
