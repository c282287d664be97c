"""Patch tokenization, augmentations and raster I/O.

Rasters are ``float32`` arrays of shape ``(H, W, 3)`` with values in [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from PIL import Image

AUGMENTATIONS = ("identity", "hflip", "random_crop")
CROP_SCALE = (0.8, 1.0)


def check_raster(image: np.ndarray, patch_size: int | None = None) -> None:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    if patch_size is not None:
        h, w = image.shape[:2]
        if h % patch_size or w % patch_size:
            raise ValueError("image not divisible by patch size")


def patchify(image, patch_size: int):
    """Split ``(..., H, W, C)`` into ``(..., K, P*P*C)`` patches in row-major order.

    Works on numpy arrays and torch tensors alike.
    """
    h, w = image.shape[-3], image.shape[-2]
    if h % patch_size or w % patch_size:
        raise ValueError("image not divisible by patch size")
    return rearrange(image, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(patches, patch_size: int, height: int, width: int, channels: int = 3):
    return rearrange(
        patches,
        "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c",
        h=height // patch_size,
        w=width // patch_size,
        p1=patch_size,
        p2=patch_size,
        c=channels,
    )


def num_patches(height: int, width: int, patch_size: int) -> int:
    return height * width // patch_size**2


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().copy()


def random_crop(image: np.ndarray, rng: np.random.Generator, scale=CROP_SCALE) -> np.ndarray:
    """Crop a region covering ``scale`` of the area at the same aspect ratio, resize back."""
    h, w = image.shape[:2]
    s = rng.uniform(*scale)
    ch = min(h, max(1, int(round(h * np.sqrt(s)))))
    cw = min(w, max(1, int(round(w * np.sqrt(s)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[top : top + ch, left : left + cw]
    return bilinear_resize(crop, h, w)


def augment(image: np.ndarray, kind: str, rng_seed=None, scale=CROP_SCALE) -> np.ndarray:
    if kind == "identity":
        return image
    if kind == "hflip":
        return hflip(image)
    if kind == "random_crop":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return random_crop(image, rng, scale)
    raise ValueError(f"unknown augmentation {kind!r}")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


# Raw exchange format: int32 H, int32 W (little-endian), then H*W*3 float32 LE values.
_RAW_HEADER = struct.Struct("<ii")


def write_raw(path: str | Path, image: np.ndarray) -> None:
    check_raster(image)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(h, w))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = _RAW_HEADER.unpack_from(data)
    body = np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size)
    if body.size != h * w * 3:
        raise ValueError(f"raw raster {path} has {body.size} values, expected {h * w * 3}")
    return body.reshape(h, w, 3).astype(np.float32)
