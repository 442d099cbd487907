"""On-disk formats: XGSF raw float tensors and PNG image exports.

XGSF layout: 16-byte header (magic ``XGSF``, u32 D, u32 H, u32 W, all
little-endian) followed by D*H*W little-endian float32 values in planar
(channel-major) order.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import DataError

XGSF_MAGIC = b"XGSF"


def write_xgsf(path, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor)
    if tensor.ndim == 2:
        tensor = tensor[None]
    if tensor.ndim != 3:
        raise DataError("XGSF tensors must be (D, H, W) or (H, W)")
    D, H, W = tensor.shape
    with open(path, "wb") as f:
        f.write(XGSF_MAGIC)
        f.write(struct.pack("<III", D, H, W))
        f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_xgsf(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != XGSF_MAGIC:
            raise DataError(f"{path}: not an XGSF file")
        D, H, W = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != D * H * W:
        raise DataError(f"{path}: truncated XGSF payload")
    return data.reshape(D, H, W).astype(np.float64)


def write_png_color(path, color: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(color), 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path)


def read_png_color(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img.transpose(2, 0, 1)


def write_png_gray(path, img: np.ndarray) -> None:
    arr = (np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_png_index16(path, S: np.ndarray) -> None:
    """Region index map to 16-bit PNG; -1 encodes as 65535."""
    S = np.asarray(S, dtype=np.int64)
    if S.min(initial=0) < -1 or S.max(initial=0) >= 65535:
        raise DataError("region ids must lie in [-1, 65534] for 16-bit encoding")
    enc = np.where(S < 0, 65535, S).astype(np.uint16)
    Image.fromarray(enc, mode="I;16").save(path)


def read_png_index16(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.int64)
    return np.where(arr == 65535, -1, arr)
