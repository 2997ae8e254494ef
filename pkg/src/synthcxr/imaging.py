"""Raster decoding, encoding and pixel hashing shared by every stage."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
from PIL import Image

MEDICAL_SUFFIXES = (".dcm", ".dicom")

# id/path -> (2-D unsigned-integer pixels, photometric interpretation)
MedicalDecoder = Callable[[Path], Tuple[np.ndarray, str]]


class DecodeError(Exception):
    """An image file exists but could not be turned into pixels."""


def pydicom_decoder(path: Path) -> Tuple[np.ndarray, str]:
    try:
        import pydicom
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DecodeError("pydicom is required to decode DICOM files (pip install synthcxr[dicom])") from exc
    ds = pydicom.dcmread(str(path))
    pixels = ds.pixel_array
    photometric = str(getattr(ds, "PhotometricInterpretation", "MONOCHROME2"))
    return pixels, photometric


def to_grayscale8(pixels: np.ndarray, photometric: str = "MONOCHROME2") -> np.ndarray:
    """Linearly rescale the stored value range to 0..255, inverting MONOCHROME1."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DecodeError(f"expected a 2-D pixel array, got shape {pixels.shape}")
    if not np.issubdtype(pixels.dtype, np.integer):
        raise DecodeError(f"expected unsigned-integer pixels, got {pixels.dtype}")
    values = pixels.astype(np.float64)
    lo, hi = values.min(), values.max()
    if hi > lo:
        scaled = (values - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(values)
    out = np.rint(scaled).astype(np.uint8)
    if photometric.strip().upper() == "MONOCHROME1":
        out = 255 - out  # invert after rounding so the two interpretations are exact complements
    return out


def _pil_to_array(img: Image.Image) -> np.ndarray:
    if img.mode in ("L", "RGB"):
        return np.asarray(img).copy()
    if img.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
        arr = np.asarray(img)
        if arr.dtype.kind == "f":
            arr = np.nan_to_num(arr)
            lo, hi = float(arr.min()), float(arr.max())
            scaled = (arr - lo) * (255.0 / (hi - lo)) if hi > lo else np.zeros_like(arr)
            return np.rint(scaled).astype(np.uint8)
        arr = arr.astype(np.int64)
        arr = arr - arr.min()
        return to_grayscale8(arr.astype(np.uint32))
    if img.mode in ("LA", "1"):
        return np.asarray(img.convert("L")).copy()
    return np.asarray(img.convert("RGB")).copy()


def read_raster(path: str | Path, decoder: Optional[MedicalDecoder] = None) -> np.ndarray:
    """Decode an image file into a uint8 array of shape (H, W) or (H, W, 3)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        if path.suffix.lower() in MEDICAL_SUFFIXES:
            pixels, photometric = (decoder or pydicom_decoder)(path)
            return to_grayscale8(pixels, photometric)
        with Image.open(path) as img:
            img.load()
            return _pil_to_array(img)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def decode_bytes(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return _pil_to_array(img)
    except Exception as exc:
        raise DecodeError(f"cannot decode image bytes: {exc}") from exc


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(pixels: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(pixels))
    return path


def pixel_hash(pixels: np.ndarray) -> bytes:
    """SHA-256 over shape, dtype and raw bytes of decoded pixels."""
    pixels = np.ascontiguousarray(pixels)
    h = hashlib.sha256()
    h.update(repr((pixels.shape, pixels.dtype.str)).encode())
    h.update(pixels.tobytes())
    return h.digest()


def to_rgb(pixels: np.ndarray) -> np.ndarray:
    """Replicate a grayscale raster to three channels; drop alpha if present."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        return np.repeat(pixels[:, :, None], 3, axis=2)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        return np.repeat(pixels, 3, axis=2)
    if pixels.ndim == 3 and pixels.shape[2] >= 3:
        return pixels[:, :, :3]
    raise ValueError(f"unsupported raster shape {pixels.shape}")


def to_gray(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        return pixels
    rgb = to_rgb(pixels).astype(np.float64)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)
