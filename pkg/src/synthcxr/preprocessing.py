"""Resize/normalize to the backbone input format and training-time augmentation."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from synthcxr.imaging import to_rgb

INPUT_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelInput:
    tensor: torch.Tensor  # float32, 3 x 224 x 224
    record_id: str = ""


def resize_bilinear(image: np.ndarray, size: Tuple[int, int] = (INPUT_SIZE, INPUT_SIZE)) -> np.ndarray:
    """Plain bilinear warp (half-pixel centers, no antialiasing) to ``size``.

    Returns float32 H x W x 3 in the input's value range; grayscale input is
    replicated to three channels first.
    """
    rgb = to_rgb(image)
    # interpolate in double precision so the only rounding is the final cast to float32
    t = torch.from_numpy(np.ascontiguousarray(rgb)).permute(2, 0, 1)[None].to(torch.float64)
    if t.shape[-2:] != size:
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=False)
    return t[0].permute(1, 2, 0).to(torch.float32).contiguous().numpy()


def normalize(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 values in 0..255 -> 3 x H x W tensor, (x/255 - mean) / std per channel."""
    t = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32).permute(2, 0, 1) / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return ((t - mean) / std).contiguous()


def denormalize(tensor: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return tensor * std + mean


def resize_normalize(image: np.ndarray, record_id: str = "") -> ModelInput:
    image = np.asarray(image)
    if image.ndim < 2 or min(image.shape[:2]) < 1:
        raise ValueError(f"cannot preprocess record {record_id!r}: bad shape {image.shape}")
    return ModelInput(normalize(resize_bilinear(image)), record_id)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: Tuple[float, float] = (0.8, 1.0)
    affine_max_translate_frac: float = 0.05
    affine_max_shear_deg: float = 5.0
    rotation_max_deg: float = 10.0
    hflip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not 0 <= self.affine_max_translate_frac <= 0.5:
            raise ValueError("affine_max_translate_frac must be in [0, 0.5]")
        if not 0 <= self.affine_max_shear_deg <= 45:
            raise ValueError("affine_max_shear_deg must be in [0, 45]")
        if not 0 <= self.rotation_max_deg <= 180:
            raise ValueError("rotation_max_deg must be in [0, 180]")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale_range"] = list(self.crop_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "crop_scale_range" in d:
            d["crop_scale_range"] = tuple(d["crop_scale_range"])
        return cls(**d)


def item_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream per (seed, keys...), e.g. (seed, epoch, record_id)."""
    material = "\0".join(str(k) for k in keys).encode()
    digest = int.from_bytes(hashlib.sha256(material).digest()[:8], "little")
    return np.random.default_rng([int(seed), digest])


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, affine (translate + shear), horizontal flip, rotation.

    Returns float32 224 x 224 x 3 in 0..255, ready for :func:`normalize`.
    Steps whose sampled magnitude is zero are skipped, so the identity
    config reproduces :func:`resize_bilinear` exactly.
    """
    rgb = to_rgb(np.asarray(image))
    h, w = rgb.shape[:2]

    scale = rng.uniform(*config.crop_scale_range)
    ch = min(h, max(1, int(round(h * np.sqrt(scale)))))
    cw = min(w, max(1, int(round(w * np.sqrt(scale)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = resize_bilinear(rgb[top : top + ch, left : left + cw])
    t = torch.from_numpy(out).permute(2, 0, 1).contiguous()

    max_t = config.affine_max_translate_frac * INPUT_SIZE
    tx, ty = rng.uniform(-max_t, max_t, size=2)
    shear = rng.uniform(-config.affine_max_shear_deg, config.affine_max_shear_deg)
    if tx or ty or shear:
        t = TF.affine(
            t, angle=0.0, translate=[float(tx), float(ty)], scale=1.0, shear=[float(shear), 0.0],
            interpolation=InterpolationMode.BILINEAR, fill=0.0,
        )
    if rng.uniform() < config.hflip_prob:
        t = torch.flip(t, dims=[2])
    angle = rng.uniform(-config.rotation_max_deg, config.rotation_max_deg)
    if angle:
        t = TF.rotate(t, float(angle), interpolation=InterpolationMode.BILINEAR, fill=0.0)
    return t.permute(1, 2, 0).contiguous().numpy()
