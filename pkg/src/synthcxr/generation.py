"""Prompting a text-to-image provider and curating its output into a balanced manifest."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from synthcxr.dataset import ClassLabel, DatasetManifest, ImageRecord, Source, Split
from synthcxr.imaging import DecodeError, decode_bytes, encode_png, pixel_hash, write_png

logger = logging.getLogger(__name__)

DEFAULT_CROP_FRACTION = 0.30
DEFAULT_BATCH_SIZE = 10
TOKEN_ENV = "SYNTHCXR_PROVIDER_TOKEN"

PROMPT_TEMPLATE = (
    "Generate {count} Chest X-ray imaging data consisting of images representing different "
    "{label} patients, generated individually as separate downloadable files so I can download "
    "them one by one. The views you generate need to maintain a consistent format, meaning the "
    "overall image is portrait-oriented, and the images must show variations in gender, height, "
    "weight (fat and thin), and age, as well as human posture and body stance during imaging "
    "(such as some bodies or heads tilted left or right, rotation, arm orientation, etc.), along "
    "with differences in lung texture to ensure clinical authenticity and individual diversity. "
    "Note that each picture must be on a separate canvas, meaning you need to generate {count} "
    "images, all in portrait orientation with height greater than width, and the view focused on "
    "the thoracic cavity."
)


def build_prompt(target_class: ClassLabel | str, batch_size: int) -> str:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return PROMPT_TEMPLATE.format(count=int(batch_size), label=ClassLabel(target_class).value)


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    count: int
    target_class: ClassLabel
    session_tag: str = ""

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray
    provider_metadata: str = ""

    @property
    def is_portrait(self) -> bool:
        return self.pixels.shape[0] > self.pixels.shape[1]


class ProviderError(Exception):
    pass


class TransportError(ProviderError):
    """Retryable: connection problems, timeouts, 5xx responses."""


class ProviderRefusal(ProviderError):
    """The provider declined the request; not retried."""


class PartialResultError(ProviderError):
    def __init__(self, message: str, images: List[RawImage]):
        super().__init__(message)
        self.images = images


class GenerationProvider(Protocol):
    name: str

    def request(self, prompt: str, count: int, session_tag: str = "") -> List[Tuple[bytes, str]]:
        """Return up to ``count`` (encoded image bytes, metadata text) pairs."""


class StubProvider:
    """Deterministic procedural stand-in for a remote image model.

    Renders portrait torso-like radiographs: dark background, bright body
    ellipse, darker lung fields, a bright mediastinum, an abdominal region
    in the lower part of the canvas and a small watermark in the bottom
    corner. Pneumonia prompts add one to three bright opacity blobs inside
    the lungs; their geometry is reported in the metadata as JSON.
    ``lesion_gain`` is the blob's peak brightness increment; the default
    makes opacities clearly brighter than the spine so the task is
    learnable by construction.

    Output depends only on (seed, prompt, session_tag, image index).
    """

    name = "stub"

    def __init__(self, seed: int = 0, height: int = 320, width: int = 256, noise: float = 8.0,
                 lesion_gain: float = 150.0):
        if height <= width:
            raise ValueError("stub images are portrait: height must exceed width")
        self.seed = seed
        self.height = height
        self.width = width
        self.noise = noise
        self.lesion_gain = lesion_gain

    def _rng(self, prompt: str, session_tag: str, index: int) -> np.random.Generator:
        digest = hashlib.sha256(f"{prompt}\0{session_tag}\0{index}".encode()).digest()
        return np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])

    def render(self, pneumonia: bool, rng: np.random.Generator) -> Tuple[np.ndarray, dict]:
        h, w = self.height, self.width
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        img = np.full((h, w), 12.0)

        # body: scale and tilt vary per image
        cx = w / 2 + rng.uniform(-0.04, 0.04) * w
        half_w = w * rng.uniform(0.36, 0.46)
        tilt = np.deg2rad(rng.uniform(-6, 6))
        xr = (xx - cx) * np.cos(tilt) + (yy - 0.55 * h) * np.sin(tilt)
        yr = -(xx - cx) * np.sin(tilt) + (yy - 0.55 * h) * np.cos(tilt)
        body = (xr / half_w) ** 2 + (yr / (0.62 * h)) ** 2 <= 1.0
        img[body] = rng.uniform(105, 135)

        lung_cy = h * rng.uniform(0.33, 0.38)
        lung_ry, lung_rx = h * 0.17, half_w * 0.40
        lungs = []
        for side in (-1, 1):
            lcx = cx + side * half_w * 0.48
            mask = ((xx - lcx) / lung_rx) ** 2 + ((yy - lung_cy) / lung_ry) ** 2 <= 1.0
            img[mask] = rng.uniform(40, 60)
            lungs.append(lcx)
        spine = (np.abs(xx - cx) < half_w * 0.12) & (yy > h * 0.12) & body
        img[spine] = 170.0
        # ribs: faint horizontal bands over the lungs
        ribs = (np.sin(yy / (h * 0.018)) > 0.85) & (np.abs(yy - lung_cy) < lung_ry)
        img[ribs & body] += 14.0

        # extended field of view: abdomen and a watermark in the lower part
        abdomen = (yy > 0.72 * h) & body
        img[abdomen] = rng.uniform(140, 160)
        wm_y, wm_x = int(0.93 * h), int(0.90 * w)
        r = max(3, h // 60)
        star = (np.abs(yy - wm_y) + np.abs(xx - wm_x)) <= r
        img[star] = 250.0

        blobs = []
        if pneumonia:
            for _ in range(int(rng.integers(1, 4))):
                side = rng.choice(len(lungs))
                radius = float(rng.uniform(0.09, 0.13) * w)
                by = float(lung_cy + rng.uniform(-0.45, 0.45) * lung_ry)
                bx = float(lungs[side] + rng.uniform(-0.35, 0.35) * lung_rx)
                d2 = (yy - by) ** 2 + (xx - bx) ** 2
                img += self.lesion_gain * np.exp(-((d2 / radius**2) ** 2))
                blobs.append([by, bx, radius])

        img += rng.normal(0.0, self.noise, size=img.shape)
        pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        meta = {"provider": self.name, "pneumonia": pneumonia, "blobs": blobs}
        return pixels, meta

    def request(self, prompt: str, count: int, session_tag: str = "") -> List[Tuple[bytes, str]]:
        if "pneumonia patients" in prompt:
            pneumonia = True
        elif "healthy patients" in prompt:
            pneumonia = False
        else:
            raise ProviderRefusal("stub provider only understands the chest X-ray prompt template")
        out = []
        for i in range(count):
            pixels, meta = self.render(pneumonia, self._rng(prompt, session_tag, i))
            meta["session_tag"] = session_tag
            meta["index"] = i
            out.append((encode_png(pixels), json.dumps(meta, sort_keys=True)))
        return out


class HttpProvider:
    """JSON-over-HTTP client for a remote image generation endpoint.

    Request body: ``{"prompt": str, "count": int, "session_tag": str}``.
    Response body: ``{"images": [{"data": <base64 image>, "metadata": str}]}``
    or ``{"error": str}``. The bearer token is read from an environment
    variable, never passed on the command line.
    """

    name = "remote"

    def __init__(self, endpoint: str, token_env: str = TOKEN_ENV, timeout: float = 120.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.token_env = token_env
        self._client = client or httpx.Client(timeout=timeout)

    def request(self, prompt: str, count: int, session_tag: str = "") -> List[Tuple[bytes, str]]:
        import httpx

        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = self._client.post(
                self.endpoint,
                json={"prompt": prompt, "count": count, "session_tag": session_tag},
                headers=headers,
            )
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise TransportError(f"malformed response body: {exc}") from exc
        if resp.status_code >= 400 or "error" in body:
            raise ProviderRefusal(str(body.get("error", f"HTTP {resp.status_code}")))
        return [(base64.b64decode(item["data"]), str(item.get("metadata", ""))) for item in body["images"]]


def _persist(images: Sequence[RawImage], persist_dir: Path, tag: str, start: int) -> None:
    persist_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images, start=start):
        stem = f"{tag or 'batch'}_{i:03d}"
        write_png(img.pixels, persist_dir / f"{stem}.png")
        (persist_dir / f"{stem}.json").write_text(img.provider_metadata)


def request_batch(
    provider: GenerationProvider,
    request: GenerationRequest,
    max_retries: int = 3,
    backoff_s: float = 0.5,
    persist_dir: Optional[Path] = None,
    sleep=time.sleep,
) -> List[RawImage]:
    """Ask the provider for ``request.count`` images.

    Transport failures are retried with exponential backoff; once retries are
    exhausted a :class:`PartialResultError` carries whatever was received.
    A provider returning nothing ends the request early. Every image is
    written to ``persist_dir`` (when given) before this returns or raises.
    """
    images: List[RawImage] = []
    failures = 0
    while len(images) < request.count:
        try:
            got = provider.request(request.prompt, request.count - len(images), request.session_tag)
        except TransportError as exc:
            failures += 1
            if failures > max_retries:
                raise PartialResultError(
                    f"transport failed after {max_retries} retries: {exc}", images
                ) from exc
            sleep(backoff_s * 2 ** (failures - 1))
            continue
        if not got:
            break
        batch = []
        for data, meta in got[: request.count - len(images)]:
            try:
                batch.append(RawImage(decode_bytes(data), meta))
            except DecodeError as exc:
                logger.warning("provider returned undecodable image: %s", exc)
        if persist_dir is not None:
            _persist(batch, Path(persist_dir), request.session_tag, len(images))
        images.extend(batch)
        failures = 0
    return images


def generate_images(
    provider: GenerationProvider,
    target_class: ClassLabel | str,
    n_images: int,
    batch_size: int = DEFAULT_BATCH_SIZE,
    concurrency: int = 1,
    persist_dir: Optional[Path] = None,
    max_batches: Optional[int] = None,
) -> List[RawImage]:
    """Loop batch requests until ``n_images`` have been received.

    Batches are tagged ``{class}-{index}``; results are concatenated in tag
    order, so the output does not depend on scheduling.
    """
    target_class = ClassLabel(target_class)
    prompt = build_prompt(target_class, batch_size)
    limit = max_batches or 3 * math.ceil(n_images / batch_size) + 2
    images: List[RawImage] = []
    next_batch = 0

    def run(idx: int) -> List[RawImage]:
        tag = f"{target_class.value}-{idx:04d}"
        req = GenerationRequest(prompt, batch_size, target_class, tag)
        return request_batch(provider, req, persist_dir=persist_dir)

    while len(images) < n_images and next_batch < limit:
        needed = math.ceil((n_images - len(images)) / batch_size)
        wave = list(range(next_batch, min(limit, next_batch + max(1, min(needed, concurrency)))))
        next_batch = wave[-1] + 1
        if concurrency > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                results = list(pool.map(run, wave))
        else:
            results = [run(i) for i in wave]
        for batch in results:
            images.extend(batch)
    if len(images) < n_images:
        raise PartialResultError(
            f"only {len(images)} of {n_images} {target_class.value} images after {limit} batches",
            images,
        )
    return images[:n_images]


def retained_rows(height: int, fraction: float) -> int:
    """Rows kept after removing the bottom ``fraction``: ceil(H * (1 - fraction)).

    Evaluated in exact rational arithmetic so that e.g. H=1000, f=0.3 gives
    700 rather than 701 from binary rounding.
    """
    f = Fraction(str(fraction)) if isinstance(fraction, float) else Fraction(fraction)
    return math.ceil(height * (1 - f))


def crop_lower_fraction(image: np.ndarray, fraction: float = DEFAULT_CROP_FRACTION) -> np.ndarray:
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[0] < 2:
        raise ValueError(f"image height must be >= 2, got shape {image.shape}")
    return image[: retained_rows(image.shape[0], fraction)].copy()


class CurationError(Exception):
    pass


@dataclass(frozen=True)
class Rejection:
    index: int
    label: ClassLabel
    reason: str


def curate_dataset(
    raw: Sequence[Tuple[RawImage, ClassLabel]],
    crop_fraction: float,
    seed: int,
    store_root: str | Path,
    source: Source | str = Source.NANO_BANANA,
    balance_tolerance: int = 0,
) -> DatasetManifest:
    """Crop, filter and store generated images; return an unsplit manifest.

    Non-portrait images (checked on the image as generated) and exact pixel
    duplicates after cropping are rejected, with reasons logged and recorded
    in ``manifest.skipped``. Images are written to ``{store_root}/{class}/{id}.png``
    with the provider metadata alongside as ``{id}.json``.
    """
    if not raw:
        raise CurationError("no images to curate")
    source = Source(source)
    store_root = Path(store_root)
    seen = {}
    records: List[ImageRecord] = []
    rejections: List[Rejection] = []
    for i, (image, label) in enumerate(raw):
        label = ClassLabel(label)
        if not image.is_portrait:
            rejections.append(Rejection(i, label, "not portrait"))
            continue
        cropped = crop_lower_fraction(image.pixels, crop_fraction)
        digest = pixel_hash(cropped)
        if digest in seen:
            rejections.append(Rejection(i, label, f"duplicate of input {seen[digest]}"))
            continue
        seen[digest] = i
        rid = f"{label.value}-{digest.hex()[:16]}"
        path = write_png(cropped, store_root / label.value / f"{rid}.png")
        path.with_suffix(".json").write_text(image.provider_metadata)
        records.append(ImageRecord(rid, str(path.resolve()), label, source, Split.UNASSIGNED, digest))
    for rej in rejections:
        logger.info("rejected input %d (%s): %s", rej.index, rej.label.value, rej.reason)

    manifest = DatasetManifest.from_records(
        sorted(records, key=lambda r: r.id),
        f"{source.value} curated: crop_fraction={crop_fraction} seed={seed} "
        f"inputs={len(raw)} rejected={len(rejections)}",
        seed,
        [(f"input-{r.index}", r.reason) for r in rejections],
    )
    counts = manifest.class_counts
    gap = abs(counts[ClassLabel.HEALTHY] - counts[ClassLabel.PNEUMONIA])
    if gap > balance_tolerance:
        raise CurationError(
            f"class imbalance after curation exceeds tolerance {balance_tolerance}: "
            + ", ".join(f"{k.value}={v}" for k, v in counts.items())
        )
    return manifest
