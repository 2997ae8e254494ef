"""Backbone + two-layer head: training with model selection, checkpoints, inference and Grad-CAM."""

from __future__ import annotations

import copy
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from synthcxr.backbones import Backbone, rebuild_backbone
from synthcxr.dataset import ClassLabel, DatasetManifest
from synthcxr.imaging import read_raster
from synthcxr.metrics import auroc
from synthcxr.preprocessing import AugmentConfig, augment, item_rng, normalize, resize_normalize
from synthcxr.representation import FeatureMatrix

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 512


class TrainingError(RuntimeError):
    pass


class GradCamError(RuntimeError):
    pass


class MissingImageError(FileNotFoundError):
    pass


class ClassifierModel(nn.Module):
    def __init__(self, backbone: Backbone, hidden_width: int, head_seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.hidden_width = hidden_width
        self.head_seed = head_seed
        d = backbone.descriptor.d
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            self.head = nn.Sequential(nn.Linear(d, hidden_width), nn.ReLU(), nn.Linear(hidden_width, 2))

    def forward_all(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(logits, last conv maps, pooled features)."""
        maps, pooled = self.backbone(x)
        return self.head(pooled), maps, pooled

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_all(x)[0]

    def architecture(self) -> dict:
        return {
            "backbone": self.backbone.spec,
            "descriptor": self.backbone.descriptor.to_dict(),
            "hidden_width": self.hidden_width,
            "head_seed": self.head_seed,
        }


def build_model(provider: Backbone, hidden_width: int = DEFAULT_HIDDEN, seed: int = 0) -> ClassifierModel:
    if hidden_width < 1:
        raise ValueError(f"hidden_width must be >= 1, got {hidden_width}")
    was_training = provider.training
    provider.eval()
    with torch.no_grad():
        _, pooled = provider(torch.zeros(1, 3, 224, 224))
    provider.train(was_training)
    if pooled.shape[-1] != provider.descriptor.d:
        raise ValueError(
            f"backbone {provider.descriptor.name} yields {pooled.shape[-1]} features "
            f"but its descriptor declares d={provider.descriptor.d}"
        )
    model = ClassifierModel(provider, hidden_width, seed)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 5e-5
    batch_size: int = 16
    seed: int = 0
    selection_metric: str = "auroc_val"
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.selection_metric != "auroc_val":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)


CHECKPOINT_MAGIC = b"SYNCXRCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    state: Dict[str, torch.Tensor]
    epoch: int
    val_metric: Optional[float]
    config: dict
    provenance: dict
    history: List[dict] = field(default_factory=list)
    _model: Optional[ClassifierModel] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_model(cls, model: ClassifierModel, epoch: int = 0, val_metric=None, config=None,
                   provenance=None, history=None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        prov = {"architecture": model.architecture(), **(provenance or {})}
        return cls(state, epoch, val_metric, dict(config or {}), prov, list(history or []))

    def to_model(self) -> ClassifierModel:
        if self._model is None:
            arch = self.provenance["architecture"]
            backbone = rebuild_backbone(arch["backbone"])
            model = ClassifierModel(backbone, arch["hidden_width"], arch["head_seed"])
            model.load_state_dict(self.state)
            model.eval()
            self._model = model
        return self._model

    def save(self, path: str | Path) -> Path:
        """Magic, version, JSON header length, JSON header, then raw tensor blobs."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors, blobs, offset = [], [], 0
        for name in sorted(self.state):
            arr = self.state[name].detach().cpu().contiguous().numpy()
            raw = arr.tobytes()
            tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps({
            "epoch": self.epoch,
            "val_metric": self.val_metric,
            "config": self.config,
            "provenance": self.provenance,
            "history": self.history,
            "tensors": tensors,
        }, sort_keys=True).encode()
        with path.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        data = path.read_bytes()
        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        pos = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(data[pos : pos + hlen])
        base = pos + hlen
        state = {}
        for t in header["tensors"]:
            start = base + t["offset"]
            arr = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                                offset=start).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.copy())
        return cls(state, header["epoch"], header["val_metric"], header["config"], header["provenance"],
                   header["history"])


def _as_model(model_or_ckpt) -> ClassifierModel:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.to_model()
    if isinstance(model_or_ckpt, (str, Path)):
        return Checkpoint.load(model_or_ckpt).to_model()
    return model_or_ckpt


def select_best_epoch(values: Sequence[float]) -> int:
    """Index of the maximum; the earliest index wins ties. NaN never wins."""
    best, best_v = None, -np.inf
    for i, v in enumerate(values):
        if v is not None and not np.isnan(v) and (best is None or v > best_v):
            best, best_v = i, v
    if best is None:
        raise ValueError("no finite metric values to select from")
    return best


def _load(record) -> np.ndarray:
    try:
        return read_raster(record.path)
    except FileNotFoundError as exc:
        raise MissingImageError(f"record {record.id}: image file missing: {record.path}") from exc
    except Exception as exc:
        raise MissingImageError(f"record {record.id}: cannot read {record.path}: {exc}") from exc


def _load_all(records, workers: int = 1) -> List[np.ndarray]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_load, records))
    return [_load(r) for r in records]


def _batches(manifest: DatasetManifest, batch_size: int, workers: int = 1) -> Iterator[Tuple[list, torch.Tensor]]:
    records = list(manifest.records)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = _load_all(chunk, workers)
        x = torch.stack([resize_normalize(img, r.id).tensor for img, r in zip(images, chunk)])
        yield chunk, x


def _check_split(manifest: DatasetManifest, name: str) -> None:
    if len(manifest) == 0:
        raise TrainingError(f"empty {name} split")
    present = [c for c, n in manifest.class_counts.items() if n > 0]
    if len(present) < 2:
        raise TrainingError(f"single-class {name} split: only {present[0].value}")


def _batch_plan(n: int, batch_size: int) -> List[slice]:
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        # a trailing batch of one would break batch norm; fold it into the previous batch
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


@torch.no_grad()
def _scores_for(model: ClassifierModel, inputs: torch.Tensor, batch_size: int) -> np.ndarray:
    model.eval()
    out = []
    for s in _batch_plan(len(inputs), batch_size):
        out.append(torch.softmax(model(inputs[s]), dim=1)[:, 1])
    return torch.cat(out).numpy().astype(np.float64)


def train(
    model: ClassifierModel,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    augment_config: AugmentConfig = AugmentConfig(),
    log_path: Optional[str | Path] = None,
) -> Checkpoint:
    """Fine-tune the whole network with Adam at a fixed learning rate.

    Each epoch: shuffled mini-batches of augmented training images, then
    validation AUROC on un-augmented inputs. The returned checkpoint holds
    the weights of the best validation epoch (earliest on ties); every
    epoch is appended to ``log_path`` as one JSON line.
    """
    _check_split(train_manifest, "training")
    _check_split(val_manifest, "validation")

    train_records = list(train_manifest.records)
    train_images = _load_all(train_records, config.workers)
    train_y = torch.tensor([r.label.index for r in train_records])
    val_inputs = torch.cat([x for _, x in _batches(val_manifest, 64, config.workers)])
    val_y = val_manifest.labels

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = Path(log_path).open("w")

    history: List[dict] = []
    best_state, best_epoch, best_val = None, 0, None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_records))
            total, seen = 0.0, 0
            for b, s in enumerate(_batch_plan(len(order), config.batch_size)):
                idx = order[s]
                x = torch.stack([
                    normalize(augment(train_images[i], augment_config,
                                      item_rng(config.seed, epoch, train_records[i].id)))
                    for i in idx
                ])
                y = train_y[idx]
                loss = F.cross_entropy(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            val_scores = _scores_for(model, val_inputs, 64)
            val_auroc = auroc(val_y, val_scores)
            row = {"epoch": epoch, "train_loss": total / seen, "val_auroc": val_auroc,
                   "wall_time_s": time.perf_counter() - t0}
            history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            logger.info("epoch %d loss %.5f val_auroc %.4f", epoch, row["train_loss"], val_auroc)
            if best_val is None or val_auroc > best_val:
                best_val, best_epoch = val_auroc, epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_fh:
            log_fh.close()

    assert select_best_epoch([h["val_auroc"] for h in history]) + 1 == best_epoch
    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint.from_model(
        model,
        epoch=best_epoch,
        val_metric=best_val,
        config={"train": config.to_dict(), "augment": augment_config.to_dict()},
        provenance={
            "train_manifest": train_manifest.provenance,
            "n_train": len(train_manifest),
            "n_val": len(val_manifest),
        },
        history=[{k: v for k, v in h.items() if k != "wall_time_s"} for h in history],
    )
    ckpt._model = model
    return ckpt


@torch.no_grad()
def predict_proba(model_or_ckpt, manifest: DatasetManifest, batch_size: int = 32,
                  workers: int = 1) -> List[Tuple[str, float]]:
    """Softmax pneumonia probability per record, in manifest order."""
    model = _as_model(model_or_ckpt)
    model.eval()
    out = []
    for chunk, x in _batches(manifest, batch_size, workers):
        p = torch.softmax(model(x), dim=1)[:, 1].double().numpy()
        out.extend((r.id, float(v)) for r, v in zip(chunk, p))
    return out


@torch.no_grad()
def extract_features(model_or_ckpt, manifest: DatasetManifest, batch_size: int = 32,
                     workers: int = 1, model_tag: str = "") -> FeatureMatrix:
    """Pooled backbone features (the head's input), one row per record."""
    model = _as_model(model_or_ckpt)
    model.eval()
    rows = []
    for _, x in _batches(manifest, batch_size, workers):
        _, pooled = model.backbone(x)
        rows.append(pooled.double().numpy())
    return FeatureMatrix(np.concatenate(rows), manifest.ids, model_tag)


@dataclass
class CamMap:
    values: np.ndarray  # H_in x W_in in [0, 1]
    record_id: str
    target_class: ClassLabel


def cam_from_maps(maps: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """ReLU(sum_k w_k A^k) with w_k the spatial mean of dlogit/dA^k; maps and grads K x h x w."""
    weights = grads.mean(dim=(1, 2))
    return torch.relu((weights[:, None, None] * maps).sum(dim=0))


def finalize_cam(raw: torch.Tensor, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear upsample to ``size`` then min-max scale to [0, 1]; an all-zero map stays zero."""
    if not torch.any(raw > 0):
        return np.zeros(size, dtype=np.float64)
    up = F.interpolate(raw[None, None].double(), size=size, mode="bilinear", align_corners=False)[0, 0]
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.ones(size, dtype=np.float64)
    return ((up - lo) / (hi - lo)).clamp(0.0, 1.0).numpy()


def grad_cam(model_or_ckpt, image: np.ndarray, target_class: Optional[ClassLabel | str] = None,
             record_id: str = "") -> CamMap:
    """Grad-CAM over the backbone's last convolutional maps, sized like ``image``.

    ``target_class`` defaults to the predicted class.
    """
    model = _as_model(model_or_ckpt)
    model.eval()
    image = np.asarray(image)
    x = resize_normalize(image, record_id).tensor[None].requires_grad_(True)
    with torch.enable_grad():
        logits, maps, _ = model.forward_all(x)
        if not maps.requires_grad:
            raise GradCamError(f"backbone {model.backbone.descriptor.name} is not differentiable to its conv maps")
        if target_class is None:
            target = ClassLabel.from_index(int(logits[0].argmax()))
        else:
            target = ClassLabel(target_class)
        (grads,) = torch.autograd.grad(logits[0, target.index], maps)
    raw = cam_from_maps(maps[0].detach(), grads[0])
    return CamMap(finalize_cam(raw, image.shape[:2]), record_id, target)
