"""Run configuration: one JSON document, every command reads it, overrides are explicit."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from synthcxr.classifier import DEFAULT_HIDDEN, TrainConfig
from synthcxr.generation import DEFAULT_BATCH_SIZE, DEFAULT_CROP_FRACTION
from synthcxr.preprocessing import AugmentConfig


@dataclass
class Paths:
    output_dir: str = "runs"
    curated_store: Optional[str] = None
    chest_xray_root: Optional[str] = None
    rsna_images: Optional[str] = None
    rsna_labels: Optional[str] = None


@dataclass
class GenerationConfig:
    provider: str = "stub"  # stub | remote
    endpoint: Optional[str] = None
    n_images: int = 300
    batch_size: int = DEFAULT_BATCH_SIZE
    concurrency: int = 1
    source: Optional[str] = None  # defaults to procedural_stub / nano_banana by provider
    stub_height: int = 320
    stub_width: int = 256


@dataclass
class BootstrapConfig:
    n_boot: int = 1000
    alpha: float = 0.05


@dataclass
class ClusterConfig:
    k: int = 2
    restarts: int = 10
    zscore: bool = False
    embedding: str = "pca"


@dataclass
class RunConfig:
    seed: int = 0
    model_tag: str = "cropped"
    crop_fraction: float = DEFAULT_CROP_FRACTION
    split: List[int] = field(default_factory=lambda: [220, 30, 50])
    backbone: dict = field(default_factory=lambda: {"name": "resnet50", "pretrained": True})
    hidden_width: int = DEFAULT_HIDDEN
    paths: Paths = field(default_factory=Paths)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "paths": Paths,
            "generation": GenerationConfig,
            "train": TrainConfig,
            "bootstrap": BootstrapConfig,
            "cluster": ClusterConfig,
        }
        for key, typ in nested.items():
            if key in d:
                d[key] = typ(**d[key])
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        cfg = cls(**d)
        if len(cfg.split) != 3:
            raise ValueError("split must list three sizes: train, val, test")
        return cfg

    @classmethod
    def load(cls, path: Optional[str | Path]) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:8]

    def propagate_seed(self) -> None:
        """Make the top-level seed the seed of every stochastic component."""
        self.train.seed = self.seed
