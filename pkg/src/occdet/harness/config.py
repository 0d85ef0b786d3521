"""Experiment configuration: a flat JSON object with strict keys."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import InvalidSpec
from ..toy.detector import DetectorSpec
from ..toy.scenes import SceneSpec
from ..toy.training import TrainConfig


@dataclass
class ExperimentConfig:
    # model
    slots: list = field(default_factory=lambda: ["conv", "conv", "conv"])
    channels: list = field(default_factory=lambda: [8, 16, 16])
    pool3d: str = "max"
    pool2d: str = "max"
    rroi: str = "max"
    dac_depth: int | None = 81
    dac_head: bool = True
    k0: int = 1
    reference: float = 16.0
    pyramid_depth: int = 3
    grid: int = 2
    fusion: str = "mean"
    # data
    image_size: list = field(default_factory=lambda: [64, 64])
    occlusion_rate: float = 0.5
    truncation_rate: float = 0.2
    train_scenes: int = 128
    eval_scenes: int = 96
    data_seed: int = 1
    # training
    epochs: int = 16
    batch_size: int = 8
    lr: float = 0.01
    optimizer: str = "sgd"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # gradcheck
    gradcheck_layers: list = field(default_factory=lambda: [
        "conv2d", "dacconv", "rp_pool", "deform_conv", "rroi_pool", "fusion", "eaconv"])
    gradcheck_seeds: list = field(default_factory=lambda: [0, 1, 2])
    # RP benchmark workloads
    bench_n: list = field(default_factory=lambda: [64, 100, 256])
    bench_rotations: list = field(default_factory=lambda: [2, 4, 8])
    bench_voxels: int = 256
    # io
    output_dir: str = "runs"
    checkpoint_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidSpec(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self):
        if len(self.slots) != len(self.channels):
            raise InvalidSpec("slots and channels must have equal length")
        if self.epochs < 1:
            raise InvalidSpec("epochs must be >= 1")
        if self.fusion != "mean":
            raise InvalidSpec(f"unsupported fusion operator {self.fusion!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidSpec(f"unknown optimizer {self.optimizer!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def save(self, path):
        Path(path).write_text(self.to_json())

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # --- derived specs ------------------------------------------------------

    def detector_spec(self, slots=None, mefem: bool = False) -> DetectorSpec:
        return DetectorSpec(
            slots=tuple(slots or self.slots),
            channels=tuple(self.channels),
            pool2d=self.pool2d,
            dac_depth=self.dac_depth,
            dac_head=self.dac_head and "dac" in (slots or self.slots),
            mefem=mefem,
            rroi=self.rroi,
            grid=self.grid,
            pyramid_depth=self.pyramid_depth,
            k0=self.k0,
            reference=self.reference,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(image_size=tuple(self.image_size), occlusion_rate=self.occlusion_rate,
                         truncation_rate=self.truncation_rate)

    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           lr=self.lr, optimizer=self.optimizer, seed=seed)
