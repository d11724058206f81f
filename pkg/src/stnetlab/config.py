"""Run configuration: one dataclass holding every experiment knob.

Every field has a default; resolved configs are echoed verbatim to
config.json so a run directory is self-describing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .fusion import TxnBlockCfg
from .harness import OptimCfg
from .stnet import BackboneSpec
from .synthdata import MultimodalXorCfg, TemporalOrderCfg


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "f32"
    workers: int = 1
    n_frames: int = 5
    t_train: int = 7
    t_eval: int = 25
    residual_temporal_block: bool = False
    backbone_cfg: dict = field(default_factory=lambda: BackboneSpec().to_dict())
    txn_cfg: dict = field(default_factory=lambda: TxnBlockCfg().to_dict())
    data_temporal: TemporalOrderCfg = field(default_factory=TemporalOrderCfg)
    data_xor: MultimodalXorCfg = field(default_factory=MultimodalXorCfg)
    optim_stnet: OptimCfg = field(default_factory=lambda: OptimCfg(
        lr=0.05, momentum=0.9, weight_decay=1e-4, epochs=14, batch_size=32,
        milestones=(10,), decay_factor=0.1))
    optim_tsn: OptimCfg = field(default_factory=lambda: OptimCfg(
        lr=0.05, momentum=0.9, weight_decay=1e-4, epochs=14, batch_size=32,
        milestones=(10,), decay_factor=0.1))
    optim_itxn: OptimCfg = field(default_factory=lambda: OptimCfg(
        lr=0.1, momentum=0.9, weight_decay=0.0, epochs=60, batch_size=32,
        milestones=(45,), decay_factor=0.1))
    optim_single: OptimCfg = field(default_factory=lambda: OptimCfg(
        lr=0.05, momentum=0.9, weight_decay=0.0, epochs=25, batch_size=32,
        milestones=(), decay_factor=0.1))

    def backbone(self) -> BackboneSpec:
        return BackboneSpec.from_dict(self.backbone_cfg)

    def txn(self) -> TxnBlockCfg:
        return TxnBlockCfg.from_dict(self.txn_cfg)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("ablation", None)
        kwargs = {}
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for f in fields(RunConfig):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "data_temporal":
                v = TemporalOrderCfg(**v)
            elif f.name == "data_xor":
                v = MultimodalXorCfg(**v)
            elif f.name.startswith("optim_"):
                v = OptimCfg(**v)
            kwargs[f.name] = v
        return RunConfig(**kwargs)

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
