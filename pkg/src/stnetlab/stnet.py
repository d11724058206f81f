"""StNet construction, initialization and forward passes.

The model reshapes a [B, T, 3N, H, W] clip batch to [B*T, 3N, H, W], runs a
configurable 2-D residual backbone over the super images, inserts
Conv3d(C_i, (3,1,1), groups=1) -> BN3d -> ReLU temporal blocks after the 3rd
and 4th stages (reshaping to [B, C, T, H, W] around them), global-average
pools each segment and feeds the [B, C, T] sequence to a temporal Xception
head. T is a runtime property: the same graph and parameters run with any T.

The TSN baseline shares the backbone but replaces all temporal machinery
with a mean over segments, which makes it exactly invariant to segment
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .fusion import TxnBlockCfg, txn_layers
from .graph import (LayerSpec, ModelGraph, init_params, layer_param_shapes,
                    run_graph)
from .rng import RngStream
from .sampling import SuperImageBatch, inflate_conv1_weights
from .serialize import ParamSet
from .tensor import ShapeError, Tensor


@dataclass
class StemSpec:
    channels: int = 16
    kernel: int = 3
    stride: int = 2


@dataclass
class StageSpec:
    blocks: int = 1
    channels: int = 16
    stride: int = 1


@dataclass
class BackboneSpec:
    stem: StemSpec = field(default_factory=StemSpec)
    stages: List[StageSpec] = field(default_factory=lambda: [
        StageSpec(1, 16, 2), StageSpec(1, 32, 2),
        StageSpec(1, 64, 2), StageSpec(1, 128, 1)])

    def __post_init__(self):
        if len(self.stages) < 4:
            raise ShapeError(
                f"backbone needs >= 4 stages (temporal blocks attach after "
                f"stages 3 and 4), got {len(self.stages)}")

    def to_dict(self) -> dict:
        return {"stem": vars(self.stem),
                "stages": [vars(s) for s in self.stages]}

    @staticmethod
    def from_dict(d: dict) -> "BackboneSpec":
        return BackboneSpec(
            stem=StemSpec(**d.get("stem", {})),
            stages=[StageSpec(**s) for s in d["stages"]] if "stages" in d
            else BackboneSpec().stages)


TEMPORAL_INSERT_AFTER = (3, 4)  # 1-based stage indices


def _conv2d(name, c_in, c_out, k, stride, bias=False) -> LayerSpec:
    return LayerSpec(name, "conv2d", {
        "in_channels": c_in, "out_channels": c_out, "kernel": [k, k],
        "stride": [stride, stride], "padding": [k // 2, k // 2],
        "groups": 1, "bias": bias}, inputs=[])


def _bn(name, c) -> LayerSpec:
    return LayerSpec(name, "bn", {"channels": c})


def _residual_block(prefix: str, c_in: int, c_out: int,
                    stride: int, input_name: str) -> List[LayerSpec]:
    conv1 = _conv2d(f"{prefix}.conv1", c_in, c_out, 3, stride)
    conv1.inputs = [input_name]
    bn1 = _bn(f"{prefix}.bn1", c_out)
    bn1.inputs = [conv1.name]
    relu1 = LayerSpec(f"{prefix}.relu1", "relu", {}, inputs=[bn1.name])
    conv2 = _conv2d(f"{prefix}.conv2", c_out, c_out, 3, 1)
    conv2.inputs = [relu1.name]
    bn2 = _bn(f"{prefix}.bn2", c_out)
    bn2.inputs = [conv2.name]
    layers = [conv1, bn1, relu1, conv2, bn2]
    if c_in != c_out or stride != 1:
        proj = _conv2d(f"{prefix}.proj", c_in, c_out, 1, stride)
        proj.inputs = [input_name]
        proj_bn = _bn(f"{prefix}.proj_bn", c_out)
        proj_bn.inputs = [proj.name]
        layers += [proj, proj_bn]
        skip = proj_bn.name
    else:
        skip = input_name
    addl = LayerSpec(f"{prefix}.add", "add", {}, inputs=[bn2.name, skip])
    relu2 = LayerSpec(f"{prefix}.relu", "relu", {}, inputs=[addl.name])
    layers += [addl, relu2]
    return layers


def _temporal_block(idx: int, channels: int, input_name: str,
                    residual: bool) -> List[LayerSpec]:
    pre = f"temporal{idx}"
    to3d = LayerSpec(f"{pre}.in", "seg_to_tchw", {}, inputs=[input_name])
    conv = LayerSpec(f"{pre}.conv", "conv3d", {
        "in_channels": channels, "out_channels": channels,
        "kernel": [3, 1, 1], "stride": [1, 1, 1], "padding": [1, 0, 0],
        "groups": 1, "bias": True}, inputs=[to3d.name])
    bn = _bn(f"{pre}.bn", channels)
    bn.inputs = [conv.name]
    layers = [to3d, conv, bn]
    if residual:
        addl = LayerSpec(f"{pre}.add", "add", {}, inputs=[bn.name, to3d.name])
        layers.append(addl)
        relu_in = addl.name
    else:
        relu_in = bn.name
    relu = LayerSpec(f"{pre}.relu", "relu", {}, inputs=[relu_in])
    back = LayerSpec(f"{pre}.out", "tchw_to_seg", {}, inputs=[relu.name])
    layers += [relu, back]
    return layers


def _backbone_layers(backbone: BackboneSpec, n: int, temporal: bool,
                     residual_temporal: bool):
    """Shared stem+stages (+optional temporal blocks); returns layers, last
    name, last channel count, and temporal-block metadata."""
    c_in = 3 * n
    layers: List[LayerSpec] = [
        LayerSpec("merge", "merge_bt", {}, inputs=["clips"])]
    stem = _conv2d("stem.conv", c_in, backbone.stem.channels,
                   backbone.stem.kernel, backbone.stem.stride)
    stem.inputs = ["merge"]
    layers += [stem, _bn("stem.bn", backbone.stem.channels)]
    layers[-1].inputs = [stem.name]
    layers.append(LayerSpec("stem.relu", "relu", {}, inputs=["stem.bn"]))
    cur, c = "stem.relu", backbone.stem.channels
    blocks_meta = {}
    for si, stage in enumerate(backbone.stages, start=1):
        for bi in range(stage.blocks):
            stride = stage.stride if bi == 0 else 1
            ls = _residual_block(f"stage{si}.block{bi}", c, stage.channels,
                                 stride, cur)
            layers += ls
            cur, c = ls[-1].name, stage.channels
        if temporal and si in TEMPORAL_INSERT_AFTER:
            ls = _temporal_block(len(blocks_meta) + 1, c, cur,
                                 residual_temporal)
            layers += ls
            cur = ls[-1].name
            blocks_meta[f"temporal{len(blocks_meta) + 1}"] = [
                l.name for l in ls]
    layers.append(LayerSpec("gap", "gap2d", {}, inputs=[cur]))
    layers.append(LayerSpec("seq", "segments_to_seq", {}, inputs=["gap"]))
    return layers, "seq", c, blocks_meta


def build_stnet(backbone: BackboneSpec, n: int, num_classes: int,
                txn_cfg: Optional[TxnBlockCfg] = None,
                residual_temporal_block: bool = False) -> ModelGraph:
    """Full StNet graph; accepts any T >= 1 at forward time."""
    if n < 1:
        raise ShapeError(f"N must be >= 1, got {n}")
    txn_cfg = txn_cfg or TxnBlockCfg()
    layers, cur, c, blocks_meta = _backbone_layers(
        backbone, n, temporal=True, residual_temporal=residual_temporal_block)
    head_layers, head_out, head_c = txn_layers("head", c, txn_cfg, cur)
    layers += head_layers
    clf = LayerSpec("classifier", "linear",
                    {"in_dim": head_c, "out_dim": num_classes},
                    inputs=[head_out])
    layers.append(clf)
    blocks_meta["head"] = [l.name for l in head_layers]
    return ModelGraph("stnet", ["clips"], "classifier", layers, meta={
        "n_frames": n, "in_channels": 3 * n, "num_classes": num_classes,
        "backbone": backbone.to_dict(), "txn_cfg": txn_cfg.to_dict(),
        "residual_temporal_block": residual_temporal_block,
        "temporal_insert_after": list(TEMPORAL_INSERT_AFTER),
        "blocks": blocks_meta,
    })


def build_tsn_baseline(backbone: BackboneSpec, n: int,
                       num_classes: int) -> ModelGraph:
    """Same backbone, no temporal blocks, mean-over-segments consensus."""
    if n < 1:
        raise ShapeError(f"N must be >= 1, got {n}")
    layers, cur, c, _ = _backbone_layers(backbone, n, temporal=False,
                                         residual_temporal=False)
    layers.append(LayerSpec("consensus", "seq_mean", {}, inputs=[cur]))
    clf = LayerSpec("classifier", "linear",
                    {"in_dim": c, "out_dim": num_classes},
                    inputs=["consensus"])
    layers.append(clf)
    return ModelGraph("tsn_baseline", ["clips"], "classifier", layers, meta={
        "n_frames": n, "in_channels": 3 * n, "num_classes": num_classes,
        "backbone": backbone.to_dict(), "blocks": {},
    })


def init_stnet_params(graph: ModelGraph, rng: RngStream,
                      base2d: Optional[ParamSet] = None,
                      dtype: str = "f32") -> ParamSet:
    """Init following the model's three rules.

    1. The stem conv is inflated from a 2-D 3-channel kernel (from `base2d`
       when given, else a fresh He draw): each frame slot holds w2d/N, so the
       initial response to N identical frames equals the 2-D conv.
    2. Every BN layer starts as the identity map in eval mode.
    3. Temporal (1-D/3-D) convs start with all weights 1/(3*C_i) and zero
       biases; 2-D convs and linear layers are He-uniform.
    """
    params = init_params(graph, rng, temporal_init="paper", dtype=dtype)
    n = graph.meta["n_frames"]
    stem_shape = params["stem.conv.weight"].shape
    c_out, k = stem_shape[0], stem_shape[2]
    if base2d is not None:
        w2d = base2d["stem.conv.weight"].data
        if w2d.shape != (c_out, 3, k, k):
            raise ShapeError(
                f"base2d stem shape {w2d.shape} does not match 2-D "
                f"counterpart ({c_out}, 3, {k}, {k})")
        for name in base2d.keys():
            if name == "stem.conv.weight":
                continue
            if name not in params:
                raise ShapeError(f"base2d has unknown parameter {name!r}")
            if base2d[name].shape != params[name].shape:
                raise ShapeError(
                    f"base2d parameter {name!r} shape {base2d[name].shape} "
                    f"!= {params[name].shape}")
            params[name].data[...] = base2d[name].data
    else:
        r = rng.spawn(10_000)
        bound = np.sqrt(6.0 / (3 * k * k))
        w2d = r.uniform(-bound, bound, size=(c_out, 3, k, k))
    params["stem.conv.weight"].data[...] = inflate_conv1_weights(w2d, n)
    return params


def _check_batch(graph: ModelGraph, batch: SuperImageBatch) -> None:
    want = graph.meta["in_channels"]
    got = batch.clips.shape[2]
    if got != want:
        raise ShapeError(
            f"clip channel size {got} does not match the graph's expected "
            f"3N = {want} (N = {graph.meta['n_frames']})")


def forward_stnet(graph: ModelGraph, params: ParamSet,
                  batch: SuperImageBatch, mode: str,
                  update_stats: bool = True,
                  check_layers: bool = False) -> Tensor:
    """Logits [B, K]; deterministic in eval mode."""
    _check_batch(graph, batch)
    dtype = params["classifier.weight"].dtype
    clips = Tensor(batch.clips, dtype=dtype)
    return run_graph(graph, params, {"clips": clips}, mode,
                     update_stats=update_stats, check_layers=check_layers)


def tsn_baseline_forward(graph: ModelGraph, params: ParamSet,
                         batch: SuperImageBatch, mode: str,
                         update_stats: bool = True,
                         check_layers: bool = False) -> Tensor:
    """Segment-order-invariant baseline forward (mean consensus)."""
    return forward_stnet(graph, params, batch, mode,
                         update_stats=update_stats, check_layers=check_layers)
