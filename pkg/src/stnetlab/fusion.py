"""Temporal Xception blocks and the iTXN multimodal fusion model.

The TXN block is a 1-D sequence encoder: an optional pointwise bottleneck
followed by separable-convolution units (depthwise temporal conv, pointwise
projection, BN, pointwise-projected residual, ReLU) and a global temporal
pool. iTXN runs one TXN encoder per modality (late fusion) plus one over the
channel-concatenated sequences (early fusion) and classifies the
concatenation of all encoder outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .graph import LayerSpec, ModelGraph, init_params, run_graph
from .rng import RngStream
from .serialize import ParamSet
from .tensor import ShapeError, Tensor

MODALITIES = ("rgb", "flow_a", "flow_b", "audio")


@dataclass
class TxnUnitCfg:
    out_channels: int
    kernel_size: int = 3
    groups_mode: str = "depthwise"  # or "full"


@dataclass
class TxnBlockCfg:
    units: List[TxnUnitCfg] = field(default_factory=lambda: [
        TxnUnitCfg(64), TxnUnitCfg(64)])
    bottleneck_channels: Optional[int] = None
    head: str = "max"  # or "mean"

    def __post_init__(self):
        if not self.units:
            raise ShapeError("TXN block needs at least one unit")
        for u in self.units:
            if u.kernel_size % 2 != 1:
                raise ShapeError(
                    f"TXN kernel size must be odd, got {u.kernel_size}")
            if u.groups_mode not in ("depthwise", "full"):
                raise ShapeError(f"unknown groups_mode {u.groups_mode!r}")
        if self.head not in ("max", "mean"):
            raise ShapeError(f"TXN head must be max or mean, got {self.head!r}")

    @property
    def out_channels(self) -> int:
        return self.units[-1].out_channels

    def to_dict(self) -> dict:
        return {"units": [{"out_channels": u.out_channels,
                           "kernel_size": u.kernel_size,
                           "groups_mode": u.groups_mode} for u in self.units],
                "bottleneck_channels": self.bottleneck_channels,
                "head": self.head}

    @staticmethod
    def from_dict(d: dict) -> "TxnBlockCfg":
        return TxnBlockCfg(
            units=[TxnUnitCfg(**u) for u in d.get("units", [])] or None
            or [TxnUnitCfg(64), TxnUnitCfg(64)],
            bottleneck_channels=d.get("bottleneck_channels"),
            head=d.get("head", "max"))


@dataclass
class ModalityBundle:
    """Per-modality feature sequences, each [T_m, d_m]; any subset present."""

    sequences: Dict[str, np.ndarray]

    def __post_init__(self):
        seqs = {}
        for name, arr in self.sequences.items():
            a = np.asarray(arr, dtype=np.float32)
            if a.ndim != 2 or a.shape[0] < 1:
                raise ShapeError(
                    f"modality {name!r} must be [T>=1, d], got {a.shape}")
            seqs[name] = a
        self.sequences = seqs

    @property
    def modalities(self) -> List[str]:
        order = [m for m in MODALITIES if m in self.sequences]
        extras = sorted(set(self.sequences) - set(order))
        return order + extras


def _conv1d(name, c_in, c_out, kernel, groups, bias=True) -> LayerSpec:
    return LayerSpec(name, "conv1d", {
        "in_channels": c_in, "out_channels": c_out, "kernel": [kernel],
        "stride": [1], "padding": [kernel // 2], "groups": groups,
        "bias": bias}, inputs=[])


def txn_layers(prefix: str, in_channels: int, cfg: TxnBlockCfg,
               input_name: str) -> Tuple[List[LayerSpec], str, int]:
    """Emit the LayerSpecs of one TXN block; returns (layers, out, channels).

    Output is the pooled [B, C_out] vector; sequences of any length T >= 1
    are accepted since every conv pads to preserve T.
    """
    layers: List[LayerSpec] = []
    cur, c = input_name, in_channels
    if cfg.bottleneck_channels is not None:
        bc = cfg.bottleneck_channels
        for spec, inp in (
                (_conv1d(f"{prefix}.bottleneck.conv", c, bc, 1, 1), cur),
                (LayerSpec(f"{prefix}.bottleneck.bn", "bn", {"channels": bc}), None),
                (LayerSpec(f"{prefix}.bottleneck.relu", "relu", {}), None)):
            spec.inputs = [inp if inp else layers[-1].name]
            layers.append(spec)
        cur, c = layers[-1].name, bc
    for i, unit in enumerate(cfg.units):
        base = f"{prefix}.unit{i}"
        g = c if unit.groups_mode == "depthwise" else 1
        dw = _conv1d(f"{base}.dw", c, c, unit.kernel_size, g)
        dw.inputs = [cur]
        pw = _conv1d(f"{base}.pw", c, unit.out_channels, 1, 1)
        pw.inputs = [dw.name]
        bn = LayerSpec(f"{base}.bn", "bn", {"channels": unit.out_channels},
                       inputs=[pw.name])
        proj = _conv1d(f"{base}.proj", c, unit.out_channels, 1, 1, bias=False)
        proj.inputs = [cur]
        addl = LayerSpec(f"{base}.add", "add", {}, inputs=[bn.name, proj.name])
        rl = LayerSpec(f"{base}.relu", "relu", {}, inputs=[addl.name])
        layers.extend([dw, pw, bn, proj, addl, rl])
        cur, c = rl.name, unit.out_channels
    pool = LayerSpec(f"{prefix}.pool",
                     "seq_max" if cfg.head == "max" else "seq_mean",
                     {}, inputs=[cur])
    layers.append(pool)
    return layers, pool.name, c


def build_txn_block_graph(in_channels: int, cfg: TxnBlockCfg) -> ModelGraph:
    """Standalone TXN encoder: input [B, C_in, T] -> pooled [B, C_out]."""
    layers, out, c = txn_layers("txn", in_channels, cfg, "seq")
    return ModelGraph("txn_block", ["seq"], out, layers,
                      meta={"in_channels": in_channels, "out_channels": c,
                            "txn_cfg": cfg.to_dict()})


def build_txn_classifier(dim: int, cfg: TxnBlockCfg,
                         num_classes: int) -> ModelGraph:
    """Single-sequence TXN encoder + linear classifier ([B, d, T] input)."""
    layers, out, c = txn_layers("enc", dim, cfg, "seq")
    clf = LayerSpec("classifier", "linear",
                    {"in_dim": c, "out_dim": num_classes}, inputs=[out])
    layers.append(clf)
    return ModelGraph("txn_classifier", ["seq"], "classifier", layers,
                      meta={"dim": dim, "num_classes": num_classes,
                            "txn_cfg": cfg.to_dict()})


def build_itxn(dims: Dict[str, int], cfg: TxnBlockCfg,
               num_classes: int) -> ModelGraph:
    """Early+late fusion over the given modality feature dims."""
    if not dims:
        raise ShapeError("iTXN needs at least one modality")
    order = [m for m in MODALITIES if m in dims] + sorted(
        set(dims) - set(MODALITIES))
    layers: List[LayerSpec] = []
    branch_outs: List[str] = []
    for m in order:
        ls, out, c = txn_layers(f"late_{m}", dims[m], cfg, m)
        layers.extend(ls)
        branch_outs.append(out)
    early_in = LayerSpec("early.concat", "early_concat", {}, inputs=list(order))
    layers.append(early_in)
    early_dim = sum(dims[m] for m in order)
    ls, early_out, ec = txn_layers("early", early_dim, cfg, "early.concat")
    layers.extend(ls)
    fuse = LayerSpec("fuse", "concat", {"axis": 1},
                     inputs=branch_outs + [early_out])
    layers.append(fuse)
    feat_dim = cfg.out_channels * len(order) + ec
    clf = LayerSpec("classifier", "linear",
                    {"in_dim": feat_dim, "out_dim": num_classes},
                    inputs=["fuse"])
    layers.append(clf)
    blocks = {f"late_{m}": [l.name for l in layers
                            if l.name.startswith(f"late_{m}.")] for m in order}
    blocks["early"] = [l.name for l in layers if l.name.startswith("early")]
    return ModelGraph("itxn", list(order), "classifier", layers, meta={
        "modalities": list(order), "dims": {m: dims[m] for m in order},
        "early_dim": early_dim, "feature_dim": feat_dim,
        "num_classes": num_classes, "txn_cfg": cfg.to_dict(),
        "blocks": blocks,
    })


def init_itxn_params(graph: ModelGraph, rng: RngStream,
                     temporal_init: str = "he", dtype: str = "f32") -> ParamSet:
    """He init by default; `temporal_init="paper"` sets every 1-D conv to the
    uniform 1/(3*C_i) smoothing weights with zero biases instead."""
    return init_params(graph, rng, temporal_init=temporal_init, dtype=dtype)


def _seq_to_input(arr, dtype: str) -> Tensor:
    """[T, d] (time-major storage) -> [1, d, T] conv layout."""
    if isinstance(arr, Tensor):
        return ops.transpose(ops.reshape(arr, (1,) + arr.shape), (0, 2, 1))
    a = np.asarray(arr)
    return Tensor(np.ascontiguousarray(a.T[None]), dtype=dtype)


def txn_block_forward(cfg: TxnBlockCfg, params: ParamSet, seq,
                      mode: str = "eval") -> Tensor:
    """Encode one [C_in, T] sequence to a [C_out] vector.

    `params` must come from a graph built by :func:`build_txn_block_graph`
    with matching `in_channels`.
    """
    data = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    if data.ndim != 2 or data.shape[1] < 1:
        raise ShapeError(f"expected a [C_in, T>=1] sequence, got {data.shape}")
    c_in = data.shape[0]
    graph = build_txn_block_graph(c_in, cfg)
    dtype = params[graph.layers[0].name + ".weight"].dtype
    x = seq if isinstance(seq, Tensor) else Tensor(data, dtype=dtype)
    x3 = ops.reshape(x, (1,) + x.shape)
    out = run_graph(graph, params, {"seq": x3}, mode)
    return ops.reshape(out, (out.shape[1],))


def itxn_forward(graph: ModelGraph, params: ParamSet, bundle: ModalityBundle,
                 mode: str) -> Tensor:
    """Logits [K] for one bundle; raises if a graph modality is missing."""
    want = graph.meta["modalities"]
    missing = [m for m in want if m not in bundle.sequences]
    if missing:
        raise ShapeError(
            f"bundle is missing modalities required by the graph: {missing}")
    dims = graph.meta["dims"]
    dtype = params["classifier.weight"].dtype
    inputs = {}
    for m in want:
        seq = bundle.sequences[m]
        if seq.shape[1] != dims[m]:
            raise ShapeError(
                f"modality {m!r} has dim {seq.shape[1]}, graph expects {dims[m]}")
        inputs[m] = _seq_to_input(seq, dtype)
    out = run_graph(graph, params, inputs, mode)
    return ops.reshape(out, (out.shape[1],))


def resample_sequence(seq, target_t: int):
    """Nearest-index resampling of a [T, d] sequence to [target_t, d]."""
    if target_t < 1:
        raise ShapeError(f"target length must be >= 1, got {target_t}")
    if isinstance(seq, Tensor):
        t_in = seq.shape[0]
        idx = (np.arange(target_t, dtype=np.int64) * t_in) // target_t
        return ops.gather_axis(seq, idx, axis=0)
    arr = np.asarray(seq)
    t_in = arr.shape[0]
    idx = (np.arange(target_t, dtype=np.int64) * t_in) // target_t
    return arr[idx]
