"""Declarative model graphs.

A :class:`ModelGraph` is a serializable list of typed :class:`LayerSpec`
nodes in topological order, evaluated by :func:`run_graph` against an
externally-owned :class:`ParamSet`. Keeping parameters out of the graph makes
the temporal length T a pure runtime property: the same graph forwards
batches with any T >= 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .rng import RngStream
from .serialize import ParamSet
from .tensor import DTYPES, NumericsError, ShapeError, Tensor

_CONV_KINDS = {"conv1d": 1, "conv2d": 2, "conv3d": 3}


@dataclass
class LayerSpec:
    name: str
    kind: str
    cfg: dict = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "cfg": self.cfg,
                "inputs": list(self.inputs)}


@dataclass
class ModelGraph:
    name: str
    inputs: List[str]
    output: str
    layers: List[LayerSpec]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "inputs": self.inputs, "output": self.output,
            "layers": [l.to_dict() for l in self.layers], "meta": self.meta,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelGraph":
        d = json.loads(text)
        layers = [LayerSpec(l["name"], l["kind"], l["cfg"], l["inputs"])
                  for l in d["layers"]]
        return ModelGraph(d["name"], d["inputs"], d["output"], layers,
                          d.get("meta", {}))

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


def param_count(layer: LayerSpec) -> int:
    """Closed-form trainable parameter count (running stats excluded)."""
    k, cfg = layer.kind, layer.cfg
    if k in _CONV_KINDS:
        n = cfg["out_channels"] * (cfg["in_channels"] // cfg["groups"]) \
            * int(np.prod(cfg["kernel"]))
        if cfg.get("bias", True):
            n += cfg["out_channels"]
        return n
    if k == "bn":
        return 2 * cfg["channels"]
    if k == "linear":
        return cfg["in_dim"] * cfg["out_dim"] + cfg["out_dim"]
    return 0


def layer_param_shapes(layer: LayerSpec) -> Dict[str, tuple]:
    """Parameter name -> shape for one layer (buffers included)."""
    k, cfg = layer.kind, layer.cfg
    out: Dict[str, tuple] = {}
    if k in _CONV_KINDS:
        rank = _CONV_KINDS[k]
        kern = tuple(cfg["kernel"])
        assert len(kern) == rank
        out[f"{layer.name}.weight"] = (
            cfg["out_channels"], cfg["in_channels"] // cfg["groups"]) + kern
        if cfg.get("bias", True):
            out[f"{layer.name}.bias"] = (cfg["out_channels"],)
    elif k == "bn":
        c = cfg["channels"]
        for suffix in ("gamma", "beta", "run_mean", "run_var"):
            out[f"{layer.name}.{suffix}"] = (c,)
    elif k == "linear":
        out[f"{layer.name}.weight"] = (cfg["in_dim"], cfg["out_dim"])
        out[f"{layer.name}.bias"] = (cfg["out_dim"],)
    return out


def is_buffer(name: str) -> bool:
    return name.endswith(".run_mean") or name.endswith(".run_var")


def param_shapes(graph: ModelGraph) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for layer in graph.layers:
        shapes.update(layer_param_shapes(layer))
    return shapes


def init_params_random(graph: ModelGraph, rng: RngStream,
                       dtype: str = "f32") -> ParamSet:
    """He-uniform fan-in init for every weight; BN stats randomized too.

    Used by gradient checks and property tests, where symmetric inits would
    hide bugs. Architecture-faithful inits live in stnet/fusion.
    """
    params = ParamSet()
    i = 0
    for layer in graph.layers:
        for name, shape in layer_param_shapes(layer).items():
            r = rng.spawn(i)
            i += 1
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:])) if layer.kind != "linear" \
                    else shape[0]
                bound = np.sqrt(6.0 / fan_in)
                arr = r.uniform(-bound, bound, size=shape)
            elif name.endswith(".gamma"):
                arr = r.uniform(0.5, 1.5, size=shape)
            elif name.endswith(".run_var"):
                arr = r.uniform(0.5, 2.0, size=shape)
            elif name.endswith(".run_mean"):
                arr = r.normal(0.0, 0.5, size=shape)
            elif name.endswith(".beta") or name.endswith(".bias"):
                arr = r.normal(0.0, 0.1, size=shape)
            else:
                arr = np.zeros(shape)
            params.add(name, Tensor(arr, dtype=dtype,
                                    requires_grad=not is_buffer(name)))
    return params


def bn_identity_var(dtype: str, eps: float = 1e-5) -> float:
    """The dtype value v with v + eps == 1 exactly, so a freshly initialized
    BN layer (gamma=1, beta=0, mean=0) is a bitwise identity in eval mode."""
    dt = np.dtype(DTYPES[dtype]).type
    one, e = dt(1.0), dt(eps)
    v = dt(1.0 - eps)
    for _ in range(16):
        s = dt(v + e)
        if s == one:
            return float(v)
        v = np.nextafter(v, one if s < one else dt(0.0))
    raise ValueError(f"no {dtype} value v satisfies v + {eps} == 1")


def init_params(graph: ModelGraph, rng: RngStream,
                temporal_init: str = "paper", dtype: str = "f32") -> ParamSet:
    """Architecture init.

    2-D convs and linear layers draw He-uniform fan-in weights; BN starts as
    an exact identity map in eval mode (gamma=1, beta=0, running mean 0,
    running var the largest value that still normalizes by exactly 1 under
    the additive eps). Temporal (1-D/3-D) convs follow `temporal_init`:
    "paper" sets every weight to 1/(3*C_i) with C_i the per-filter fan-in
    channels and zero biases, "he" draws them like any other conv.
    """
    if temporal_init not in ("paper", "he"):
        raise ValueError(f"unknown temporal_init {temporal_init!r}")
    params = ParamSet()
    i = 0
    for layer in graph.layers:
        shapes = layer_param_shapes(layer)
        for name, shape in shapes.items():
            r = rng.spawn(i)
            i += 1
            if name.endswith(".weight") and layer.kind in _CONV_KINDS:
                c_i = layer.cfg["in_channels"] // layer.cfg["groups"]
                if layer.kind != "conv2d" and temporal_init == "paper":
                    arr = np.full(shape, 1.0 / (3.0 * c_i))
                else:
                    fan_in = c_i * int(np.prod(layer.cfg["kernel"]))
                    bound = np.sqrt(6.0 / fan_in)
                    arr = r.uniform(-bound, bound, size=shape)
            elif name.endswith(".weight") and layer.kind == "linear":
                bound = np.sqrt(6.0 / layer.cfg["in_dim"])
                arr = r.uniform(-bound, bound, size=shape)
            elif name.endswith(".gamma"):
                arr = np.ones(shape)
            elif name.endswith(".run_var"):
                arr = np.full(shape, bn_identity_var(dtype))
            else:  # bias, beta, run_mean
                arr = np.zeros(shape)
            params.add(name, Tensor(arr, dtype=dtype,
                                    requires_grad=not is_buffer(name)))
    return params


def _resample_indices(t_in: int, t_out: int) -> np.ndarray:
    # nearest-index: index(t) = floor(t * T_in / T_out)
    return (np.arange(t_out, dtype=np.int64) * t_in) // t_out


def run_graph(graph: ModelGraph, params: ParamSet, inputs: Dict[str, Tensor],
              mode: str, update_stats: bool = True,
              check_layers: bool = False) -> Tensor:
    """Evaluate the graph; returns the output tensor.

    `mode` is "train" or "eval" (BN statistics selection); `update_stats`
    can freeze running-stat writes (gradient checking needs a pure forward).
    With `check_layers`, each layer output is scanned for NaN/Inf and the
    offending layer is named.
    """
    values: Dict[str, Tensor] = dict(inputs)
    for name in graph.inputs:
        if name not in values:
            raise ShapeError(f"missing graph input '{name}'")
    ctx: Dict[str, int] = {}
    for layer in graph.layers:
        xs = [values[i] for i in layer.inputs]
        try:
            out = _eval_layer(layer, params, xs, mode, update_stats, ctx)
        except NumericsError as e:
            raise NumericsError(str(e), op=e.op, layer=layer.name) from None
        if check_layers and not np.all(np.isfinite(out.data)):
            raise NumericsError(
                f"non-finite values in layer '{layer.name}' ({layer.kind})",
                op=layer.kind, layer=layer.name)
        values[layer.name] = out
    return values[graph.output]


def _eval_layer(layer: LayerSpec, params: ParamSet, xs: List[Tensor],
                mode: str, update_stats: bool, ctx: Dict[str, int]) -> Tensor:
    k = layer.kind
    cfg = layer.cfg
    nm = layer.name
    if k in _CONV_KINDS:
        b = params.get(f"{nm}.bias") if cfg.get("bias", True) else None
        return ops.convnd_grouped(
            xs[0], params[f"{nm}.weight"], b, groups=cfg["groups"],
            padding=tuple(cfg["padding"]), stride=tuple(cfg["stride"]))
    if k == "bn":
        return ops.batchnorm(
            xs[0], params[f"{nm}.gamma"], params[f"{nm}.beta"],
            params[f"{nm}.run_mean"], params[f"{nm}.run_var"], mode,
            update_stats=update_stats)
    if k == "relu":
        return ops.relu(xs[0])
    if k == "add":
        return ops.add(xs[0], xs[1])
    if k == "linear":
        return ops.linear(xs[0], params[f"{nm}.weight"], params[f"{nm}.bias"])
    if k == "pool2d":
        return ops.pool(xs[0], cfg["op"], window=tuple(cfg["window"]),
                        stride=tuple(cfg["stride"]))
    if k == "gap2d":
        return ops.pool(xs[0], "global_avg")
    if k == "merge_bt":
        x = xs[0]
        if x.ndim != 5:
            raise ShapeError(
                f"merge_bt expects [B,T,C,H,W], got {x.shape}")
        B, T = x.shape[0], x.shape[1]
        ctx["B"], ctx["T"] = B, T
        return ops.reshape(x, (B * T,) + x.shape[2:])
    if k == "seg_to_tchw":
        x = xs[0]
        B, T = ctx["B"], ctx["T"]
        y = ops.reshape(x, (B, T) + x.shape[1:])
        return ops.transpose(y, (0, 2, 1, 3, 4))
    if k == "tchw_to_seg":
        x = xs[0]
        B, T = ctx["B"], ctx["T"]
        y = ops.transpose(x, (0, 2, 1, 3, 4))
        return ops.reshape(y, (B * T,) + x.shape[1:2] + x.shape[3:])
    if k == "segments_to_seq":
        x = xs[0]
        B, T = ctx["B"], ctx["T"]
        y = ops.reshape(x, (B, T, x.shape[1]))
        return ops.transpose(y, (0, 2, 1))
    if k == "seq_mean":
        return ops.mean_axis(xs[0], 2)
    if k == "seq_max":
        return ops.max_axis(xs[0], 2)
    if k == "concat":
        return ops.concat(xs, axis=cfg.get("axis", 1))
    if k == "early_concat":
        t_common = max(x.shape[2] for x in xs)
        resampled = []
        for x in xs:
            if x.shape[2] == t_common:
                resampled.append(x)
            else:
                idx = _resample_indices(x.shape[2], t_common)
                resampled.append(ops.gather_axis(x, idx, axis=2))
        return ops.concat(resampled, axis=1)
    raise ShapeError(f"unknown layer kind {k!r} in layer '{nm}'")


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------

def describe(graph: ModelGraph) -> dict:
    """Per-layer parameter accounting plus block-level summaries."""
    rows = []
    total = 0
    for layer in graph.layers:
        n = param_count(layer)
        total += n
        rows.append({"name": layer.name, "kind": layer.kind, "params": n,
                     "inputs": list(layer.inputs)})
    blocks = {}
    for bname, lnames in graph.meta.get("blocks", {}).items():
        blocks[bname] = sum(r["params"] for r in rows if r["name"] in lnames)
    return {"model": graph.name, "layers": rows, "total_params": total,
            "blocks": blocks, "meta": graph.meta}


def describe_text(graph: ModelGraph) -> str:
    d = describe(graph)
    w = max(len(r["name"]) for r in d["layers"]) + 2
    lines = [f"model: {d['model']}",
             f"{'layer'.ljust(w)}{'kind'.ljust(12)}{'params':>10}"]
    lines.append("-" * (w + 22))
    for r in d["layers"]:
        lines.append(f"{r['name'].ljust(w)}{r['kind'].ljust(12)}{r['params']:>10}")
    lines.append("-" * (w + 22))
    lines.append(f"{'total'.ljust(w)}{'':12}{d['total_params']:>10}")
    for bname, n in d["blocks"].items():
        lines.append(f"block {bname}: {n} params")
    return "\n".join(lines)
