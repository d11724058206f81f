"""Training, evaluation, ensembling and the ablation drivers."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .fusion import (ModalityBundle, TxnBlockCfg, build_itxn,
                     build_txn_classifier, init_itxn_params, itxn_forward)
from .graph import ModelGraph, run_graph
from .rng import RngStream
from .sampling import make_batch
from .serialize import ParamSet
from .stnet import (BackboneSpec, build_stnet, build_tsn_baseline,
                    forward_stnet, init_stnet_params)
from .tensor import NumericsError, Tape, Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, layer: str = ""):
        super().__init__(msg)
        self.layer = layer


@dataclass
class OptimCfg:
    """SGD with momentum, L2 weight decay and step lr decay."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    milestones: Tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        self.milestones = tuple(self.milestones)

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * (self.decay_factor ** decays)


@dataclass
class EvalReport:
    topk: Dict[int, float]
    per_class: List[float]
    n: int
    mean_loss: float
    scores: Optional[np.ndarray] = None  # [N, K] logits, not serialized

    @property
    def top1(self) -> float:
        return self.topk[1]

    def to_dict(self) -> dict:
        return {"topk": {str(k): v for k, v in self.topk.items()},
                "per_class": self.per_class, "n": self.n,
                "mean_loss": self.mean_loss}


# ---------------------------------------------------------------------------
# model adapters: uniform (make_batch, forward) over heterogeneous data
# ---------------------------------------------------------------------------

class ClipModel:
    """StNet or TSN baseline over (FrameSequence, label) datasets."""

    def __init__(self, graph: ModelGraph, t_train: int, t_eval: int):
        self.graph = graph
        self.t_train = t_train
        self.t_eval = t_eval
        self.num_classes = graph.meta["num_classes"]

    def make_batch(self, items, mode: str, rng: Optional[RngStream]):
        T = self.t_train if mode == "train" else self.t_eval
        batch = make_batch(items, T, self.graph.meta["n_frames"], mode, rng)
        return batch, batch.labels

    def forward(self, params, prepared, mode, update_stats=True,
                check_layers=False) -> Tensor:
        return forward_stnet(self.graph, params, prepared, mode,
                             update_stats=update_stats,
                             check_layers=check_layers)


class SequenceModel:
    """iTXN or single-modality TXN over (ModalityBundle, label) datasets.

    Bundles have per-sample sequence lengths, so the forward loops samples
    and concatenates the per-sample logits.
    """

    def __init__(self, graph: ModelGraph, modality: Optional[str] = None):
        self.graph = graph
        self.modality = modality  # None -> full iTXN
        self.num_classes = graph.meta["num_classes"]

    def make_batch(self, items, mode: str, rng: Optional[RngStream]):
        return [b for b, _ in items], np.array([y for _, y in items],
                                               dtype=np.int64)

    def _one(self, params, bundle: ModalityBundle, mode, update_stats,
             check_layers) -> Tensor:
        if self.modality is None:
            logits = itxn_forward(self.graph, params, bundle, mode)
            return ops.reshape(logits, (1, self.num_classes))
        seq = bundle.sequences[self.modality]
        x = Tensor(np.ascontiguousarray(seq.T[None]),
                   dtype=params["classifier.weight"].dtype)
        out = run_graph(self.graph, params, {"seq": x}, mode,
                        update_stats=update_stats, check_layers=check_layers)
        return out

    def forward(self, params, prepared, mode, update_stats=True,
                check_layers=False) -> Tensor:
        rows = [self._one(params, b, mode, update_stats, check_layers)
                for b in prepared]
        return ops.concat(rows, axis=0) if len(rows) > 1 else rows[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(model, params: ParamSet, data: Sequence, opt: OptimCfg,
          rng: RngStream, out_dir=None) -> Tuple[ParamSet, List[dict]]:
    """SGD training; deterministic per rng. Returns (params, curve).

    The curve records per-epoch mean training loss and training top-1. A
    non-finite loss aborts with a diagnostic naming the first bad layer.
    When `out_dir` is given the final ParamSet and curve.csv are written
    there.
    """
    if not data:
        raise ValueError("dataset is empty")
    names = params.trainable_names()
    velocity = {n: np.zeros_like(params[n].data) for n in names}
    curve: List[dict] = []
    n = len(data)
    for epoch in range(opt.epochs):
        erng = rng.spawn(epoch)
        order = erng.spawn(0).permutation(n)
        lr = opt.lr_at(epoch)
        tot_loss, tot_hit = 0.0, 0
        for bi, start in enumerate(range(0, n, opt.batch_size)):
            idx = order[start:start + opt.batch_size]
            items = [data[i] for i in idx]
            prepared, labels = model.make_batch(items, "train",
                                                erng.spawn(1 + bi))
            with Tape() as tape:
                logits = model.forward(params, prepared, "train")
                loss, probs = ops.softmax_xent(logits, labels)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                layer = _locate_bad_layer(model, params, prepared)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}; first "
                    f"offending layer: {layer}", layer=layer)
            grads = tape.backward(loss)
            for name in names:
                t = params[name]
                g = grads.get(t)
                if g is None:
                    continue
                if opt.weight_decay:
                    g = g + opt.weight_decay * t.data
                v = velocity[name]
                v *= opt.momentum
                v += g
                t.data -= (lr * v).astype(t.data.dtype)
            tot_loss += loss_val * len(idx)
            tot_hit += int((probs.data.argmax(axis=1) == labels).sum())
        curve.append({"epoch": epoch, "loss": tot_loss / n,
                      "top1": tot_hit / n})
    if out_dir is not None:
        save_run(out_dir, params, curve)
    return params, curve


def _locate_bad_layer(model, params, prepared) -> str:
    try:
        model.forward(params, prepared, "train", update_stats=False,
                      check_layers=True)
    except NumericsError as e:
        return e.layer or e.op
    return "<loss>"


def save_run(out_dir, params: ParamSet, curve: List[dict]) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    params.save(d / "params")
    with open(d / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "top1"])
        for row in curve:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["top1"])])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Hit mask for top-k with deterministic lower-index tie-breaking."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return (order[:, :k] == labels[:, None]).any(axis=1)


def evaluate(model, params: ParamSet, data: Sequence,
             k_list: Sequence[int] = (1, 5), batch_size: int = 64,
             workers: int = 1) -> EvalReport:
    """Eval-mode metrics; scores kept on the report for ensembling."""
    if not data:
        raise ValueError("dataset is empty")
    K = model.num_classes
    for k in k_list:
        if k < 1 or k > K:
            raise ValueError(f"top-k with k={k} invalid for {K} classes")
    chunks = [data[i:i + batch_size] for i in range(0, len(data), batch_size)]

    def run_chunk(items):
        prepared, labels = model.make_batch(items, "eval", None)
        logits = model.forward(params, prepared, "eval")
        return logits.data, labels

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    scores = np.concatenate([r[0] for r in results], axis=0)
    labels = np.concatenate([r[1] for r in results], axis=0)

    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    mean_loss = float(-logp[np.arange(len(labels)), labels].mean())
    topk = {int(k): float(topk_hits(scores, labels, k).mean())
            for k in k_list}
    per_class = []
    hits1 = topk_hits(scores, labels, 1)
    for c in range(K):
        mask = labels == c
        per_class.append(float(hits1[mask].mean()) if mask.any() else 0.0)
    return EvalReport(topk=topk, per_class=per_class, n=len(labels),
                      mean_loss=mean_loss, scores=scores)


def ensemble_average(score_sets: Sequence[np.ndarray],
                     weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of softmax-normalized scores, renormalized per row."""
    if not score_sets:
        raise ValueError("no score sets")
    if len(weights) != len(score_sets):
        raise ValueError("weights must match score sets")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be >= 0 and not all zero")
    shape = np.asarray(score_sets[0]).shape
    acc = np.zeros(shape, dtype=np.float64)
    for wi, s in zip(w, score_sets):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != shape:
            raise ValueError(
                f"score set shape {s.shape} does not match {shape}")
        z = s - s.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        acc += wi * p
    acc /= w.sum()
    acc /= acc.sum(axis=1, keepdims=True)
    return acc


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = ("stnet_vs_tsn", "itxn_vs_single", "t_transfer")


def run_ablation(name: str, cfg, seed: int, out_dir,
                 workers: int = 1) -> dict:
    """Run one named ablation; writes config.json / report.json / meta.json
    plus per-model params and curves under `out_dir`. Returns the report."""
    import time as _time

    from .config import RunConfig  # local import: config imports harness types

    if name not in ABLATIONS:
        raise ValueError(
            f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
    if not isinstance(cfg, RunConfig):
        raise TypeError("cfg must be a RunConfig")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["ablation"] = name
    resolved["seed"] = seed
    (out / "config.json").write_text(json.dumps(resolved, indent=2,
                                                sort_keys=True))
    t0 = _time.perf_counter()
    if name == "stnet_vs_tsn":
        report = _ablate_stnet_vs_tsn(cfg, seed, out, workers)
    elif name == "itxn_vs_single":
        report = _ablate_itxn_vs_single(cfg, seed, out, workers)
    else:
        report = _ablate_t_transfer(cfg, seed, out, workers)
    report = {"ablation": name, "seed": seed, **report}
    (out / "report.json").write_text(json.dumps(report, indent=2,
                                                sort_keys=True))
    (out / "meta.json").write_text(json.dumps(
        {"wall_seconds": _time.perf_counter() - t0}, indent=2))
    return report


def _row(model_name: str, rep: EvalReport) -> dict:
    row = {"model": model_name, "n": rep.n}
    for k, v in rep.topk.items():
        row[f"prec@{k}"] = v
    row["per_class"] = rep.per_class
    return row


def _k_list(num_classes: int) -> Tuple[int, ...]:
    return (1, 5) if num_classes >= 5 else (1, num_classes)


def _ablate_stnet_vs_tsn(cfg, seed, out: Path, workers: int) -> dict:
    from .synthdata import gen_temporal_order
    train_data, test_data = gen_temporal_order(cfg.data_temporal, seed)
    K = cfg.data_temporal.num_classes
    backbone = cfg.backbone()
    rows = []
    details = {}
    for kind in ("stnet", "tsn_baseline"):
        if kind == "stnet":
            graph = build_stnet(backbone, cfg.n_frames, K, cfg.txn(),
                                cfg.residual_temporal_block)
            opt = cfg.optim_stnet
        else:
            graph = build_tsn_baseline(backbone, cfg.n_frames, K)
            opt = cfg.optim_tsn
        params = init_stnet_params(graph, RngStream(seed, stream=11),
                                   dtype=cfg.dtype)
        model = ClipModel(graph, cfg.t_train, cfg.t_train)
        _, curve = train(model, params, train_data, opt,
                         RngStream(seed, stream=12),
                         out_dir=out / kind)
        rep = evaluate(model, params, test_data, _k_list(K), workers=workers)
        rows.append(_row(kind, rep))
        details[kind] = {"final_train": curve[-1], "eval": rep.to_dict()}
    return {"task": "temporal_order", "rows": rows, "details": details}


def _ablate_itxn_vs_single(cfg, seed, out: Path, workers: int) -> dict:
    from .synthdata import gen_multimodal_xor
    train_data, test_data = gen_multimodal_xor(cfg.data_xor, seed)
    K = 2
    dims = dict(cfg.data_xor.dims)
    rows = []
    details = {}
    single_scores = []
    single_top1 = []
    graph = build_itxn(dims, cfg.txn(), K)
    params = init_itxn_params(graph, RngStream(seed, stream=21),
                              dtype=cfg.dtype)
    model = SequenceModel(graph)
    _, curve = train(model, params, train_data, cfg.optim_itxn,
                     RngStream(seed, stream=22), out_dir=out / "itxn")
    rep = evaluate(model, params, test_data, _k_list(K), workers=workers)
    rows.append(_row("itxn", rep))
    details["itxn"] = {"final_train": curve[-1], "eval": rep.to_dict()}
    for i, m in enumerate(sorted(dims)):
        g = build_txn_classifier(dims[m], cfg.txn(), K)
        p = init_itxn_params(g, RngStream(seed, stream=31 + i),
                             dtype=cfg.dtype)
        sm = SequenceModel(g, modality=m)
        _, curve = train(sm, p, train_data, cfg.optim_single,
                         RngStream(seed, stream=41 + i),
                         out_dir=out / f"single_{m}")
        rep = evaluate(sm, p, test_data, _k_list(K), workers=workers)
        rows.append(_row(f"single_{m}", rep))
        details[f"single_{m}"] = {"final_train": curve[-1],
                                  "eval": rep.to_dict()}
        single_scores.append(rep.scores)
        single_top1.append(rep.top1)
    ens = ensemble_average(single_scores, [1.0] * len(single_scores))
    labels = np.array([y for _, y in test_data], dtype=np.int64)
    ens_row = {"model": "ensemble_singles", "n": len(labels)}
    for k in _k_list(K):
        ens_row[f"prec@{k}"] = float(topk_hits(ens, labels, k).mean())
    ens_row["per_class"] = [
        float(topk_hits(ens, labels, 1)[labels == c].mean())
        for c in range(K)]
    rows.append(ens_row)
    details["ensemble"] = {"weights": [1.0] * len(single_scores),
                           "max_single_top1": max(single_top1)}
    return {"task": "multimodal_xor", "rows": rows, "details": details}


def _ablate_t_transfer(cfg, seed, out: Path, workers: int) -> dict:
    from .synthdata import gen_temporal_order
    train_data, test_data = gen_temporal_order(cfg.data_temporal, seed)
    K = cfg.data_temporal.num_classes
    graph = build_stnet(cfg.backbone(), cfg.n_frames, K, cfg.txn(),
                        cfg.residual_temporal_block)
    params = init_stnet_params(graph, RngStream(seed, stream=11),
                               dtype=cfg.dtype)
    model = ClipModel(graph, cfg.t_train, cfg.t_train)
    _, curve = train(model, params, train_data, cfg.optim_stnet,
                     RngStream(seed, stream=12), out_dir=out / "stnet")
    rows = []
    details = {"final_train": curve[-1]}
    for t in (cfg.t_train, cfg.t_eval):
        m = ClipModel(graph, cfg.t_train, t)
        rep = evaluate(m, params, test_data, _k_list(K), workers=workers)
        rows.append(_row(f"stnet_T{t}", rep))
        details[f"eval_T{t}"] = rep.to_dict()
    return {"task": "temporal_order", "rows": rows,
            "t_train": cfg.t_train, "t_eval": cfg.t_eval, "details": details}
