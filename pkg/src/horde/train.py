"""Training loop, evaluation entry points and the (k, n) ablation grid."""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig
from .data import BatchSpec, Dataset, load_idx, mnist_subset, sample_batches
from .losses import pair_feed
from .model import HordeModel, load_checkpoint, save_checkpoint
from .optim import Adam

CHECKPOINT_DIR = "checkpoint"
METRICS_FILE = "metrics.jsonl"


class DivergenceError(RuntimeError):
    """Loss became non-finite; the last good checkpoint is kept on disk."""


@dataclass
class TrainResult:
    model: HordeModel
    steps: int
    output_dir: Path
    last_loss: float | None


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    dc = cfg.dataset
    if dc.kind == "mnist-subset":
        train, test = mnist_subset("train"), mnist_subset("test")
    else:
        train = load_idx(dc.train_images, dc.train_labels, split="train")
        test = load_idx(dc.test_images, dc.test_labels, split="test")
    if dc.limit_train is not None:
        train = train.subset(np.arange(min(dc.limit_train, len(train))))
    if dc.limit_test is not None:
        test = test.subset(np.arange(min(dc.limit_test, len(test))))
    return train, test


class _MetricsLog:
    def __init__(self, path: Path | None):
        self.fh = open(path, "w") if path is not None else None
        self.t0 = time.perf_counter()

    def write(self, record: dict):
        if self.fh is None:
            return
        record = {**record, "wall_time": round(time.perf_counter() - self.t0, 6)}
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def plain_recall(model: HordeModel, dataset: Dataset, Ks) -> ev.RetrievalResult:
    emb = model.embed(dataset.images)
    return ev.recall_at_k(emb, emb, dataset.labels, dataset.labels, Ks, exclude_self=True)


def train(cfg: RunConfig, output_dir=None, datasets=None, write_files: bool = True) -> TrainResult:
    """Train ``cfg.model`` for ``cfg.optimizer.steps`` Adam steps on P x Q batches.

    Writes ``metrics.jsonl``, ``config.json`` and a checkpoint every
    ``eval.interval`` steps (plus the final one) into ``output_dir``.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    train_set, test_set = datasets if datasets is not None else load_datasets(cfg)
    oc = cfg.optimizer
    model = HordeModel(copy.deepcopy(cfg.model), seed=cfg.seed)
    logged = ("loss", "dml", *(f"loss{k}" for k in model.cfg.orders))
    graph, _ = model.build_graph(loss_cfg=cfg.loss, outputs=logged)
    opt = Adam(model.params, lr=oc.lr, betas=oc.betas, eps=oc.eps)
    batches = sample_batches(train_set, BatchSpec(oc.P, oc.Q, seed=cfg.seed))
    extra = {"run_config": cfg.to_dict()}

    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    log = _MetricsLog(out / METRICS_FILE if write_files else None)

    def checkpoint(step):
        if write_files:
            save_checkpoint(model, out / CHECKPOINT_DIR, step=step, extra=extra)

    def evaluate(step):
        rec = plain_recall(model, test_set, cfg.eval.Ks)
        log.write({"event": "eval", "step": step, "recall_at": rec.to_dict()["recall_at"]})

    loss = None
    try:
        checkpoint(0)
        for step in range(1, oc.steps + 1):
            images, labels = next(batches)
            try:
                outs = graph.forward({"images": images, **pair_feed(labels, cfg.loss.kind)})
            except FloatingPointError as exc:
                log.write({"event": "diverged", "step": step, "error": str(exc)})
                raise DivergenceError(f"floating point failure at step {step}: {exc}") from None
            loss = float(outs["loss"])
            record = {"event": "step", "step": step, **{k: float(v) for k, v in sorted(outs.items())}}
            if not math.isfinite(loss):
                log.write({**record, "event": "diverged"})
                raise DivergenceError(f"loss became {loss} at step {step}; "
                                      f"last good checkpoint kept in {out / CHECKPOINT_DIR}")
            grads = graph.backward({"loss": 1.0})
            opt.step(grads)
            if not all(np.all(np.isfinite(p)) for p in model.params.values()):
                log.write({**record, "event": "diverged"})
                raise DivergenceError(f"parameters became non-finite at step {step}")
            log.write(record)
            if step % cfg.eval.interval == 0 or step == oc.steps:
                try:
                    evaluate(step)
                except FloatingPointError as exc:
                    log.write({"event": "diverged", "step": step, "error": str(exc)})
                    raise DivergenceError(f"evaluation overflowed at step {step}: {exc}") from None
                checkpoint(step)
    finally:
        log.close()
    return TrainResult(model, oc.steps, out, loss)


# -- evaluation commands


def eval_report(cfg: RunConfig, ckpt, mode: str = "plain", Ks=(1, 2, 4, 8), test_set=None) -> dict:
    """Recall@K of a checkpoint on the test split.

    ``plain`` uses the first-order embedding only and never builds the
    moment branch. ``concat-pca`` concatenates every order's embedding and
    reduces to the main embedding size.
    """
    model, manifest = load_checkpoint(ckpt, expected=cfg.model)
    if test_set is None:
        test_set = load_datasets(cfg)[1]
    if mode == "plain":
        res = plain_recall(model, test_set, Ks)
    elif mode == "concat-pca":
        names = ["embedding"] + [f"order{k}" for k in model.cfg.orders]
        reps = model.run(test_set.images, tuple(names), include_horde=bool(model.cfg.orders))
        res = ev.concat_pca_eval([reps[n] for n in names], test_set.labels, model.cfg.embedding_dim, Ks)
    else:
        raise ValueError(f"unknown eval mode {mode!r}")
    return {"mode": mode, "step": manifest["step"], **res.to_dict(), "config": cfg.to_dict()}


def probe_report(cfg: RunConfig, ckpt, rho: float, seed: int, Ks=(1, 2, 4, 8), test_set=None) -> dict:
    model, manifest = load_checkpoint(ckpt, expected=cfg.model)
    if test_set is None:
        test_set = load_datasets(cfg)[1]
    res = ev.subsample_probe(model, test_set, rho, seed, Ks)
    return {"step": manifest["step"], "seed": seed, **res.to_dict(), "config": cfg.to_dict()}


# -- ablation


def _order_recall(model: HordeModel, test_set: Dataset, n: int, Ks) -> float:
    if n == 1:
        emb = model.embed(test_set.images)
    else:
        emb = model.run(test_set.images, (f"order{n}",), include_horde=True)[f"order{n}"]
    return ev.recall_at_k(emb, emb, test_set.labels, test_set.labels, Ks, exclude_self=True).recall_at[1]


def ablation(cfg: RunConfig, datasets=None, output_dir=None) -> dict:
    """Train one model per (mode, k) with a shared seed and report R@1 for
    every test order n <= k. Row k=1 is the model without the moment branch."""
    ac = cfg.ablation
    datasets = datasets if datasets is not None else load_datasets(cfg)
    test_set = datasets[1]
    Ks = (1,)

    def run(model_cfg, lr):
        sub = copy.deepcopy(cfg)
        sub.model = model_cfg
        sub.optimizer.lr = lr
        if ac.steps is not None:
            sub.optimizer.steps = ac.steps
        return train(sub, datasets=datasets, write_files=False).model

    base_cfg = copy.deepcopy(cfg.model)
    base_cfg.horde = False
    baseline = run(base_cfg, cfg.optimizer.lr)
    base_r1 = _order_recall(baseline, test_set, 1, Ks)
    c, d = cfg.model.backbone.channels, cfg.model.d
    grid = {}
    for mode in ac.modes:
        rows = {"k=1": {"n=1": base_r1}}
        params = {}
        for k in range(2, ac.K_max + 1):
            mc = copy.deepcopy(cfg.model)
            mc.horde, mc.K, mc.stack_mode = True, k, mode
            model = run(mc, cfg.optimizer.lr)
            rows[f"k={k}"] = {f"n={n}": _order_recall(model, test_set, n, Ks) for n in range(1, k + 1)}
            params[f"k={k}"] = model.sketch_parameter_count()
        grid[mode] = {"recall_at_1": rows, "sketch_parameters": params}
    report = {
        "grid": grid,
        "parameter_counts": {
            f"K={k}": {"cascaded": k * c * d, "uncascaded": sum(j * c * d for j in range(2, k + 1))}
            for k in range(2, ac.K_max + 1)
        },
        "config": cfg.to_dict(),
    }
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        (Path(output_dir) / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
