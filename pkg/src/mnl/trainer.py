"""Two-stage training: cross-entropy warm-up, then CE plus guided negative learning.

Epochs with index ``< warmup`` (0-based) are warm-up epochs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mnl.datagen import MultimodalBatch
from mnl.guidance import (GUIDANCE_MODES, GUIDANCE_SCOPES, normalized_ucom, select_guidance,
                          total_loss, ucom)
from mnl.model import FusionSpec, backward, forward, init_encoder
from mnl.numerics import NonFiniteError, RngStream


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup: int = 10
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lam: float = 1.0
    guidance: str = "robust"
    prior_rdm: int = 0
    scope: str = "non-target"
    mnl_reduction: str = "active"
    fusion: str = "static"
    fusion_weights: tuple[float, ...] | None = None
    temperature: float = 1.0
    ce_weights: tuple[float, ...] | None = None
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.betas = tuple(float(b) for b in self.betas)
        if self.fusion_weights is not None:
            self.fusion_weights = tuple(float(v) for v in self.fusion_weights)
        if self.ce_weights is not None:
            self.ce_weights = tuple(float(v) for v in self.ce_weights)
        if self.epochs < 0 or not 0 <= self.warmup <= self.epochs:
            raise ValueError("need 0 <= warmup <= epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.scope not in GUIDANCE_SCOPES:
            raise ValueError(f"unknown guidance scope {self.scope!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    def fusion_spec(self) -> FusionSpec:
        return FusionSpec(self.fusion, self.fusion_weights, self.temperature)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    stage: str
    acc_fused: float
    acc_modal: list[float]
    fused_ce: float
    modal_ce: list[float]
    mnl: float
    lam: float
    total: float
    ucom: list[float]
    ucom_norm: list[float]
    guidance_rate: float
    iter_ms: float | None = None

    def row(self) -> dict:
        out = {"epoch": self.epoch, "split": self.split, "stage": self.stage, "acc_fused": self.acc_fused}
        for m, v in enumerate(self.acc_modal):
            out[f"acc_m{m}"] = v
        out["loss_fused_ce"] = self.fused_ce
        for m, v in enumerate(self.modal_ce):
            out[f"loss_ce_m{m}"] = v
        out.update(loss_mnl=self.mnl, lam=self.lam, loss_total=self.total)
        for m, v in enumerate(self.ucom):
            out[f"ucom_m{m}"] = v
        for m, v in enumerate(self.ucom_norm):
            out[f"ucom_norm_m{m}"] = v
        out["guidance_rate"] = self.guidance_rate
        out["iter_ms"] = self.iter_ms
        return out


@dataclass
class TrainResult:
    params: list
    fusion: FusionSpec
    log: list[MetricsRecord]
    checkpoints: dict = field(default_factory=dict)
    config: TrainConfig | None = None


def sgd_step(params, grads, lr: float, momentum: float, state: list | None):
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``. Updates in place."""
    arrays = [a for p in params for a in p.arrays()]
    g_arrays = [a for g in grads for a in g.arrays()]
    if state is None:
        state = [np.zeros_like(a) for a in arrays]
    for p, g, v in zip(arrays, g_arrays, state):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return params, state


def adam_step(params, grads, lr: float, betas, eps: float, state: dict | None):
    arrays = [a for p in params for a in p.arrays()]
    g_arrays = [a for g in grads for a in g.arrays()]
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(a) for a in arrays], "v": [np.zeros_like(a) for a in arrays]}
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for p, g, m, v in zip(arrays, g_arrays, state["m"], state["v"]):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return params, state


def init_params(cfg: TrainConfig, dims, n_classes: int):
    rng = RngStream(cfg.seed).child("init")
    return [init_encoder(d, cfg.hidden, n_classes, rng.child(f"encoder-{m}")) for m, d in enumerate(dims)]


def stage_of(epoch: int, cfg: TrainConfig) -> str:
    return "warmup" if epoch < cfg.warmup else "full"


def guidance_for(bundle, y, cfg: TrainConfig, stage: str):
    if stage != "full" or cfg.lam == 0:
        return None
    xi = [ucom(z, y)[0] for z in bundle.logits]
    return select_guidance(bundle.probs, xi, y, cfg.guidance, cfg.prior_rdm)


def loss_step(params, fusion, X, y, cfg: TrainConfig, stage: str):
    bundle = forward(params, fusion, X)
    decision = guidance_for(bundle, y, cfg, stage)
    bd, gf, gm = total_loss(bundle, decision, y, cfg.lam, stage, cfg.scope, cfg.ce_weights, cfg.mnl_reduction)
    return bundle, decision, bd, gf, gm


class _Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = None

    def step(self, params, grads):
        c = self.cfg
        if c.optimizer == "sgd":
            _, self.state = sgd_step(params, grads, c.lr, c.momentum, self.state)
        else:
            _, self.state = adam_step(params, grads, c.lr, c.betas, c.adam_eps, self.state)


def evaluate_split(params, fusion, batch: MultimodalBatch, cfg: TrainConfig, epoch: int, split: str,
                   stage: str, iter_ms=None) -> MetricsRecord:
    y = batch.y
    bundle, decision, bd, _, _ = loss_step(params, fusion, batch.X, y, cfg, stage)
    acc_fused = float(np.mean(bundle.fused.argmax(axis=1) == y))
    acc_modal, um, un = [], [], []
    for z, p in zip(bundle.logits, bundle.probs):
        correct = z.argmax(axis=1) == y
        acc_modal.append(float(correct.mean()))
        xi, j = ucom(z, y)
        pos = xi > 0
        um.append(float(xi[pos].mean()) if pos.any() else 0.0)
        un.append(float(normalized_ucom(p, y, j)[pos].mean()) if pos.any() else 0.0)
    rate = decision.rate if decision is not None else 0.0
    return MetricsRecord(epoch, split, stage, acc_fused, acc_modal, bd.fused_ce, bd.modal_ce, bd.mnl,
                         bd.lam, bd.total, um, un, rate, iter_ms)


def train(cfg: TrainConfig, train_data: MultimodalBatch, val_data: MultimodalBatch | None = None,
          params=None) -> TrainResult:
    """Run the two-stage schedule; one metrics record per (epoch, split)."""
    fusion = cfg.fusion_spec()
    if params is None:
        params = init_params(cfg, train_data.dims, train_data.n_classes)
    shuffle = RngStream(cfg.seed).child("shuffle")
    opt = _Optimizer(cfg)
    n = len(train_data)
    log, checkpoints = [], {}
    for epoch in range(cfg.epochs):
        stage = stage_of(epoch, cfg)
        order = shuffle.permutation(n)
        t0 = time.perf_counter()
        n_iter = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            X = [x[idx] for x in train_data.X]
            y = train_data.y[idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    bundle, _, bd, gf, gm = loss_step(params, fusion, X, y, cfg, stage)
            except NonFiniteError:
                raise TrainingDiverged(epoch, b, float("nan")) from None
            if not np.isfinite(bd.total):
                raise TrainingDiverged(epoch, b, bd.total)
            opt.step(params, backward(params, bundle, gf, gm))
            if not all(np.isfinite(a).all() for p in params for a in p.arrays()):
                raise TrainingDiverged(epoch, b, float("nan"))
            n_iter += 1
        iter_ms = 1e3 * (time.perf_counter() - t0) / max(n_iter, 1) if cfg.record_timing else None
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                log.append(evaluate_split(params, fusion, train_data, cfg, epoch, "train", stage, iter_ms))
                if val_data is not None:
                    log.append(evaluate_split(params, fusion, val_data, cfg, epoch, "val", stage))
        except NonFiniteError:
            raise TrainingDiverged(epoch, n_iter, float("nan")) from None
        if epoch + 1 == cfg.warmup:
            checkpoints["warmup"] = [p.copy() for p in params]
    checkpoints["final"] = [p.copy() for p in params]
    return TrainResult(params, fusion, log, checkpoints, cfg)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(log, path) -> None:
    rows = [r.row() for r in log]
    if not rows:
        raise ValueError("empty metrics log")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def measure_overhead(cfg: TrainConfig, data: MultimodalBatch, iters: int = 200, block: int = 10) -> dict:
    """Mean wall-time per training iteration for CE-only vs CE + guidance.

    Both variants start from the same parameters and batches; blocks of
    ``block`` iterations alternate between them to spread timing drift.
    """
    if iters < 100:
        raise ValueError("measure over at least 100 iterations")
    fusion = cfg.fusion_spec()
    base_cfg = replace(cfg, lam=0.0)
    mnl_cfg = replace(cfg, lam=cfg.lam if cfg.lam > 0 else 1.0)
    runs = {}
    for name, c in (("baseline", base_cfg), ("mnl", mnl_cfg)):
        runs[name] = {"cfg": c, "params": init_params(cfg, data.dims, data.n_classes),
                      "opt": _Optimizer(c), "time": 0.0, "count": 0, "active": 0}
    shuffle = RngStream(cfg.seed).child("overhead")
    n = len(data)
    batches = []
    while len(batches) < iters:
        order = shuffle.permutation(n)
        batches += [order[s:s + cfg.batch_size] for s in range(0, n - cfg.batch_size + 1, cfg.batch_size)]
    batches = batches[:iters]
    for start in range(0, iters, block):
        for name in ("baseline", "mnl"):
            r = runs[name]
            for idx in batches[start:start + block]:
                X = [x[idx] for x in data.X]
                y = data.y[idx]
                t0 = time.perf_counter()
                bundle, _, bd, gf, gm = loss_step(r["params"], fusion, X, y, r["cfg"], "full")
                r["opt"].step(r["params"], backward(r["params"], bundle, gf, gm))
                r["time"] += time.perf_counter() - t0
                r["count"] += 1
                r["active"] += bd.n_active
    base_ms = 1e3 * runs["baseline"]["time"] / runs["baseline"]["count"]
    mnl_ms = 1e3 * runs["mnl"]["time"] / runs["mnl"]["count"]
    return {"iterations": iters, "baseline_ms": base_ms, "mnl_ms": mnl_ms, "ratio": mnl_ms / base_ms,
            "mnl_active_fraction": runs["mnl"]["active"] / (iters * cfg.batch_size)}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
