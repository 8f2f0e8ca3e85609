"""Noise sweeps, guidance case taxonomy, KL diagnostics and UCoM trajectories."""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mnl.datagen import MultimodalBatch, NoiseSpec, apply_noise
from mnl.guidance import select_guidance, ucom
from mnl.model import forward
from mnl.numerics import RngStream, kl_divergence
from mnl.trainer import TrainConfig, train


def worker_count() -> int:
    env = os.environ.get("MNL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def batch_metrics(params, fusion, batch: MultimodalBatch) -> dict:
    """Accuracies, mean inter-modality KL and mean margins on one batch."""
    bundle = forward(params, fusion, batch)
    y = batch.y
    out = {"acc_fused": float(np.mean(bundle.fused.argmax(axis=1) == y))}
    for m, z in enumerate(bundle.logits):
        out[f"acc_m{m}"] = float(np.mean(z.argmax(axis=1) == y))
    P = bundle.probs
    for a in range(len(P)):
        for b in range(len(P)):
            if a != b:
                out[f"kl_m{a}_m{b}"] = float(np.mean(kl_divergence(P[a], P[b])))
    for m, z in enumerate(bundle.logits):
        out[f"ucom_m{m}"] = float(np.mean(ucom(z, y)[0]))
    return out


@dataclass
class SweepCell:
    kind: str
    eps: float
    modality: int
    seeds: list[int]
    per_seed: list[dict]
    mean: dict
    std: dict | None

    @property
    def spec(self) -> NoiseSpec:
        return NoiseSpec(self.kind, self.eps, self.modality)


@dataclass
class SweepReport:
    cells: list[SweepCell]
    warnings: list[str] = field(default_factory=list)

    def cell(self, kind: str, eps: float, modality: int) -> SweepCell:
        for c in self.cells:
            if c.kind == kind and c.eps == eps and c.modality == modality:
                return c
        raise KeyError((kind, eps, modality))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "eps", "noised_modality", "seed", "metric", "value"])
        for c in self.cells:
            for s, vals in zip(c.seeds, c.per_seed):
                for k, v in vals.items():
                    w.writerow([c.kind, repr(float(c.eps)), c.modality, s, k, repr(v)])
            for label, agg in (("mean", c.mean), ("std", c.std)):
                if agg is None:
                    continue
                for k, v in agg.items():
                    w.writerow([c.kind, repr(float(c.eps)), c.modality, label, k, repr(v)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"cells": [asdict(c) for c in self.cells], "warnings": self.warnings}
        return json.dumps(doc, indent=2, sort_keys=True)


def _cell_rng(seed: int, kind: str, eps: float, modality: int) -> RngStream:
    return RngStream(seed).child(f"noise/{kind}/{float(eps)!r}/{modality}")


def noise_sweep(params, fusion, test: MultimodalBatch, kinds, eps_list, seeds,
                modalities=None) -> SweepReport:
    """Evaluate every (kind, eps, noised modality) cell over ``seeds``.

    Each cell noises one modality of a copy of ``test``; the rng stream per
    (seed, cell) is derived from the cell key, so results do not depend on
    evaluation order or worker count.
    """
    eps_list = list(eps_list)
    if not eps_list:
        raise ValueError("empty eps list")
    seeds = list(seeds)
    modalities = list(range(test.n_modalities)) if modalities is None else list(modalities)
    keys = [(k, float(e), m) for k in kinds for e in eps_list for m in modalities]

    def run(key):
        kind, eps, m = key
        spec = NoiseSpec(kind, eps, m)
        per = [batch_metrics(params, fusion, apply_noise(test, spec, _cell_rng(s, kind, eps, m))) for s in seeds]
        names = list(per[0])
        mean = {k: float(np.mean([p[k] for p in per])) for k in names}
        std = {k: float(np.std([p[k] for p in per], ddof=1)) for k in names} if len(seeds) >= 2 else None
        return SweepCell(kind, eps, m, seeds, per, mean, std)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        cells = list(pool.map(run, keys))
    report = SweepReport(cells)
    # soft directional check: a noised modality should not get better
    for kind in kinds:
        for m in modalities:
            lo = min(eps_list)
            hi = max(eps_list)
            a0 = report.cell(kind, lo, m).mean[f"acc_m{m}"]
            a1 = report.cell(kind, hi, m).mean[f"acc_m{m}"]
            if a1 > a0:
                msg = f"{kind}: modality {m} accuracy rose from {a0:.4f} (eps={lo}) to {a1:.4f} (eps={hi})"
                report.warnings.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return report


@dataclass
class CaseTaxonomy:
    both_correct: int = 0
    both_wrong: int = 0
    rdm_correct_im_wrong: int = 0
    rdm_wrong_im_correct: int = 0
    conflict_excluded: int = 0

    @property
    def total(self) -> int:
        return self.both_correct + self.both_wrong + self.rdm_correct_im_wrong + self.rdm_wrong_im_correct


def case_taxonomy(P1, P2, xi1, xi2, y) -> CaseTaxonomy:
    """Sort samples by which of the guiding/guided modalities is right.

    Roles come from robust selection. Samples without a robust guide are
    flagged in ``conflict_excluded`` and still land in a correctness cell,
    with roles taken from target confidence alone (modality 0 on a tie).
    """
    P1, P2 = np.atleast_2d(P1), np.atleast_2d(P2)
    y = np.atleast_1d(np.asarray(y))
    c1 = P1.argmax(axis=1) == y
    c2 = P2.argmax(axis=1) == y
    robust = select_guidance([P1, P2], [xi1, xi2], y, "robust")
    confident = select_guidance([P1, P2], [xi1, xi2], y, "confident")
    guide = np.where(robust.active, robust.rdm, np.maximum(confident.rdm, 0))
    guide_ok = np.where(guide == 0, c1, c2)
    mixed = c1 != c2
    return CaseTaxonomy(
        both_correct=int(np.sum(c1 & c2)),
        both_wrong=int(np.sum(~c1 & ~c2)),
        rdm_correct_im_wrong=int(np.sum(mixed & guide_ok)),
        rdm_wrong_im_correct=int(np.sum(mixed & ~guide_ok)),
        conflict_excluded=int(np.sum(~robust.active)),
    )


def ucom_trajectory(log, split: str = "val", normalized: bool = False) -> dict:
    """Per-epoch mean margin series per modality from a metrics log.

    ``log`` is a list of ``MetricsRecord`` or of CSV row dicts.
    """
    prefix = "ucom_norm_m" if normalized else "ucom_m"
    rows = [r.row() if hasattr(r, "row") else r for r in log]
    rows = [r for r in rows if r["split"] == split]
    if not rows:
        raise ValueError(f"no rows for split {split!r}")
    cols = sorted((k for k in rows[0] if k.startswith(prefix) and k[len(prefix):].isdigit()),
                  key=lambda k: int(k[len(prefix):]))
    if not cols:
        raise ValueError(f"log has no {prefix}* columns")
    return {"epoch": [int(r["epoch"]) for r in rows],
            **{c: [float(r[c]) for r in rows] for c in cols}}


def trajectory_tsv(traj: dict) -> str:
    keys = list(traj)
    lines = ["\t".join(keys)]
    for i in range(len(traj["epoch"])):
        lines.append("\t".join(str(traj[k][i]) if k == "epoch" else repr(traj[k][i]) for k in keys))
    return "\n".join(lines) + "\n"


def noisy_accuracy(params, fusion, test: MultimodalBatch, spec: NoiseSpec, seed: int) -> float:
    noisy = apply_noise(test, spec, _cell_rng(seed, spec.kind, spec.eps, spec.modality))
    return float(np.mean(forward(params, fusion, noisy).fused.argmax(axis=1) == test.y))


def final_record(log, split="val"):
    return [r for r in log if r.split == split][-1]


def compare_guidance_scopes(cfg: TrainConfig, train_data, val_data, test, eps_list=(0, 5, 10),
                            kind="gaussian", modality=1, eval_seed=0) -> dict:
    """Twin runs differing only in the guidance scope."""
    out = {}
    for scope in ("non-target", "all-class"):
        c = replace(cfg, scope=scope)
        res = train(c, train_data, val_data)
        accs = {float(e): noisy_accuracy(res.params, res.fusion, test, NoiseSpec(kind, e, modality), eval_seed)
                for e in eps_list}
        clean = batch_metrics(res.params, res.fusion, test)
        out[scope] = {"accuracy": accs, "kl_m0_m1": clean["kl_m0_m1"], "kl_m1_m0": clean["kl_m1_m0"],
                      "mean_kl": 0.5 * (clean["kl_m0_m1"] + clean["kl_m1_m0"])}
    out["accuracy_delta"] = {e: out["non-target"]["accuracy"][e] - out["all-class"]["accuracy"][e]
                             for e in out["non-target"]["accuracy"]}
    out["config_diff"] = ["scope"]
    return out


BENCHMARK_VARIANTS = {
    "LF": {"lam": 0.0},
    "LF+MNL": {},
    "prior": {"guidance": "prior"},
    "confident": {"guidance": "confident"},
    "all-class": {"scope": "all-class"},
}


def weakest_modality(separations) -> int:
    return int(np.argmin(separations))


def run_benchmark(run_cfg, variants=None, kind: str = "gaussian", eps_list=None, progress=None) -> dict:
    """Train each variant on every benchmark seed and score it under noise on the weak modality.

    Each seed regenerates the dataset and the initialization; all variants of
    a seed share both. Returns ``{variant: {seed: {...}}}``.
    """
    from mnl.datagen import gen_synthetic

    names = list(BENCHMARK_VARIANTS) if variants is None else list(variants)
    eps_list = list(run_cfg.eval.eps if eps_list is None else eps_list)
    weak = weakest_modality(run_cfg.data.separations)
    out = {v: {} for v in names}
    for seed in run_cfg.benchmark_seeds:
        cfg = run_cfg.with_seed(seed)
        tr, va, te = gen_synthetic(cfg.data)
        for v in names:
            res = train(replace(cfg.train, **BENCHMARK_VARIANTS[v]), tr, va)
            accs = {float(e): noisy_accuracy(res.params, res.fusion, te, NoiseSpec(kind, e, weak), seed)
                    for e in eps_list}
            last = final_record(res.log, "val")
            out[v][seed] = {"acc": accs, "ucom_weak": last.ucom[weak], "ucom_norm_weak": last.ucom_norm[weak],
                            "val_acc_fused": last.acc_fused}
            if progress:
                progress(v, seed, out[v][seed])
    return out
