"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from mnl import datagen, evaluation, robustness
from mnl.config import ConfigError, RunConfig, load_config
from mnl.model import load_checkpoint, save_checkpoint
from mnl.numerics import RngStream
from mnl.trainer import TrainingDiverged, measure_overhead, train, write_metrics_csv

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def _csv_list(kind):
    def parse(s):
        return tuple(kind(v) for v in s.split(",") if v != "")
    return parse


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    t = {}
    for flag, key in (("lam", "lam"), ("warmup", "warmup"), ("epochs", "epochs"), ("guidance", "guidance"),
                      ("rdm", "prior_rdm"), ("scope", "scope"), ("fusion", "fusion")):
        v = getattr(args, flag, None)
        if v is not None:
            t[key] = v
    if t:
        try:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **t))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    c = {}
    for flag in ("tau", "claim", "limit", "trials", "K", "r"):
        v = getattr(args, flag, None)
        if v is not None:
            c[flag] = v
    if getattr(args, "attack", False):
        c["attack"] = True
    if c:
        cfg = dataclasses.replace(cfg, certify=dataclasses.replace(cfg.certify, **c))
    e = {}
    for flag in ("kinds", "eps", "eval_seeds", "modalities"):
        v = getattr(args, flag, None)
        if v is not None:
            e["seeds" if flag == "eval_seeds" else flag] = v
    if e:
        try:
            cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **e))
        except ValueError as err:
            raise ConfigError(str(err)) from err
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.dump())
    return out


def _load_splits(cfg: RunConfig, data_dir):
    if data_dir is None:
        return datagen.gen_synthetic(cfg.data)
    d = Path(data_dir)
    missing = [str(d / f"{s}.mnld") for s in SPLITS if not (d / f"{s}.mnld").is_file()]
    if missing:
        raise ConfigError(f"dataset files not found: {', '.join(missing)}")
    return tuple(datagen.load_batch(d / f"{s}.mnld") for s in SPLITS)


def _load_split(cfg: RunConfig, data, split: str):
    if data is not None and str(data).endswith(".mnld"):
        if not Path(data).is_file():
            raise ConfigError(f"dataset file not found: {data}")
        return datagen.load_batch(data)
    return _load_splits(cfg, data)[SPLITS.index(split)]


def _checkpoint(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = _outdir(cfg)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for name, batch in zip(SPLITS, datagen.gen_synthetic(cfg.data)):
        datagen.save_batch(batch, data_dir / f"{name}.mnld")
        datagen.export_csv(batch, data_dir / "csv" / name)
    print(f"wrote {', '.join(f'{s}.mnld' for s in SPLITS)} to {data_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _outdir(cfg)
    tr, va, _ = _load_splits(cfg, args.data)
    res = train(cfg.train, tr, va)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for name, params in res.checkpoints.items():
        save_checkpoint(ck / f"{name}.mnlm", params, res.fusion)
    write_metrics_csv(res.log, out / "metrics.csv")
    for norm, fname in ((False, "ucom_trajectory.tsv"), (True, "ucom_trajectory_normalized.tsv")):
        traj = evaluation.ucom_trajectory(res.log, "val" if va is not None else "train", normalized=norm)
        (out / fname).write_text(evaluation.trajectory_tsv(traj))
    last = evaluation.final_record(res.log, "val")
    print(f"final val fused accuracy {last.acc_fused:.4f}; checkpoints in {ck}")
    return 0


def cmd_certify(args) -> int:
    cfg = _resolve(args)
    cc = cfg.certify
    if cc.tau == "sampled" and cc.claim == "certified":
        raise UsageError("refusing --claim certified with sampled Lipschitz constants: sampled estimates "
                         "can under-estimate the true constant, so the radii are empirical, not proofs. "
                         "Use --tau exact (linear encoders only) or --claim empirical.")
    params, fusion = _checkpoint(args.checkpoint)
    batch = _load_split(cfg, args.data, cc.split)
    out = _outdir(cfg)
    rng = RngStream(cfg.seed).child("certify")
    if cc.tau == "exact":
        try:
            tau = robustness.exact_lipschitz(params)
        except ValueError as e:
            raise UsageError(f"--tau exact needs single-layer encoders ({e})") from e
    else:
        n = min(cc.lipschitz_samples, len(batch))
        tau = robustness.estimate_lipschitz(params, batch.subset(slice(0, n)), cc.K, cc.r, rng.child("tau"))
    if cc.limit is not None:
        batch = batch.subset(slice(0, cc.limit))
    results = robustness.certify(params, fusion, batch.X, batch.y, tau)
    if cc.attack:
        arng = rng.child("attack")
        for i, r in enumerate(results):
            if r.certifiable:
                x = [xm[i] for xm in batch.X]
                r0 = r.R_lb if r.R_lb and np.isfinite(r.R_lb) else 1.0
                r.R_attack = robustness.attack_radius(params, fusion, x, r.y, arng.child(str(i)), r0=r0,
                                                      trials=cc.trials)
    robustness.write_certification_csv(results, out / "certification.csv")
    n_cert = sum(r.certifiable for r in results)
    label = "certified" if tau.certified else "empirical (sampled tau)"
    print(f"{n_cert}/{len(results)} samples bounded, {label}; report at {out / 'certification.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    params, fusion = _checkpoint(args.checkpoint)
    test = _load_split(cfg, args.data, "test")
    out = _outdir(cfg)
    ec = cfg.eval
    report = evaluation.noise_sweep(params, fusion, test, ec.kinds, ec.eps, ec.seeds, ec.modalities)
    (out / "sweep.csv").write_text(report.to_csv())
    (out / "sweep.json").write_text(report.to_json())
    for c in report.cells:
        std = f" +- {c.std['acc_fused']:.4f}" if c.std else ""
        print(f"{c.kind:>8} eps={c.eps:<5g} noised=m{c.modality}  fused acc {c.mean['acc_fused']:.4f}{std}")
    return 0


def cmd_gradcheck(args) -> int:
    from mnl.gradcheck import run_gradcheck

    cfg = _resolve(args)
    out = _outdir(cfg)
    res = run_gradcheck(args.configs, cfg.seed)
    (out / "gradcheck.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    for k in ("ce", "mnl", "allclass", "total"):
        print(f"{k:>9}: max relative error {res[k]:.3e}")
    ok = res["max"] < args.tol
    print(f"gradcheck {'passed' if ok else 'FAILED'} (max {res['max']:.3e}, tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_overhead(args) -> int:
    cfg = _resolve(args)
    out = _outdir(cfg)
    tr, _, _ = _load_splits(cfg, args.data)
    res = measure_overhead(cfg.train, tr, iters=cfg.overhead.iters)
    # timings are not reproducible byte-for-byte, so they go to their own file
    (out / "overhead.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(f"baseline {res['baseline_ms']:.3f} ms/iter, +MNL {res['mnl_ms']:.3f} ms/iter, "
          f"ratio {res['ratio']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        if config_required:
            sp.add_argument("config", help="JSON run config")
        else:
            sp.add_argument("config", nargs="?", help="JSON run config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="master seed")

    g = sub.add_parser("gen", help="generate the synthetic dataset")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-stage training")
    common(t)
    t.add_argument("--data", help="directory with train/val/test.mnld (default: generate from config)")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--guidance", choices=("robust", "confident", "prior"))
    t.add_argument("--rdm", type=int, help="fixed guiding modality for --guidance prior")
    t.add_argument("--scope", choices=("non-target", "all-class"))
    t.add_argument("--fusion", choices=("static", "dynamic"))
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="robustness lower bounds per sample")
    common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", help="a .mnld file or a dataset directory")
    c.add_argument("--tau", choices=("exact", "sampled"))
    c.add_argument("--claim", choices=("certified", "empirical"))
    c.add_argument("--K", type=int)
    c.add_argument("--r", type=float)
    c.add_argument("--attack", action="store_true", help="add the R_attack column")
    c.add_argument("--trials", type=int)
    c.add_argument("--limit", type=int)
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("sweep", help="noise-sweep evaluation")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="a .mnld file or a dataset directory")
    s.add_argument("--kinds", type=_csv_list(str))
    s.add_argument("--eps", type=_csv_list(float))
    s.add_argument("--eval-seeds", dest="eval_seeds", type=_csv_list(int))
    s.add_argument("--modalities", type=_csv_list(int))
    s.set_defaults(func=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(gc, config_required=False)
    gc.add_argument("--configs", type=int, default=100)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("overhead", help="per-iteration cost of the guidance term")
    common(o)
    o.add_argument("--data", help="directory with train/val/test.mnld")
    o.set_defaults(func=cmd_overhead)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"mnl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"mnl {args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"mnl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
