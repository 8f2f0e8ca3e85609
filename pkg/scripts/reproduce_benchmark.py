"""Train every guidance variant on the bundled 5-seed benchmark and tabulate fused accuracy.

    python scripts/reproduce_benchmark.py [configs/reproduce.cfg] [--out results.json]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from mnl.config import load_config
from mnl.evaluation import run_benchmark

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default=str(ROOT / "configs" / "reproduce.cfg"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--variants", default=None, help="comma-separated subset")
    args = ap.parse_args()
    cfg = load_config(args.config)
    variants = args.variants.split(",") if args.variants else None
    t0 = time.perf_counter()

    def progress(v, seed, r):
        accs = " ".join(f"{a:.4f}" for a in r["acc"].values())
        print(f"seed {seed} {v:>10}: acc[{accs}] weak ucom {r['ucom_weak']:.3f}", flush=True)

    res = run_benchmark(cfg, variants, progress=progress)
    print(f"\n{time.perf_counter() - t0:.0f}s total")
    eps = list(cfg.eval.eps)
    print("variant      " + "  ".join(f"eps={e:g}".rjust(15) for e in eps))
    for v, by_seed in res.items():
        cells = []
        for e in eps:
            a = np.array([r["acc"][float(e)] for r in by_seed.values()])
            cells.append(f"{a.mean():.4f}+-{a.std(ddof=1) if len(a) > 1 else 0:.4f}".rjust(15))
        print(f"{v:<12} " + "  ".join(cells))
    if args.out:
        doc = {v: {str(s): r for s, r in by.items()} for v, by in res.items()}
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))


if __name__ == "__main__":
    main()
