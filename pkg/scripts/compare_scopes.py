"""Twin runs on one benchmark seed that differ only in guidance scope (non-target vs all-class).

    python scripts/compare_scopes.py [configs/reproduce.cfg] [--seed 0] [--out scopes.json]
"""

import argparse
import json
from pathlib import Path

from mnl.config import load_config
from mnl.datagen import gen_synthetic
from mnl.evaluation import compare_guidance_scopes, weakest_modality

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", nargs="?", default=str(ROOT / "configs" / "reproduce.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config).with_seed(args.seed)
    tr, va, te = gen_synthetic(cfg.data)
    res = compare_guidance_scopes(cfg.train, tr, va, te, eps_list=cfg.eval.eps,
                                  modality=weakest_modality(cfg.data.separations), eval_seed=args.seed)
    for scope in ("non-target", "all-class"):
        accs = "  ".join(f"eps={e:g}: {a:.4f}" for e, a in res[scope]["accuracy"].items())
        print(f"{scope:>10}  {accs}  mean KL {res[scope]['mean_kl']:.4f}")
    print("delta       " + "  ".join(f"eps={e:g}: {d:+.4f}" for e, d in res["accuracy_delta"].items()))
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True, default=str))


if __name__ == "__main__":
    main()
