"""Optimize a patch for one target, then compare its selection rate with
the clean tile and with the cross-entropy baseline.

    python demos/02_attack_one_target.py demo-artifacts/victim.tvlm --n-iter 300
"""

import argparse
from pathlib import Path

import numpy as np

from praclab import attack as atk
from praclab import evaluation as ev
from praclab import scene as sc
from praclab import vlm

ap = argparse.ArgumentParser()
ap.add_argument("checkpoint")
ap.add_argument("--target", type=int, default=None, help="product id (default: first test product)")
ap.add_argument("--n-iter", type=int, default=300)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default="demo-artifacts")
args = ap.parse_args()

catalog = sc.generate_catalog(0)
victim = ev.Victim(vlm.ModelWeights.load(args.checkpoint), sc.GridLayout())
target = catalog[args.target] if args.target is not None else catalog.test_pool[0]
cfg = atk.AttackConfig(n_iter=args.n_iter, seed=args.seed)


def progress(rec):
    if rec["event"] == "iter" and rec["iter"] % max(1, args.n_iter // 10) == 0:
        ratio = f"  patch/vision attention {rec['ratio']:.3f}" if "t_img" in rec else ""
        print(f"  iter {rec['iter']:5d}  loss {rec['mean']:8.3f}{ratio}")


results = {}
for method, run in (("prac", atk.run_prac), ("ce", atk.run_ce_baseline)):
    print(method)
    res = run(victim, catalog, target, cfg, sink=progress)
    res.save(Path(args.out) / method, f"target_{target.id}")
    print(f"  chosen iterate {res.chosen.iteration}, Linf {res.linf * 255:.2f}/255")
    results[method] = res.patch

# 25 grids per condition at temperature 0.7
ecfg = ev.EvalConfig(reps=5, seed=args.seed)
rows = {"clean": ev.evaluate_ssr(victim, None, target, catalog, ecfg).ssr}
for method, patch in results.items():
    rows[method] = ev.evaluate_ssr(victim, patch, target, catalog, ecfg).ssr
print(ev.summary_table({f"target {target.id}": rows}, list(rows)))
print("largest pixel change:", float(np.abs(results["prac"] - sc.tile_for(target)).max()) * 255, "/255")
