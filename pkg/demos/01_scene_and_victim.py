"""Build a catalog, render a webshop grid and train a small victim on it.

    python demos/01_scene_and_victim.py --steps 600 --out demo-artifacts
"""

import argparse
from pathlib import Path

from praclab import scene as sc
from praclab import vlm

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=600)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default="demo-artifacts")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# 40 products in two categories; test products never appear during optimization
catalog = sc.generate_catalog(args.seed)
for p in catalog.test_pool[:5]:
    print(f"{p.id:3d}  {p.category:9s} quality {p.quality:.3f}  {p.name}")

# one grid: the target in slot 2, four same-category distractors around it
layout = sc.GridLayout()
target = catalog.test_pool[0]
others = [p for p in catalog.test_pool if p.category == target.category and p.id != target.id][:4]
scene = sc.GridScene(layout, tuple(others), 2, 0, target.id)
canvas = sc.render_grid(layout, scene.assignment() | {2: target})
sc.save_png(out / "grid.png", canvas)
print("grid written to", out / "grid.png", canvas.shape)

# the victim learns to name (or click) the highest-quality tile
mcfg = vlm.ModelConfig(n_products=len(catalog))
res = vlm.train_selection_task(catalog, layout, mcfg, vlm.TrainConfig(steps=args.steps), seed=args.seed)
res.weights.save(out / "victim.tvlm")
print(f"held-out accuracy {res.accuracy:.3f}, click format {res.action_accuracy:.3f}")

# greedy answer on the grid above
dec = vlm.greedy_decode(res.weights, vlm.Prompt(target.id, vlm.FORMAT_NAME, 1), canvas)
print("victim output tokens:", dec.tokens)
