"""Command-line front end: gen-data, train, attack, eval, report.

All commands share ``--config`` (sectioned ini file), ``--seed`` (required),
``--threads`` and ``--out``. The artifact root resolves as ``--out``, then
the ``PRACLAB_ARTIFACTS`` environment variable, then ``[run] out``.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import evaluation as ev
from . import scene as sc
from . import vlm

ENV_ROOT = "PRACLAB_ARTIFACTS"

DEFAULTS = {
    "catalog": {"count": "40", "n_categories": "2", "n_positions": "5", "n_val": "6"},
    "model": {f.name: str(f.default) for f in fields(vlm.ModelConfig) if f.name != "n_products"},
    "train": {f.name: str(f.default) for f in fields(vlm.TrainConfig)},
    "attack": {
        "eps": repr(8 / 255), "n_iter": "2500", "n_iter_init": "", "swap_every": "50", "p_img": "0.5",
        "alpha_act": "0.05", "guard": "1e-12", "step_size": "0.1", "window_start": "0.6", "rho": "0.75",
        "fmt": "name", "trajectory": "1", "n_val_grids": "5",
    },
    "eval": {"tau": "0.6", "temperature": "0.7", "reps": "5", "fmt": "name", "trajectory": "1"},
    "run": {"out": "artifacts", "threads": "1", "targets": "", "finetune_steps": "150", "clean_reps": "10"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path:
        user = configparser.ConfigParser(interpolation=None)
        user.optionxform = str
        if not user.read(path):
            raise UsageError(f"cannot read config file {path}")
        for sec in user.sections():
            if sec not in DEFAULTS:
                raise UsageError(f"unknown config section [{sec}]; known: {', '.join(DEFAULTS)}")
            for key, val in user[sec].items():
                if key not in DEFAULTS[sec]:
                    raise UsageError(f"unknown key '{key}' in [{sec}]; known: {', '.join(DEFAULTS[sec])}")
                cp[sec][key] = val
    return cp


def config_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    for sec in sorted(cp.sections()):
        if sec == "run":
            continue  # paths and worker counts do not change results
        buf.write(f"[{sec}]\n")
        for key in sorted(cp[sec]):
            buf.write(f"{key} = {cp[sec][key]}\n")
    return buf.getvalue()


def config_hash(cp: configparser.ConfigParser, seed: int) -> str:
    return hashlib.sha256(f"seed={seed}\n{config_text(cp)}".encode()).hexdigest()[:16]


def _typed(cls, section) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in section:
            raw = section[f.name]
            default = f.default
            if isinstance(default, bool):
                out[f.name] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                out[f.name] = int(raw)
            elif isinstance(default, float):
                out[f.name] = float(raw)
            else:
                out[f.name] = raw
    return out


def model_config(cp, n_products: int) -> vlm.ModelConfig:
    return vlm.ModelConfig(n_products=n_products, **_typed(vlm.ModelConfig, cp["model"]))


def train_config(cp) -> vlm.TrainConfig:
    return vlm.TrainConfig(**_typed(vlm.TrainConfig, cp["train"]))


def attack_config(cp, seed: int, method: str, ablations) -> atk.AttackConfig:
    a = cp["attack"]
    return atk.AttackConfig(
        eps=float(a["eps"]), n_iter=int(a["n_iter"]),
        n_iter_init=int(a["n_iter_init"]) if a["n_iter_init"].strip() else None,
        swap_every=int(a["swap_every"]), p_img=float(a["p_img"]), alpha_act=float(a["alpha_act"]),
        guard=float(a["guard"]), step_size=float(a["step_size"]), window_start=float(a["window_start"]),
        rho=float(a["rho"]), ablations=tuple(ablations), method=method, fmt=a["fmt"],
        trajectory=int(a["trajectory"]), n_val_grids=int(a["n_val_grids"]), seed=seed)


def eval_config(cp, seed: int, threads: int) -> ev.EvalConfig:
    e = cp["eval"]
    return ev.EvalConfig(tau=float(e["tau"]), temperature=float(e["temperature"]), reps=int(e["reps"]),
                         seed=seed, fmt=e["fmt"], trajectory=int(e["trajectory"]), threads=threads)


# ---------------------------------------------------------------- context


class Context:
    def __init__(self, args):
        if args.seed is None:
            raise UsageError("--seed is required; runs never fall back to a clock-derived seed")
        self.args = args
        self.seed = int(args.seed)
        self.cp = load_config(args.config)
        root = args.out or os.environ.get(ENV_ROOT) or self.cp["run"]["out"]
        self.out = Path(root)
        self.threads = int(args.threads if args.threads is not None else self.cp["run"]["threads"])
        self.hash = config_hash(self.cp, self.seed)
        self.layout = sc.GridLayout(n_positions=int(self.cp["catalog"]["n_positions"]))

    def write_resolved(self, name: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        text = f"# config_hash = {self.hash}\n# seed = {self.seed}\n" + config_text(self.cp)
        (self.out / f"{name}.config.ini").write_text(text)

    def catalog(self) -> sc.Catalog:
        path = self.out / "catalog.jsonl"
        if not path.exists():
            raise UsageError(f"{path} not found; run gen-data first")
        return sc.Catalog.from_jsonl(path, self.layout.n_positions)

    def victim(self, name: str = "victim.tvlm") -> ev.Victim:
        path = self.out / name
        if not path.exists():
            raise UsageError(f"{path} not found; run train first")
        return ev.Victim(vlm.ModelWeights.load(path), self.layout)

    def targets(self, catalog: sc.Catalog, explicit) -> list:
        ids = list(explicit or [])
        if not ids and self.cp["run"]["targets"].strip():
            ids = [int(t) for t in self.cp["run"]["targets"].replace(",", " ").split()]
        if not ids:
            cat = catalog.categories[0]
            return [p for p in catalog.test_pool if p.category == cat]
        return [catalog[i] for i in ids]


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(ctx: Context) -> int:
    c = ctx.cp["catalog"]
    catalog = sc.generate_catalog(ctx.seed, count=int(c["count"]), n_categories=int(c["n_categories"]),
                                  n_positions=int(c["n_positions"]), n_val=int(c["n_val"]))
    ctx.out.mkdir(parents=True, exist_ok=True)
    catalog.to_jsonl(ctx.out / "catalog.jsonl")
    prev = ctx.out / "previews"
    prev.mkdir(exist_ok=True)
    for p in catalog.products:
        sc.save_png(prev / f"product_{p.id:02d}.png", sc.tile_for(p))
    for cat in catalog.categories:
        prods = [p for p in catalog.test_pool if p.category == cat][: ctx.layout.n_positions]
        grid = sc.render_grid(ctx.layout, dict(enumerate(prods)))
        sc.save_png(prev / f"grid_{cat.replace(' ', '_')}.png", grid)
    ctx.write_resolved("gen-data")
    print(f"wrote {len(catalog)} products to {ctx.out / 'catalog.jsonl'}")
    return 0


def cmd_train(ctx: Context) -> int:
    catalog = ctx.catalog()
    tc = train_config(ctx.cp)
    if ctx.args.steps is not None:
        tc = replace(tc, steps=int(ctx.args.steps))
    cfg = model_config(ctx.cp, len(catalog))
    res = vlm.train_selection_task(catalog, ctx.layout, cfg, tc, seed=ctx.seed,
                                   log=lambda m: print(m, flush=True))
    res.weights.save(ctx.out / "victim.tvlm")
    record = {"accuracy": res.accuracy, "action_accuracy": res.action_accuracy, "steps": tc.steps,
              "diverged": res.diverged, "seed": ctx.seed, "config_hash": ctx.hash,
              "final_loss": res.losses[-1] if res.losses else None}
    _dump(ctx.out / "train.json", record)
    ctx.write_resolved("train")
    print(f"held-out accuracy {res.accuracy:.3f} (click format {res.action_accuracy:.3f})")
    if res.diverged:
        print("training diverged; kept the last finite checkpoint", file=sys.stderr)
        return 3
    if res.accuracy < 0.9 and not ctx.args.allow_weak:
        print("held-out accuracy below 0.9 (pass --allow-weak to accept)", file=sys.stderr)
        return 1
    return 0


def _run_label(method: str, ablations) -> str:
    return "+".join([method] + sorted(ablations))


def cmd_attack(ctx: Context) -> int:
    ablations = list(ctx.args.ablation or [])
    bad = [a for a in ablations if a not in atk.ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation {bad[0]!r}; valid flags: {', '.join(atk.ABLATIONS)}")
    catalog = ctx.catalog()
    victim = ctx.victim()
    cfg = attack_config(ctx.cp, ctx.seed, ctx.args.method, ablations)
    if ctx.args.n_iter is not None:
        cfg = replace(cfg, n_iter=int(ctx.args.n_iter))
    label = _run_label(cfg.method, cfg.ablations)
    out = ctx.out / "attacks" / label
    runner = atk.run_prac if cfg.method == "prac" else atk.run_ce_baseline
    for target in ctx.targets(catalog, ctx.args.target):
        try:
            res = runner(victim, catalog, target, cfg)
        except atk.AttackError as exc:
            print(f"attack on target {target.id} aborted: {exc}", file=sys.stderr)
            return 3
        meta = res.save(out, f"target_{target.id:02d}", ctx.hash)
        print(f"{label} target {target.id}: validation SSR {meta['validation_ssr']}, L_inf {meta['linf'] * 255:.2f}/255")
    ctx.write_resolved(f"attack-{label}")
    return 0


def _load_patch(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"patch file {p} does not exist")
    meta_path = p.with_suffix(".json")
    if not meta_path.exists():
        raise UsageError(f"patch sidecar {meta_path} does not exist")
    return sc.load_png(p), json.loads(meta_path.read_text())


def cmd_eval(ctx: Context) -> int:
    catalog = ctx.catalog()
    victim = ctx.victim()
    ecfg = eval_config(ctx.cp, ctx.seed, ctx.threads)
    suite = ctx.args.suite
    rep_dir = ctx.out / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    if suite == "clean":
        reps = int(ctx.cp["run"]["clean_reps"])
        targets = ctx.targets(catalog, ctx.args.target) if ctx.args.target else catalog.test_pool
        cfg = replace(ecfg, reps=reps)
        for t in targets:
            r = ev.evaluate_ssr(victim, None, t, catalog, cfg, "clean", ctx.hash)
            r.to_jsonl(rep_dir / f"clean_target{t.id:02d}.jsonl")
            reports.append(r)
    else:
        if not ctx.args.patch:
            raise UsageError(f"--suite {suite} needs --patch")
        patch, meta = _load_patch(ctx.args.patch)
        target = catalog[int(meta["target_id"])]
        label = _run_label(meta["method"], meta.get("ablations", []))
        if suite in ("ssr", "position"):
            r = ev.evaluate_ssr(victim, patch, target, catalog, ecfg, label, ctx.hash)
            r.to_jsonl(rep_dir / f"{label}_target{target.id:02d}.jsonl")
            reports.append(r)
            if suite == "position":
                _dump(rep_dir / f"position_{label}_target{target.id:02d}.json",
                      {"label": label, "config_hash": ctx.hash, "rows": ev.positional_bias([r])})
        elif suite == "temperature":
            for r in ev.temperature_sweep(victim, patch, target, catalog, ev.TEMPERATURES, ecfg, label):
                r.config_hash = ctx.hash
                r.to_jsonl(rep_dir / f"temperature_{label}_T{r.temperature}_target{target.id:02d}.jsonl")
                reports.append(r)
        elif suite == "transfer":
            ft_path = ctx.out / "victim_finetune.tvlm"
            if ft_path.exists():
                ft = ev.Victim(vlm.ModelWeights.load(ft_path), ctx.layout)
            else:
                w = vlm.perturb_finetune(victim.weights, catalog, ctx.layout,
                                         int(ctx.cp["run"]["finetune_steps"]), ctx.seed)
                w.save(ft_path)
                ft = ev.Victim(w, ctx.layout)
            tr = ev.transfer_eval(patch, victim, ft, target, catalog, ecfg, f"transfer/{label}")
            for r in (tr.source, tr.transfer):
                r.config_hash = ctx.hash
                r.to_jsonl(rep_dir / f"{r.label.replace('/', '_')}_target{target.id:02d}.jsonl")
                reports.append(r)
            print(f"transfer drop: {tr.drop}")
    for r in reports:
        print(f"{r.label} target {r.target_id}: SSR {r.ssr} ({r.n_success}/{r.n_valid} valid of {r.n_total})")
    ctx.write_resolved(f"eval-{suite}")
    if all(r.n_valid == 0 for r in reports):
        print("no valid evaluation runs", file=sys.stderr)
        return 1
    return 0


def collect_reports(root: Path) -> list[ev.EvalReport]:
    return [ev.EvalReport.from_jsonl(p) for p in sorted((root / "reports").glob("*.jsonl"))] \
        if (root / "reports").is_dir() else []


def build_report(root: Path) -> str:
    reports = collect_reports(root)
    if not reports:
        warnings.warn(f"no reports under {root}; the comparison table is empty")
        return "# Results\n\n(no reports found)\n"
    hashes: dict = {}
    for r in reports:
        hashes.setdefault(r.label, set()).add(r.config_hash)
    keyed: dict = {}
    for r in reports:
        col = r.label if len(hashes[r.label]) == 1 else f"{r.label}@{r.config_hash}"
        keyed.setdefault(col, []).append(r)
    columns = sorted(keyed, key=lambda c: (c != "clean", not c.startswith("prac"), c))
    rows: dict = {}
    for col, reps in keyed.items():
        for r in reps:
            rows.setdefault(f"target {r.target_id:02d}", {})[col] = r.ssr
    for col, reps in keyed.items():
        pooled = ev.merge_reports(reps)
        rows.setdefault("pooled", {})[col] = pooled.ssr
    body = ["# Results", "", "Selection success rate (%) per target; '-' marks runs that were not performed.", "",
            ev.summary_table(dict(sorted(rows.items())), columns), ""]
    for col, reps in keyed.items():
        pb = ev.positional_bias(reps)
        body += [f"## Position breakdown: {col}", "",
                 "| position | SSR % | 95% CI |", "|---|---|---|"]
        for row in pb:
            ci = "-" if row["ci"] is None else f"[{100 * row['ci'][0]:.1f}, {100 * row['ci'][1]:.1f}]"
            body.append(f"| {row['position']} | {ev._fmt(row['ssr'])} | {ci} |")
        body.append("")
    return "\n".join(body)


def cmd_report(ctx: Context) -> int:
    text = build_report(ctx.out)
    (ctx.out / "report.md").parent.mkdir(parents=True, exist_ok=True)
    (ctx.out / "report.md").write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned ini file")
    common.add_argument("--seed", type=int, help="run seed (required)")
    common.add_argument("--threads", type=int, help="worker threads for per-grid evaluation")
    common.add_argument("--out", help="artifact directory")
    p = argparse.ArgumentParser(prog="praclab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the product catalog")
    t = sub.add_parser("train", parents=[common], help="train the victim model")
    t.add_argument("--steps", type=int)
    t.add_argument("--allow-weak", action="store_true")
    a = sub.add_parser("attack", parents=[common], help="optimize patches")
    a.add_argument("--method", choices=atk.METHODS, default="prac")
    a.add_argument("--ablation", action="append", help=f"one of: {', '.join(atk.ABLATIONS)}")
    a.add_argument("--target", type=int, action="append")
    a.add_argument("--n-iter", type=int)
    e = sub.add_parser("eval", parents=[common], help="evaluate patches or the clean victim")
    e.add_argument("--suite", choices=("ssr", "position", "temperature", "transfer", "clean"), default="ssr")
    e.add_argument("--patch")
    e.add_argument("--target", type=int, action="append")
    sub.add_parser("report", parents=[common], help="assemble comparison tables")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except UsageError as exc:
        print(f"praclab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (vlm.ModelError, sc.CatalogError, OSError) as exc:
        print(f"praclab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
