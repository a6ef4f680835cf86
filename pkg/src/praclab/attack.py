"""Attention-concentration patch attack and its cross-entropy baseline.

The victim is queried with the target alone to get a reference output. The
attack then perturbs the target tile inside an L-infinity ball so that the
reference tokens attend to the tile (rather than the rest of the grid) in
the heads that look at the image at all. Position robustness comes from
optimizing every grid slot at once and reconciling the per-slot gradients
with PCGrad; distractor robustness comes from periodic distractor swaps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import scene as sc
from . import vlm
from .autodiff import Tensor
from .evaluation import Victim, parse_tokens, selected_slot
from .rng import stream

log = logging.getLogger(__name__)

ABLATIONS = ("avg_grad", "no_init", "no_head_active", "no_Timg", "second_last_layer_only", "no_trajectory")
METHODS = ("prac", "ce")


class AttackError(RuntimeError):
    pass


class SelectionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 8 / 255
    n_iter: int = 2500
    n_iter_init: int | None = None  # default n_iter // n_positions
    swap_every: int = 50
    p_img: float = 0.5
    alpha_act: float = 0.05
    guard: float = 1e-12
    step_size: float = 0.1
    window_start: float = 0.6
    rho: float = 0.75
    ablations: tuple = ()
    method: str = "prac"
    fmt: str = vlm.FORMAT_NAME
    trajectory: int = 1
    n_val_grids: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not 0 < self.p_img <= 1:
            raise ValueError(f"p_img must lie in (0, 1], got {self.p_img}")
        if not 0 <= self.alpha_act < 1:
            raise ValueError(f"alpha_act must lie in [0, 1), got {self.alpha_act}")
        if self.n_iter_init is not None and self.n_iter_init > self.n_iter:
            raise ValueError("n_iter_init cannot exceed n_iter")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation(s) {bad}; valid flags: {', '.join(ABLATIONS)}")
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    def init_steps(self, n_positions: int) -> int:
        return self.n_iter_init if self.n_iter_init is not None else self.n_iter // n_positions

    @property
    def window_begin(self) -> int:
        return int(math.ceil(self.window_start * self.n_iter))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- attention mass and selection


def attention_mass(record: vlm.AttentionRecord, t: int, X: Sequence[int], head: int, layer: int,
                   batch: int = 0) -> float:
    """Sum of attention from output position ``t`` to key positions ``X``."""
    row = t - record.query_offset
    alpha = record.weights[layer].data
    if not 0 <= row < alpha.shape[2]:
        raise IndexError(f"output position {t} is not a captured query row")
    X = np.asarray(list(X), dtype=np.int64)
    if X.size and (X.min() < 0 or X.max() >= alpha.shape[3]):
        raise IndexError("key index outside the attention matrix")
    return float(alpha[batch, head, row, X].sum())


def visual_mass(record: vlm.AttentionRecord, rows: Sequence[int], columns: Sequence[int]) -> np.ndarray:
    """Attention mass from query ``rows`` to key ``columns`` as (B, L, H, R)."""
    rows = list(rows)
    cols = np.asarray(list(columns), dtype=np.int64)
    return np.stack([a.data[:, :, rows][..., cols].sum(axis=-1) for a in record.weights], axis=1)


def select_tokens_Timg(psi: Sequence[float], p_img: float) -> list[int]:
    """Indices of the shortest prefix of tokens, sorted by ``psi`` descending,
    whose mass reaches ``p_img`` of the total. Ties keep sequence order."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.size == 0:
        raise ValueError("no reference tokens")
    if (psi < 0).any():
        raise ValueError("attention mass must be non-negative")
    total = psi.sum()
    if total <= 0:
        warnings.warn("all-zero visual attention; using every reference token", SelectionWarning)
        return list(range(psi.size))
    order = np.argsort(-psi, kind="stable")
    csum = np.cumsum(psi[order])
    k = int(np.searchsorted(csum >= p_img * total, True)) + 1
    return sorted(order[:min(k, psi.size)].tolist())


def select_active_heads(mass: np.ndarray, t_img: Sequence[int], alpha_act: float,
                        ablations: Sequence[str] = ()) -> list[tuple[int, int]]:
    """(layer, head) pairs whose summed attention from ``t_img`` to the image
    exceeds ``alpha_act``. ``mass`` is (L, H, R)."""
    n_layers, n_heads, _ = mass.shape
    if "second_last_layer_only" in ablations:
        return [(n_layers - 2, h) for h in range(n_heads)]
    if "no_head_active" in ablations:
        return [(l, h) for l in range(n_layers) for h in range(n_heads)]
    sums = mass[:, :, list(t_img)].sum(axis=-1)
    chosen = [(int(l), int(h)) for l, h in zip(*np.nonzero(sums > alpha_act))]
    if not chosen:
        warnings.warn("no head exceeds the activity threshold; using all heads", SelectionWarning)
        return [(l, h) for l in range(n_layers) for h in range(n_heads)]
    return chosen


@dataclass
class Selection:
    t_img: list
    heads: list

    def weights(self, n_layers: int, n_heads: int, n_rows: int) -> np.ndarray:
        w = np.zeros((n_layers, n_heads, n_rows))
        for l, h in self.heads:
            w[l, h, self.t_img] = 1.0
        return w / w.sum()


def select(mass: np.ndarray, config: AttackConfig) -> Selection:
    """T_img and active heads for one position from its (L, H, R) visual mass."""
    per_token = mass.sum(axis=(0, 1))
    t_img = list(range(mass.shape[2])) if config.has("no_Timg") else select_tokens_Timg(per_token, config.p_img)
    return Selection(t_img, select_active_heads(mass, t_img, config.alpha_act, config.ablations))


def adv_loss(record: vlm.AttentionRecord, t_img: Sequence[int], heads: Sequence[tuple[int, int]],
             P: Sequence[int], V: Sequence[int], guard: float = 1e-12, batch: int = 0) -> Tensor:
    """Mean over (t, layer, head) of log(Psi(t,P) / (Psi(t,V) + g) + g) for
    one batch element, as a differentiable scalar. ``t_img`` indexes the
    record's output rows."""
    b = record.weights[0].shape[0]
    losses = _ratio_terms(record, [t_img] * b, [heads] * b, [list(P)] * b, list(V), guard)
    return ad.index(losses, batch)


def _ratio_terms(record: vlm.AttentionRecord, t_imgs, heads, P_sets, V, guard: float) -> Tensor:
    """Per-position objective values as a (B,) Tensor."""
    w = record.weights
    b = w[0].shape[0]
    n_layers, n_heads = len(w), w[0].shape[1]
    rows = list(record.output_rows)
    tk = w[0].shape[3]
    masks = np.zeros((b, tk, 2), dtype=w[0].data.dtype)
    masks[:, list(V), 1] = 1.0
    for i, P in enumerate(P_sets):
        masks[i, list(P), 0] = 1.0
    sel = np.stack([Selection(list(t), list(h)).weights(n_layers, n_heads, len(rows))
                    for t, h in zip(t_imgs, heads)])  # (B, L, H, R)
    masks_h = Tensor(np.ascontiguousarray(np.broadcast_to(masks[:, None], (b, n_heads, tk, 2))))
    total = None
    for l in range(n_layers):
        wl = sel[:, l]
        if not wl.any():
            continue
        a = ad.index(w[l], (slice(None), slice(None), rows))
        psi = ad.matmul(a, masks_h)  # (B, H, R, 2)
        psi_p = ad.index(psi, (Ellipsis, 0))
        psi_v = ad.index(psi, (Ellipsis, 1))
        term = ad.log(ad.add(ad.div(psi_p, ad.add(psi_v, guard)), guard))
        term = ad.sum_(ad.mul(term, Tensor(wl.astype(term.data.dtype))), axis=(1, 2))
        total = term if total is None else ad.add(total, term)
    return total


def ce_objective(logits: Tensor, t_ref: Sequence[int]) -> Tensor:
    """Per-position log-likelihood of ``t_ref`` as a (B,) Tensor. Row ``i`` of
    ``logits`` predicts token ``i``."""
    n = len(t_ref)
    logp = ad.log_softmax(ad.index(logits, (slice(None), slice(0, n))))
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    onehot[:, np.arange(n), list(t_ref)] = 1.0
    return ad.sum_(ad.mul(logp, Tensor(onehot)), axis=(1, 2))


# ---------------------------------------------------------------- gradient aggregation and steps


def pcgrad(grads: Sequence[np.ndarray], rng: np.random.Generator | None = None,
           avg_grad: bool = False, trace: list | None = None) -> np.ndarray:
    """Project conflicting gradients onto each other's normal plane, then average.

    Each g_i is compared against every other raw g_j in a random order; when
    ``g_i . g_j < 0`` the component along g_j is removed. Zero-norm g_j are
    skipped. ``trace`` (if given) receives ``(i, j, dot_after)`` per projection.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if not grads:
        raise ValueError("pcgrad needs at least one gradient")
    shape = grads[0].shape
    if any(g.shape != shape for g in grads):
        raise ValueError("pcgrad: gradients differ in shape")
    if avg_grad or len(grads) == 1:
        return np.mean(grads, axis=0)
    rng = rng or np.random.default_rng(0)
    flat = [g.reshape(-1) for g in grads]
    out = []
    for i, gi in enumerate(flat):
        g = gi.copy()
        for j in rng.permutation(len(flat)):
            if j == i:
                continue
            gj = flat[j]
            dot = float(g @ gj)
            nn = float(gj @ gj)
            if dot < 0 and nn > 0:
                g = g - (dot / nn) * gj
                if trace is not None:
                    trace.append((i, int(j), float(g @ gj)))
        out.append(g)
    return np.mean(out, axis=0).reshape(shape)


def apgd_checkpoints(n: int) -> list[int]:
    """Iteration indices where the step size is reconsidered."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(math.ceil(round(q * n, 6))) for q in p if 0 < q < 1})


@dataclass
class StepSizeState:
    """Oscillation-controlled step size.

    At each checkpoint the step halves (and the iterate returns to the best
    one seen) if fewer than ``rho`` of the window's steps increased the
    loss, or if neither the step nor the best loss changed since the last
    checkpoint.
    """

    eta: float
    n: int
    rho: float = 0.75
    checkpoints: list = field(default_factory=list)
    last_cp: int = 0
    increases: int = 0
    prev_loss: float | None = None
    best_loss: float = -math.inf
    best_x: np.ndarray | None = None
    best_grad: np.ndarray | None = None
    eta_at_cp: float | None = None
    best_at_cp: float = -math.inf
    halvings: list = field(default_factory=list)

    def __post_init__(self):
        if not self.checkpoints:
            self.checkpoints = apgd_checkpoints(self.n)
        if self.eta_at_cp is None:
            self.eta_at_cp = self.eta

    def observe(self, i: int, loss: float, x: np.ndarray, grad: np.ndarray | None = None):
        """Record the loss at iterate ``i``. Returns ``(x, grad)`` to step
        from: the arguments, or the best iterate after a halving."""
        if self.prev_loss is not None and loss > self.prev_loss:
            self.increases += 1
        self.prev_loss = loss
        if loss > self.best_loss:
            self.best_loss = loss
            self.best_x = x.copy()
            self.best_grad = None if grad is None else grad.copy()
        if i in self.checkpoints:
            window = i - self.last_cp
            oscillating = self.increases < self.rho * window
            stalled = self.eta_at_cp == self.eta and self.best_at_cp == self.best_loss
            self.last_cp = i
            self.increases = 0
            if oscillating or stalled:
                self.eta /= 2.0
                self.halvings.append(i)
                self.eta_at_cp = self.eta
                self.best_at_cp = self.best_loss
                self.prev_loss = self.best_loss
                return self.best_x.copy(), (grad if self.best_grad is None else self.best_grad.copy())
            self.eta_at_cp = self.eta
            self.best_at_cp = self.best_loss
        return x, grad


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def apgd_step(x_adv: np.ndarray, grad: np.ndarray, state: StepSizeState, x: np.ndarray, eps: float) -> np.ndarray:
    """Sign ascent step with the current step size, projected onto the
    eps-ball around ``x`` intersected with [0, 1]."""
    step = np.asarray(x_adv, dtype=np.float64) + state.eta * np.sign(grad)
    return project(step, np.asarray(x, dtype=np.float64), eps)


def quantize_patch(x_adv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-bit image and its reloaded [0, 1] float form."""
    q = np.clip(np.floor(np.asarray(x_adv, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return q, (q.astype(np.float32) / np.float32(255.0))


# ---------------------------------------------------------------- per-position evaluation


def reference_output(victim: Victim, target: sc.ProductSpec, prompt: vlm.Prompt) -> list[int]:
    """Greedy output of the victim shown only the target (in the first slot)."""
    img = sc.render_grid(victim.layout, {0: target})
    dec = vlm.greedy_decode(victim.weights, prompt, img)
    if not dec.tokens:
        raise AttackError("victim produced an empty reference output for the target")
    return dec.tokens


@dataclass
class StepEval:
    losses: np.ndarray
    grads: np.ndarray  # (B, h, w, 3)
    ratios: np.ndarray
    selections: list


def evaluate_positions(victim: Victim, prompt: vlm.Prompt, cache: vlm.KVCache, x_adv: np.ndarray,
                       scene: sc.GridScene, slots: Sequence[int], t_ref: Sequence[int],
                       config: AttackConfig) -> StepEval:
    """Objective value and patch gradient at each slot, in one batched pass."""
    layout = victim.layout
    cfg = victim.config
    x32 = np.asarray(x_adv, dtype=np.float32)
    leaves = [Tensor(x32.copy(), requires_grad=True) for _ in slots]
    with ad.Tape():
        canvases = []
        for leaf, slot in zip(leaves, slots):
            canvas, _ = sc.compose(leaf, slot, scene)
            canvases.append(ad.reshape(canvas, (1,) + canvas.shape))
        batch = ad.concat(canvases, axis=0) if len(canvases) > 1 else canvases[0]
        res = vlm.forward_suffix(victim.weights, prompt, batch, t_ref, cache=cache,
                                 capture=config.method == "prac")
        V = res.vision.V
        P_sets = [[res.vision.offset + c for c in vlm.mask_cells(layout.slot_mask(s), cfg.patch)] for s in slots]
        if config.method == "prac":
            rec = res.record
            mass = visual_mass(rec, rec.output_rows, V)
            mass_p = np.stack([visual_mass(rec, rec.output_rows, P)[i] for i, P in enumerate(P_sets)])
            sels = [select(mass[i], config) for i in range(len(slots))]
            per_pos = _ratio_terms(rec, [s.t_img for s in sels], [s.heads for s in sels], P_sets, V, config.guard)
            ratios = np.array([
                float(np.mean([mass_p[i][l, h, t] / max(mass[i][l, h, t], 1e-30)
                               for l, h in s.heads for t in s.t_img]))
                for i, s in enumerate(sels)])
        else:
            per_pos = ce_objective(res.logits, t_ref)
            sels, ratios = [], np.zeros(len(slots))
        total = ad.sum_(per_pos)
    losses = per_pos.data.astype(np.float64)
    if not np.all(np.isfinite(losses)):
        raise AttackError(f"non-finite objective {losses.tolist()} at slots {list(slots)}")
    ad.backward(total)
    grads = np.stack([leaf.grad for leaf in leaves])
    return StepEval(losses, grads, ratios, sels)


# ---------------------------------------------------------------- candidates


@dataclass
class Candidate:
    patch: np.ndarray
    loss: float
    iteration: int
    window: int
    score: float | None = None


@dataclass
class CandidateTracker:
    start: int
    window_len: int
    candidates: list = field(default_factory=list)
    current: Candidate | None = None

    def window_of(self, i: int) -> int:
        return i // self.window_len

    def offer(self, patch: np.ndarray, loss: float, i: int) -> Candidate | None:
        """Consider iterate ``i``; returns the candidate closed by a window change."""
        if i < self.start:
            return None
        if not np.isfinite(loss):
            raise AttackError(f"non-finite candidate loss at iteration {i}")
        closed = None
        m = self.window_of(i)
        if self.current is not None and self.current.window != m:
            closed = self.close()
        if self.current is None or loss >= self.current.loss:
            self.current = Candidate(np.array(patch, copy=True), float(loss), i, m)
        return closed

    def close(self) -> Candidate | None:
        done, self.current = self.current, None
        if done is not None:
            self.candidates.append(done)
        return done


def success_tokens(tokens: Sequence[int], target_id: int, slot: int, cfg: vlm.ModelConfig,
                   layout: sc.GridLayout) -> bool:
    """Does a decoded output select the target (by name or by click)?"""
    parsed = parse_tokens(tokens, cfg)
    if parsed.product is not None:
        return parsed.product == target_id
    if parsed.click is not None:
        return selected_slot(parsed.click, layout) == slot
    return False


def validate_candidates(candidates: Sequence[Candidate], victim: Victim, target: sc.ProductSpec,
                        grids: Sequence[sc.GridScene], prompt: vlm.Prompt) -> Candidate:
    """Highest validation success rate wins; exact ties go to the latest iterate."""
    if not candidates:
        raise AttackError("no candidates to validate")
    if len(candidates) == 1 and not grids:
        return candidates[0]
    cache = vlm.prefix_cache(victim.weights, prompt)
    n = victim.layout.n_positions
    best = None
    for cand in candidates:
        imgs, slots = [], []
        for g in grids:
            for slot in range(n):
                canvas, _ = sc.compose(cand.patch, slot, g)
                imgs.append(canvas.data)
                slots.append(slot)
        decs = vlm.decode(victim.weights, prompt, np.stack(imgs), cache=cache) if imgs else []
        hits = [success_tokens(d.tokens, target.id, s, victim.config, victim.layout) for d, s in zip(decs, slots)]
        cand.score = float(np.mean(hits)) if hits else 0.0
        if best is None or cand.score > best.score or (cand.score == best.score and cand.iteration > best.iteration):
            best = cand
    return best


# ---------------------------------------------------------------- run log


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    sink: Callable[[dict], None] | None = None

    def emit(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.sink:
            self.sink(rec)

    def events(self, name: str) -> list:
        return [r for r in self.records if r["event"] == name]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def _f(v) -> float:
    return float(np.round(float(v), 8))


# ---------------------------------------------------------------- attack drivers


@dataclass
class AttackResult:
    patch: np.ndarray          # reloaded quantized patch in [0, 1]
    patch_u8: np.ndarray
    clean: np.ndarray          # unperturbed target tile
    t_ref: list
    chosen: Candidate
    candidates: list
    log: RunLog
    config: AttackConfig
    target_id: int

    @property
    def linf(self) -> float:
        return float(np.abs(self.patch.astype(np.float64) - self.clean).max())

    def sidecar(self, config_hash: str | None = None) -> dict:
        return {
            "target_id": self.target_id,
            "method": self.config.method,
            "ablations": list(self.config.ablations),
            "eps": self.config.eps,
            "seed": self.config.seed,
            "config_hash": config_hash or self.config.digest(),
            "validation_ssr": self.chosen.score,
            "chosen_iteration": self.chosen.iteration,
            "linf": self.linf,
            "t_ref": list(self.t_ref),
        }

    def save(self, out_dir: str | Path, stem: str, config_hash: str | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sc.save_png(out / f"{stem}.png", self.patch_u8.astype(np.float32) / 255.0)
        meta = self.sidecar(config_hash)
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        self.log.to_jsonl(out / f"{stem}.log.jsonl")
        return meta


def warm_start(victim: Victim, scene: sc.GridScene, target: sc.ProductSpec, config: AttackConfig,
               rng: np.random.Generator, t_ref: Sequence[int], prompt: vlm.Prompt,
               cache: vlm.KVCache, runlog: RunLog | None = None) -> np.ndarray:
    """Random start in the eps-ball, then (unless disabled) a single-slot,
    fixed-distractor run; returns its best iterate."""
    x = sc.tile_for(target).astype(np.float64)
    x_adv = project(x + rng.uniform(-config.eps, config.eps, size=x.shape), x, config.eps)
    if config.has("no_init"):
        if runlog:
            runlog.emit("warm_start_skipped")
        return x_adv
    n = config.init_steps(victim.layout.n_positions)
    slot = int(rng.integers(victim.layout.n_positions))
    state = StepSizeState(config.step_size, n, config.rho)
    best_loss, best = -math.inf, x_adv.copy()
    for i in range(n):
        ev = evaluate_positions(victim, prompt, cache, x_adv, scene, [slot], t_ref, config)
        loss = float(ev.losses[0])
        if loss > best_loss:
            best_loss, best = loss, x_adv.copy()
        if runlog:
            runlog.emit("warm_start", iter=i, slot=slot, loss=_f(loss), eta=state.eta,
                        ratio=_f(ev.ratios[0]))
        x_use, g_use = state.observe(i, loss, x_adv, ev.grads[0])
        x_adv = apgd_step(x_use, g_use, state, x, config.eps)
    return best


def _main_loop(victim: Victim, catalog: sc.Catalog, target: sc.ProductSpec, config: AttackConfig,
               runlog: RunLog) -> AttackResult:
    layout = victim.layout
    n_pos = layout.n_positions
    base_prompt = victim.prompt(target, config.fmt, config.trajectory)
    t_ref = reference_output(victim, target, base_prompt)
    opt_prompt = replace(base_prompt, trajectory=0) if config.has("no_trajectory") else base_prompt
    cache = vlm.prefix_cache(victim.weights, opt_prompt)
    runlog.emit("start", method=config.method, target_id=target.id, t_ref=list(t_ref),
                ablations=list(config.ablations), config_digest=config.digest(),
                prefix_length=cache.length, n_iter=config.n_iter, swap_every=config.swap_every)
    if config.has("avg_grad"):
        runlog.emit("pcgrad_bypassed", reason="avg_grad")

    pool = [p for p in catalog.optimization_pool if p.category == target.category and p.id != target.id]
    if len(pool) < n_pos:
        pool = [p for p in catalog.optimization_pool if p.id != target.id]
    if len(pool) < n_pos - 1:
        raise AttackError(f"optimization pool too small ({len(pool)} products)")
    rng_scene = stream(config.seed, f"attack/{target.id}/scene")
    rng_init = stream(config.seed, f"attack/{target.id}/init")
    rng_pc = stream(config.seed, f"attack/{target.id}/pcgrad")
    idx = rng_scene.choice(len(pool), size=n_pos - 1, replace=False)
    scene = sc.GridScene(layout, tuple(pool[i] for i in idx), 0, 0, target.id)

    x = sc.tile_for(target).astype(np.float64)
    x_adv = warm_start(victim, scene, target, config, rng_init, t_ref, opt_prompt, cache, runlog)
    runlog.emit("warm_start_done", linf=_f(np.abs(x_adv - x).max()))

    state = StepSizeState(config.step_size, config.n_iter, config.rho)
    tracker = CandidateTracker(config.window_begin, config.swap_every)
    slots = list(range(n_pos))
    for i in range(config.n_iter):
        if i % config.swap_every == 0:
            scene = sc.swap_distractor(scene, pool, rng_scene)
            runlog.emit("swap", iter=i, version=scene.version,
                        distractors=[p.id for p in scene.distractors])
        ev = evaluate_positions(victim, opt_prompt, cache, x_adv, scene, slots, t_ref, config)
        mean_loss = float(ev.losses.mean())
        closed = tracker.offer(x_adv, mean_loss, i)
        if closed is not None:
            runlog.emit("candidate", window=closed.window, iter=closed.iteration, loss=_f(closed.loss))
        trace = []
        g = pcgrad(list(ev.grads), rng_pc, avg_grad=config.has("avg_grad"), trace=trace)
        rec = dict(iter=i, losses=[_f(v) for v in ev.losses], mean=_f(mean_loss), eta=state.eta,
                   ratio=_f(ev.ratios.mean()), projections=len(trace))
        if ev.selections:
            rec["t_img"] = [s.t_img for s in ev.selections]
            rec["n_heads"] = [len(s.heads) for s in ev.selections]
        runlog.emit("iter", **rec)
        halvings = len(state.halvings)
        x_use, g_use = state.observe(i, mean_loss, x_adv, g)
        if len(state.halvings) > halvings:
            runlog.emit("eta_halved", iter=i, eta=state.eta)
        x_adv = apgd_step(x_use, g_use, state, x, config.eps)
        if np.abs(x_adv - x).max() > config.eps + 1e-12:
            raise AttackError(f"projection violated at iteration {i}")
    closed = tracker.close()
    if closed is not None:
        runlog.emit("candidate", window=closed.window, iter=closed.iteration, loss=_f(closed.loss))

    if tracker.candidates:
        cands = [replace(c, patch=quantize_patch(c.patch)[1]) for c in tracker.candidates]
        val_grids = sc.sample_validation_grids(catalog, layout, config.n_val_grids, config.seed)
        chosen = validate_candidates(cands, victim, target, val_grids, base_prompt)
    else:
        warnings.warn("no candidates were tracked; using the last iterate", SelectionWarning)
        chosen = Candidate(quantize_patch(x_adv)[1], math.nan, config.n_iter - 1, -1)
        cands = [chosen]
    for c in cands:
        runlog.emit("validation", window=c.window, iter=c.iteration, score=c.score)
    runlog.emit("chosen", window=chosen.window, iter=chosen.iteration, score=chosen.score)
    u8, reloaded = quantize_patch(chosen.patch)
    return AttackResult(reloaded, u8, x, list(t_ref), chosen, cands, runlog, config, target.id)


def run_prac(victim: Victim, catalog: sc.Catalog, target: sc.ProductSpec, config: AttackConfig,
             sink: Callable[[dict], None] | None = None) -> AttackResult:
    """Attention-concentration attack on ``target``."""
    if config.method != "prac":
        config = replace(config, method="prac")
    return _main_loop(victim, catalog, target, config, RunLog(sink=sink))


def run_ce_baseline(victim: Victim, catalog: sc.Catalog, target: sc.ProductSpec, config: AttackConfig,
                    sink: Callable[[dict], None] | None = None) -> AttackResult:
    """Same pipeline, maximizing the log-likelihood of the reference output."""
    if config.method != "ce":
        config = replace(config, method="ce")
    return _main_loop(victim, catalog, target, config, RunLog(sink=sink))
