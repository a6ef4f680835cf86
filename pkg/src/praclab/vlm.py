"""A miniature decoder-only multimodal transformer used as the white-box victim.

Sequence layout::

    ([FRAME] prior-frame vision tokens) * k      <- trajectory, k >= 0 (cached prefix)
    [BOS] [CAT_c] [FMT_f] [IMG] grid vision tokens [ASSIST] output tokens

Output formats:

* ``name``:   ``SEL <product> EOS``
* ``action``: ``CLK <x-bin> <y-bin> EOS`` (bins are patch-sized columns / rows)

Every attention layer can hand back its per-head weight matrices as an
:class:`AttentionRecord`; these tensors stay on the tape so objectives built
from them are differentiable down to the pixels.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream

FORMAT_NAME = "name"
FORMAT_ACTION = "action"
FORMATS = (FORMAT_NAME, FORMAT_ACTION)

# special tokens
PAD, BOS, EOS, IMG, ASSIST, SEL, CLK, FMT_NAME, FMT_ACTION, FRAME = range(10)
N_SPECIAL = 10
N_CATEGORY_TOKENS = 10


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 256
    patch: int = 12
    canvas_h: int = 48
    canvas_w: int = 240
    n_products: int = 64
    max_seq: int = 256
    isolate_vision: bool = True  # image cells see earlier text and themselves, not other cells

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.canvas_h % self.patch or self.canvas_w % self.patch:
            raise ModelError("canvas extents must be multiples of the patch size")
        if self.vocab_size > 128:
            raise ModelError(f"vocabulary of {self.vocab_size} exceeds 128 tokens")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def grid_rows(self) -> int:
        return self.canvas_h // self.patch

    @property
    def grid_cols(self) -> int:
        return self.canvas_w // self.patch

    @property
    def n_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    # token id ranges
    def category_token(self, k: int) -> int:
        return N_SPECIAL + k

    @property
    def xbin_base(self) -> int:
        return N_SPECIAL + N_CATEGORY_TOKENS

    @property
    def ybin_base(self) -> int:
        return self.xbin_base + self.grid_cols

    @property
    def product_base(self) -> int:
        return self.ybin_base + self.grid_rows

    @property
    def vocab_size(self) -> int:
        return self.product_base + self.n_products

    def product_token(self, pid: int) -> int:
        return self.product_base + pid

    def token_kind(self, tok: int) -> tuple[str, int]:
        if tok < N_SPECIAL:
            return "special", tok
        if tok < self.xbin_base:
            return "category", tok - N_SPECIAL
        if tok < self.ybin_base:
            return "xbin", tok - self.xbin_base
        if tok < self.product_base:
            return "ybin", tok - self.ybin_base
        return "product", tok - self.product_base

    def bin_center(self, xbin: int, ybin: int) -> tuple[float, float]:
        return (xbin * self.patch + (self.patch - 1) / 2.0, ybin * self.patch + (self.patch - 1) / 2.0)


# ---------------------------------------------------------------- weights


def _param_shapes(cfg: ModelConfig) -> dict:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq, d),
        "cell_emb": (cfg.n_cells, d),
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wqkv": (d, 3 * d), p + "bqkv": (3 * d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, v)})
    return shapes


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelWeights":
        rng = stream(seed, "model-init")
        params = {}
        for name, shape in _param_shapes(config).items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            elif leaf in ("tok_emb", "pos_emb", "cell_emb"):
                arr = rng.normal(0.0, 0.1, size=shape)
            else:
                std = 1.0 / math.sqrt(shape[0])
                if leaf in ("wo", "w2"):
                    std /= math.sqrt(2 * config.n_layers)
                arr = rng.normal(0.0, std, size=shape)
            params[name] = Tensor(arr.astype(np.float32))
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def requires_grad_(self, flag: bool) -> "ModelWeights":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def clone(self, dtype=None) -> "ModelWeights":
        dtype = dtype or np.float32
        out = ModelWeights(self.config)
        for k, t in self.params.items():
            c = Tensor.__new__(Tensor)
            c.data = t.data.astype(dtype, copy=True)
            c.requires_grad, c.grad, c.node, c.name = False, None, None, None
            out.params[k] = c
        return out

    def distance(self, other: "ModelWeights") -> float:
        return math.sqrt(sum(float(((self[k].data.astype(np.float64) - other[k].data) ** 2).sum())
                             for k in self.params))

    # --- checkpoint io: "TVLM" | u32 version | u32 len + config json | u32 count | tensors
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(b"TVLM")
        buf.write(struct.pack("<I", 1))
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            nb = name.encode()
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", t.data.ndim))
            buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            buf.write(t.data.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelWeights":
        try:
            if raw[:4] != b"TVLM":
                raise ModelError("not a TVLM checkpoint (bad magic bytes)")
            off = 4
            (version,) = struct.unpack_from("<I", raw, off)
            off += 4
            if version != 1:
                raise ModelError(f"unsupported TVLM format version {version}")
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            config = ModelConfig(**json.loads(raw[off:off + n]))
            off += n
            (count,) = struct.unpack_from("<I", raw, off)
            off += 4
            params = {}
            for _ in range(count):
                (nl,) = struct.unpack_from("<I", raw, off)
                off += 4
                name = raw[off:off + nl].decode()
                off += nl
                (ndim,) = struct.unpack_from("<I", raw, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                size = int(np.prod(shape)) * 4
                if off + size > len(raw):
                    raise ModelError(f"truncated tensor '{name}'")
                arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(shape)
                off += size
                params[name] = Tensor(arr.astype(np.float32))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
            raise ModelError(f"corrupt TVLM checkpoint: {exc}") from exc
        expected = _param_shapes(config)
        if set(params) != set(expected) or any(params[k].shape != expected[k] for k in expected):
            raise ModelError("checkpoint tensor table does not match its config")
        return cls(config, params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- vision tokens


@dataclass(frozen=True)
class VisionTokenMap:
    """Cells of one image, row-major. ``patch_cells`` index cells that hold
    at least one masked pixel; ``offset`` is the sequence position of cell 0."""

    rows: int
    cols: int
    patch_cells: tuple
    offset: int = 0

    @property
    def all_cells(self) -> tuple:
        return tuple(range(self.rows * self.cols))

    @property
    def V(self) -> list[int]:
        return [self.offset + c for c in self.all_cells]

    @property
    def P(self) -> list[int]:
        return [self.offset + c for c in self.patch_cells]

    def cell_of(self, row: int, col: int) -> int:
        return row * self.cols + col


def mask_cells(mask: np.ndarray | None, patch: int) -> tuple:
    if mask is None:
        return ()
    h, w = mask.shape
    cells = mask.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))
    return tuple(int(i) for i in np.flatnonzero(cells.reshape(-1)))


def patchify(weights: ModelWeights, image, mask: np.ndarray | None = None):
    """Embed a (B, H, W, 3) canvas into (B, cells, d) vision embeddings."""
    cfg = weights.config
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 3:
        image = ad.reshape(image, (1,) + image.shape)
    b, h, w, c = image.shape
    if (h, w, c) != (cfg.canvas_h, cfg.canvas_w, 3):
        raise ModelError(f"image extents {(h, w, c)} do not match config {(cfg.canvas_h, cfg.canvas_w, 3)}")
    if mask is not None and mask.shape != (h, w):
        raise ModelError(f"mask extents {mask.shape} do not match image {(h, w)}")
    p = cfg.patch
    x = ad.reshape(image, (b, h // p, p, w // p, p, 3))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, cfg.n_cells, cfg.patch_dim))
    emb = ad.linear(ad.add(x, -0.5), weights["patch_w"], weights["patch_b"])
    cells = np.broadcast_to(np.arange(cfg.n_cells), (b, cfg.n_cells))
    emb = ad.add(emb, ad.embedding(weights["cell_emb"], cells))
    return emb, VisionTokenMap(cfg.grid_rows, cfg.grid_cols, mask_cells(mask, p))


# ---------------------------------------------------------------- forward


@dataclass
class KVCache:
    """Per-layer keys/values (B, H, T, dk) of already processed positions,
    plus which of those positions are image cells."""

    keys: list
    values: list
    length: int = 0
    frozen: bool = False
    vision: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def empty(cls, n_layers: int) -> "KVCache":
        return cls([None] * n_layers, [None] * n_layers, 0)

    def tiled(self, batch: int) -> "KVCache":
        if self.length == 0:
            return KVCache.empty(len(self.keys))
        def rep(a):
            return a if a.shape[0] == batch else np.repeat(a, batch, axis=0)
        return KVCache([rep(k) for k in self.keys], [rep(v) for v in self.values], self.length,
                       vision=self.vision)


@dataclass
class AttentionRecord:
    """Attention weights of one forward pass.

    ``weights[l]`` is a (B, H, Tq, Tk) Tensor; query rows are positions
    ``query_offset + i``, key columns are absolute positions.
    """

    weights: list
    query_offset: int
    vision: VisionTokenMap | None = None
    output_rows: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_heads(self) -> int:
        return self.weights[0].shape[1]

    def matrix(self, layer: int, head: int, batch: int = 0) -> np.ndarray:
        return self.weights[layer].data[batch, head]


def attention_mask(start: int, vision: np.ndarray, isolate: bool) -> np.ndarray:
    """(Tq, Tk) boolean mask for queries ``start..`` over keys ``0..``.
    Causal; with ``isolate`` an image cell also skips every other image cell."""
    tk = len(vision)
    q = np.arange(start, tk)
    allowed = np.arange(tk)[None, :] <= q[:, None]
    if isolate:
        cross = vision[q][:, None] & vision[None, :] & (np.arange(tk)[None, :] != q[:, None])
        allowed &= ~cross
    return allowed


def _block(weights: ModelWeights, i: int, x: Tensor, cache: KVCache, allowed: np.ndarray,
           capture: list | None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    cfg = weights.config
    p = f"layers.{i}."
    b, t, d = x.shape
    hds, dk = cfg.n_heads, cfg.d_head
    h = ad.layer_norm(x, weights[p + "ln1_g"], weights[p + "ln1_b"])
    qkv = ad.linear(h, weights[p + "wqkv"], weights[p + "bqkv"])
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, hds, dk)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if cache.length:
        k_all = ad.concat([Tensor(cache.keys[i]), k], axis=2)
        v_all = ad.concat([Tensor(cache.values[i]), v], axis=2)
    else:
        k_all, v_all = k, v
    scores = ad.scale(ad.matmul(q, ad.transpose(k_all, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    alpha = ad.softmax(scores, mask=allowed)
    if capture is not None:
        capture.append(alpha)
    ctx = ad.reshape(ad.transpose(ad.matmul(alpha, v_all), (0, 2, 1, 3)), (b, t, d))
    x = ad.add(x, ad.linear(ctx, weights[p + "wo"], weights[p + "bo"]))
    h = ad.layer_norm(x, weights[p + "ln2_g"], weights[p + "ln2_b"])
    h = ad.linear(ad.gelu(ad.linear(h, weights[p + "w1"], weights[p + "b1"])), weights[p + "w2"], weights[p + "b2"])
    return ad.add(x, h), k_all.data, v_all.data


def run_segments(weights: ModelWeights, segments: Sequence[Tensor], cache: KVCache | None = None,
                 capture: bool = False, logits_rows: Sequence[int] | None = None,
                 keep_cache: bool = False, vision: Sequence[bool] | None = None):
    """Run pre-embedded segments (each (B, n, d)) on top of ``cache``.
    ``vision`` flags the segments that are image cells.

    Returns ``(logits, record, new_cache)``; ``logits`` covers ``logits_rows``
    (relative to the new positions) or every new position.
    """
    cfg = weights.config
    cache = cache if cache is not None else KVCache.empty(cfg.n_layers)
    x = ad.concat(list(segments), axis=1) if len(segments) > 1 else segments[0]
    b, t, _ = x.shape
    start = cache.length
    if start + t > cfg.max_seq:
        raise ModelError(f"sequence length {start + t} exceeds max_seq={cfg.max_seq}")
    cache = cache.tiled(b)
    flags = vision or [False] * len(segments)
    new_vis = np.concatenate([np.full(s.shape[1], bool(f)) for s, f in zip(segments, flags)])
    vis = np.concatenate([cache.vision, new_vis])
    allowed = attention_mask(start, vis, cfg.isolate_vision)
    pos = np.broadcast_to(np.arange(start, start + t), (b, t))
    x = ad.add(x, ad.embedding(weights["pos_emb"], pos))
    captured = [] if capture else None
    keys, values = [], []
    for i in range(cfg.n_layers):
        x, k, v = _block(weights, i, x, cache, allowed, captured)
        keys.append(k)
        values.append(v)
    if logits_rows is not None:
        x = x[:, list(logits_rows)]
    x = ad.layer_norm(x, weights["lnf_g"], weights["lnf_b"])
    logits = ad.matmul(x, weights["head_w"])
    record = AttentionRecord(captured, start) if capture else None
    new_cache = KVCache(keys, values, start + t, vision=vis) if keep_cache else None
    return logits, record, new_cache


def embed_tokens(weights: ModelWeights, ids, batch: int = 1) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (batch, ids.shape[0]))
    return ad.embedding(weights["tok_emb"], ids)


@dataclass(frozen=True)
class Prompt:
    """Fixed textual context plus ``trajectory`` prior browser frames."""

    category: int = 0
    fmt: str = FORMAT_NAME
    trajectory: int = 1

    def __post_init__(self):
        if self.fmt not in FORMATS:
            raise ModelError(f"unknown output format {self.fmt!r}")
        object.__setattr__(self, "trajectory", int(self.trajectory))

    def query_tokens(self, cfg: ModelConfig) -> list[int]:
        return [BOS, cfg.category_token(self.category), FMT_NAME if self.fmt == FORMAT_NAME else FMT_ACTION, IMG]


def trajectory_frame(cfg: ModelConfig) -> np.ndarray:
    from .scene import GridLayout, blank_browser_frame

    layout = GridLayout(n_positions=cfg.canvas_w // 48)
    frame = blank_browser_frame(layout)
    if frame.shape != (cfg.canvas_h, cfg.canvas_w, 3):
        frame = np.full((cfg.canvas_h, cfg.canvas_w, 3), 0.97, dtype=np.float32)
    return frame


def prefix_cache(weights: ModelWeights, prompt: Prompt) -> KVCache:
    """Cache of the trajectory part, computed once and without gradients.
    Empty when the prompt has no trajectory."""
    cfg = weights.config
    if not prompt.trajectory:
        return KVCache.empty(cfg.n_layers)
    with ad.no_grad():
        segs = _frame_segments(weights, prompt, 1)
        _, _, cache = run_segments(weights, segs, None, keep_cache=True, logits_rows=[0],
                                   vision=[False, True] * prompt.trajectory)
    cache.frozen = True
    return cache


def _frame_segments(weights: ModelWeights, prompt: Prompt, batch: int) -> list:
    cfg = weights.config
    frame = np.broadcast_to(trajectory_frame(cfg), (batch, cfg.canvas_h, cfg.canvas_w, 3))
    segs = []
    for _ in range(prompt.trajectory):
        frame_emb, _ = patchify(weights, Tensor(frame))
        segs += [embed_tokens(weights, [FRAME], batch), frame_emb]
    return segs


def prefix_length(weights: ModelWeights, prompt: Prompt) -> int:
    return prompt.trajectory * (1 + weights.config.n_cells)


@dataclass
class ForwardResult:
    logits: Tensor
    record: AttentionRecord | None
    vision: VisionTokenMap
    output_positions: list
    cache: KVCache | None = None


def forward_suffix(weights: ModelWeights, prompt: Prompt, image, output_tokens: Sequence[int] = (),
                   mask: np.ndarray | None = None, cache: KVCache | None = None, capture: bool = False,
                   all_logits: bool = False, keep_cache: bool = False) -> ForwardResult:
    """Suffix forward: query tokens, the final image, ``[ASSIST]`` and the
    teacher-forced ``output_tokens`` over a cached prefix.

    Logits are returned for the ``[ASSIST]`` row and every output row
    (row ``i`` predicts output token ``i``), unless ``all_logits``.
    """
    cfg = weights.config
    if cache is None:
        cache = prefix_cache(weights, prompt)
    elif cache.length != prefix_length(weights, prompt):
        raise ModelError("cached prefix does not match the prompt's trajectory")
    img_emb, vmap = patchify(weights, image, mask)
    b = img_emb.shape[0]
    head = prompt.query_tokens(cfg)
    tail = [ASSIST] + list(output_tokens)
    segs = [embed_tokens(weights, head, b), img_emb, embed_tokens(weights, tail, b)]
    start = cache.length
    vis_offset = start + len(head)
    assist_rel = len(head) + cfg.n_cells
    rows = None if all_logits else list(range(assist_rel, assist_rel + len(tail)))
    logits, record, new_cache = run_segments(weights, segs, cache, capture, rows, keep_cache,
                                             vision=[False, True, False])
    vmap = VisionTokenMap(vmap.rows, vmap.cols, vmap.patch_cells, vis_offset)
    out_pos = [start + assist_rel + 1 + i for i in range(len(output_tokens))]
    if record is not None:
        record.vision = vmap
        record.output_rows = [p - start for p in out_pos]
    return ForwardResult(logits, record, vmap, out_pos, new_cache)


def forward(weights: ModelWeights, prompt: Prompt, image, output_tokens: Sequence[int] = (),
            mask: np.ndarray | None = None, capture: bool = False, all_logits: bool = False) -> ForwardResult:
    """Monolithic forward over the whole conversation (no cache split)."""
    cfg = weights.config
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.ndim == 3:
        img = ad.reshape(img, (1,) + img.shape)
    b = img.shape[0]
    segs = _frame_segments(weights, prompt, b)
    head = prompt.query_tokens(cfg)
    img_emb, vmap = patchify(weights, img, mask)
    tail = [ASSIST] + list(output_tokens)
    segs += [embed_tokens(weights, head, b), img_emb, embed_tokens(weights, tail, b)]
    pre = prefix_length(weights, prompt)
    assist_abs = pre + len(head) + cfg.n_cells
    rows = None if all_logits else list(range(assist_abs, assist_abs + len(tail)))
    vis = [False, True] * prompt.trajectory + [False, True, False]
    logits, record, _ = run_segments(weights, segs, None, capture, rows, vision=vis)
    vmap = VisionTokenMap(vmap.rows, vmap.cols, vmap.patch_cells, pre + len(head))
    out_pos = [assist_abs + 1 + i for i in range(len(output_tokens))]
    if record is not None:
        record.vision = vmap
        record.output_rows = list(out_pos)
    return ForwardResult(logits, record, vmap, out_pos)


# ---------------------------------------------------------------- decoding


@dataclass
class Decoded:
    tokens: list
    truncated: bool = False


def format_cap(fmt: str) -> int:
    return 2 if fmt == FORMAT_NAME else 3


def decode(weights: ModelWeights, prompt: Prompt, images: np.ndarray, temperature: float = 0.0,
           rng: np.random.Generator | None = None, cache: KVCache | None = None) -> list[Decoded]:
    """Batched autoregressive decoding of (B, H, W, 3) canvases.

    ``temperature == 0`` is greedy with ties broken toward the lowest token
    id (``argmax`` semantics); otherwise tokens are drawn from
    ``softmax(logits / temperature)`` using ``rng``, either one generator
    consumed row by row or a list with one generator per row.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if isinstance(rng, (list, tuple)) and len(rng) != images.shape[0]:
        raise ValueError(f"{len(rng)} generators for {images.shape[0]} rows")
    cap = format_cap(prompt.fmt)
    b = images.shape[0]
    with ad.no_grad():
        res = forward_suffix(weights, prompt, Tensor(images), cache=cache, keep_cache=True)
        cache_b = res.cache
        logits = res.logits.data[:, -1]
        out = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for step in range(cap + 1):
            toks = _pick(logits, temperature, rng)
            for r in range(b):
                if done[r]:
                    continue
                if toks[r] == EOS:
                    done[r] = True
                else:
                    out[r].append(int(toks[r]))
            if done.all() or step == cap:
                break
            emb = ad.embedding(weights["tok_emb"], toks[:, None])
            logits_t, _, cache_b = run_segments(weights, [emb], cache_b, keep_cache=True)
            logits = logits_t.data[:, -1]
    return [Decoded(o[:cap], truncated=not d) for o, d in zip(out, done)]


def _pick(logits: np.ndarray, temperature: float, rng) -> np.ndarray:
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    if isinstance(rng, (list, tuple)):
        u = np.array([r.random() for r in rng])
    else:
        u = rng.random(p.shape[0])
    return np.minimum((p.cumsum(axis=-1) < u[:, None]).sum(axis=-1), p.shape[1] - 1)


def greedy_decode(weights: ModelWeights, prompt: Prompt, image: np.ndarray, cache: KVCache | None = None) -> Decoded:
    return decode(weights, prompt, image, 0.0, None, cache)[0]


def sample_decode(weights: ModelWeights, prompt: Prompt, image: np.ndarray, temperature: float,
                  rng: np.random.Generator | None, cache: KVCache | None = None) -> Decoded:
    return decode(weights, prompt, image, temperature, rng, cache)[0]


# ---------------------------------------------------------------- victim training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 100
    clip_norm: float = 1.0
    eval_grids: int = 200
    trajectory_every: int = 2
    action_fraction: float = 0.5
    single_fraction: float = 0.15


def target_tokens(cfg: ModelConfig, fmt: str, pid: int, slot: int, layout) -> list[int]:
    """Ground-truth output (without EOS) for selecting ``pid`` at ``slot``."""
    if fmt == FORMAT_NAME:
        return [SEL, cfg.product_token(pid)]
    y0, x0, h, w = layout.slot(slot)
    cx, cy = x0 + w // 2, y0 + h // 2
    return [CLK, cfg.xbin_base + cx // cfg.patch, cfg.ybin_base + cy // cfg.patch]


def sample_training_grids(catalog, layout, rng: np.random.Generator, count: int,
                          single_fraction: float = 0.15, products=None):
    """Random grids with 1..N products from one category; label = best quality."""
    from .scene import render_grid

    products = list(products if products is not None else catalog.products)
    cats = sorted({p.category for p in products})
    out = []
    n = layout.n_positions
    for _ in range(count):
        cat = cats[int(rng.integers(len(cats)))]
        pool = [p for p in products if p.category == cat]
        if len(pool) < n:
            pool = products
        k = 1 if rng.random() < single_fraction else int(rng.integers(2, n + 1)) if rng.random() < 0.3 else n
        slots = sorted(rng.choice(n, size=k, replace=False).tolist())
        chosen = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
        placement = dict(zip(slots, chosen))
        best_slot = max(placement, key=lambda s: placement[s].quality)
        out.append((render_grid(layout, placement), placement, best_slot, cat))
    return out


def _category_index(category: str) -> int:
    from .scene import CATEGORIES

    return CATEGORIES.index(category) if category in CATEGORIES else 0


def selection_accuracy(weights: ModelWeights, grids, layout, fmt: str = FORMAT_NAME,
                       trajectory: int = 1, batch: int = 50) -> float:
    """Fraction of grids where greedy decoding names/clicks the labelled product."""
    cfg = weights.config
    hits = 0
    by_cat: dict = {}
    for g in grids:
        by_cat.setdefault(g[3], []).append(g)
    for cat, items in by_cat.items():
        prompt = Prompt(_category_index(cat), fmt, trajectory)
        cache = prefix_cache(weights, prompt)
        for s in range(0, len(items), batch):
            chunk = items[s:s + batch]
            decs = decode(weights, prompt, np.stack([c[0] for c in chunk]), cache=cache)
            for (img, placement, best, _), d in zip(chunk, decs):
                want = target_tokens(cfg, fmt, placement[best].id, best, layout)
                hits += int(d.tokens == want)
    return hits / max(1, len(grids))


@dataclass
class TrainResult:
    weights: ModelWeights
    accuracy: float
    action_accuracy: float
    losses: list
    diverged: bool = False


def _batch_loss(weights: ModelWeights, batch, layout, fmt: str, trajectory: bool) -> Tensor:
    cfg = weights.config
    groups: dict = {}
    for item in batch:
        groups.setdefault(item[3], []).append(item)
    total = None
    count = 0
    for cat, items in groups.items():
        prompt = Prompt(_category_index(cat), fmt, trajectory)
        imgs = Tensor(np.stack([it[0] for it in items]))
        targets = [target_tokens(cfg, fmt, it[1][it[2]].id, it[2], layout) + [EOS] for it in items]
        # teacher forcing: feed all but EOS; row i predicts targets[i]
        outs = np.array([t[:-1] for t in targets])
        b = len(items)
        segs_head = embed_tokens(weights, prompt.query_tokens(cfg), b)
        img_emb, _ = patchify(weights, imgs)
        tail_ids = np.concatenate([np.full((b, 1), ASSIST), outs], axis=1)
        segs = [segs_head, img_emb, ad.embedding(weights["tok_emb"], tail_ids)]
        segs = _frame_segments(weights, prompt, b) + segs
        n_tail = tail_ids.shape[1]
        t_total = sum(s.shape[1] for s in segs)
        rows = list(range(t_total - n_tail, t_total))
        vis = [False, True] * prompt.trajectory + [False, True, False]
        logits, _, _ = run_segments(weights, segs, None, logits_rows=rows, vision=vis)
        logp = ad.log_softmax(logits)
        tgt = np.array(targets)
        onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
        bi, ri = np.meshgrid(np.arange(b), np.arange(n_tail), indexing="ij")
        onehot[bi, ri, tgt] = 1.0
        nll = ad.sum_(ad.mul(logp, Tensor(onehot)))
        total = nll if total is None else ad.add(total, nll)
        count += b * n_tail
    return ad.scale(total, -1.0 / count)


def train_selection_task(catalog, layout, config: ModelConfig | None = None,
                         train: TrainConfig | None = None, seed: int = 0,
                         weights: ModelWeights | None = None, products=None,
                         log=None) -> TrainResult:
    """Supervised training of the victim on max-quality selection.

    Aborts on a non-finite loss and returns the last finite weights with
    ``diverged=True``.
    """
    config = config or ModelConfig(n_products=max(len(catalog), 1))
    train = train or TrainConfig()
    weights = weights.clone() if weights is not None else ModelWeights.init(config, seed)
    rng = stream(seed, "data-gen/train")
    held = sample_training_grids(catalog, layout, stream(seed, "data-gen/heldout"),
                                 train.eval_grids, 0.1, products)
    state = ad.AdamState(lr=train.lr, beta1=0.9, beta2=0.98)
    names = weights.names()
    losses = []
    last_good = weights.clone()
    diverged = False
    weights.requires_grad_(True)
    for step in range(train.steps):
        fmt = FORMAT_ACTION if rng.random() < train.action_fraction else FORMAT_NAME
        traj = step % train.trajectory_every == 0
        batch = sample_training_grids(catalog, layout, rng, train.batch, train.single_fraction, products)
        with ad.Tape():
            loss = _batch_loss(weights, batch, layout, fmt, traj)
        lv = float(loss.data)
        if not np.isfinite(lv):
            diverged = True
            weights = last_good
            break
        ad.backward(loss)
        grads = [weights[n].grad for n in names]
        warm = min(1.0, (step + 1) / max(1, train.warmup))
        decay = 0.5 * (1 + math.cos(math.pi * step / max(1, train.steps)))
        state.lr = train.lr * warm * (0.05 + 0.95 * decay)
        ad.adam_step([weights[n] for n in names], grads, state, clip_norm=train.clip_norm)
        losses.append(lv)
        if step % 100 == 0:
            last_good = weights.clone()
            last_good.requires_grad_(True)
            if log:
                log(f"step {step} loss {np.mean(losses[-100:]):.4f}")
    weights.requires_grad_(False)
    for t in weights.params.values():
        t.grad = None
    acc = selection_accuracy(weights, held, layout, FORMAT_NAME, True)
    acc_a = selection_accuracy(weights, held, layout, FORMAT_ACTION, True)
    return TrainResult(weights, acc, acc_a, losses, diverged)


def perturb_finetune(weights: ModelWeights, catalog, layout, steps: int = 150, seed: int = 0,
                     lr: float = 5e-4, min_accuracy: float = 0.5) -> ModelWeights:
    """Briefly fine-tune a clone on fresh grids from the held-out catalog
    splits; yields a grey-box transfer target. Halves ``steps`` and retries
    if accuracy collapses below ``min_accuracy``."""
    if steps <= 0:
        return weights.clone()
    from .scene import SPLIT_OPT

    held_out = [p for p in catalog.products if p.split != SPLIT_OPT]
    while steps > 0:
        tc = TrainConfig(steps=steps, lr=lr, warmup=10, eval_grids=100)
        res = train_selection_task(catalog, layout, weights.config, tc, seed=seed + 7919,
                                   weights=weights, products=held_out)
        if res.accuracy >= min_accuracy and not res.diverged:
            return res.weights
        steps //= 2
    return weights.clone()
