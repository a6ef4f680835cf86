"""Procedural catalog, webshop-grid rendering and patch compositing.

Geometry (defaults): a 48x240 RGB canvas holding N=5 tiles of 36x36 at
x-offsets 6, 54, 102, 150, 198 and y-offset 6. The offsets are deliberately
not multiples of the 12-pixel vision patch, so every tile spills into a ring
of partially covered cells.

Each tile carries a *tag cell* (tile-local rows 26..33, cols 10..17): four
1-pixel colour bars encoding the product code, next to a 4-pixel-wide grey
logo whose luminance equals the product quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .rng import stream

TILE = 36
SLOT_PITCH = 48
MARGIN = 6
CANVAS_H = 48
PAGE_GREY = 0.9

TAG_ROW = 26
BAR_COL = 10
LOGO_COL = 14
N_BARS = 4
PALETTE = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=np.float32,
)

CATEGORIES = (
    "T-shirts", "Shirts", "Casual Shoes", "Watches", "Sports Shoes",
    "Kurtas", "Tops", "Handbags", "Heels", "Sunglasses",
)
BRANDS = ("Nike", "Adidas", "Puma", "Asics", "Fila", "Reebok", "Titan", "Fossil", "Skagen",
          "Lotto", "Vans", "Biba", "Mango", "Gini", "Catwalk", "Rocia", "Fastrack", "Kenneth")
GENDERS = ("Men", "Women", "Unisex")
MODELS = ("Revolution", "Lunar", "Swift", "Pulse", "Tipoff", "Classic", "Urban", "Aero",
          "Nova", "Orbit", "Vista", "Prime", "Echo", "Zen", "Storm", "Ridge")
COLOURS = ("Black", "White", "Olive", "Red", "Blue", "Grey", "Lavender", "Navy", "Brown",
           "Green", "Pink", "Yellow")

SPLIT_OPT, SPLIT_VAL, SPLIT_TEST = "opt", "val", "test"
MAX_PRODUCTS = 64


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class ProductSpec:
    id: int
    name: str
    brand: str
    category: str
    code: tuple
    quality: float
    split: str = SPLIT_TEST

    @property
    def words(self) -> list[str]:
        return self.name.split()


@dataclass(frozen=True)
class Catalog:
    products: tuple
    n_positions: int = 5
    seed: int = 0

    def __post_init__(self):
        ids = [p.id for p in self.products]
        if len(set(ids)) != len(ids):
            raise CatalogError("product ids are not unique")
        pools = [set(p.id for p in self.split(s)) for s in (SPLIT_OPT, SPLIT_VAL, SPLIT_TEST)]
        if pools[0] & pools[1] or pools[0] & pools[2] or pools[1] & pools[2]:
            raise CatalogError("catalog splits overlap")

    def __len__(self) -> int:
        return len(self.products)

    def __getitem__(self, pid: int) -> ProductSpec:
        return self._by_id()[pid]

    def _by_id(self) -> dict:
        return {p.id: p for p in self.products}

    def split(self, name: str) -> list[ProductSpec]:
        return [p for p in self.products if p.split == name]

    @property
    def optimization_pool(self) -> list[ProductSpec]:
        return self.split(SPLIT_OPT)

    @property
    def validation_pool(self) -> list[ProductSpec]:
        return self.split(SPLIT_VAL)

    @property
    def test_pool(self) -> list[ProductSpec]:
        return self.split(SPLIT_TEST)

    @property
    def categories(self) -> list[str]:
        seen = []
        for p in self.products:
            if p.category not in seen:
                seen.append(p.category)
        return seen

    def by_code(self, code: Sequence[int]) -> ProductSpec | None:
        code = tuple(int(c) for c in code)
        for p in self.products:
            if p.code == code:
                return p
        return None

    def to_jsonl(self, path: str | Path) -> None:
        lines = [
            json.dumps({"id": p.id, "name": p.name, "brand": p.brand, "category": p.category,
                        "quality": p.quality, "split": p.split, "code": list(p.code)},
                       sort_keys=True)
            for p in self.products
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, n_positions: int = 5) -> "Catalog":
        products = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            products.append(ProductSpec(int(r["id"]), r["name"], r["brand"], r["category"],
                                        tuple(r["code"]), float(r["quality"]), r["split"]))
        return cls(tuple(products), n_positions)


def generate_catalog(seed: int, count: int = 40, n_categories: int = 2, n_positions: int = 5,
                     n_val: int = 6) -> Catalog:
    """Deterministic procedural catalog.

    Qualities are a random permutation of the evenly spaced levels
    ``(k + 0.5) / count``, i.e. uniform marginals with a guaranteed gap.
    Splits are filled by interleaving categories: the first ``5N - 1``
    products form the optimisation pool, the next ``n_val`` the validation
    pool, the rest the test pool.
    """
    n_opt = 5 * n_positions - 1
    if n_categories < 1 or n_categories > len(CATEGORIES):
        raise CatalogError(f"n_categories must be in [1, {len(CATEGORIES)}]")
    if count < n_opt + n_val + n_positions:
        raise CatalogError(
            f"count={count} too small: need {n_opt} optimisation + {n_val} validation"
            f" + {n_positions} test products"
        )
    if count > MAX_PRODUCTS:
        raise CatalogError("count exceeds the product-token budget of 64")
    rng = stream(seed, "data-gen/catalog")
    cats = [CATEGORIES[i] for i in range(n_categories)]
    qualities = (rng.permutation(count) + 0.5) / count
    codes = rng.choice(len(PALETTE) ** N_BARS, size=count, replace=False)

    names = set()
    raw = []
    for pid in range(count):
        cat = cats[pid % n_categories]
        while True:
            brand = str(rng.choice(BRANDS))
            name = " ".join([brand, str(rng.choice(GENDERS)), str(rng.choice(MODELS)),
                             str(rng.choice(COLOURS)), cat])
            if name not in names:
                names.add(name)
                break
        digits = tuple(int(codes[pid]) // len(PALETTE) ** k % len(PALETTE) for k in range(N_BARS))
        raw.append(dict(id=pid, name=name, brand=brand, category=cat, code=digits,
                        quality=float(qualities[pid])))

    # interleave categories after shuffling within each
    per_cat = {c: [r for r in raw if r["category"] == c] for c in cats}
    for c in cats:
        order = rng.permutation(len(per_cat[c]))
        per_cat[c] = [per_cat[c][i] for i in order]
    ordered = []
    while any(per_cat.values()):
        for c in cats:
            if per_cat[c]:
                ordered.append(per_cat[c].pop(0))
    split_of = {}
    for rank, r in enumerate(ordered):
        split_of[r["id"]] = SPLIT_OPT if rank < n_opt else SPLIT_VAL if rank < n_opt + n_val else SPLIT_TEST
    products = tuple(ProductSpec(split=split_of[r["id"]], **r) for r in raw)
    return Catalog(products, n_positions, seed)


# ---------------------------------------------------------------- rendering


def _q(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


_CAT_COLOURS = np.array(
    [[0.55, 0.62, 0.72], [0.70, 0.60, 0.50], [0.52, 0.68, 0.55], [0.66, 0.55, 0.68],
     [0.72, 0.70, 0.48], [0.50, 0.66, 0.70], [0.70, 0.52, 0.56], [0.60, 0.60, 0.60],
     [0.58, 0.50, 0.64], [0.64, 0.66, 0.60]], dtype=np.float32)


def render_tile(product: ProductSpec) -> np.ndarray:
    """36x36x3 float image on the 8-bit grid; pure function of the spec."""
    rng = stream(product.id * 7919 + sum(product.code), "data-gen/tile")
    cat = CATEGORIES.index(product.category) if product.category in CATEGORIES else 0
    base = _CAT_COLOURS[cat % len(_CAT_COLOURS)]
    yy, xx = np.mgrid[0:TILE, 0:TILE].astype(np.float32) / (TILE - 1)
    img = base[None, None, :] * (0.9 + 0.15 * yy[..., None])
    # product "photo": an ellipse in a product colour plus faint texture
    colour = rng.uniform(0.2, 0.85, size=3).astype(np.float32)
    cy, cx = rng.uniform(0.3, 0.45), rng.uniform(0.35, 0.65)
    ry, rx = rng.uniform(0.15, 0.25), rng.uniform(0.2, 0.3)
    blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[blob] = colour
    img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.08, 0.92)
    # tag cell: colour bars + quality logo
    for k, digit in enumerate(product.code):
        img[TAG_ROW:TAG_ROW + 8, BAR_COL + k] = PALETTE[digit]
    img[TAG_ROW:TAG_ROW + 8, LOGO_COL:LOGO_COL + 4] = product.quality
    return _q(img)


def decode_tile(tile: np.ndarray) -> tuple[tuple, float]:
    """Reference decoder: (code digits, measured logo luminance)."""
    bars = tile[TAG_ROW:TAG_ROW + 8, BAR_COL:BAR_COL + N_BARS].mean(axis=0)
    digits = tuple(int(np.argmin(((PALETTE - bar) ** 2).sum(axis=1))) for bar in bars)
    lum = float(tile[TAG_ROW:TAG_ROW + 8, LOGO_COL:LOGO_COL + 4].mean())
    return digits, lum


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class GridLayout:
    n_positions: int = 5
    tile: int = TILE
    pitch: int = SLOT_PITCH
    margin: int = MARGIN
    height: int = CANVAS_H

    @property
    def width(self) -> int:
        return self.pitch * self.n_positions

    @property
    def canvas_shape(self) -> tuple:
        return (self.height, self.width, 3)

    def slot(self, n: int) -> tuple:
        """(y0, x0, h, w) of slot ``n``."""
        if not 0 <= n < self.n_positions:
            raise IndexError(f"slot {n} outside 0..{self.n_positions - 1}")
        return (self.margin, self.margin + self.pitch * n, self.tile, self.tile)

    def slot_mask(self, n: int) -> np.ndarray:
        y0, x0, h, w = self.slot(n)
        m = np.zeros(self.canvas_shape[:2], dtype=bool)
        m[y0:y0 + h, x0:x0 + w] = True
        return m

    def bounding_box(self, n: int) -> BoundingBox:
        y0, x0, h, w = self.slot(n)
        return BoundingBox(x0, y0, x0 + w - 1, y0 + h - 1)

    def bounding_boxes(self) -> list[BoundingBox]:
        return [self.bounding_box(n) for n in range(self.n_positions)]


def blank_canvas(layout: GridLayout) -> np.ndarray:
    return np.full(layout.canvas_shape, PAGE_GREY, dtype=np.float32)


def blank_browser_frame(layout: GridLayout) -> np.ndarray:
    """The trajectory's prior frame: an empty browser window."""
    img = np.full(layout.canvas_shape, 0.97, dtype=np.float32)
    img[0:5] = 0.75
    img[1:4, 8:layout.width // 2] = 1.0
    return _q(img)


_TILE_CACHE: dict = {}


def tile_for(product: ProductSpec) -> np.ndarray:
    key = (product.id, product.code, product.quality, product.category)
    if key not in _TILE_CACHE:
        _TILE_CACHE[key] = render_tile(product)
    return _TILE_CACHE[key]


def render_grid(layout: GridLayout, placement: dict) -> np.ndarray:
    """Canvas with ``placement[slot]`` (a ProductSpec or an image) in each slot."""
    canvas = blank_canvas(layout)
    for n, item in placement.items():
        if item is None:
            continue
        y0, x0, h, w = layout.slot(n)
        canvas[y0:y0 + h, x0:x0 + w] = item if isinstance(item, np.ndarray) else tile_for(item)
    return canvas


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class GridScene:
    """Background for one target: N-1 distractors filling every slot except
    ``target_slot``, in order. ``version`` counts distractor swaps."""

    layout: GridLayout
    distractors: tuple
    target_slot: int = 0
    version: int = 0
    target_id: int | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.distractors) != self.layout.n_positions - 1:
            raise ValueError(f"need {self.layout.n_positions - 1} distractors, got {len(self.distractors)}")

    def at(self, slot: int) -> "GridScene":
        return replace(self, target_slot=slot, _cache=self._cache)

    def assignment(self) -> dict:
        """slot -> ProductSpec for the distractors."""
        slots = [n for n in range(self.layout.n_positions) if n != self.target_slot]
        return dict(zip(slots, self.distractors))

    def background(self) -> np.ndarray:
        key = (self.target_slot, tuple(p.id for p in self.distractors))
        if key not in self._cache:
            self._cache[key] = render_grid(self.layout, self.assignment())
        return self._cache[key]


def compose(patch, slot: int, scene: GridScene):
    """Paste ``patch`` into ``scene`` at ``slot``.

    Returns ``(canvas, mask)``; the canvas is a Tensor differentiable w.r.t.
    ``patch`` only (when given as a Tensor) and ``mask`` marks the slot.
    """
    layout = scene.layout
    y0, x0, h, w = layout.slot(slot)
    patch = patch if isinstance(patch, ad.Tensor) else ad.Tensor(patch)
    if patch.shape != (h, w, 3):
        raise ValueError(f"patch shape {patch.shape} does not match slot extents {(h, w, 3)}")
    bg = scene.at(slot).background()
    return ad.paste(bg, patch, y0, x0), layout.slot_mask(slot)


def swap_distractor(scene: GridScene, pool: Sequence[ProductSpec], rng: np.random.Generator) -> GridScene:
    """Replace one uniformly chosen distractor by a pool product not already
    on the grid; bumps ``version``."""
    if not pool:
        raise ValueError("distractor pool is empty")
    j = int(rng.integers(len(scene.distractors)))
    present = {p.id for p in scene.distractors}
    choices = [p for p in pool if p.id not in present] or list(pool)
    new = choices[int(rng.integers(len(choices)))]
    ds = list(scene.distractors)
    ds[j] = new
    return replace(scene, distractors=tuple(ds), version=scene.version + 1, _cache={})


def initial_scene(catalog: Catalog, layout: GridLayout, rng: np.random.Generator,
                  target_id: int | None = None) -> GridScene:
    pool = catalog.optimization_pool
    idx = rng.choice(len(pool), size=layout.n_positions - 1, replace=False)
    return GridScene(layout, tuple(pool[i] for i in idx), 0, 0, target_id)


@dataclass(frozen=True)
class EvalGrid:
    scene: GridScene
    boxes: tuple
    index: int


def sample_eval_grids(target: ProductSpec, catalog: Catalog, layout: GridLayout, reps: int = 5,
                      seed: int = 0, split: str = SPLIT_TEST) -> list[EvalGrid]:
    """``reps`` grids per position with the target at that position and
    same-category distractors drawn without replacement from ``split``."""
    pool = [p for p in catalog.split(split) if p.category == target.category and p.id != target.id]
    need = layout.n_positions - 1
    if len(pool) < need:
        raise CatalogError(
            f"{split} split has {len(pool)} '{target.category}' products besides the target; need {need}"
        )
    rng = stream(seed, f"eval-grids/{target.id}/{split}")
    boxes = tuple(layout.bounding_boxes())
    grids = []
    for slot in range(layout.n_positions):
        for _ in range(reps):
            idx = rng.choice(len(pool), size=need, replace=False)
            scene = GridScene(layout, tuple(pool[i] for i in idx), slot, 0, target.id)
            grids.append(EvalGrid(scene, boxes, len(grids)))
    return grids


def sample_validation_grids(catalog: Catalog, layout: GridLayout, count: int = 5,
                            seed: int = 0) -> list[GridScene]:
    """Held-out distractor sets for candidate validation (target slot unset)."""
    pool = catalog.validation_pool
    need = layout.n_positions - 1
    if len(pool) < need:
        raise CatalogError(f"validation pool has {len(pool)} products; need {need}")
    rng = stream(seed, "validation-grids")
    return [GridScene(layout, tuple(pool[i] for i in rng.choice(len(pool), size=need, replace=False)))
            for _ in range(count)]


# ---------------------------------------------------------------- png io


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)
