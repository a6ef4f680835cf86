import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from praclab import autodiff as ad
from praclab import scene as sc
from praclab.rng import stream


def test_default_catalog_shape(catalog):
    assert len(catalog) == 40
    sizes = {s: len(catalog.split(s)) for s in (sc.SPLIT_OPT, sc.SPLIT_VAL, sc.SPLIT_TEST)}
    assert sizes == {sc.SPLIT_OPT: 24, sc.SPLIT_VAL: 6, sc.SPLIT_TEST: 10}
    ids = [set(p.id for p in catalog.split(s)) for s in sizes]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    for cat in catalog.categories:
        assert sum(p.category == cat for p in catalog.test_pool) >= catalog.n_positions


def test_catalog_is_deterministic(tmp_path):
    sc.generate_catalog(7).to_jsonl(tmp_path / "a.jsonl")
    sc.generate_catalog(7).to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    sc.generate_catalog(8).to_jsonl(tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_catalog_roundtrip(tmp_path, catalog):
    catalog.to_jsonl(tmp_path / "cat.jsonl")
    again = sc.Catalog.from_jsonl(tmp_path / "cat.jsonl")
    assert again.products == catalog.products


def test_undersized_catalog_rejected():
    with pytest.raises(sc.CatalogError):
        sc.generate_catalog(0, count=20)


def test_names_contain_brand_and_are_unique(catalog):
    names = [p.name for p in catalog.products]
    assert len(set(names)) == len(names)
    assert all(p.name.split()[0] == p.brand for p in catalog.products)


def test_tile_encodes_code_and_quality(catalog):
    for p in catalog.products:
        tile = sc.render_tile(p)
        assert tile.shape == (sc.TILE, sc.TILE, 3)
        np.testing.assert_array_equal(np.round(tile * 255) / 255, tile)
        code, lum = sc.decode_tile(tile)
        assert code == p.code
        assert abs(lum - p.quality) <= 0.5 / 255 + 1e-6


def test_layout_geometry(layout):
    assert layout.canvas_shape == (48, 240, 3)
    assert [layout.slot(n)[1] for n in range(5)] == [6, 54, 102, 150, 198]
    assert all(layout.slot(n)[0] == 6 for n in range(5))
    box = layout.bounding_box(4)
    assert box.contains(198, 6) and box.contains(233, 41)
    assert not box.contains(234, 41)


def test_compose_only_touches_slot(catalog, layout):
    scene = sc.GridScene(layout, tuple(catalog.optimization_pool[:4]), 0)
    patch = ad.Tensor(np.full((36, 36, 3), 0.5, dtype=np.float32), requires_grad=True)
    for slot in range(5):
        with ad.Tape():
            canvas, mask = sc.compose(patch, slot, scene)
            loss = ad.sum_(canvas)
        bg = scene.at(slot).background()
        np.testing.assert_array_equal(canvas.data[~mask], bg[~mask])
        assert mask.sum() == 36 * 36
        ad.backward(loss)
        np.testing.assert_array_equal(patch.grad, np.ones((36, 36, 3)))


def test_swap_changes_exactly_one(catalog, layout):
    pool = catalog.optimization_pool
    scene = sc.GridScene(layout, tuple(pool[:4]), 0)
    rng = stream(0, "test")
    for _ in range(50):
        new = sc.swap_distractor(scene, pool, rng)
        diff = [a.id != b.id for a, b in zip(scene.distractors, new.distractors)]
        assert sum(diff) == 1
        assert len({p.id for p in new.distractors}) == 4
        assert new.version == scene.version + 1
        scene = new


def test_eval_grid_coverage(catalog, layout):
    target = catalog.test_pool[0]
    grids = sc.sample_eval_grids(target, catalog, layout, reps=5, seed=3)
    assert len(grids) == 25
    slots = [g.scene.target_slot for g in grids]
    assert all(slots.count(n) == 5 for n in range(5))
    for g in grids:
        ids = [p.id for p in g.scene.distractors]
        assert target.id not in ids and len(set(ids)) == 4
        assert all(p.category == target.category and p.split == sc.SPLIT_TEST for p in g.scene.distractors)


def test_validation_grids_use_validation_pool(catalog, layout):
    val_ids = {p.id for p in catalog.validation_pool}
    for g in sc.sample_validation_grids(catalog, layout, 5, seed=1):
        assert {p.id for p in g.distractors} <= val_ids


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_png_roundtrip_is_exact_on_the_8bit_grid(seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(5, 7, 3)).astype(np.float32) / 255
    import tempfile, os
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.png")
        sc.save_png(path, img)
        np.testing.assert_array_equal(sc.load_png(path), img)


def test_tiles_are_distinct_and_ordered_by_quality(catalog):
    from dataclasses import replace

    tiles = [sc.render_tile(p) for p in catalog.products]
    for i in range(len(tiles)):
        for j in range(i + 1, len(tiles)):
            assert not np.array_equal(tiles[i], tiles[j])
    p = catalog.products[0]
    _, lo = sc.decode_tile(sc.render_tile(replace(p, quality=0.0)))
    _, hi = sc.decode_tile(sc.render_tile(replace(p, quality=1.0)))
    assert lo < hi


def test_swap_slot_frequencies_are_uniform(catalog, layout):
    pool = catalog.optimization_pool
    scene = sc.GridScene(layout, tuple(pool[:4]), 0)
    rng = stream(5, "swap-frequency")
    counts = np.zeros(4)
    for _ in range(400):
        new = sc.swap_distractor(scene, pool, rng)
        counts[[a.id != b.id for a, b in zip(scene.distractors, new.distractors)].index(True)] += 1
        scene = new
    np.testing.assert_allclose(counts / 400, 0.25, atol=0.05)
    assert scene.version == 400


def test_bounding_boxes_tile_slots(layout):
    for n in range(layout.n_positions):
        box = layout.bounding_box(n)
        ys, xs = np.nonzero(layout.slot_mask(n))
        assert (box.x_min, box.x_max, box.y_min, box.y_max) == (xs.min(), xs.max(), ys.min(), ys.max())
        assert (box.x_max - box.x_min + 1) * (box.y_max - box.y_min + 1) == layout.slot_mask(n).sum()
