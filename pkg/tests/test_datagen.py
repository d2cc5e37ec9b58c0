import json
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from pcdnet.datagen import (
    GRID_SHADE,
    NUM_SHAPES,
    PALETTE,
    SHAPES,
    SpriteSpec,
    _sample_scene,
    compose_scene,
    generate_dataset,
    load_dataset,
    render_sprite,
    shape_cells,
)
from pcdnet.errors import InvalidArgumentError


class TestShapeTable:
    def test_nineteen_distinct_orientations(self):
        assert NUM_SHAPES == 19
        assert len({cells for _, cells in SHAPES}) == 19
        counts = Counter(name[0] for name, _ in SHAPES)
        assert counts == {"I": 2, "O": 1, "T": 4, "S": 2, "Z": 2, "J": 4, "L": 4}

    def test_every_shape_has_four_cells(self):
        for shape_id in range(NUM_SHAPES):
            assert len(shape_cells(shape_id)) == 4


class TestRenderSprite:
    def test_o_piece_is_square_block(self):
        o_id = next(i for i, (name, _) in enumerate(SHAPES) if name == "O0")
        _, mask = render_sprite(SpriteSpec(o_id, 0, 0, 0), cell_size=5)
        assert mask.shape == (10, 10)
        assert mask.all()
        assert mask.sum() == (2 * 5) ** 2

    def test_i_orientations_are_transposes(self):
        ids = [i for i, (name, _) in enumerate(SHAPES) if name.startswith("I")]
        _, horizontal = render_sprite(SpriteSpec(ids[0], 0, 0, 0), cell_size=4)
        _, vertical = render_sprite(SpriteSpec(ids[1], 0, 0, 0), cell_size=4)
        np.testing.assert_array_equal(horizontal.T, vertical)

    def test_mask_area_is_four_cells_for_every_shape(self):
        for shape_id in range(NUM_SHAPES):
            for cell in (3, 5):
                _, mask = render_sprite(SpriteSpec(shape_id, 0, 0, 0), cell_size=cell)
                assert mask.sum() == 4 * cell * cell, shape_id

    def test_foreground_colors_are_palette_or_shaded_palette(self):
        for color_id in range(len(PALETTE)):
            img, mask = render_sprite(SpriteSpec(5, color_id, 0, 0), cell_size=5)
            color = PALETTE[color_id]
            pixels = img[mask]
            full = np.all(pixels == color, axis=1)
            shaded = np.all(pixels == color * GRID_SHADE, axis=1)
            assert np.all(full | shaded)
            assert full.any() and shaded.any()  # grid lines exist

    def test_grid_lines_only_between_adjacent_cells(self):
        o_id = next(i for i, (name, _) in enumerate(SHAPES) if name == "O0")
        img, _ = render_sprite(SpriteSpec(o_id, 3, 0, 0), cell_size=5)
        brightness = img.sum(axis=2)
        full = brightness[2, 2]  # cell interior
        assert (brightness[5, :] == full * GRID_SHADE).all()  # row between cells
        assert (brightness[:, 5] == full * GRID_SHADE).all()  # column between cells
        off_line = [0, 1, 2, 3, 4, 6, 7, 8, 9]
        assert (brightness[0, off_line] == full).all()  # outer border keeps full color
        assert (brightness[off_line, 0] == full).all()

    def test_rejects_invalid_ids(self):
        with pytest.raises(InvalidArgumentError):
            render_sprite(SpriteSpec(19, 0, 0, 0))
        with pytest.raises(InvalidArgumentError):
            render_sprite(SpriteSpec(0, 6, 0, 0))
        with pytest.raises(InvalidArgumentError):
            render_sprite(SpriteSpec(0, 0, 0, 0), cell_size=0)


class TestComposeScene:
    def test_labels_consistent_with_image(self):
        specs = [SpriteSpec(0, 0, 0, 0), SpriteSpec(2, 1, 10, 10), SpriteSpec(5, 2, 22, 20)]
        labeled = compose_scene(specs)
        fg = labeled.image.sum(axis=2) > 0
        np.testing.assert_array_equal(fg, labeled.instance_mask > 0)
        np.testing.assert_array_equal(fg, labeled.semantic_mask > 0)
        assert set(np.unique(labeled.instance_mask)) == {0, 1, 2, 3}
        for k, spec in enumerate(specs):
            sem = labeled.semantic_mask[labeled.instance_mask == k + 1]
            assert (sem == spec.shape_id + 1).all()


class TestSampleScene:
    def test_sprites_never_overlap(self):
        rng = np.random.default_rng(77)
        for _ in range(40):
            specs = _sample_scene(rng, 35, 5)
            assert len(specs) == 3
            masks = []
            for spec in specs:
                _, m = render_sprite(spec, 5)
                full = np.zeros((35, 35), dtype=bool)
                full[spec.row : spec.row + m.shape[0], spec.col : spec.col + m.shape[1]] = m
                masks.append(full)
            assert not (masks[0] & masks[1]).any()
            assert not (masks[0] & masks[2]).any()
            assert not (masks[1] & masks[2]).any()

    def test_shape_frequency_roughly_uniform(self):
        rng = np.random.default_rng(5)
        counts = np.zeros(NUM_SHAPES, dtype=int)
        sprites = 0
        while sprites < 10500:
            for spec in _sample_scene(rng, 35, 5):
                counts[spec.shape_id] += 1
                sprites += 1
        result = stats.chisquare(counts)
        assert result.pvalue > 0.001, counts


class TestGenerateDataset:
    def test_deterministic_manifests(self, tmp_path):
        generate_dataset(8, seed=3, out_dir=tmp_path / "a")
        generate_dataset(8, seed=3, out_dir=tmp_path / "b")
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (
            tmp_path / "b/manifest.jsonl"
        ).read_bytes()
        img = (tmp_path / "a/images/000003.png").read_bytes()
        assert img == (tmp_path / "b/images/000003.png").read_bytes()

    def test_three_instances_per_image(self, tmp_path):
        generate_dataset(5, seed=1, out_dir=tmp_path)
        ds = load_dataset(tmp_path)
        for i in range(5):
            labels = set(np.unique(ds.instance_masks[i]))
            assert labels == {0, 1, 2, 3}

    def test_mask_union_equals_foreground(self, tmp_path):
        generate_dataset(5, seed=2, out_dir=tmp_path)
        ds = load_dataset(tmp_path)
        for i in range(5):
            fg = ds.images[i].sum(axis=2) > 0
            np.testing.assert_array_equal(fg, ds.instance_masks[i] > 0)

    def test_rejects_zero_images(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            generate_dataset(0, seed=0, out_dir=tmp_path)

    def test_manifest_records_match_files(self, tmp_path):
        records = generate_dataset(3, seed=9, out_dir=tmp_path)
        lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 3
        for rec, line in zip(records, lines):
            parsed = json.loads(line)
            assert parsed == json.loads(json.dumps(rec, sort_keys=True))
            assert (tmp_path / parsed["image"]).exists()
            assert (tmp_path / parsed["mask"]).exists()
            assert len(parsed["sprites"]) == 3


class TestLoadDataset:
    def test_labeled_round_trip(self, tmp_path):
        records = generate_dataset(4, seed=11, out_dir=tmp_path)
        ds = load_dataset(tmp_path)
        assert ds.labeled and len(ds) == 4
        assert ds.images.shape == (4, 35, 35, 3)
        assert ds.images.dtype == np.float32
        # PNG round trip preserves values to 8-bit quantization
        specs = [SpriteSpec(**s) for s in records[0]["sprites"]]
        scene = compose_scene(specs)
        assert np.max(np.abs(ds.images[0] - scene.image)) <= 1.0 / 255.0 + 1e-6
        np.testing.assert_array_equal(ds.instance_masks[0], scene.instance_mask)
        np.testing.assert_array_equal(ds.semantic_masks[0], scene.semantic_mask)

    def test_bare_png_directory(self, tmp_path):
        generate_dataset(3, seed=0, out_dir=tmp_path / "full")
        bare = tmp_path / "bare"
        bare.mkdir()
        for p in sorted((tmp_path / "full/images").glob("*.png")):
            (bare / p.name).write_bytes(p.read_bytes())
        ds = load_dataset(bare)
        assert not ds.labeled
        assert len(ds) == 3

    def test_empty_directory_is_an_error(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            load_dataset(tmp_path)
