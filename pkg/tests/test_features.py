import numpy as np
import pytest

from oids.errors import DataError, ObjectInvisibleError
from oids.features import (
    FeatureConfig,
    ObjectFeatures,
    PatchFeatureMap,
    aggregate_multiview,
    background_code,
    extract_scene_features,
    intersecting_patches,
    label_code,
    pair_code,
    pool_image,
    read_feature_cache,
    select_single_view,
    synth_patch_features,
    synth_point_features,
    write_feature_cache,
)
from oids.projection import CameraView, Mask2D, look_at_extrinsics
from oids.scene import ObjectProposal, PointCloud, make_scene


def mask_of(bits):
    bits = np.asarray(bits, dtype=bool)
    return Mask2D(width=bits.shape[1], height=bits.shape[0], bits=bits)


def blank_mask(h=64, w=64):
    return mask_of(np.zeros((h, w), dtype=bool))


def random_map(rng, grid=4, dim=8):
    patches = rng.normal(size=(grid * grid, dim)).astype(np.float32)
    return PatchFeatureMap(grid=grid, dim=dim, cls=patches.mean(axis=0), patches=patches)


def cloud_xyz(xyz, rgb=0.5):
    xyz = np.asarray(xyz, dtype=np.float64)
    return PointCloud(np.hstack([xyz, np.full_like(xyz, rgb)]))


class TestIntersectingPatches:
    def test_all_false(self):
        assert intersecting_patches(blank_mask(), 16) == set()

    def test_all_true(self):
        mask = mask_of(np.ones((64, 64), dtype=bool))
        assert intersecting_patches(mask, 16) == set(range(256))

    def test_corner_pixel(self):
        bits = np.zeros((64, 64), dtype=bool)
        bits[0, 0] = True
        assert intersecting_patches(mask_of(bits), 16) == {0}

    def test_non_divisible_dimensions(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[9, 9] = True  # ceil(10/16)=1 px cells: patch row 9, col 9
        assert intersecting_patches(mask_of(bits), 16) == {9 * 16 + 9}

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(3)
        bits = rng.random((50, 70)) < 0.03
        grid = 8
        got = intersecting_patches(mask_of(bits), grid)
        ch, cw = -(-50 // grid), -(-70 // grid)
        want = set()
        for r in range(50):  # oracle: classify each true pixel independently
            for c in range(70):
                if bits[r, c]:
                    want.add((r // ch) * grid + (c // cw))
        assert got == want


class TestPoolImage:
    def test_empty_set_is_none(self):
        assert pool_image(random_map(np.random.default_rng(0)), set()) is None

    def test_singleton_is_exact_row(self):
        fmap = random_map(np.random.default_rng(1))
        out = pool_image(fmap, {5})
        assert np.array_equal(out, fmap.patches[5].astype(np.float64))

    def test_two_patch_mean(self):
        fmap = random_map(np.random.default_rng(2))
        out = pool_image(fmap, {3, 7})
        want = (fmap.patches[3].astype(np.float64) + fmap.patches[7].astype(np.float64)) / 2
        np.testing.assert_allclose(out, want, rtol=0, atol=0)

    def test_random_subset_matches_summation_oracle(self):
        fmap = random_map(np.random.default_rng(4), grid=6, dim=16)
        subset = {2, 9, 11, 20, 33}
        out = pool_image(fmap, subset)
        acc = np.zeros(16, dtype=np.float64)
        for p in sorted(subset):  # oracle: direct elementwise accumulation
            acc = acc + fmap.patches[p]
        np.testing.assert_allclose(out, acc / len(subset), rtol=1e-15)

    def test_full_grid_equals_mean_of_rows(self):
        fmap = random_map(np.random.default_rng(5))
        out = pool_image(fmap, set(range(16)))
        np.testing.assert_allclose(out, fmap.patches.astype(np.float64).mean(axis=0), rtol=1e-15)

    def test_out_of_grid_index_rejected(self):
        with pytest.raises(ValueError):
            pool_image(random_map(np.random.default_rng(6)), {99})


class TestAggregateMultiview:
    def test_single_visible_view_passthrough(self):
        v = np.random.default_rng(0).normal(size=12)
        out = aggregate_multiview([(None, 0), (v, 40), (None, 3)])
        assert np.array_equal(out, v)

    def test_equal_areas_unweighted_mean(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=8), rng.normal(size=8)
        out = aggregate_multiview([(a, 20), (b, 20)])
        want = (a + b) / 2
        assert np.array_equal(out.astype(np.float32), want.astype(np.float32))

    def test_area_weighted_mean(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=8), rng.normal(size=8)
        out = aggregate_multiview([(a, 10), (b, 30)])
        np.testing.assert_allclose(out, 0.25 * a + 0.75 * b, rtol=1e-12)

    def test_view_order_permutation_bitwise(self):
        rng = np.random.default_rng(3)
        entries = [(rng.normal(size=16), int(a)) for a in rng.integers(1, 500, size=6)]
        base = aggregate_multiview(entries)
        for seed in range(5):
            perm = list(np.random.default_rng(seed).permutation(len(entries)))
            out = aggregate_multiview([entries[i] for i in perm])
            assert np.array_equal(out, base)

    def test_duplicate_view_half_weight_invariance(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=8), rng.normal(size=8)
        base = aggregate_multiview([(a, 30.0), (b, 10.0)])
        split = aggregate_multiview([(a, 15.0), (a, 15.0), (b, 10.0)])
        np.testing.assert_allclose(split, base, rtol=1e-12)

    def test_identical_vectors_exact_passthrough(self):
        v = np.random.default_rng(5).normal(size=8)
        out = aggregate_multiview([(v.copy(), 7), (v.copy(), 1), (v.copy(), 92)])
        assert np.array_equal(out, v)

    def test_all_invisible_raises(self):
        with pytest.raises(ObjectInvisibleError):
            aggregate_multiview([(None, 0), (None, 10), (np.ones(3), 0)])


class TestSelectSingleView:
    def masks(self, areas):
        out = []
        for a in areas:
            bits = np.zeros((16, 16), dtype=bool)
            bits.ravel()[:a] = True
            out.append(mask_of(bits))
        return out

    def test_tie_breaks_to_lowest_index(self):
        assert select_single_view(self.masks([3, 9, 9])) == 1

    def test_skips_empty(self):
        assert select_single_view(self.masks([0, 0, 5])) == 2

    def test_all_empty_raises(self):
        with pytest.raises(ObjectInvisibleError):
            select_single_view(self.masks([0, 0]))

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            areas = list(rng.integers(0, 30, size=6))
            if not any(areas):
                areas[3] = 1
            got = select_single_view(self.masks(areas))
            best, best_area = None, 0
            for i, a in enumerate(areas):  # oracle
                if a > best_area:
                    best, best_area = i, a
            assert got == best

    def test_single_pathway_equals_multiview_when_one_visible(self):
        fmap = random_map(np.random.default_rng(10), grid=4, dim=8)
        bits = np.zeros((64, 64), dtype=bool)
        bits[10:30, 20:40] = True
        masks = [blank_mask(), mask_of(bits), blank_mask()]
        idx = select_single_view(masks)
        pooled = pool_image(fmap, intersecting_patches(masks[idx], 4))
        per_view = [
            (None if m.is_empty() else pool_image(fmap, intersecting_patches(m, 4)), m.area())
            for m in masks
        ]
        assert np.array_equal(aggregate_multiview(per_view), pooled)


def front_view(depth=None, w=128, h=128):
    return CameraView(fx=100.0, fy=100.0, cx=w / 2, cy=h / 2, extrinsics=np.eye(4), width=w, height=h, depth=depth)


def box_cloud(center, half, n=500, rgb=0.5, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half + np.asarray(center, dtype=np.float64)
    return cloud_xyz(pts, rgb=rgb)


class TestSynthPatchFeatures:
    def scene_one_box(self):
        obj = ObjectProposal(
            index=1,
            cloud=box_cloud((0.0, 0.0, 2.0), (0.8, 0.8, 0.2)),
            category="box",
            attributes={"color": "red"},
        )
        return make_scene([obj], scene_id="s0")

    def test_bit_identical_rerun(self):
        scene = self.scene_one_box()
        a = synth_patch_features(front_view(), scene, seed=5)
        b = synth_patch_features(front_view(), scene, seed=5)
        assert np.array_equal(a.patches, b.patches) and np.array_equal(a.cls, b.cls)

    def test_seed_changes_noise(self):
        scene = self.scene_one_box()
        a = synth_patch_features(front_view(), scene, seed=5)
        b = synth_patch_features(front_view(), scene, seed=6)
        assert not np.array_equal(a.patches, b.patches)

    def test_covered_patch_near_pair_code(self):
        # Code vectors computed first (independent of the provider под test).
        code = pair_code("box", "red", 64).astype(np.float64)
        scene = self.scene_one_box()
        fmap = synth_patch_features(front_view(), scene, seed=5)
        # Object spans the image center; patch (8, 8) is dominated by it.
        got = fmap.patches[8 * 16 + 8].astype(np.float64)
        assert np.linalg.norm(got - code) < 3 * 0.05 * np.sqrt(64)
        assert np.linalg.norm(got - code) > 0

    def test_empty_scene_background_everywhere(self):
        bg = background_code(64).astype(np.float64)
        fmap = synth_patch_features(front_view(), [], seed=7)
        diffs = np.linalg.norm(fmap.patches.astype(np.float64) - bg, axis=1)
        assert (diffs < 3 * 0.05 * np.sqrt(64)).all()

    def test_label_codes_unit_norm_and_distinct(self):
        a = label_code("category", "box", 64)
        b = label_code("category", "chair", 64)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, label_code("category", "box", 64))


class TestSynthPointFeatures:
    def test_identical_objects_identical_features(self):
        a = ObjectProposal(index=1, cloud=box_cloud((1, 1, 1), 0.5), category="box")
        b = ObjectProposal(index=5, cloud=box_cloud((1, 1, 1), 0.5), category="box")
        assert np.array_equal(synth_point_features(a, 3), synth_point_features(b, 3))

    def test_translation_shifts_centroid_block_only(self):
        obj = ObjectProposal(index=1, cloud=box_cloud((0, 0, 0), 0.5, seed=4), category="box")
        t = np.array([2.0, -1.0, 0.5])
        moved = ObjectProposal(index=1, cloud=obj.cloud.translated(t), category="box")
        za = synth_point_features(obj, 3).astype(np.float64)
        zb = synth_point_features(moved, 3).astype(np.float64)
        np.testing.assert_allclose(zb[0:3] - za[0:3], t, atol=1e-6)
        np.testing.assert_allclose(zb[3:6], za[3:6], atol=1e-6)

    def test_unit_cube_extents(self):
        corners = np.array(
            [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
        )
        obj = ObjectProposal(index=1, cloud=cloud_xyz(corners), category="box")
        z = synth_point_features(obj, 0)
        assert tuple(z[3:6]) == (1.0, 1.0, 1.0)
        np.testing.assert_allclose(z[0:3], [0.5, 0.5, 0.5], atol=1e-7)

    def test_mean_color_block(self):
        obj = ObjectProposal(index=1, cloud=box_cloud((0, 0, 0), 0.5, rgb=0.25), category="box")
        z = synth_point_features(obj, 0)
        np.testing.assert_allclose(z[6:9], [0.25, 0.25, 0.25], atol=1e-7)


class TestExtractSceneFeatures:
    def make_scene_views(self):
        objs = [
            ObjectProposal(
                index=1,
                cloud=box_cloud((0.0, 0.0, 2.5), 0.4, seed=1),
                category="box",
                attributes={"color": "red"},
            ),
            ObjectProposal(
                index=2,
                cloud=box_cloud((0.0, 0.0, -4.0), 0.4, seed=2),  # behind both cameras
                category="chair",
                attributes={"color": "blue"},
            ),
        ]
        scene = make_scene(objs, scene_id="sx")
        views = [
            front_view(),
            CameraView(
                fx=100, fy=100, cx=64, cy=64,
                extrinsics=look_at_extrinsics((1.5, -1.5, 2.5), (0.0, 0.0, 2.5)),
                width=128, height=128,
            ),
        ]
        return scene, views

    def test_shapes_visibility_and_fallback(self):
        scene, views = self.make_scene_views()
        feats = extract_scene_features(scene, views, seed=11, cfg=FeatureConfig(d2=32, d3=48))
        assert len(feats) == 2
        assert feats[0].z3d.shape == (48,) and feats[0].z2d.shape == (32,)
        assert feats[0].visible and np.any(feats[0].z2d != 0)
        assert not feats[1].visible and not np.any(feats[1].z2d != 0)

    def test_deterministic(self):
        scene, views = self.make_scene_views()
        a = extract_scene_features(scene, views, seed=11)
        b = extract_scene_features(scene, views, seed=11)
        assert a == b


class TestFeatureCache:
    def feats(self):
        rng = np.random.default_rng(8)
        return [
            ObjectFeatures(z3d=rng.normal(size=6).astype(np.float32),
                           z2d=rng.normal(size=4).astype(np.float32)),
            ObjectFeatures(z3d=rng.normal(size=6).astype(np.float32),
                           z2d=np.zeros(4, dtype=np.float32), visible=False),
        ]

    def test_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "f.objf"
        feats = self.feats()
        write_feature_cache(path, feats)
        again = read_feature_cache(path)
        assert again == feats
        assert again[0].visible and not again[1].visible

    def test_header_layout(self, tmp_path):
        path = tmp_path / "f.objf"
        write_feature_cache(path, self.feats())
        raw = path.read_bytes()
        assert raw[:4] == b"OBJF"
        assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [1, 2, 6, 4]
        assert len(raw) == 20 + 2 * 4 * (6 + 4)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "f.objf"
        write_feature_cache(path, self.feats())
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_feature_cache(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "f.objf"
        write_feature_cache(path, self.feats())
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="version"):
            read_feature_cache(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "f.objf"
        write_feature_cache(path, self.feats())
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(DataError, match="size"):
            read_feature_cache(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        feats = self.feats() + [
            ObjectFeatures(z3d=np.zeros(5, np.float32), z2d=np.zeros(4, np.float32))
        ]
        with pytest.raises(ValueError):
            write_feature_cache(tmp_path / "f.objf", feats)
