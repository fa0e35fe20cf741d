import numpy as np
import pytest
from scipy.stats import chisquare

from sparseview.autodiff import Tensor
from sparseview.cameras import CanonicalFrame, canonical_depths, project
from sparseview.dataset import ViewPose, generate_sample, pose_to_camera
from sparseview.encoder import FeatureMap
from sparseview.figures import occupancy_oracle
from sparseview.sampling import (
    SampleBatch,
    build_local_grid,
    gather_view_features,
    grid_offsets,
    pick_grid_rotation,
    sample_points,
)


@pytest.fixture(scope="module")
def scene():
    return generate_sample(np.random.default_rng(31), 0, n_views=4, res=64)


class TestGridOffsets:
    def test_light_pattern(self):
        offs = grid_offsets(0.1, "light")
        assert offs.shape == (7, 3)
        assert np.array_equal(offs[0], np.zeros(3))
        norms = np.linalg.norm(offs, axis=1)
        assert set(np.round(norms, 12)) == {0.0, 0.05}

    def test_full_pattern(self):
        offs = grid_offsets(0.2, "full")
        assert offs.shape == (27, 3)
        assert np.array_equal(offs[0], np.zeros(3))
        assert len(np.unique(offs, axis=0)) == 27

    def test_single(self):
        assert grid_offsets(0.1, "single").shape == (1, 3)

    def test_unknown_pattern(self):
        with pytest.raises(ValueError):
            grid_offsets(0.1, "dense")


class TestBuildLocalGrid:
    views = [
        pose_to_camera(ViewPose(azimuth_deg=a, elevation_deg=10.0, radius=3.5), 64)
        for a in (0.0, 90.0, 180.0, 270.0)
    ]

    def test_inference_uses_view_zero(self):
        g = build_local_grid([0, 1, 0], 0.1, self.views, None, train_mode=False)
        assert np.allclose(g.rotation[:, 2], self.views[0].R[2])

    def test_grid_third_axis_is_optical_axis(self):
        rng = np.random.default_rng(0)
        g = build_local_grid([0, 1, 0], 0.1, self.views, rng, train_mode=True)
        matches = [np.allclose(g.rotation[:, 2], v.R[2]) for v in self.views]
        assert sum(matches) == 1

    def test_training_alignment_uniform(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(4)
        for _ in range(4000):
            r = pick_grid_rotation(self.views, rng, True)
            for i, v in enumerate(self.views):
                if np.allclose(r[:, 2], v.R[2]):
                    counts[i] += 1
        assert chisquare(counts).pvalue > 0.01

    def test_world_points_offsets(self):
        g = build_local_grid([0.5, 1.0, -0.2], 0.1, self.views, None, False)
        pts = g.world_points()
        assert np.allclose(pts[0], [0.5, 1.0, -0.2])
        d = np.linalg.norm(pts[1:] - pts[0], axis=1)
        assert np.allclose(d, 0.05)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            build_local_grid([0, 0, 0], 0.0, self.views, None, False)


class TestSamplePoints:
    def test_label_balance_of_near_surface_half(self, scene):
        n = 512
        batch = sample_points(scene, n, sigma=0.05, rng=np.random.default_rng(2))
        assert len(batch.points) == n
        near = batch.labels[n // 2 :]  # second half is the near-surface set
        assert near.sum() == n // 4
        assert len(near) - near.sum() == n // 4

    def test_labels_match_oracle(self, scene):
        batch = sample_points(scene, 256, sigma=0.05, rng=np.random.default_rng(3))
        frame = CanonicalFrame.from_center(scene.center)
        world = frame.to_world(batch.points)
        assert np.array_equal(batch.labels, occupancy_oracle(scene.figure, world))

    def test_small_sigma_hugs_surface(self, scene):
        batch = sample_points(scene, 256, sigma=1e-5, rng=np.random.default_rng(4))
        frame = CanonicalFrame.from_center(scene.center)
        near_world = frame.to_world(batch.points[128:])
        d = np.abs(scene.figure.sdf(near_world))
        assert np.median(d) < 1e-4

    def test_determinism(self, scene):
        a = sample_points(scene, 128, 0.05, np.random.default_rng(7))
        b = sample_points(scene, 128, 0.05, np.random.default_rng(7))
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.labels, b.labels)

    def test_uniform_half_uniform_over_octants(self, scene):
        batch = sample_points(scene, 100_000, 0.05, np.random.default_rng(8))
        frame = CanonicalFrame.from_center(scene.center)
        pts = frame.to_world(batch.points[:50_000])
        lo, hi = scene.figure.aabb()
        mid = (np.asarray(lo) + np.asarray(hi)) / 2
        octant = (
            (pts[:, 0] > mid[0]).astype(int) * 4
            + (pts[:, 1] > mid[1]).astype(int) * 2
            + (pts[:, 2] > mid[2]).astype(int)
        )
        counts = np.bincount(octant, minlength=8)
        assert chisquare(counts).pvalue > 0.01

    def test_odd_count_rejected(self, scene):
        with pytest.raises(ValueError):
            sample_points(scene, 31, 0.05, np.random.default_rng(0))


class TestGatherViewFeatures:
    def test_feature_layout_and_depth(self):
        rng = np.random.default_rng(5)
        cams = [
            pose_to_camera(ViewPose(azimuth_deg=a, elevation_deg=5.0, radius=3.0), 64)
            for a in (10.0, 100.0)
        ]
        fmaps = [
            FeatureMap(tensor=Tensor(rng.normal(size=(6, 16, 16))), camera=c, scale=0.25)
            for c in cams
        ]
        frame = CanonicalFrame.from_center([0.1, 0.9, -0.2])
        pts = frame.to_world(rng.uniform(-0.4, 0.4, size=(11, 3)))
        feats = gather_view_features(pts, frame, list(zip(cams, fmaps)))
        assert feats.data.shape == (11, 2, 7)  # |E| + 1 per view
        for i, cam in enumerate(cams):
            want = canonical_depths(frame, cam, pts)
            assert np.allclose(feats.data[:, i, -1], want, atol=1e-6)

    def test_feature_component_matches_query(self):
        rng = np.random.default_rng(6)
        cam = pose_to_camera(ViewPose(azimuth_deg=45.0, elevation_deg=10.0, radius=3.0), 64)
        fmap = FeatureMap(tensor=Tensor(rng.normal(size=(4, 16, 16))), camera=cam, scale=0.25)
        frame = CanonicalFrame.from_center([0.0, 0.9, 0.0])
        pts = frame.to_world(rng.uniform(-0.3, 0.3, size=(9, 3)))
        feats = gather_view_features(pts, frame, [(cam, fmap)])
        from sparseview.encoder import query_feature

        uv, _ = cam.project_points(pts)
        want = query_feature(fmap, uv).data
        assert np.allclose(feats.data[:, 0, :-1], want, atol=1e-6)

    def test_behind_camera_zero_feature_true_depth(self):
        rng = np.random.default_rng(7)
        cam = pose_to_camera(ViewPose(azimuth_deg=0.0, elevation_deg=0.0, radius=2.0), 64)
        fmap = FeatureMap(tensor=Tensor(np.ones((3, 16, 16))), camera=cam, scale=0.25)
        frame = CanonicalFrame.from_center([0.0, 0.9, 0.0])
        behind = cam.center + cam.R.T @ np.array([0.0, 0.0, -1.0])
        feats = gather_view_features(behind[None], frame, [(cam, fmap)])
        assert np.allclose(feats.data[0, 0, :-1], 0.0)
        assert np.isclose(
            feats.data[0, 0, -1], canonical_depths(frame, cam, behind[None])[0],
            atol=1e-6,
        )

    def test_center_row_first_matches_no_context_input(self, scene):
        # the grid's first row is the sample point itself, so a single-point
        # pattern reproduces the no-context pipeline input exactly
        rng = np.random.default_rng(8)
        cams = [v[0] for v in scene.views[:2]]
        fmaps = [
            FeatureMap(tensor=Tensor(rng.normal(size=(5, 16, 16))), camera=c, scale=0.25)
            for c in cams
        ]
        frame = CanonicalFrame.from_center(scene.center)
        centers = frame.to_world(rng.uniform(-0.3, 0.3, size=(6, 3)))
        offs = grid_offsets(0.1, "light")
        rot = pick_grid_rotation(cams, None, False)
        grid_world = (centers[:, None, :] + (offs @ rot.T)[None]).reshape(-1, 3)
        full = gather_view_features(grid_world, frame, list(zip(cams, fmaps)))
        solo = gather_view_features(centers, frame, list(zip(cams, fmaps)))
        assert np.allclose(full.data.reshape(6, 7, 2, -1)[:, 0], solo.data, atol=1e-7)
