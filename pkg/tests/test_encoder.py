import numpy as np
import pytest

from sparseview.autodiff import ParamStore, Tensor, grad_check, ops
from sparseview.cameras import Camera
from sparseview.encoder import (
    Encoder,
    EncoderConfig,
    FeatureMap,
    encode_views,
    feature_maps_for_views,
    query_feature,
    slice_view,
)
from sparseview.errors import ShapeMismatch


def tiny_encoder(dtype=np.float32, **kw):
    cfg = EncoderConfig(n_stacks=kw.pop("n_stacks", 2), depth=kw.pop("depth", 2),
                        channels=kw.pop("channels", 8),
                        input_resolution=kw.pop("input_resolution", 32))
    store = ParamStore(dtype=dtype)
    enc = Encoder(cfg, store, np.random.default_rng(0))
    return enc, store


def identity_cam(res):
    K = np.array([[res / 2, 0, (res - 1) / 2], [0, res / 2, (res - 1) / 2], [0, 0, 1.0]])
    return Camera(K=K, R=np.eye(3), t=np.array([0, 0, 3.0]), width=res, height=res)


class TestEncoderShapes:
    def test_desk_config_shapes(self):
        cfg = EncoderConfig()  # 2 stacks, depth 2, 64 channels, 128 input
        assert cfg.output_resolution == 32
        store = ParamStore()
        enc = Encoder(cfg, store, np.random.default_rng(0))
        out = enc.forward(Tensor(np.zeros((1, 4, 128, 128), dtype=np.float32)))
        assert len(out) == 2
        assert out[0].data.shape == (1, 64, 32, 32)

    @pytest.mark.slow
    def test_full_scale_config_shapes(self):
        # 4 stacks of depth 2, 512 input, 256-channel feature maps
        cfg = EncoderConfig(n_stacks=4, depth=2, channels=256, input_resolution=512)
        assert cfg.output_resolution == 128
        store = ParamStore()
        enc = Encoder(cfg, store, np.random.default_rng(0))
        from sparseview.autodiff import no_grad

        with no_grad():
            out = enc.forward(Tensor(np.zeros((1, 4, 512, 512), dtype=np.float32)))
        assert len(out) == 4
        for o in out:
            assert o.data.shape == (1, 256, 128, 128)

    def test_all_zero_input_finite(self):
        enc, _ = tiny_encoder()
        out = enc.forward(Tensor(np.zeros((2, 4, 32, 32), dtype=np.float32)))
        for o in out:
            assert np.isfinite(o.data).all()

    def test_wrong_channel_count_raises(self):
        enc, _ = tiny_encoder()
        with pytest.raises(ShapeMismatch):
            enc.forward(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))

    def test_wrong_resolution_raises(self):
        enc, _ = tiny_encoder()
        with pytest.raises(ShapeMismatch):
            enc.forward(Tensor(np.zeros((1, 4, 64, 64), dtype=np.float32)))


class TestQueryFeature:
    def make_fmap(self, res=32, channels=6):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(channels, res // 4, res // 4))
        return FeatureMap(tensor=Tensor(data), camera=identity_cam(res), scale=0.25)

    def test_cell_center_exact(self):
        fmap = self.make_fmap()
        # image pixel 8 -> feature coordinate 2.0 exactly
        out = query_feature(fmap, np.array([[8.0, 4.0]]))
        assert np.allclose(out.data[0], fmap.tensor.data[:, 1, 2])

    def test_midpoint_average(self):
        fmap = self.make_fmap()
        out = query_feature(fmap, np.array([[10.0, 4.0]]))  # feature u = 2.5
        want = (fmap.tensor.data[:, 1, 2] + fmap.tensor.data[:, 1, 3]) / 2
        assert np.allclose(out.data[0], want)

    def test_out_of_bounds_zero(self):
        fmap = self.make_fmap()
        out = query_feature(fmap, np.array([[-40.0, 4.0], [4.0, 4000.0]]))
        assert np.allclose(out.data, 0.0)

    def test_matches_scalar_oracle(self):
        fmap = self.make_fmap()
        rng = np.random.default_rng(2)
        uv = rng.uniform(0, 31, size=(50, 2))
        out = query_feature(fmap, uv).data
        f = fmap.tensor.data
        for row, (u, v) in zip(out, uv * 0.25):
            u0, v0 = int(np.floor(u)), int(np.floor(v))
            acc = np.zeros(f.shape[0])
            for du in (0, 1):
                for dv in (0, 1):
                    uu, vv = u0 + du, v0 + dv
                    w = (1 - abs(u - uu)) * (1 - abs(v - vv))
                    if 0 <= uu < f.shape[2] and 0 <= vv < f.shape[1]:
                        acc += w * f[:, vv, uu]
            assert np.abs(row - acc).max() < 1e-6


class TestEncoderBehavior:
    def test_translation_consistency_at_stride(self):
        # a delta probe shifted by the 4-px stride moves its feature
        # response by exactly one cell
        enc, _ = tiny_encoder(n_stacks=1)
        base = np.zeros((1, 4, 32, 32), dtype=np.float32)
        base[0, :, 13, 13] = 5.0
        shifted = np.zeros_like(base)
        shifted[0, :, 13, 17] = 5.0

        def peak(img):
            out = enc.forward(Tensor(img))[-1].data[0]
            zero = enc.forward(Tensor(np.zeros_like(img)))[-1].data[0]
            resp = np.linalg.norm(out - zero, axis=0)
            return np.unravel_index(resp.argmax(), resp.shape)

        pa, pb = peak(base), peak(shifted)
        assert pb[0] == pa[0]
        assert pb[1] == pa[1] + 1

    def test_gradients_flow_from_queried_feature(self):
        cfg = EncoderConfig(n_stacks=1, depth=1, channels=4, input_resolution=8)
        store = ParamStore(dtype=np.float64)
        enc = Encoder(cfg, store, np.random.default_rng(0))
        rng = np.random.default_rng(4)
        img = rng.normal(size=(1, 4, 8, 8))
        uv = rng.uniform(0, 7, size=(3, 2))

        def loss():
            out = enc.forward(Tensor(img))[-1]
            fmap = FeatureMap(tensor=slice_view(out, 0), camera=identity_cam(8),
                              scale=0.25)
            return ops.mean_all(query_feature(fmap, uv))

        report = grad_check(loss, store, tolerance=2e-5)
        assert report["passed"], report["max_rel_err"]

    def test_encode_views_wraps_cameras(self):
        enc, _ = tiny_encoder()
        cams = [identity_cam(32) for _ in range(3)]
        imgs = np.zeros((3, 4, 32, 32), dtype=np.float32)
        per_stack = encode_views(enc, imgs, cams)
        assert len(per_stack) == 2 and len(per_stack[0]) == 3
        fm = per_stack[0][0]
        assert fm.scale == 0.25 and fm.camera is cams[0]

    def test_slice_view_backward_routes_to_right_slice(self):
        batch = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 2, 2),
                       requires_grad=True)
        s = slice_view(batch, 1)
        ops.mean_all(s).backward()
        assert batch.grad[0].max() == 0
        assert batch.grad[1].min() > 0
