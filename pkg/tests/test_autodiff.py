import numpy as np
import pytest

from sparseview.autodiff import (
    ParamStore,
    Tensor,
    grad_check,
    grad_check_directions,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
    set_debug_checks,
)
from sparseview.errors import NonFiniteValue, ShapeMismatch


def fd_check_op(build, param_arrays, tol=1e-6, step=1e-5):
    """Element-wise finite-difference check of a scalar built from params."""
    store = ParamStore(dtype=np.float64)
    tensors = [store.parameter(f"p{i}", a) for i, a in enumerate(param_arrays)]
    report = grad_check(lambda: build(*tensors), store, step=step, tolerance=tol)
    assert report["passed"], report
    return report


class TestElementwise:
    def test_softmax_of_zeros(self):
        out = ops.softmax(Tensor(np.zeros(2)))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_softmax_rows_stochastic(self):
        rng = np.random.default_rng(0)
        out = ops.softmax(Tensor(rng.normal(size=(4, 6, 5))))
        s = out.data.sum(axis=-1)
        assert np.allclose(s, 1.0, atol=1e-6)
        assert (out.data > 0).all()

    def test_relu_backward(self):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
        ops.mean_all(ops.relu(x)).backward()
        assert np.allclose(x.grad, [0.0, 0.0, 0.25, 0.25])

    def test_sigmoid_extremes_stable(self):
        out = ops.sigmoid(Tensor(np.array([-500.0, 0.0, 500.0])))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data[1], 0.5)

    def test_clip_zero_grad_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        ops.mean_all(ops.clip(x, 0.0, 1.0)).backward()
        assert np.allclose(x.grad, [0.0, 1 / 3, 0.0])

    @pytest.mark.parametrize(
        "build,shapes",
        [
            (lambda a, b: ops.mean_all(ops.mul(a, b)), [(3, 4), (3, 4)]),
            (lambda a, b: ops.mean_all(ops.add(a, b)), [(2, 5), (5,)]),
            (lambda a: ops.mean_all(ops.sigmoid(a)), [(7,)]),
            (lambda a: ops.mean_all(ops.mul(ops.softmax(a), np.arange(5.0))), [(3, 5)]),
            (lambda a: ops.mean_all(ops.mul(ops.softmax(a), a)), [(2, 4)]),
            (lambda a: ops.mean_all(ops.log(ops.clip(ops.sigmoid(a), 1e-7, 1 - 1e-7))), [(6,)]),
            (lambda a: ops.mean_all(ops.amax(a, 1)), [(4, 3)]),
            (lambda a: ops.sum_axis(ops.mean(a, 0), 0), [(4, 3)]),
        ],
    )
    def test_fd(self, build, shapes):
        rng = np.random.default_rng(42)
        fd_check_op(build, [rng.normal(size=s) for s in shapes])


class TestLinearAlgebra:
    def test_matmul_fd(self):
        rng = np.random.default_rng(1)
        fd_check_op(
            lambda a, b: ops.mean_all(ops.matmul(a, b)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        )

    def test_batched_matmul_fd(self):
        rng = np.random.default_rng(2)
        fd_check_op(
            lambda a, b: ops.mean_all(ops.matmul(a, b)),
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))],
        )

    def test_broadcast_matmul_fd(self):
        rng = np.random.default_rng(3)
        fd_check_op(
            lambda a, b: ops.mean_all(ops.matmul(a, b)),
            [rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2))],
        )

    def test_linear_fd(self):
        rng = np.random.default_rng(4)
        fd_check_op(
            lambda x, w, b: ops.mean_all(ops.relu(ops.linear(x, w, b))),
            [rng.normal(size=(6, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)],
        )

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestNormalization:
    def test_layer_norm_stats(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(2.0, 3.0, size=(10, 16)))
        out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-4

    def test_group_norm_stats(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(-1.0, 2.0, size=(2, 8, 5, 5)))
        out = ops.group_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), groups=4)
        g = out.data.reshape(2, 4, -1)
        assert np.abs(g.mean(axis=2)).max() < 1e-5
        assert np.abs(g.var(axis=2) - 1.0).max() < 1e-4

    def test_layer_norm_fd(self):
        rng = np.random.default_rng(7)
        fd_check_op(
            lambda x, g, b: ops.mean_all(ops.mul(ops.layer_norm(x, g, b), x)),
            [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)],
            tol=1e-5,
        )

    def test_group_norm_fd(self):
        rng = np.random.default_rng(8)
        fd_check_op(
            lambda x, g, b: ops.mean_all(ops.mul(ops.group_norm(x, g, b, 2), x)),
            [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)],
            tol=1e-5,
        )

    def test_group_norm_bad_groups(self):
        with pytest.raises(ShapeMismatch):
            ops.group_norm(
                Tensor(np.zeros((1, 5, 2, 2))), Tensor(np.ones(5)), Tensor(np.zeros(5)), 2
            )


class TestConvAndSampling:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3])
    def test_conv2d_fd(self, stride, k):
        rng = np.random.default_rng(9)
        fd_check_op(
            lambda x, w, b: ops.mean_all(ops.conv2d(x, w, b, stride=stride)),
            [
                rng.normal(size=(2, 3, 6, 6)),
                rng.normal(size=(4, 3, k, k)),
                rng.normal(size=4),
            ],
        )

    def test_conv2d_matches_direct(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.empty((1, 3, 5, 5))
        for co in range(3):
            for i in range(5):
                for j in range(5):
                    want[0, co, i, j] = (
                        xp[0, :, i : i + 3, j : j + 3] * w[co]
                    ).sum() + b[co]
        assert np.allclose(out, want, atol=1e-12)

    def test_upsample_fd(self):
        rng = np.random.default_rng(11)
        const = rng.normal(size=(1, 2, 6, 6))
        fd_check_op(
            lambda x: ops.mean_all(ops.mul(ops.upsample_nearest2x(x), const)),
            [rng.normal(size=(1, 2, 3, 3))],
        )

    def test_bilinear_known_values(self):
        fmap = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
        # exact cell center
        out = ops.bilinear_sample(fmap, np.array([[2.0, 1.0]]))
        assert np.allclose(out.data, [[6.0]])
        # midpoint of two cells -> average
        out = ops.bilinear_sample(fmap, np.array([[1.5, 0.0]]))
        assert np.allclose(out.data, [[1.5]])

    def test_bilinear_out_of_bounds_zero(self):
        fmap = Tensor(np.ones((2, 4, 4)))
        out = ops.bilinear_sample(fmap, np.array([[-5.0, 1.0], [1.0, 10.0], [np.nan, 1.0]]))
        assert np.allclose(out.data, 0.0)

    def test_bilinear_matches_scalar_oracle(self):
        rng = np.random.default_rng(12)
        fmap_data = rng.normal(size=(3, 5, 6))
        uv = rng.uniform(-0.5, 5.5, size=(40, 2))
        out = ops.bilinear_sample(Tensor(fmap_data), uv).data

        def scalar(c, u, v):
            u0, v0 = int(np.floor(u)), int(np.floor(v))
            total = 0.0
            for du in (0, 1):
                for dv in (0, 1):
                    uu, vv = u0 + du, v0 + dv
                    wt = (1 - abs(u - uu)) * (1 - abs(v - vv))
                    if 0 <= uu <= 5 and 0 <= vv <= 4:
                        total += wt * fmap_data[c, vv, uu]
            return total

        want = np.array([[scalar(c, u, v) for c in range(3)] for u, v in uv])
        assert np.abs(out - want).max() < 1e-6

    def test_bilinear_fd(self):
        rng = np.random.default_rng(13)
        uv = rng.uniform(0, 3, size=(5, 2))
        fd_check_op(
            lambda f: ops.mean_all(ops.bilinear_sample(f, uv)),
            [rng.normal(size=(2, 4, 4))],
        )

    def test_bilinear_continuity(self):
        rng = np.random.default_rng(14)
        fmap = Tensor(rng.normal(size=(4, 8, 8)))
        uv = rng.uniform(0.5, 6.5, size=(100, 2))
        a = ops.bilinear_sample(fmap, uv).data
        b = ops.bilinear_sample(fmap, uv + 1e-6).data
        assert np.linalg.norm(a - b, axis=1).max() < 1e-4


class TestCompositeAndTooling:
    def test_three_layer_net_fd(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(4, 3)))

        def build(w1, b1, w2, b2, w3, b3):
            h = ops.relu(ops.linear(x, w1, b1))
            h = ops.relu(ops.linear(h, w2, b2))
            return ops.mean_all(ops.sigmoid(ops.linear(h, w3, b3)))

        fd_check_op(
            build,
            [
                rng.normal(size=(3, 8)), rng.normal(size=8),
                rng.normal(size=(8, 6)), rng.normal(size=6),
                rng.normal(size=(6, 1)), rng.normal(size=1),
            ],
        )

    def test_gradcheck_quadratic_tight(self):
        store = ParamStore(dtype=np.float64)
        p = store.parameter("p", np.array([1.0, -2.0, 3.0]))
        report = grad_check(
            lambda: ops.mean_all(ops.mul(p, p)), store, step=1e-4, tolerance=1e-8
        )
        assert report["passed"], report

    def test_gradcheck_catches_wrong_backward(self):
        from sparseview.autodiff.tensor import make

        def bad_double(t):
            def backward(g):
                t.accumulate_grad(g * 3.0)  # wrong: forward is x * 2

            return make(t.data * 2.0, (t,), backward)

        store = ParamStore(dtype=np.float64)
        p = store.parameter("p", np.array([0.7, -1.1]))
        report = grad_check(lambda: ops.mean_all(bad_double(p)), store)
        assert not report["passed"]

    def test_direction_mode_agrees(self):
        rng = np.random.default_rng(16)
        store = ParamStore(dtype=np.float64)
        w = store.parameter("w", rng.normal(size=(5, 5)))
        x = Tensor(rng.normal(size=(3, 5)))
        report = grad_check_directions(
            lambda: ops.mean_all(ops.sigmoid(ops.matmul(x, w))),
            store,
            n_directions=20,
            rng=rng,
            tolerance=1e-6,
        )
        assert report["passed"], report

    def test_bce_values(self):
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        perfect = ops.binary_cross_entropy(Tensor(labels.copy()), Tensor(labels))
        assert perfect.item() < 1e-6
        half = ops.binary_cross_entropy(Tensor(np.full(4, 0.5)), Tensor(labels))
        assert np.isclose(half.item(), np.log(2.0), atol=1e-9)

    def test_bce_grad_at_logit(self):
        # d(BCE)/d(logit) = (p - y) / n through the sigmoid.
        rng = np.random.default_rng(17)
        store = ParamStore(dtype=np.float64)
        z = store.parameter("z", rng.normal(size=6))
        y = (rng.random(6) > 0.5).astype(np.float64)
        p = ops.sigmoid(z)
        loss = ops.binary_cross_entropy(p, Tensor(y))
        loss.backward()
        assert np.allclose(z.grad, (p.data - y) / 6, atol=1e-10)
        report = grad_check(
            lambda: ops.binary_cross_entropy(ops.sigmoid(z), Tensor(y)), store
        )
        assert report["passed"], report

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(18)
        x = rng.normal(size=(8, 16)).astype(np.float32)
        w = rng.normal(size=(16, 16)).astype(np.float32)

        def run():
            t = ops.softmax(ops.matmul(Tensor(x), Tensor(w)))
            return ops.mean_all(t).data.copy()

        assert np.array_equal(run(), run())

    def test_no_grad_drops_tape(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = ops.mul(p, p)
        assert out._parents == () and not out.requires_grad

    def test_debug_checks_raise_on_nan(self):
        set_debug_checks(True)
        try:
            with pytest.raises(NonFiniteValue):
                ops.log(Tensor(np.array([-1.0])))
        finally:
            set_debug_checks(False)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        store = ParamStore(dtype=np.float32)
        store.parameter("enc.w", rng.normal(size=(3, 4)).astype(np.float32))
        store.parameter("enc.b", rng.normal(size=4).astype(np.float32))
        path = tmp_path / "model.ckpt"
        save_checkpoint(store, path, config_hash="abc123", rng_state={"s": 1})
        arrays, meta = load_checkpoint(path)
        assert meta["config_hash"] == "abc123"
        assert meta["rng_state"] == {"s": 1}
        assert set(arrays) == {"enc.w", "enc.b"}
        assert np.array_equal(arrays["enc.w"], store["enc.w"].data)

        other = ParamStore(dtype=np.float32)
        other.parameter("enc.w", np.zeros((3, 4), dtype=np.float32))
        other.parameter("enc.b", np.zeros(4, dtype=np.float32))
        other.load_state_arrays(arrays)
        assert np.array_equal(other["enc.b"].data, store["enc.b"].data)

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOPE1234")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_byte_identical_saves(self, tmp_path):
        store = ParamStore(dtype=np.float32)
        store.parameter("w", np.arange(6, dtype=np.float32).reshape(2, 3))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(store, a, config_hash="h")
        save_checkpoint(store, b, config_hash="h")
        assert a.read_bytes() == b.read_bytes()
