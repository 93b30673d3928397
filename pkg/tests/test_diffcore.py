import numpy as np
import pytest

from weathermatch import diffcore as dc
from weathermatch.errors import FormatError, NumericError, ParameterError, ShapeError


def rnd(seed, *shape):
    return np.random.Generator(np.random.PCG64(seed)).uniform(-1, 1, shape)


class TestLayerForward:
    def test_pointwise_identity(self):
        x = rnd(0, 4, 4, 3).astype(np.float32)
        out = dc.layer_forward(
            "pointwise_conv_1x1",
            {"weight": np.eye(3, dtype=np.float32), "bias": np.zeros(3, np.float32)},
            dc.constant(x),
        )
        assert np.array_equal(out.value, x)

    def test_softmax_closed_form(self):
        out = dc.layer_forward("softmax_last_axis", {}, dc.constant(np.array([1.0, 0.0])))
        assert np.allclose(out.value, [0.73106, 0.26894], atol=1e-5)

    def test_layer_norm_constant_is_zero(self):
        x = np.full((5,), 3.7)
        out = dc.layer_forward("layer_norm", {}, dc.constant(x))
        assert np.allclose(out.value, 0.0, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            dc.layer_forward("conv7x7", {}, dc.constant(np.zeros(3)))

    def test_strided_halves_spatial(self):
        x = dc.constant(rnd(1, 8, 6, 2))
        w = rnd(2, 8, 5)
        out = dc.layer_forward("strided_conv", {"weight": w}, x)
        assert out.value.shape == (4, 3, 5)

    def test_upsample_doubles_spatial(self):
        x = dc.constant(rnd(3, 4, 3, 2))
        w = rnd(4, 2, 4 * 6)
        out = dc.layer_forward("transposed_upsample", {"weight": w}, x)
        assert out.value.shape == (8, 6, 6)

    def test_depthwise_preserves_shape(self):
        x = dc.constant(rnd(5, 7, 9, 4))
        out = dc.layer_forward("depthwise_conv_3x3", {"weight": rnd(6, 3, 3, 4)}, x)
        assert out.value.shape == (7, 9, 4)


class TestBackward:
    def test_linear_loss_grad_is_input(self):
        x = rnd(7, 6)
        w = dc.leaf(np.ones(6))
        loss = dc.sum_all(dc.multiply(w, dc.constant(x)))
        dc.backward(loss)
        assert np.allclose(w.grad, x, atol=1e-12)

    def test_l1_subgradient_values(self):
        pred = dc.leaf(np.array([0.5, 0.2, 0.7]))
        target = dc.constant(np.array([0.2, 0.2, 0.9]))
        loss = dc.mean_all(dc.absolute(dc.subtract(pred, target)))
        dc.backward(loss)
        assert np.allclose(pred.grad, [1 / 3, 0.0, -1 / 3], atol=1e-12)

    def test_accumulation_doubles(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.ones(4))
        x = rnd(8, 4)
        for _ in range(2):
            loss = dc.sum_all(dc.multiply(store.leaf("w"), dc.constant(x)))
            dc.backward(loss)
        assert np.allclose(store["w"].grad, 2 * x, atol=1e-12)

    def test_backward_needs_scalar(self):
        v = dc.leaf(np.zeros(3))
        with pytest.raises(ShapeError):
            dc.backward(v)

    def test_nontrainable_leaf_gets_no_grad(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.ones(3), trainable=False)
        store.add("u", np.ones(3))
        loss = dc.sum_all(dc.multiply(store.leaf("w"), store.leaf("u")))
        dc.backward(loss)
        assert np.all(store["w"].grad == 0)
        assert np.allclose(store["u"].grad, 1.0)


class TestAdamW:
    def test_closed_form_first_step(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.array([1.0]))
        store["w"].grad[:] = 1.0
        opt = dc.AdamW(store, lr=0.1, weight_decay=0.0)
        opt.step()
        expected = 1.0 - 0.1 / (1.0 + 1e-8)
        assert abs(store["w"].values[0] - expected) < 1e-12

    def test_zero_grad_no_motion(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.array([0.3, -0.4]))
        before = store["w"].values.copy()
        opt = dc.AdamW(store, lr=0.5)
        for _ in range(3):
            opt.step()
        assert np.array_equal(store["w"].values, before)

    def test_frozen_tensors_untouched(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.array([1.0, 2.0]), trainable=False)
        store.add("u", np.array([1.0]))
        store["w"].grad[:] = 5.0
        store["u"].grad[:] = 1.0
        before = store["w"].values.copy()
        opt = dc.AdamW(store, lr=0.1)
        for _ in range(4):
            opt.step()
        assert np.array_equal(store["w"].values, before)
        assert opt.touched_names() == ["u"]

    def test_nan_gradient_aborts(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.array([1.0]))
        store["w"].grad[:] = np.nan
        opt = dc.AdamW(store, lr=0.1)
        with pytest.raises(NumericError, match="w"):
            opt.step()

    def test_group_learning_rates(self):
        store = dc.ParameterStore(np.float64)
        store.add("enc.w", np.array([1.0]))
        store.add("dec.w", np.array([1.0]))
        store["enc.w"].grad[:] = 1.0
        store["dec.w"].grad[:] = 1.0
        opt = dc.AdamW(store, lr=0.1, groups=[("enc.", 0.01)])
        opt.step()
        assert abs(store["enc.w"].values[0] - (1 - 0.01 / (1 + 1e-8))) < 1e-12
        assert abs(store["dec.w"].values[0] - (1 - 0.1 / (1 + 1e-8))) < 1e-12

    def test_decoupled_weight_decay(self):
        store = dc.ParameterStore(np.float64)
        store.add("w", np.array([2.0]))
        store["w"].grad[:] = 0.0
        opt = dc.AdamW(store, lr=0.1, weight_decay=0.5)
        opt.step()
        assert abs(store["w"].values[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-12


def _conv_params(seed, cin, cout):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.normal(0, 0.5, (cin, cout)), rng.normal(0, 0.5, cout)


class TestGradCheck:
    def test_pointwise_conv(self):
        w, b = _conv_params(0, 2, 3)
        x = rnd(1, 4, 4, 2)

        def fn(xv, wv, bv):
            return dc.sum_all(dc.gelu(dc.pointwise_conv(xv, wv, bv)))

        assert dc.grad_check(fn, [x, w, b]) < 1e-8

    def test_depthwise_conv(self):
        rng = np.random.Generator(np.random.PCG64(2))
        x = rnd(3, 5, 6, 3)
        w = rng.normal(0, 0.5, (3, 3, 3))
        b = rng.normal(0, 0.5, 3)

        def fn(xv, wv, bv):
            return dc.mean_all(dc.multiply(dc.depthwise_conv3x3(xv, wv, bv), dc.depthwise_conv3x3(xv, wv, bv)))

        assert dc.grad_check(fn, [x, w, b]) < 1e-7

    def test_depthwise_tiny_2x2(self):
        rng = np.random.Generator(np.random.PCG64(12))
        x = rnd(13, 2, 2, 2)
        w = rng.normal(0, 0.5, (3, 3, 2))

        def fn(xv, wv):
            return dc.sum_all(dc.multiply(dc.depthwise_conv3x3(xv, wv), dc.depthwise_conv3x3(xv, wv)))

        assert dc.grad_check(fn, [x, w]) < 1e-8

    def test_strided_and_upsample(self):
        rng = np.random.Generator(np.random.PCG64(4))
        x = rnd(5, 4, 4, 2)
        w_down = rng.normal(0, 0.5, (8, 3))
        w_up = rng.normal(0, 0.5, (3, 4 * 2))

        def fn(xv, wd, wu):
            return dc.sum_all(
                dc.multiply(
                    dc.transposed_upsample(dc.strided_conv(xv, wd), wu),
                    dc.constant(rnd(6, 4, 4, 2)),
                )
            )

        assert dc.grad_check(fn, [x, w_down, w_up]) < 1e-8

    def test_layer_norm_softmax_chain(self):
        x = rnd(7, 6, 8)
        g = rnd(8, 8) + 1.5
        b = rnd(9, 8)
        t = rnd(10, 6, 8)  # fixed weights; plain mean(softmax) is constant

        def fn(xv, gv, bv):
            out = dc.softmax_last_axis(dc.layer_norm(xv, gv, bv))
            return dc.mean_all(dc.multiply(out, dc.constant(t)))

        assert dc.grad_check(fn, [x, g, b]) < 1e-7

    def test_matmul_exp_clip(self):
        a = rnd(10, 3, 4) * 0.4 + 0.2
        b = rnd(11, 4, 2) * 0.4

        def fn(av, bv):
            return dc.sum_all(dc.clip01(dc.exp(dc.scale(dc.matmul(av, bv), 0.5))))

        assert dc.grad_check(fn, [a, b]) < 1e-7

    def test_constant_function_is_exact(self):
        def fn(xv):
            return dc.sum_all(dc.multiply(xv, dc.constant(np.zeros(5))))

        assert dc.grad_check(fn, [rnd(12, 5)]) == 0.0

    def test_stack_slice_concat_transpose(self):
        xs = [rnd(20 + i, 3, 4) for i in range(3)]

        def fn(a, b, c):
            st = dc.stack0([a, b, c])
            sl = dc.slice0(st, 1, 3)
            tr = dc.transpose(sl, (1, 0, 2))
            cc = dc.concat_channels([tr, dc.scale(tr, 0.5)])
            return dc.mean_all(dc.multiply(cc, cc))

        assert dc.grad_check(fn, xs) < 1e-8


class TestProperties:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.Generator(np.random.PCG64(30))
        for _ in range(10):
            x = rng.normal(0, 10, (5, 17)).astype(np.float32)
            y = dc.softmax_last_axis(dc.constant(x)).value
            assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_forward_determinism_bitwise(self):
        x = rnd(31, 4, 6, 8).astype(np.float32)
        w = rnd(32, 8, 8).astype(np.float32)

        def run():
            wx = dc.leaf(w.copy())
            out = dc.mean_all(dc.gelu(dc.pointwise_conv(dc.constant(x), wx)))
            dc.backward(out)
            return out.value.copy(), wx.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)

    def test_bias_partition_audit(self):
        store = dc.ParameterStore()
        store.add("a.weight", np.zeros((2, 2)))
        store.add("a.bias", np.zeros(2), is_bias=True)
        store.add("a.norm.gamma", np.ones(2))
        store.add("a.norm.beta", np.zeros(2), is_bias=True)
        assert store.check_partition()
        for t in store.tensors():
            assert t.is_bias == t.name.endswith((".bias", ".beta"))


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        store = dc.ParameterStore()
        rng = np.random.Generator(np.random.PCG64(40))
        store.add("enc.w", rng.normal(size=(3, 4)).astype(np.float32))
        store.add("enc.b", rng.normal(size=4).astype(np.float32), is_bias=True)
        store.add("frozen", rng.normal(size=(2,)).astype(np.float32), trainable=False)
        store["enc.w"].grad[:] = 1.0
        store["enc.b"].grad[:] = 1.0
        opt = dc.AdamW(store, lr=0.01)
        opt.step()
        path = str(tmp_path / "model.ckpt")
        dc.save_checkpoint(path, store, opt)
        loaded, opt_records = dc.load_checkpoint(path)
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded[name].values, store[name].values)
            assert loaded[name].is_bias == store[name].is_bias
            assert loaded[name].trainable == store[name].trainable
        opt2 = dc.AdamW(loaded, lr=0.01)
        opt2.load_state_arrays(opt_records)
        assert opt2.step_count == 1
        assert np.array_equal(opt2.m["enc.w"], opt.m["enc.w"])
        assert np.array_equal(opt2.v["enc.b"], opt.v["enc.b"])

    def test_same_bytes_on_rewrite(self, tmp_path):
        store = dc.ParameterStore()
        store.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        dc.save_checkpoint(p1, store)
        dc.save_checkpoint(p2, store)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            dc.load_checkpoint(str(p))
