"""Adapter algebra: forward against a dense oracle, hand-derived backward
against central differences, placement and freezing rules."""

import numpy as np
import pytest

from qlrt.blockquant import dequantize, quantize
from qlrt.codebooks import get_codebook
from qlrt.qlora import (
    PLACEMENTS,
    DenseLinear,
    Layer,
    QLinear,
    ToyModel,
    attach_adapters,
    lora_init,
    quantize_dense_stack,
)

NF4 = get_codebook("nf4")


def central_diff(loss_fn, arr, h=1e-6):
    """Entry-wise central finite differences of loss_fn wrt arr (in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = loss_fn()
        arr[idx] = orig - h
        fm = loss_fn()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def make_qlinear(in_dim, out_dim, rank, seed, dtype=np.float64, quantized=True):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(in_dim, out_dim))
    base = quantize(w, NF4, blocksize=16) if quantized else w
    ad = lora_init(in_dim, out_dim, rank, alpha=2.0 * rank, rng=rng, dtype=dtype)
    ad.l2 = rng.normal(size=ad.l2.shape).astype(dtype)  # make the branch live
    return QLinear(base, adapters=[ad], dtype=dtype), rng


# ---------------------------------------------------------------------------
# adapter initialization
# ---------------------------------------------------------------------------


class TestLoraInit:
    def test_l1_scale(self):
        rng = np.random.default_rng(0)
        ad = lora_init(1000, 8, rank=100, alpha=16.0, rng=rng)
        target = 1.0 / np.sqrt(100)
        assert ad.l1.shape == (1000, 100)
        assert abs(ad.l1.std() - target) / target < 0.02

    def test_l2_starts_zero(self):
        ad = lora_init(8, 4, rank=2, alpha=4.0, rng=np.random.default_rng(0))
        assert np.array_equal(ad.l2, np.zeros((2, 4), dtype=np.float32))
        assert ad.l1.dtype == np.float32

    def test_scaling(self):
        ad = lora_init(4, 4, rank=2, alpha=8.0, rng=np.random.default_rng(0))
        assert ad.scaling == 4.0

    def test_seed_determinism(self):
        a = lora_init(16, 16, 4, 4.0, np.random.default_rng(7))
        b = lora_init(16, 16, 4, 4.0, np.random.default_rng(7))
        assert np.array_equal(a.l1, b.l1)

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="rank"):
            lora_init(4, 4, 0, 1.0, rng)
        with pytest.raises(ValueError, match="dropout"):
            lora_init(4, 4, 1, 1.0, rng, dropout_p=1.0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


class TestForward:
    def test_matches_dense_oracle(self):
        # Independent reference: dequantize, then two explicit products.
        lin, rng = make_qlinear(8, 3, rank=2, seed=1)
        x = rng.normal(size=(4, 8))
        y, _ = lin.forward(x)
        ad = lin.adapters[0]
        expected = x @ dequantize(lin.base) + ad.scaling * ((x @ ad.l1) @ ad.l2)
        assert np.array_equal(y, expected)

    def test_fresh_adapter_is_exact_noop(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(8, 5))
        base = quantize(w, NF4, blocksize=16)
        plain = QLinear(base, adapters=[], dtype=np.float64)
        adapted = QLinear(
            base,
            adapters=[lora_init(8, 5, 4, 4.0, rng, dtype=np.float64)],
            dtype=np.float64,
        )
        x = rng.normal(size=(6, 8))
        assert np.array_equal(plain.forward(x)[0], adapted.forward(x)[0])

    def test_ndarray_base_variant(self):
        lin, rng = make_qlinear(8, 3, rank=2, seed=2, quantized=False)
        x = rng.normal(size=(4, 8))
        y, _ = lin.forward(x)
        ad = lin.adapters[0]
        expected = x @ lin.base + ad.scaling * ((x @ ad.l1) @ ad.l2)
        assert np.array_equal(y, expected)

    def test_cache_contents(self):
        lin, rng = make_qlinear(8, 3, rank=2, seed=1)
        x = rng.normal(size=(4, 8))
        _, cache = lin.forward(x)
        assert np.array_equal(cache["x"], x)
        assert np.array_equal(cache["w"], dequantize(lin.base))
        assert np.array_equal(cache["branches"][0]["t"], x @ lin.adapters[0].l1)

    def test_dequantized_per_use_not_cached(self):
        lin, rng = make_qlinear(8, 3, rank=2, seed=1)
        x = rng.normal(size=(2, 8))
        _, c1 = lin.forward(x)
        _, c2 = lin.forward(x)
        assert c1["w"] is not c2["w"]

    def test_validation(self):
        with pytest.raises(ValueError, match="2-d"):
            QLinear(np.zeros(4))
        base = quantize(np.random.default_rng(0).normal(size=(8, 4)), NF4)
        bad = lora_init(8, 5, 2, 2.0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="does not match"):
            QLinear(base, adapters=[bad])


# ---------------------------------------------------------------------------
# backward vs central differences
# ---------------------------------------------------------------------------


class TestBackward:
    @pytest.mark.parametrize("in_dim,out_dim,rank", [(3, 4, 2), (8, 5, 3), (16, 16, 4)])
    def test_adapter_grads(self, in_dim, out_dim, rank):
        lin, rng = make_qlinear(in_dim, out_dim, rank, seed=in_dim)
        x = rng.normal(size=(5, in_dim))
        g_out = rng.normal(size=(5, out_dim))

        def loss():
            y, _ = lin.forward(x)
            return float(np.sum(y * g_out))

        y, cache = lin.forward(x)
        _, grads = lin.backward(g_out, cache)
        ad = lin.adapters[0]
        assert max_rel_err(grads["adapter0.l1"], central_diff(loss, ad.l1)) <= 1e-5
        assert max_rel_err(grads["adapter0.l2"], central_diff(loss, ad.l2)) <= 1e-5

    def test_input_grad(self):
        lin, rng = make_qlinear(6, 4, rank=2, seed=9)
        x = rng.normal(size=(3, 6))
        g_out = rng.normal(size=(3, 4))

        def loss():
            return float(np.sum(lin.forward(x)[0] * g_out))

        _, cache = lin.forward(x)
        d_x, _ = lin.backward(g_out, cache)
        assert max_rel_err(d_x, central_diff(loss, x)) <= 1e-5

    def test_input_grad_without_adapters(self):
        rng = np.random.default_rng(4)
        lin = QLinear(
            quantize(rng.normal(size=(6, 4)), NF4, blocksize=8),
            adapters=[],
            dtype=np.float64,
        )
        x = rng.normal(size=(3, 6))
        g_out = rng.normal(size=(3, 4))
        _, cache = lin.forward(x)
        d_x, grads = lin.backward(g_out, cache)
        assert grads == {}
        assert np.array_equal(d_x, g_out @ dequantize(lin.base).T)

    def test_base_never_gets_grads(self):
        lin, rng = make_qlinear(4, 4, rank=2, seed=0)
        x = rng.normal(size=(2, 4))
        _, cache = lin.forward(x)
        _, grads = lin.backward(np.ones((2, 4)), cache)
        assert set(grads) == {"adapter0.l1", "adapter0.l2"}

    def test_frozen_dense_layer_has_no_grads(self):
        lin = DenseLinear(np.ones((3, 3)), trainable=False, dtype=np.float64)
        _, cache = lin.forward(np.ones((2, 3)))
        d_x, grads = lin.backward(np.ones((2, 3)), cache)
        assert grads == {} and lin.trainable() == {}
        assert d_x.shape == (2, 3)

    def test_dense_weight_grad(self):
        rng = np.random.default_rng(5)
        lin = DenseLinear(rng.normal(size=(4, 3)), dtype=np.float64)
        x = rng.normal(size=(6, 4))
        g_out = rng.normal(size=(6, 3))

        def loss():
            return float(np.sum(lin.forward(x)[0] * g_out))

        _, cache = lin.forward(x)
        _, grads = lin.backward(g_out, cache)
        assert max_rel_err(grads["w"], central_diff(loss, lin.w)) <= 1e-5


class TestDropout:
    def test_requires_rng_in_train_mode(self):
        lin, rng = make_qlinear(4, 4, rank=2, seed=0)
        lin.adapters[0].dropout_p = 0.5
        with pytest.raises(ValueError, match="rng"):
            lin.forward(np.ones((2, 4)), train=True)

    def test_eval_mode_ignores_dropout(self):
        lin, rng = make_qlinear(4, 4, rank=2, seed=0)
        x = rng.normal(size=(2, 4))
        y_ref, _ = lin.forward(x)
        lin.adapters[0].dropout_p = 0.5
        y_eval, _ = lin.forward(x, train=False)
        assert np.array_equal(y_ref, y_eval)

    def test_mask_values_and_scaling(self):
        lin, rng = make_qlinear(8, 4, rank=2, seed=1)
        lin.adapters[0].dropout_p = 0.25
        x = rng.normal(size=(50, 8))
        _, cache = lin.forward(x, train=True, rng=np.random.default_rng(0))
        mask = cache["branches"][0]["mask"]
        assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}

    def test_backward_consistent_with_fixed_mask(self):
        # With the drawn mask held fixed, the layer is an ordinary smooth
        # function; its backward must match central differences of that
        # function.
        lin, rng = make_qlinear(6, 4, rank=2, seed=8)
        lin.adapters[0].dropout_p = 0.5
        x = rng.normal(size=(3, 6))
        g_out = rng.normal(size=(3, 4))
        y, cache = lin.forward(x, train=True, rng=np.random.default_rng(3))
        mask = cache["branches"][0]["mask"]
        d_x, grads = lin.backward(g_out, cache)

        ad = lin.adapters[0]
        w = dequantize(lin.base)

        def loss():
            out = x @ w + ad.scaling * (((x * mask) @ ad.l1) @ ad.l2)
            return float(np.sum(out * g_out))

        assert max_rel_err(grads["adapter0.l1"], central_diff(loss, ad.l1)) <= 1e-5
        assert max_rel_err(grads["adapter0.l2"], central_diff(loss, ad.l2)) <= 1e-5
        assert max_rel_err(d_x, central_diff(loss, x)) <= 1e-5


# ---------------------------------------------------------------------------
# toy model stack
# ---------------------------------------------------------------------------


def small_model(activation="tanh", seed=0):
    rng = np.random.default_rng(seed)
    layers = []
    for label, (i, o) in (("q", (5, 6)), ("o", (6, 3))):
        base = quantize(rng.normal(size=(i, o)), NF4, blocksize=8)
        ad = lora_init(i, o, 2, 4.0, rng, dtype=np.float64)
        ad.l2 = rng.normal(size=ad.l2.shape)
        layers.append(Layer(label, QLinear(base, [ad], dtype=np.float64), activation))
    layers[-1].activation = "identity"
    return ToyModel(layers, placement="all_linear"), rng


class TestToyModel:
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_stack_gradcheck(self, activation):
        model, rng = small_model(activation)
        x = rng.normal(size=(4, 5))
        g_out = rng.normal(size=(4, 3))
        if activation == "relu":
            # keep preactivations away from the kink
            z = model.layers[0].linear.forward(x)[0]
            assert np.min(np.abs(z)) > 1e-3

        def loss():
            return float(np.sum(model.forward(x)[0] * g_out))

        _, caches = model.forward(x)
        grads = model.backward(g_out, caches)
        params = model.trainable_params()
        assert set(grads) == set(params)
        for name, arr in params.items():
            assert max_rel_err(grads[name], central_diff(loss, arr)) <= 1e-5, name

    def test_param_order_deterministic(self):
        model, _ = small_model()
        assert list(model.trainable_params()) == [
            "q.adapter0.l1", "q.adapter0.l2", "o.adapter0.l1", "o.adapter0.l2",
        ]

    def test_placement_validation(self):
        with pytest.raises(ValueError, match="placement"):
            ToyModel([], placement="everything")

    def test_activation_validation(self):
        with pytest.raises(ValueError, match="activation"):
            Layer("q", DenseLinear(np.ones((2, 2))), activation="gelu")

    def test_base_fingerprint_ignores_adapters(self):
        model, rng = small_model()
        fp = model.base_fingerprint()
        model.layers[0].linear.adapters[0].l2 += 1.0
        assert model.base_fingerprint() == fp

    def test_base_fingerprint_sees_base_changes(self):
        model, _ = small_model()
        fp = model.base_fingerprint()
        model.layers[0].linear.base.codes[0] ^= 0xFF
        assert model.base_fingerprint() != fp

    def test_fingerprint_covers_ndarray_base(self):
        lin = QLinear(np.ones((2, 2)), dtype=np.float64)
        model = ToyModel([Layer("q", lin)], placement="none")
        fp = model.base_fingerprint()
        lin.base[0, 0] = 2.0
        assert model.base_fingerprint() != fp


# ---------------------------------------------------------------------------
# placement helpers
# ---------------------------------------------------------------------------


class TestAttachAdapters:
    def make_stack(self):
        rng = np.random.default_rng(0)
        weights = [rng.normal(size=(16, 16)) for _ in range(3)] + [rng.normal(size=(16, 1))]
        linears = quantize_dense_stack(weights, NF4, blocksize=64)
        layers = [
            Layer(label, lin)
            for label, lin in zip(("q", "k", "v", "o"), linears)
        ]
        return ToyModel(layers, placement="none")

    def test_all_linear(self):
        model = self.make_stack()
        attach_adapters(model, "all_linear", rank=4, alpha=4.0,
                        rng=np.random.default_rng(0))
        assert [len(l.linear.adapters) for l in model.layers] == [1, 1, 1, 1]
        assert model.placement == "all_linear"

    def test_qv_only(self):
        model = self.make_stack()
        attach_adapters(model, "qv_only", rank=4, alpha=4.0,
                        rng=np.random.default_rng(0))
        assert [len(l.linear.adapters) for l in model.layers] == [1, 0, 1, 0]

    def test_none(self):
        model = self.make_stack()
        attach_adapters(model, "none", rank=4, alpha=4.0,
                        rng=np.random.default_rng(0))
        assert all(not l.linear.adapters for l in model.layers)

    def test_rank_clamped_to_narrow_head(self):
        model = self.make_stack()
        attach_adapters(model, "all_linear", rank=4, alpha=4.0,
                        rng=np.random.default_rng(0))
        head = model.layers[3].linear.adapters[0]
        assert head.l1.shape == (16, 1)
        assert head.l2.shape == (1, 1)

    def test_placements_constant(self):
        assert PLACEMENTS == ("all_linear", "qv_only", "none")

    def test_quantize_dense_stack_fields(self):
        model = self.make_stack()
        lin = model.layers[0].linear
        assert isinstance(lin, QLinear)
        assert lin.base.dq is not None
        assert lin.adapters == []
        assert lin.dtype == np.float32
