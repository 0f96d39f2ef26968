import numpy as np
import pytest

from canf.condaware import (
    AdaptiveKernelBank,
    CondConv2d,
    CondLinear,
    ConditionEmbedder,
    WeightGenerator,
    budget_matched_k,
    conditional_conv_reference,
    conditional_linear_reference,
    fused_conditional_conv,
    fused_conditional_linear,
    timestep_sinusoid,
)
from canf.nn import param_rng
from canf.tensor import Tensor, no_grad


def embedder(sources=("class", "timestep"), d=8, n_classes=3, max_t=100):
    return ConditionEmbedder(d, n_classes, max_t, sources=sources,
                             rng_class=param_rng(0, "cls"), rng_time=param_rng(0, "time"))


# -- condition embedding ---------------------------------------------------------

def test_class_only_embedding_ignores_timestep():
    emb = embedder(sources=("class",))
    a = emb(np.array([1, 2]), np.array([3, 3])).numpy()
    b = emb(np.array([1, 2]), np.array([97, 42])).numpy()
    assert np.array_equal(a, b)


def test_timestep_only_embedding_ignores_class():
    emb = embedder(sources=("timestep",))
    a = emb(np.array([0, 0]), np.array([5, 9])).numpy()
    b = emb(np.array([2, 1]), np.array([5, 9])).numpy()
    assert np.array_equal(a, b)


def test_sinusoid_at_zero():
    enc = timestep_sinusoid(np.array([0]), 8)
    assert np.array_equal(enc[0, :4], np.zeros(4, np.float32))
    assert np.array_equal(enc[0, 4:], np.ones(4, np.float32))


def test_embedding_composes_additively():
    both = embedder()
    cls_only = embedder(sources=("class",))
    t_only = embedder(sources=("timestep",))
    # same underlying tables by construction (same name-keyed rngs)
    labels, ts = np.array([1, 0]), np.array([7, 12])
    total = both(labels, ts).numpy()
    parts = cls_only(labels, ts).numpy() + t_only(labels, ts).numpy()
    assert np.abs(total - parts).max() <= 1e-6


def test_embedding_range_errors():
    emb = embedder(n_classes=3, max_t=50)
    with pytest.raises(ValueError, match="class label"):
        emb(np.array([4]), np.array([0]))  # 3 is the null class, 4 is out of range
    with pytest.raises(ValueError, match="timestep"):
        emb(np.array([0]), np.array([50]))


def test_null_class_row_is_valid_input():
    emb = embedder(n_classes=3)
    out = emb(np.array([3]), np.array([0]))
    assert np.isfinite(out.numpy()).all()


# -- weight generation -------------------------------------------------------------

def test_zero_generator_emits_zero_weights():
    gen = WeightGenerator((4, 3, 3), d=6)
    c = Tensor(np.random.default_rng(0).standard_normal((5, 6)).astype(np.float32))
    assert np.abs(gen.generate(c).numpy()).max() == 0.0


def test_generator_is_linear_in_condition():
    gen = WeightGenerator((2, 5), d=4)
    gen.map_weights.data[:] = np.random.default_rng(1).standard_normal((10, 4))
    c = Tensor(np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32))
    one = gen.generate(c).numpy()
    two = gen.generate(Tensor(c.numpy() * 2.0)).numpy()
    assert np.abs(two - 2 * one).max() <= 1e-5


def test_generator_parameter_count_formula():
    # 16 depthwise 3x3 kernels -> 144 weights; d=8 -> 1152 parameters
    gen = WeightGenerator((16, 1, 3, 3), d=8)
    assert gen.param_count() == 144 * 8 == 1152


# -- reference vs fused execution -----------------------------------------------------

def test_zero_conditional_weight_reduces_to_static_conv():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 4, 6, 6)).astype(np.float32))
    w = Tensor((0.1 * rng.standard_normal((4, 1, 3, 3))).astype(np.float32))
    zeros = Tensor(np.zeros((3, 4, 1, 3, 3), np.float32))
    from canf.tensor import conv2d
    with no_grad():
        fused = fused_conditional_conv(x, w, zeros, padding=1, groups=4).numpy()
        static = conv2d(x, w, padding=1, groups=4).numpy()
    assert np.array_equal(fused, static)


def test_scalar_fusion_case():
    # (W + W_c) x = (1 + 2) * 3 = 9 in the 1x1 linear picture
    x = Tensor(np.array([[3.0]], dtype=np.float32))
    w = Tensor(np.array([[1.0]], dtype=np.float32))
    w_c = Tensor(np.array([[[2.0]]], dtype=np.float32))
    out = fused_conditional_linear(x, w, w_c)
    assert out.numpy()[0, 0] == 9.0


def test_weight_sum_equals_output_sum_linear():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 6, 10)).astype(np.float32))
    w = Tensor((0.05 * rng.standard_normal((10, 7))).astype(np.float32))
    w_c = Tensor((0.05 * rng.standard_normal((4, 10, 7))).astype(np.float32))
    with no_grad():
        summed = fused_conditional_linear(x, w, w_c).numpy()
        split = (fused_conditional_linear(x, w, Tensor(np.zeros_like(w_c.numpy()))).numpy()
                 + fused_conditional_linear(x, Tensor(np.zeros_like(w.numpy())), w_c).numpy())
    assert np.abs(summed - split).max() <= 1e-6


@pytest.mark.parametrize("b,c,k,depthwise", [
    (1, 4, 3, True), (4, 8, 3, True), (2, 4, 1, False), (5, 8, 3, False),
])
def test_fused_grouped_matches_reference_loop(b, c, k, depthwise):
    rng = np.random.default_rng(b * 31 + c)
    groups = c if depthwise else 1
    x = Tensor(rng.standard_normal((b, c, 6, 6)).astype(np.float32))
    w = Tensor(rng.standard_normal((c, c // groups, k, k)).astype(np.float32))
    w_c = Tensor(rng.standard_normal((b, c, c // groups, k, k)).astype(np.float32))
    with no_grad():
        ref = conditional_conv_reference(x, w, w_c, padding=k // 2, groups=groups).numpy()
        fused = fused_conditional_conv(x, w, w_c, padding=k // 2, groups=groups).numpy()
    assert np.abs(ref - fused).max() <= 1e-5


def test_fused_single_sample_equals_plain_call():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
    w_c = Tensor(rng.standard_normal((1, 4, 4, 3, 3)).astype(np.float32))
    from canf.tensor import conv2d
    with no_grad():
        fused = fused_conditional_conv(x, w, w_c, padding=1).numpy()
        plain = conv2d(x, Tensor(w.numpy() + w_c.numpy()[0]), padding=1).numpy()
    assert np.abs(fused - plain).max() <= 1e-6


def test_zeroed_sample_kernel_only_silences_that_sample():
    rng = np.random.default_rng(7)
    b, c = 3, 4
    x = Tensor(rng.standard_normal((b, c, 5, 5)).astype(np.float32))
    w = Tensor(rng.standard_normal((c, 1, 3, 3)).astype(np.float32))
    w_c = Tensor((-np.repeat(w.numpy()[None], b, 0)).astype(np.float32))  # cancels W everywhere
    w_c.data[1:] = 0.0  # samples 1.. keep the static kernel
    with no_grad():
        out = fused_conditional_conv(x, w, w_c, padding=1, groups=c).numpy()
        ref = conditional_conv_reference(x, w, w_c, padding=1, groups=c).numpy()
    assert np.abs(out[0]).max() == 0.0
    assert np.abs(out[1:]).max() > 0.0
    assert np.abs(out - ref).max() <= 1e-6


def test_linear_reference_matches_fused():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((3, 4, 6)).astype(np.float32))
    w = Tensor(rng.standard_normal((6, 5)).astype(np.float32))
    w_c = Tensor(rng.standard_normal((3, 6, 5)).astype(np.float32))
    with no_grad():
        ref = conditional_linear_reference(x, w, w_c).numpy()
        fused = fused_conditional_linear(x, w, w_c).numpy()
    assert np.abs(ref - fused).max() <= 1e-5


# -- adaptive kernel selection ----------------------------------------------------------

def test_bank_with_single_kernel_equals_plain_conv():
    rng = np.random.default_rng(9)
    layer = CondConv2d(4, 4, 3, param_rng(0, "dw"), "dw-conv", padding=1, groups=4)
    layer.adapter = AdaptiveKernelBank(layer.weight.shape, d=6, k=1,
                                       rng=param_rng(0, "bank"), static_weight=layer.weight)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    c = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    from canf.tensor import conv2d
    with no_grad():
        got = layer(x, c).numpy()
        want = (conv2d(x, layer.weight, padding=1, groups=4)
                + layer.bias.reshape(1, 4, 1, 1).broadcast_to((2, 4, 5, 5))).numpy()
    assert np.abs(got - want).max() <= 1e-6


def test_bank_equal_logits_gives_mean_kernel():
    bank = AdaptiveKernelBank((2, 1, 3, 3), d=4, k=3, rng=param_rng(1, "bank"))
    bank.router_weights.data[:] = 0.0  # equal logits for every c
    c = Tensor(np.random.default_rng(10).standard_normal((5, 4)).astype(np.float32))
    got = bank.per_sample_weight(None, c).numpy()
    mean = bank.base_kernels.numpy().mean(axis=0)
    assert np.abs(got - mean[None]).max() <= 1e-6


def test_bank_matches_explicit_mixture_oracle():
    rng = np.random.default_rng(11)
    k, d = 4, 5
    bank = AdaptiveKernelBank((3, 2), d=d, k=k, rng=param_rng(2, "bank"))
    c_np = rng.standard_normal((6, d)).astype(np.float32)
    got = bank.per_sample_weight(None, Tensor(c_np)).numpy()
    logits = c_np @ bank.router_weights.numpy().T
    coeff = np.exp(logits - logits.max(-1, keepdims=True))
    coeff /= coeff.sum(-1, keepdims=True)
    want = np.einsum("bk,kij->bij", coeff, bank.base_kernels.numpy())
    assert np.abs(got - want).max() <= 1e-6
    assert np.allclose(bank.coefficients(Tensor(c_np)).numpy().sum(-1), 1.0, atol=1e-6)


def test_bank_initialized_from_static_weight_reduces_to_it():
    rng = np.random.default_rng(12)
    layer = CondLinear(6, 4, param_rng(3, "lin"), "out-proj")
    layer.adapter = AdaptiveKernelBank(layer.weight.shape, d=5, k=7,
                                       rng=param_rng(3, "bank"), static_weight=layer.weight)
    c = Tensor(rng.standard_normal((3, 5)).astype(np.float32))
    mixed = layer.adapter.per_sample_weight(layer.weight, c).numpy()
    assert np.abs(mixed - layer.weight.numpy()[None]).max() <= 1e-6


def test_budget_matched_k_stays_under_generator_cost():
    shape, d = (128, 1, 3, 3), 64
    k = budget_matched_k(shape, d)
    p = int(np.prod(shape))
    assert k * (p + d) <= p * d
    assert (k + 1) * (p + d) > p * d


# -- layer-level behavior ---------------------------------------------------------------

def test_shared_generator_same_delta_different_outputs():
    rng = np.random.default_rng(13)
    gen = WeightGenerator((6, 6), d=4, shared=True)
    gen.map_weights.data[:] = 0.1 * rng.standard_normal((36, 4))
    a = CondLinear(6, 6, param_rng(4, "a"), "out-proj")
    b = CondLinear(6, 6, param_rng(5, "b"), "out-proj")
    a.adapter = gen
    b.adapter = gen
    c = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    delta_a = gen.per_sample_weight(a.weight, c).numpy() - a.weight.numpy()
    delta_b = gen.per_sample_weight(b.weight, c).numpy() - b.weight.numpy()
    assert np.abs(delta_a - delta_b).max() <= 1e-6  # identical conditional weight
    x = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    with no_grad():
        assert np.abs(a(x, c).numpy() - b(x, c).numpy()).max() > 1e-3


def test_layer_reference_method_matches_forward():
    rng = np.random.default_rng(14)
    layer = CondConv2d(6, 6, 3, param_rng(6, "dw"), "dw-conv", padding=1, groups=6)
    layer.adapter = WeightGenerator(layer.weight.shape, d=8)
    layer.adapter.map_weights.data[:] = 0.1 * rng.standard_normal(layer.adapter.map_weights.shape)
    x = Tensor(rng.standard_normal((4, 6, 5, 5)).astype(np.float32))
    c = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    with no_grad():
        assert np.abs(layer(x, c).numpy() - layer.reference(x, c).numpy()).max() <= 1e-5


def test_generator_receives_gradient_on_training_step():
    from canf.optim import Adam
    rng = np.random.default_rng(15)
    layer = CondLinear(5, 4, param_rng(7, "lin"), "patch-embed")
    layer.adapter = WeightGenerator(layer.weight.shape, d=3)
    opt = Adam(layer.parameters() + layer.adapter.parameters())
    x = Tensor(rng.standard_normal((2, 5)).astype(np.float32))
    c = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
    before = layer.adapter.map_weights.numpy().copy()
    loss = (layer(x, c) ** 2).mean()
    loss.backward()
    opt.step()
    update = np.linalg.norm(layer.adapter.map_weights.numpy() - before)
    assert update > 0.0
