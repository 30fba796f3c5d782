import numpy as np
import pytest

from hyperpelt import tensor as T
from hyperpelt.errors import ContractError, DimensionError
from hyperpelt.hypernets import (AdapterHypernet, AdapterWeights, PrefixHypernet, apply_adapter,
                                 gated_head, generate_adapter_weights, generate_prefix,
                                 lambda_gate, prefix_head, random_prefix_instance,
                                 verify_prefix_equivalence)


@pytest.fixture
def nets():
    rng = np.random.default_rng(0)
    prefix = PrefixHypernet(T.Tensor(rng.normal(size=(8, 32))), T.Tensor(rng.normal(size=(8, 32))))
    adapter = AdapterHypernet(T.Tensor(rng.normal(size=(8, 32 * 8))),
                              T.Tensor(rng.normal(size=(8, 8 * 32))), 32, 8)
    return prefix, adapter


def test_prefix_generation_shape_zero_and_scaling(nets):
    prefix, _ = nets
    i = np.random.default_rng(1).normal(size=(4, 8))
    p_k, p_v = generate_prefix(prefix, T.Tensor(i))
    assert p_k.shape == p_v.shape == (4, 32)
    z_k, z_v = generate_prefix(prefix, T.Tensor(np.zeros((4, 8))))
    assert (z_k.data == 0).all() and (z_v.data == 0).all()
    d_k, d_v = generate_prefix(prefix, T.Tensor(2 * i))
    np.testing.assert_array_equal(d_k.data, 2 * p_k.data)
    np.testing.assert_array_equal(d_v.data, 2 * p_v.data)


def test_prefix_width_mismatch(nets):
    with pytest.raises(DimensionError):
        generate_prefix(nets[0], T.Tensor(np.zeros((4, 7))))


def test_adapter_generation_shapes_zero_and_additivity(nets):
    _, adapter = nets
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=8), rng.normal(size=8)
    up, down = generate_adapter_weights(adapter, T.Tensor(a))
    assert up.shape == (32, 8) and down.shape == (8, 32)
    zu, zd = generate_adapter_weights(adapter, T.Tensor(np.zeros(8)))
    assert not zu.data.any() and not zd.data.any()
    su, sd = generate_adapter_weights(adapter, T.Tensor(a + b))
    bu, bd = generate_adapter_weights(adapter, T.Tensor(b))
    np.testing.assert_allclose(su.data, up.data + bu.data, atol=1e-5)
    np.testing.assert_allclose(sd.data, down.data + bd.data, atol=1e-5)
    with pytest.raises(DimensionError):
        generate_adapter_weights(adapter, T.Tensor(np.zeros(9)))


def test_batched_adapter_generation(nets):
    pooled = np.random.default_rng(3).normal(size=(3, 2, 8))
    up, down = generate_adapter_weights(nets[1], T.Tensor(pooled))
    assert up.shape == (3, 2, 32, 8) and down.shape == (3, 2, 8, 32)
    one_up, _ = generate_adapter_weights(nets[1], T.Tensor(pooled[1, 0]))
    np.testing.assert_allclose(up.data[1, 0], one_up.data, rtol=1e-5)


def _weights(rng, lam=0.2, down=None, ln_bias=None):
    return AdapterWeights(
        up=T.Tensor(rng.normal(size=(32, 8))),
        down=T.Tensor(rng.normal(size=(8, 32)) if down is None else down),
        lam=T.Tensor([lam]), ln_scale=T.Tensor(rng.normal(1, 0.2, 32)),
        ln_bias=T.Tensor(rng.normal(0, 0.2, 32) if ln_bias is None else ln_bias))


def test_adapter_identity_cases():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 32)).astype(np.float32)
    np.testing.assert_array_equal(apply_adapter(_weights(rng, lam=0.0), T.Tensor(x)).data, x)
    w = _weights(rng, lam=0.7, down=np.zeros((8, 32)), ln_bias=np.zeros(32))
    np.testing.assert_array_equal(apply_adapter(w, T.Tensor(x)).data, x)


def test_adapter_recomposed_from_primitives():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(2, 3, 32)))
    w = _weights(rng)
    inner = T.matmul(T.gelu(T.matmul(x, T.transpose(w.down, (1, 0)))), T.transpose(w.up, (1, 0)))
    ref = T.add(T.mul(T.layernorm(inner, w.ln_scale, w.ln_bias), w.lam), x)
    np.testing.assert_allclose(apply_adapter(w, x).data, ref.data, atol=1e-6)


def test_adapter_residual_bound():
    rng = np.random.default_rng(6)
    x = T.Tensor(rng.normal(size=(1, 5, 32)))
    w = _weights(rng, lam=0.3)
    delta = apply_adapter(w, x).data - x.data
    # a normalised row has norm <= sqrt(d) before scale and shift
    row_bound = np.abs(w.ln_scale.data).max() * np.sqrt(32) + np.linalg.norm(w.ln_bias.data)
    assert (np.linalg.norm(delta, axis=-1) <= 0.3 * row_bound * (1 + 1e-5)).all()


def test_lambda_gate_examples():
    rng = np.random.default_rng(7)
    d = 6
    x = rng.normal(size=d)
    w_q = np.zeros((d, d))       # every logit is 0
    assert lambda_gate(x, w_q, np.zeros((2, d)), np.zeros((6, d))) == pytest.approx(0.25, abs=1e-12)
    assert lambda_gate(x, w_q, np.zeros((0, d)), np.zeros((6, d))) == 0.0
    q = x @ np.eye(d)
    far = -1e4 * np.tile(q / np.linalg.norm(q), (2, 1))
    assert lambda_gate(x, np.eye(d), far, rng.normal(size=(6, d))) < 1e-4
    with pytest.raises(ContractError):
        lambda_gate(x, w_q, np.zeros((0, d)), np.zeros((0, d)))


def test_lambda_gate_in_unit_interval():
    rng = np.random.default_rng(8)
    for _ in range(50):
        inst = random_prefix_instance(rng, n_prefix=int(rng.integers(1, 9)))
        ck = inst["context"] @ inst["w_k"]
        lam = lambda_gate(inst["x"][0], inst["w_q"], inst["p_k"], ck)
        assert 0.0 < lam < 1.0


def test_equivalence_without_prefixes_is_plain_attention():
    rng = np.random.default_rng(9)
    inst = random_prefix_instance(rng, n_prefix=0)
    a = prefix_head(**inst)
    b = gated_head(**inst)
    np.testing.assert_array_equal(a, b)


def test_equivalence_random_instances():
    rng = np.random.default_rng(10)
    worst = max(verify_prefix_equivalence(random_prefix_instance(rng)).max_deviation
                for _ in range(100))
    assert worst < 1e-5


def test_wrong_gate_is_detected():
    rng = np.random.default_rng(11)
    inst = random_prefix_instance(rng, n_prefix=3, n_context=5, width=8)
    assert verify_prefix_equivalence(inst).passed
    res = verify_prefix_equivalence(inst, lam_override=0.9)
    assert not res.passed and res.max_deviation > 1e-3
