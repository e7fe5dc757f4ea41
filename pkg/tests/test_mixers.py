import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scheme import tensor as T
from scheme.errors import ConfigError, DimensionError
from scheme.mixers import (
    ChannelMixer,
    MixerConfig,
    MixerParams,
    bd_mlp_forward,
    cca_forward,
    channel_shuffle,
    dense_mlp_forward,
    init_params,
    scheme_forward,
    shuffle_permutation,
)
from scheme.tensor import Tensor

from conftest import block_diag_embed

GELU1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))


def _params(w1, b1, w2, b2, alpha_raw=None):
    return MixerParams(
        Tensor(np.asarray(w1, float)), Tensor(np.asarray(b1, float)),
        Tensor(np.asarray(w2, float)), Tensor(np.asarray(b2, float)),
        None if alpha_raw is None else Tensor(np.array(alpha_raw, float)),
    )


def _random(cfg, rng, std=0.5):
    p = init_params(cfg, rng, std=std)
    p.b1.data[...] = rng.normal(size=p.b1.shape)
    p.b2.data[...] = rng.normal(size=p.b2.shape)
    p.alpha_raw.data[...] = rng.normal()
    return p


def test_config_name_and_validation():
    assert MixerConfig(d=64, E=8, g1=4, g2=4).name == "44-e8"
    assert MixerConfig(d=64, E=2).name == "11-e2"
    with pytest.raises(ConfigError):
        MixerConfig(d=32, g1=3).validate()
    with pytest.raises(ConfigError):
        MixerConfig(d=3, E=Fraction(1, 2)).validate()
    with pytest.raises(ConfigError):
        MixerConfig(d=4, tau=0.0).validate()
    MixerConfig(d=6, E=Fraction(2, 3), g1=2, g2=2).validate()


def test_dense_identity():
    x = np.arange(6.0).reshape(3, 2)
    p = _params([np.eye(3)], np.zeros(3), [np.eye(3)], np.zeros(3))
    np.testing.assert_array_equal(dense_mlp_forward(x, p, "identity").data, x)


def test_dense_hand_value():
    p = _params([np.eye(2)], [0, 0], [2 * np.eye(2)], [1, 1])
    y = dense_mlp_forward([[0.0], [1.0]], p, "gelu").data
    np.testing.assert_allclose(y, [[1.0], [2 * GELU1 + 1]], atol=1e-15)
    assert y[1, 0] == pytest.approx(2.6826894, abs=1e-7)


def test_dense_equals_bd_with_single_group(rng):
    cfg = MixerConfig(d=8, E=2)
    p = _random(cfg, rng)
    x = rng.normal(size=(8, 5))
    np.testing.assert_array_equal(dense_mlp_forward(x, p).data, bd_mlp_forward(x, cfg, p).data)


def test_dense_shape_errors(rng):
    cfg = MixerConfig(d=4, E=2, g1=2, g2=2)
    with pytest.raises(ConfigError):
        dense_mlp_forward(np.ones((4, 1)), init_params(cfg, rng))
    with pytest.raises(DimensionError):
        dense_mlp_forward(np.ones((5, 1)), init_params(MixerConfig(d=4), rng))


def test_bd_hand_value():
    cfg = MixerConfig(d=4, E=1, g1=2, g2=2, activation="identity")
    p = _params([np.eye(2)] * 2, np.zeros(4), [2 * np.eye(2)] * 2, np.zeros(4))
    y = bd_mlp_forward([[1.0], [2.0], [3.0], [4.0]], cfg, p).data
    np.testing.assert_array_equal(y.ravel(), [2, 4, 6, 8])


def test_bd_divisibility_error(rng):
    cfg = MixerConfig(d=4, E=1, g1=3, g2=1)
    p = init_params(MixerConfig(d=4), rng)
    with pytest.raises(ConfigError):
        bd_mlp_forward(np.ones((4, 2)), cfg, p)


def _oracle_bd(x, cfg, p):
    """Dense evaluation through materialized block-diagonal matrices."""
    act = {"gelu": lambda v: T.gelu(v).data, "identity": lambda v: v}[cfg.activation]
    w1, w2 = block_diag_embed(p.W1.data), block_diag_embed(p.W2.data)
    z = act(w1 @ x + p.b1.data[:, None])
    return w2 @ z + p.b2.data[:, None]


def test_block_diagonal_oracle_many_configs():
    rng = np.random.default_rng(7)
    cases = 0
    for d in (4, 8, 16):
        for E in (1, 2, 4):
            for g1 in (1, 2, 4):
                for g2 in (1, 2, 4):
                    cfg = MixerConfig(d=d, E=E, g1=g1, g2=g2)
                    p = _random(cfg, rng)
                    x = rng.normal(size=(d, int(rng.integers(1, 9))))
                    np.testing.assert_allclose(bd_mlp_forward(x, cfg, p).data, _oracle_bd(x, cfg, p), rtol=0, atol=1e-12)
                    cases += 1
    assert cases >= 50


def test_bd_batched_matches_per_sample(rng):
    cfg = MixerConfig(d=8, E=2, g1=2, g2=4)
    p = _random(cfg, rng)
    xb = rng.normal(size=(3, 8, 5))
    out = bd_mlp_forward(xb, cfg, p).data
    for i in range(3):
        np.testing.assert_allclose(out[i], bd_mlp_forward(xb[i], cfg, p).data, atol=1e-13)


def test_group_permutation_symmetry(rng):
    d, E, g = 8, 2, 4
    cfg = MixerConfig(d=d, E=E, g1=g, g2=g)
    p = _random(cfg, rng)
    x = rng.normal(size=(d, 6))
    perm = np.array([2, 0, 3, 1])
    k_in, k_hid = d // g, E * d // g
    rows_in = np.concatenate([np.arange(k * k_in, (k + 1) * k_in) for k in perm])
    rows_hid = np.concatenate([np.arange(k * k_hid, (k + 1) * k_hid) for k in perm])
    q = MixerParams(
        Tensor(p.W1.data[perm]), Tensor(p.b1.data[rows_hid]), Tensor(p.W2.data[perm]), Tensor(p.b2.data[rows_in])
    )
    y = bd_mlp_forward(x, cfg, p).data
    yq = bd_mlp_forward(x[rows_in], cfg, q).data
    np.testing.assert_allclose(yq, y[rows_in], atol=1e-12)


def test_cca_examples():
    np.testing.assert_array_equal(cca_forward(np.zeros((3, 4))).data, 0.0)
    x = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(cca_forward(x).data, x)
    e = math.e
    expected = np.array([[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]])
    np.testing.assert_allclose(cca_forward(np.eye(2), 1.0).data, expected, atol=1e-15)
    assert expected[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_scheme_alpha_limits(rng):
    cfg = MixerConfig(d=8, E=2, g1=2, g2=2)
    p = _random(cfg, rng)
    x = rng.normal(size=(8, 4))
    p.alpha_raw.data[...] = 60.0
    np.testing.assert_allclose(scheme_forward(x, cfg, p).data, bd_mlp_forward(x, cfg, p).data, atol=1e-12)
    p.alpha_raw.data[...] = -60.0
    np.testing.assert_allclose(scheme_forward(x, cfg, p).data, cca_forward(x, cfg.tau).data, atol=1e-12)


def test_scheme_inference_is_bd_only(rng):
    cfg = MixerConfig(d=8, E=4, g1=4, g2=4, mode="inference")
    p = _random(cfg, rng)
    x = rng.normal(size=(8, 4))
    ref = bd_mlp_forward(x, cfg, p).data
    for raw in (-3.0, 0.0, 5.0):
        p.alpha_raw.data[...] = raw
        np.testing.assert_array_equal(scheme_forward(x, cfg, p).data, ref)


def test_inference_mode_records_no_cca_ops(rng):
    cfg = MixerConfig(d=8, E=2, g1=2, g2=2, mode="inference")
    p = _random(cfg, rng)
    with T.Tape() as tape:
        scheme_forward(Tensor(rng.normal(size=(8, 3)), requires_grad=True), cfg, p)
    assert {r.op for r in tape.records}.isdisjoint({"softmax_rows", "sigmoid"})


def test_shuffle_examples(rng):
    z = rng.normal(size=(6, 3))
    np.testing.assert_array_equal(channel_shuffle(z, 1).data, z)
    rows = np.array([[1.0], [2.0], [3.0], [4.0]])  # a, b, c, d
    np.testing.assert_array_equal(channel_shuffle(rows, 2).data.ravel(), [1, 3, 2, 4])
    perm = shuffle_permutation(12, 3)
    back = np.argsort(perm)
    z = rng.normal(size=(12, 2))
    np.testing.assert_array_equal(channel_shuffle(z, 3).data[back], z)
    with pytest.raises(ConfigError):
        channel_shuffle(z, 5)


def test_token_permutation_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cfg = MixerConfig(d=8, E=2, g1=2, g2=4)
        p = _random(cfg, rng)
        x = rng.normal(size=(8, 6))
        perm = rng.permutation(6)
        np.testing.assert_allclose(
            scheme_forward(x[:, perm], cfg, p).data, scheme_forward(x, cfg, p).data[:, perm], atol=1e-6
        )


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30))
def test_alpha_in_open_interval(raw):
    cfg = MixerConfig(d=4, alpha_init=raw)
    alpha = init_params(cfg, np.random.default_rng(0)).alpha
    assert 0.0 < alpha < 1.0


def test_default_alpha_is_half(rng):
    assert init_params(MixerConfig(d=4), rng).alpha == 0.5


@pytest.mark.parametrize("kind", ["dense", "bdmlp", "scheme", "scheme_shuffle"])
def test_mixer_gradients(kind):
    rng = np.random.default_rng(11)
    g = 1 if kind == "dense" else 2
    cfg = MixerConfig(d=8, E=2, g1=g, g2=g)
    mixer = ChannelMixer(kind, cfg, _random(cfg, rng))
    if not mixer.has_cca:
        mixer.params.alpha_raw = None
    x = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
    proj = rng.normal(size=(8, 4))
    f = lambda: T.sum(mixer(x) * proj)
    tensors = {"x": x, **mixer.params.tensors()}
    with T.Tape():
        T.backward(f())
    for name, t in tensors.items():
        assert T.relative_error(t.grad, T.finite_diff_grad(f, t, 1e-6)) <= 1e-5, name


def test_channel_mixer_rejects_grouped_dense(rng):
    with pytest.raises(ConfigError):
        ChannelMixer.create("dense", MixerConfig(d=8, g1=2, g2=2), rng)
    with pytest.raises(ConfigError):
        ChannelMixer.create("conv", MixerConfig(d=8), rng)


def test_set_mode_keeps_params(rng):
    mixer = ChannelMixer.create("scheme", MixerConfig(d=8, E=2, g1=2, g2=2), rng)
    before = {k: t.data.copy() for k, t in mixer.params.tensors().items()}
    mixer.set_mode("inference")
    mixer.set_mode("train")
    for k, t in mixer.params.tensors().items():
        np.testing.assert_array_equal(t.data, before[k])
    assert dataclasses.replace(mixer.cfg).mode == "train"
