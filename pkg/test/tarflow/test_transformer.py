import math

import numpy as np
import pytest

from tarflow.errors import CacheFullError, ParameterError, ShapeMismatchError
from tarflow.numerics import Tape, Tensor, backward
from tarflow.transformer import (
    DecodeCache,
    attention_causal,
    block_forward,
    block_step,
    causal_mask,
    init_block,
    prime,
)


def _heads(rng, length, batch=1, heads=1):
    shape = (batch, heads, length, 64)
    return tuple(Tensor(rng.normal(size=shape)) for _ in range(3))


def test_causal_mask_offset():
    np.testing.assert_array_equal(
        causal_mask(3, 3), np.tril(np.ones((3, 3), dtype=bool))
    )
    assert causal_mask(1, 4, offset=3).all()
    assert not causal_mask(1, 4, offset=2)[0, 3]


def test_single_position_returns_its_value(rng):
    q, k, v = _heads(rng, 1)
    for tau in (0.5, 1.0, 3.0):
        out = attention_causal(q, k, v, temperature=tau)
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)


def test_zero_queries_average_visible_values(rng):
    _, _, v = _heads(rng, 3)
    zeros = Tensor.zeros((1, 1, 3, 64))
    out = attention_causal(zeros, zeros, v)
    np.testing.assert_allclose(
        out.data[0, 0, 2], v.data[0, 0].mean(axis=0), atol=1e-14
    )
    np.testing.assert_allclose(
        out.data[0, 0, 1], v.data[0, 0, :2].mean(axis=0), atol=1e-14
    )


def test_large_temperature_tends_to_uniform(rng):
    q, k, v = _heads(rng, 4)
    q = Tensor(q.data * 0.1)
    out = attention_causal(q, k, v, temperature=1e6)
    expected = np.cumsum(v.data[0, 0], axis=0) / np.arange(1, 5)[:, None]
    np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-6)


def test_unit_temperature_is_standard_attention(rng):
    q, k, v = _heads(rng, 5, batch=2, heads=2)
    logits = q.data @ np.swapaxes(k.data, -1, -2) / math.sqrt(64)
    logits = np.where(np.tril(np.ones((5, 5), bool)), logits, -np.inf)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    out = attention_causal(q, k, v, temperature=1.0)
    np.testing.assert_allclose(out.data, weights @ v.data, atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_non_positive_temperature(rng, tau):
    q, k, v = _heads(rng, 2)
    with pytest.raises(ParameterError):
        attention_causal(q, k, v, temperature=tau)


def test_attention_length_mismatch(rng):
    q, _, _ = _heads(rng, 2)
    _, k, v = _heads(rng, 3)
    with pytest.raises(ShapeMismatchError):
        attention_causal(q, k, v)


def test_zero_init_heads(make_config, rng):
    config = make_config(image_shape=(1, 4, 4), patch_size=2)
    params = init_block(config, rng)
    for name in ("mu_w", "mu_b", "alpha_w", "alpha_b"):
        assert not np.any(getattr(params, name).data)
    mu, alpha = block_forward(Tensor(rng.normal(size=(4, 4))), None, params)
    assert mu.shape == alpha.shape == (4, 4)
    assert not np.any(mu.data) and not np.any(alpha.data)


def test_block_rejects_wrong_sequence_shape(make_config, rng):
    params = init_block(make_config(), rng)
    with pytest.raises(ShapeMismatchError):
        block_forward(Tensor(np.zeros((5, 1))), None, params)


def test_outputs_only_depend_on_earlier_rows(make_config, rng):
    params = init_block(
        make_config(image_shape=(2, 2, 3)), rng, head_std=0.05
    )
    seq = rng.normal(size=(1, 6, 2))
    mu, alpha = block_forward(Tensor(seq), None, params)
    for j in range(6):
        nudged = seq.copy()
        nudged[0, j] += 0.5
        mu_p, alpha_p = block_forward(Tensor(nudged), None, params)
        seen = slice(0, j + 1)
        np.testing.assert_allclose(
            mu_p.data[0, seen], mu.data[0, seen], rtol=0, atol=1e-14
        )
        np.testing.assert_allclose(
            alpha_p.data[0, seen], alpha.data[0, seen], rtol=0, atol=1e-14
        )
        if j < 5:
            assert not np.allclose(mu_p.data[0, j + 1], mu.data[0, j + 1])


def test_causality_by_autodiff(make_config, rng):
    params = init_block(
        make_config(image_shape=(2, 2, 2)), rng, head_std=0.05
    )
    seq = Tensor(rng.normal(size=(1, 4, 2)))
    for i in range(4):
        with Tape() as tape:
            tape.watch(seq)
            mu, alpha = block_forward(seq, None, params)
            out = (mu[:, i] + alpha[:, i]).sum()
        grad = backward(tape, out)[seq]
        assert np.all(grad[:, i:] == 0.0)
        if i > 0:
            assert np.any(grad[:, :i] != 0.0)


def test_null_label_equals_no_label(make_config, rng):
    params = init_block(make_config(num_classes=3), rng, head_std=0.05)
    seq = Tensor(rng.normal(size=(2, 4, 1)))
    plain = block_forward(seq, None, params)
    null = block_forward(seq, [3, 3], params)
    labelled = block_forward(seq, [0, 1], params)
    np.testing.assert_array_equal(plain[0].data, null[0].data)
    assert not np.allclose(plain[0].data, labelled[0].data)


def test_labels_are_checked(make_config, rng):
    conditional = init_block(make_config(num_classes=2), rng)
    unconditional = init_block(make_config(), rng)
    seq = Tensor(np.zeros((1, 4, 1)))
    with pytest.raises(ParameterError):
        block_forward(seq, 3, conditional)
    with pytest.raises(ParameterError):
        block_forward(seq, 0, unconditional)


@pytest.mark.parametrize("tau", [0.8, 1.0, 1.5])
@pytest.mark.parametrize("num_classes", [0, 3])
def test_incremental_decode_matches_parallel(
    make_config, rng, tau, num_classes
):
    config = make_config(
        image_shape=(2, 2, 3), layers_per_block=2, num_classes=num_classes
    )
    params = init_block(config, rng, head_std=0.05)
    labels = [1, 2] if num_classes else None
    seq = Tensor(rng.normal(size=(2, 6, 2)))
    mu, alpha = block_forward(seq, labels, params, temperature=tau)
    cache = DecodeCache.for_block(params, batch=2)
    for ell in range(5):
        mu_step, alpha_step = block_step(
            cache, seq[:, ell], labels, params, temperature=tau
        )
        np.testing.assert_allclose(
            mu_step.data, mu.data[:, ell + 1], rtol=0, atol=1e-10
        )
        np.testing.assert_allclose(
            alpha_step.data, alpha.data[:, ell + 1], rtol=0, atol=1e-10
        )
    assert cache.length == 5
    assert cache.full


def test_decode_in_single_precision(make_config, rng):
    params = init_block(
        make_config(image_shape=(1, 2, 2), precision="float32"),
        rng,
        head_std=0.05,
    )
    seq = Tensor(rng.normal(size=(1, 4, 1)), dtype=np.float32)
    mu, _ = block_forward(seq, None, params)
    cache = DecodeCache.for_block(params)
    for ell in range(3):
        mu_step, _ = block_step(cache, seq[:, ell], None, params)
        assert mu_step.dtype == np.float32
        np.testing.assert_allclose(
            mu_step.data, mu.data[:, ell + 1], rtol=1e-5, atol=1e-6
        )


def test_prime_predicts_row_zero(make_config, rng):
    params = init_block(make_config(), rng, head_std=0.05)
    seq = Tensor(rng.normal(size=(1, 4, 1)))
    mu, _ = block_forward(seq, None, params)
    cache = DecodeCache.for_block(params)
    mu0, _ = prime(cache, None, params)
    np.testing.assert_allclose(mu0.data[:, 0], mu.data[:, 0], atol=1e-12)
    assert cache.primed and cache.length == 0
    with pytest.raises(CacheFullError):
        prime(cache, None, params)


def test_first_step_ignores_everything_but_token_zero(make_config, rng):
    params = init_block(make_config(), rng, head_std=0.05)
    token = Tensor(rng.normal(size=(1,)))
    first = block_step(DecodeCache.for_block(params), token, None, params)
    again = block_step(DecodeCache.for_block(params), token, None, params)
    assert first[0].shape == (1,)
    np.testing.assert_array_equal(first[0].data, again[0].data)


def test_cache_full(make_config, rng):
    params = init_block(make_config(), rng)
    cache = DecodeCache.for_block(params)
    for _ in range(3):
        block_step(cache, Tensor(np.zeros(1)), None, params)
    assert cache.length == 3
    with pytest.raises(CacheFullError):
        block_step(cache, Tensor(np.zeros(1)), None, params)
    assert cache.full
