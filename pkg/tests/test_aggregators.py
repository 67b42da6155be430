import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trackrank.aggregators import (HEAD_PRESETS, AttentionConfig, AttentionHead, PoolConfig,
                                   RnnConfig, RNNHead, attention_aggregate, attention_scores,
                                   build_head, normalize_scores, rnn_aggregate, temporal_pool)
from trackrank.tensor import ShapeError, Tensor


def arr(x):
    return np.asarray(x, dtype=float)


# pooling

def test_avg_pool_example():
    np.testing.assert_array_equal(temporal_pool("avg", arr([[1, 3], [3, 5]])).data, [2, 4])


def test_max_pool_example():
    np.testing.assert_array_equal(temporal_pool("max", arr([[1, 5], [3, 2]])).data, [3, 5])


def test_avg_pool_single_frame_is_identity(rng):
    frame = rng.normal(size=(1, 6))
    np.testing.assert_array_equal(temporal_pool("avg", frame).data, frame[0])


def test_map_form_is_spatially_averaged(rng):
    clip = rng.normal(size=(3, 2, 2, 4))
    np.testing.assert_allclose(temporal_pool("avg", clip).data, clip.mean(axis=(0, 1, 2)),
                               rtol=1e-12)


def test_empty_clip_is_an_error():
    with pytest.raises(ShapeError):
        temporal_pool("avg", np.zeros((0, 3)))


# normalization

def test_softmax_normalization_examples():
    np.testing.assert_allclose(normalize_scores("softmax", arr([0, 0, 0])).data, [1 / 3] * 3,
                               rtol=1e-15)
    np.testing.assert_allclose(normalize_scores("softmax", arr([np.log(2), 0])).data,
                               [2 / 3, 1 / 3], rtol=1e-15)


def test_sigmoid_l1_example():
    np.testing.assert_array_equal(normalize_scores("sigmoid_l1", arr([0, 0])).data, [0.5, 0.5])


scores = arrays(np.float64, st.integers(1, 16), elements=st.floats(-30, 30))


@settings(max_examples=100, deadline=None)
@given(scores, st.sampled_from(["softmax", "sigmoid_l1"]))
def test_weights_are_a_distribution(s, mode):
    w = normalize_scores(mode, s).data
    assert ((w > 0) & (w <= 1)).all()
    assert abs(w.sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(scores, st.floats(-10, 10))
def test_softmax_shift_invariance(s, c):
    np.testing.assert_allclose(normalize_scores("softmax", s + c).data,
                               normalize_scores("softmax", s).data, rtol=1e-9, atol=1e-15)


# weighted aggregation

def test_aggregate_examples():
    frames = arr([[2, 0], [0, 2]])
    np.testing.assert_array_equal(attention_aggregate(frames, arr([0.5, 0.5])).data, [1, 1])
    np.testing.assert_array_equal(attention_aggregate(frames, arr([1, 0])).data, [2, 0])
    np.testing.assert_array_equal(
        attention_aggregate(frames, arr([0.5, 0.5]), literal_eq1=True).data, [0.5, 0.5])


def test_aggregate_length_mismatch():
    with pytest.raises(ShapeError):
        attention_aggregate(np.zeros((3, 2)), np.ones(2) / 2)


@pytest.mark.parametrize("T", [1, 2, 4, 8, 16])
def test_uniform_attention_equals_average_pooling(T, rng):
    frames = rng.normal(size=(T, 5))
    uniform = normalize_scores("softmax", np.zeros(T))
    assert np.array_equal(attention_aggregate(frames, uniform).data,
                          temporal_pool("avg", frames).data)


# attention score networks

def dense_scores(config, params, clip):
    """Two-layer score network written as explicit dense matrices."""
    T = clip.shape[0]
    W1 = params["conv_w"].reshape(-1, config.d_t)
    hidden = clip.reshape(T, -1) @ W1 + params["conv_b"]
    if config.network == "spatial_fc":
        return (hidden @ params["score_w"]).ravel() + params["score_b"][0]
    k = config.temporal_kernel
    # banded Toeplitz operator over time, zero padding
    A = np.zeros((T, T * config.d_t))
    for t in range(T):
        for j in range(k):
            src = t + j - k // 2
            if 0 <= src < T:
                A[t, src * config.d_t:(src + 1) * config.d_t] = params["score_w"][j, :, 0]
    return A @ hidden.ravel() + params["score_b"][0]


@pytest.mark.parametrize("network", ["spatial_fc", "spatial_temporal_conv"])
@pytest.mark.parametrize("kernel", [1, 3, 5])
@pytest.mark.parametrize("T", [1, 2, 6])
def test_attention_scores_match_dense_oracle(network, kernel, T):
    rng = np.random.default_rng(T * 10 + kernel)
    cfg = AttentionConfig(network, "softmax", d_t=4, temporal_kernel=kernel)
    head = AttentionHead(cfg, (2, 3, 2), rng)
    for p in head.params.values():  # non-zero biases too
        p.data = rng.normal(size=p.shape)
    clip = rng.normal(size=(T, 2, 3, 2))
    params = {k: v.data for k, v in head.params.items()}
    np.testing.assert_allclose(attention_scores(head, clip).data,
                               dense_scores(cfg, params, clip), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("network", ["spatial_fc", "spatial_temporal_conv"])
def test_zero_init_scores_equal_bias(network, rng):
    head = AttentionHead(AttentionConfig(network, "softmax", d_t=3), (2, 2, 3), init="zeros")
    np.testing.assert_array_equal(attention_scores(head, rng.normal(size=(5, 2, 2, 3))).data,
                                  np.zeros(5))
    head.params["score_b"].data = np.array([0.7])
    np.testing.assert_array_equal(attention_scores(head, rng.normal(size=(5, 2, 2, 3))).data,
                                  np.full(5, 0.7))


def test_single_frame_temporal_conv_uses_centre_tap(rng):
    cfg = AttentionConfig("spatial_temporal_conv", "softmax", d_t=3)
    head = AttentionHead(cfg, (1, 1, 4), rng)
    clip = rng.normal(size=(1, 1, 1, 4))
    p = {k: v.data for k, v in head.params.items()}
    hidden = clip.reshape(1, 4) @ p["conv_w"].reshape(4, 3) + p["conv_b"]
    expected = hidden @ p["score_w"][1] + p["score_b"]
    np.testing.assert_allclose(attention_scores(head, clip).data, expected.ravel(), rtol=1e-14)


def test_attention_extent_mismatch():
    head = AttentionHead(AttentionConfig(d_t=2), (2, 2, 3))
    with pytest.raises(ShapeError, match="spatial extent"):
        attention_scores(head, np.zeros((4, 3, 2, 3)))


# recurrent heads

def test_zero_init_lstm_outputs_zero(rng):
    for readout in ("final_state", "output_average"):
        head = RNNHead(RnnConfig("lstm", 5, readout), 3, init="zeros")
        out = rnn_aggregate(head, rng.normal(size=(4, 3))).data
        assert np.array_equal(out, np.zeros(5))


def test_lstm_initialization(rng):
    H = 4
    head = RNNHead(RnnConfig("lstm", H), 3, rng)
    b = head.params["b"].data
    assert np.array_equal(b[H:2 * H], np.ones(H))
    bound = 1 / np.sqrt(H)
    for name in ("w_ih", "w_hh"):
        assert np.abs(head.params[name].data).max() <= bound


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_loop(params, frames, H):
    """Scalar-by-scalar GRU recurrences: r, z gates, candidate n."""
    w_ih, w_hh = params["w_ih"], params["w_hh"]
    b_ih, b_hh = params["b_ih"], params["b_hh"]
    D = frames.shape[1]
    h = [0.0] * H
    outputs = []
    for x in frames:
        new = []
        for j in range(H):
            def pre(gate, vec, w, b, n):
                col = gate * H + j
                return b[col] + sum(vec[i] * w[i, col] for i in range(n))
            r = sigmoid(pre(0, x, w_ih, b_ih, D) + pre(0, h, w_hh, b_hh, H))
            z = sigmoid(pre(1, x, w_ih, b_ih, D) + pre(1, h, w_hh, b_hh, H))
            n = np.tanh(pre(2, x, w_ih, b_ih, D) + r * pre(2, h, w_hh, b_hh, H))
            new.append((1 - z) * n + z * h[j])
        h = new
        outputs.append(h)
    return np.array(h), np.mean(outputs, axis=0)


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    H, D = 3, 4
    frames = rng.normal(size=(3, D))
    final = RNNHead(RnnConfig("gru", H, "final_state"), D, np.random.default_rng(seed))
    avg = RNNHead(RnnConfig("gru", H, "output_average"), D, np.random.default_rng(seed))
    want_final, want_avg = gru_loop({k: v.data for k, v in final.params.items()}, frames, H)
    np.testing.assert_allclose(rnn_aggregate(final, frames).data, want_final, rtol=1e-12)
    np.testing.assert_allclose(rnn_aggregate(avg, frames).data, want_avg, rtol=1e-12)


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_single_step_readouts_agree(cell, rng):
    frame = rng.normal(size=(1, 4))
    a = RNNHead(RnnConfig(cell, 3, "final_state"), 4, np.random.default_rng(9))
    b = RNNHead(RnnConfig(cell, 3, "output_average"), 4, np.random.default_rng(9))
    assert np.array_equal(rnn_aggregate(a, frame).data, rnn_aggregate(b, frame).data)


# symmetry

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.sampled_from(["avg", "max"]), st.integers(0, 2**32 - 1))
def test_pooling_is_permutation_invariant(T, mode, seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(T, 4))
    perm = rng.permutation(T)
    np.testing.assert_allclose(temporal_pool(mode, frames[perm]).data,
                               temporal_pool(mode, frames).data, rtol=1e-12, atol=1e-15)


def test_symmetric_weights_are_permutation_invariant(rng):
    frames = rng.normal(size=(5, 3))
    w = np.full(5, 0.2)
    perm = rng.permutation(5)
    np.testing.assert_allclose(attention_aggregate(frames[perm], w).data,
                               attention_aggregate(frames, w).data, rtol=1e-12)


@pytest.mark.parametrize("name", ["lstm_final", "lstm_avg", "gru_final", "gru_avg"])
def test_rnn_is_permutation_sensitive(name):
    rng = np.random.default_rng(0)
    head = build_head(HEAD_PRESETS[name].__class__(HEAD_PRESETS[name].cell, 8,
                                                   HEAD_PRESETS[name].readout), (4,), rng)
    frames = rng.normal(size=(4, 4))
    base = rnn_aggregate(head, frames).data
    diffs = [np.abs(rnn_aggregate(head, frames[list(p)]).data - base).max()
             for p in itertools.permutations(range(4)) if list(p) != [0, 1, 2, 3]]
    assert max(diffs) > 1e-6


# shapes

@pytest.mark.parametrize("name", sorted(HEAD_PRESETS))
@pytest.mark.parametrize("T", [1, 2, 4, 8, 16])
def test_output_shape_independent_of_T(name, T, rng):
    cfg = HEAD_PRESETS[name]
    if isinstance(cfg, AttentionConfig):
        cfg = AttentionConfig(cfg.network, cfg.normalization, d_t=4)
    elif isinstance(cfg, RnnConfig):
        cfg = RnnConfig(cfg.cell, 6, cfg.readout)
    head = build_head(cfg, (2, 2, 5), rng)
    out = head(Tensor(rng.normal(size=(3, T, 2, 2, 5))))
    assert out.shape == (3, head.out_dim)
    assert head.out_dim == (6 if isinstance(cfg, RnnConfig) else 5)


def test_vector_form_attention_uses_unit_maps(rng):
    head = build_head(AttentionConfig(d_t=3), (7,), rng)
    assert head.map_shape == (1, 1, 7)
    assert head(Tensor(rng.normal(size=(2, 4, 7)))).shape == (2, 7)


@pytest.mark.parametrize("bad", [dict(d_t=0), dict(temporal_kernel=2), dict(network="x"),
                                 dict(normalization="l2")])
def test_attention_config_validation(bad):
    with pytest.raises(ValueError):
        AttentionConfig(**bad)


def test_rnn_and_pool_config_validation():
    with pytest.raises(ValueError):
        RnnConfig(hidden_size=0)
    with pytest.raises(ValueError):
        RnnConfig(cell="rnn")
    with pytest.raises(ValueError):
        PoolConfig("median")
