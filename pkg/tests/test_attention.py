import numpy as np
import numpy.testing as npt
import pytest

from pgdiff import tensor as tc
from pgdiff.tensor import ShapeMismatch, Tensor, finite_diff_check
from pgdiff.attention import (AttentionParams, FeatureMap, attend_tokens,
                              self_attention, cross_view_attention,
                              epipolar_attention)
from pgdiff.geometry import EpipolarWeightMatrix


def fmap(tokens, h, w, requires_grad=False):
    """Feature map whose row-major pixel tokens are the rows of `tokens`."""
    c = tokens.shape[1]
    return FeatureMap(values=Tensor(np.ascontiguousarray(tokens.T).reshape(c, h, w),
                                    requires_grad=requires_grad))


def tokens_of(out):
    c, h, w = out.values.shape
    return out.values.data.reshape(c, h * w).T


def dense_attention(x_t, x_s, params, e=None):
    # independent re-derivation with plain numpy loops, no module code
    wq, wk, wv, wo = (p.data for p in (params.wq, params.wk, params.wv, params.wo))
    q, k, v = x_t @ wq, x_s @ wk, x_s @ wv
    dk = params.head_channels
    mixed = np.zeros_like(q)
    for h in range(params.heads):
        sl = slice(h * dk, (h + 1) * dk)
        logits = (q[:, sl] @ k[:, sl].T) * dk ** -0.5
        if e is not None:
            logits = logits * e
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        mixed[:, sl] = p @ v[:, sl]
    return mixed @ wo


def make_params(rng, c, dk):
    return AttentionParams.init(rng, c, dk, requires_grad=False)


# ---------------------------------------------------------------------------
# value semantics

def test_single_token_is_value_projection(rng):
    # one token: the softmax is a scalar 1, output reduces to x wv wo
    params = make_params(rng, 4, 2)
    x_t = rng.standard_normal((1, 4))
    x_s = rng.standard_normal((1, 4))
    out = cross_view_attention(fmap(x_t, 1, 1), fmap(x_s, 1, 1), params)
    expected = x_s @ params.wv.data @ params.wo.data
    npt.assert_allclose(tokens_of(out), expected, atol=1e-15)


def test_constant_source_gives_constant_output(rng):
    # identical source tokens make every value row identical, so any
    # attention distribution mixes them to the same vector
    params = make_params(rng, 4, 2)
    x_t = rng.standard_normal((4, 4))
    x_s = np.tile(rng.standard_normal(4), (4, 1))
    e = rng.uniform(0.0, 1.0, (4, 4))
    for out in (cross_view_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), params),
                epipolar_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), e, params)):
        got = tokens_of(out)
        expected = x_s[:1] @ params.wv.data @ params.wo.data
        npt.assert_allclose(got, np.tile(expected, (4, 1)), atol=1e-12)


def test_two_token_hand_arithmetic():
    eye = Tensor(np.eye(2))
    params = AttentionParams(wq=eye, wk=eye, wv=eye, wo=eye, heads=1, head_channels=2)
    x_t = np.array([[1.0, 0.0], [0.0, 1.0]])
    x_s = np.array([[2.0, 0.0], [0.0, 2.0]])
    out = tokens_of(cross_view_attention(fmap(x_t, 1, 2), fmap(x_s, 1, 2), params))
    # logits row 0: (2, 0)/sqrt(2); softmax then mixes the two source rows
    l = 2.0 / np.sqrt(2.0)
    p = np.exp(l) / (np.exp(l) + 1.0)
    expected = np.array([[2 * p, 2 * (1 - p)], [2 * (1 - p), 2 * p]])
    npt.assert_allclose(out, expected, atol=1e-12)


def test_dense_oracle_cross_view(rng):
    for c, dk in ((2, 1), (4, 2), (6, 2), (6, 6)):
        params = make_params(rng, c, dk)
        x_t = rng.standard_normal((4, c))
        x_s = rng.standard_normal((4, c))
        out = cross_view_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), params)
        npt.assert_allclose(tokens_of(out), dense_attention(x_t, x_s, params), atol=1e-12)


def test_dense_oracle_epipolar(rng):
    for c, dk in ((4, 2), (6, 3), (8, 2)):
        params = make_params(rng, c, dk)
        x_t = rng.standard_normal((4, c))
        x_s = rng.standard_normal((4, c))
        e = rng.uniform(0.0, 1.0, (4, 4))
        out = epipolar_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), e, params)
        npt.assert_allclose(tokens_of(out), dense_attention(x_t, x_s, params, e), atol=1e-12)


def test_dense_oracle_self_attention(rng):
    params = make_params(rng, 4, 2)
    x = rng.standard_normal((9, 4))
    out = self_attention(fmap(x, 3, 3), params)
    npt.assert_allclose(tokens_of(out), dense_attention(x, x, params), atol=1e-12)


def test_all_ones_weight_is_bitwise_cross_view(rng):
    # multiplying logits by 1.0 is exact in floating point, so the uniform
    # fallback weight degrades epipolar attention to plain cross-view,
    # bit for bit
    for i in range(10):
        c, dk = [(4, 2), (6, 3), (8, 4)][i % 3]
        params = make_params(rng, c, dk)
        x_t = rng.standard_normal((16, c))
        x_s = rng.standard_normal((16, c))
        ones = np.ones((16, 16))
        e = EpipolarWeightMatrix(h=4, w=4, values=ones) if i % 2 == 0 else ones
        plain = cross_view_attention(fmap(x_t, 4, 4), fmap(x_s, 4, 4), params)
        gated = epipolar_attention(fmap(x_t, 4, 4), fmap(x_s, 4, 4), e, params)
        npt.assert_array_equal(gated.values.data, plain.values.data)


def test_zero_weight_degrades_to_uniform_mixing(rng):
    # zeroed logits give a uniform softmax row: every output token becomes
    # the plain average of the projected source tokens
    params = make_params(rng, 4, 2)
    x_t = rng.standard_normal((4, 4))
    x_s = rng.standard_normal((4, 4))
    out = epipolar_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), np.zeros((4, 4)), params)
    expected = np.tile((x_s @ params.wv.data).mean(0) @ params.wo.data, (4, 1))
    npt.assert_allclose(tokens_of(out), expected, atol=1e-12)


def test_attention_rows_mix_to_one(rng):
    # with identity value/output projections, a channel that is constant
    # across source tokens stays exactly constant only if every attention
    # row sums to one
    eye = Tensor(np.eye(4))
    params = AttentionParams(wq=Tensor(rng.standard_normal((4, 4))),
                             wk=Tensor(rng.standard_normal((4, 4))),
                             wv=eye, wo=eye, heads=2, head_channels=2)
    x_t = rng.standard_normal((9, 4))
    x_s = rng.standard_normal((9, 4))
    x_s[:, 0] = 5.0
    e = rng.uniform(0.0, 1.0, (9, 9))
    out = tokens_of(epipolar_attention(fmap(x_t, 3, 3), fmap(x_s, 3, 3), e, params))
    npt.assert_allclose(out[:, 0], 5.0, atol=1e-12)


def test_weight_gate_steers_attention(rng):
    # nonnegative logits scaled by a near-one-hot weight row must move the
    # attention argmax onto the weighted entry, even when the unweighted
    # affinity preferred a different source token
    eye = Tensor(np.eye(4))
    params = AttentionParams(wq=eye, wk=eye, wv=eye, wo=eye, heads=1, head_channels=4)
    x_t = rng.uniform(0.5, 2.0, (4, 4))
    x_s = np.eye(4)
    # logits = x_t / 2; route each row to its weakest affinity
    want = np.argmin(x_t, axis=1)
    e = np.full((4, 4), 1e-4)
    e[np.arange(4), want] = 1.0
    out = tokens_of(epipolar_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), e, params))
    plain = tokens_of(cross_view_attention(fmap(x_t, 2, 2), fmap(x_s, 2, 2), params))
    npt.assert_array_equal(np.argmax(out, axis=1), want)
    assert np.any(np.argmax(plain, axis=1) != want)


def test_self_attention_permutation_equivariance(rng):
    params = make_params(rng, 4, 2)
    x = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    out = tokens_of(self_attention(fmap(x, 1, 6), params))
    out_p = tokens_of(self_attention(fmap(x[perm], 1, 6), params))
    npt.assert_allclose(out_p, out[perm], atol=1e-12)


def test_attend_tokens_batched_matches_per_item(rng):
    params = make_params(rng, 4, 2)
    q = rng.standard_normal((3, 4, 4))
    kv = rng.standard_normal((3, 4, 4))
    e = rng.uniform(0.0, 1.0, (3, 4, 4))
    batched = attend_tokens(Tensor(q), Tensor(kv), params, weight=e).data
    for i in range(3):
        one = attend_tokens(Tensor(q[i:i + 1]), Tensor(kv[i:i + 1]), params,
                            weight=e[i:i + 1]).data
        npt.assert_allclose(batched[i], one[0], atol=1e-13)


# ---------------------------------------------------------------------------
# shape policing

def test_mismatched_map_shapes_raise(rng):
    params = make_params(rng, 4, 2)
    a = fmap(rng.standard_normal((4, 4)), 2, 2)
    b = fmap(rng.standard_normal((2, 4)), 1, 2)
    with pytest.raises(ShapeMismatch):
        cross_view_attention(a, b, params)
    with pytest.raises(ShapeMismatch):
        epipolar_attention(a, b, np.ones((4, 4)), params)


def test_wrong_weight_matrix_shape_raises(rng):
    params = make_params(rng, 4, 2)
    a = fmap(rng.standard_normal((4, 4)), 2, 2)
    with pytest.raises(ShapeMismatch):
        epipolar_attention(a, a, np.ones((3, 3)), params)


def test_wrong_channel_count_raises(rng):
    params = make_params(rng, 4, 2)
    a = fmap(rng.standard_normal((4, 6)), 2, 2)
    with pytest.raises(ShapeMismatch):
        cross_view_attention(a, a, params)


def test_params_validation(rng):
    with pytest.raises(ShapeMismatch):
        AttentionParams.init(rng, 6, 4)
    eye = Tensor(np.eye(4))
    with pytest.raises(ShapeMismatch):
        AttentionParams(wq=Tensor(np.eye(3)), wk=eye, wv=eye, wo=eye,
                        heads=2, head_channels=2)
    with pytest.raises(ValueError):
        AttentionParams(wq=Tensor(np.full((4, 4), np.nan)), wk=eye, wv=eye, wo=eye,
                        heads=2, head_channels=2)


def test_feature_map_must_be_3d():
    with pytest.raises(ShapeMismatch):
        FeatureMap(values=Tensor(np.zeros((4, 4))))


# ---------------------------------------------------------------------------
# gradients

def _fd_setup(rng):
    params = AttentionParams.init(rng, 4, 2, requires_grad=False)
    x_t = rng.standard_normal((4, 4, 4))  # (c, h, w) target
    x_s = rng.standard_normal((4, 4, 4))
    e = rng.uniform(0.1, 1.0, (16, 16))
    return params, x_t, x_s, e


def test_grad_wrt_target_features(rng):
    params, x_t, x_s, e = _fd_setup(rng)

    def f(x):
        return epipolar_attention(FeatureMap(values=x), FeatureMap(values=Tensor(x_s)),
                                  e, params).values

    assert finite_diff_check(f, Tensor(x_t)) < 1e-4


def test_grad_wrt_source_features(rng):
    params, x_t, x_s, e = _fd_setup(rng)

    def f(x):
        return epipolar_attention(FeatureMap(values=Tensor(x_t)), FeatureMap(values=x),
                                  e, params).values

    assert finite_diff_check(f, Tensor(x_s)) < 1e-4


@pytest.mark.parametrize("which", ["wq", "wk", "wv", "wo"])
def test_grad_wrt_projections(rng, which):
    params, x_t, x_s, e = _fd_setup(rng)

    def f(w):
        fields = {"wq": params.wq, "wk": params.wk, "wv": params.wv, "wo": params.wo,
                  which: w}
        p = AttentionParams(heads=params.heads, head_channels=params.head_channels,
                            **fields)
        return epipolar_attention(FeatureMap(values=Tensor(x_t)),
                                  FeatureMap(values=Tensor(x_s)), e, p).values

    assert finite_diff_check(f, Tensor(getattr(params, which).data.copy())) < 1e-4


def test_weight_matrix_stays_constant_in_graph(rng):
    # E enters the graph as data: gradients must flow to features with no
    # extra leaves created for the weight matrix
    params, x_t, x_s, e = _fd_setup(rng)
    tc.reset_tape()
    x = Tensor(x_t, requires_grad=True)
    out = epipolar_attention(FeatureMap(values=x), FeatureMap(values=Tensor(x_s)),
                             e, params)
    loss = tc.tsum(out.values)
    tc.backward(loss)
    assert x.grad is not None and np.all(np.isfinite(x.grad))
