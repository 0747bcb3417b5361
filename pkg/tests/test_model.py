import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facl.errors import FormatError, ShapeError, StateError, VersionError
from facl.losses import total_loss
from facl.model import (
    ModelConfig,
    ModelParams,
    attention_scores,
    backward,
    classify,
    forward,
    init_params,
    load_checkpoint,
    pool_bag,
    project,
    save_checkpoint,
)
from facl.tensor import derive_rng, grad_check
from helpers import scaled_params


def scalar_attention_oracle(params, H):
    """Attention weights computed one scalar at a time from the gating formula."""
    C = params.Wa.shape[0]
    N, P = H.shape
    A = params.Ua.shape[0]
    scores = [[0.0] * N for _ in range(C)]
    for m in range(C):
        logits = []
        for k in range(N):
            total = 0.0
            for a in range(A):
                v = sum(params.Va[a, p] * H[k, p] for p in range(P))
                u = sum(params.Ua[a, p] * H[k, p] for p in range(P))
                gate = math.tanh(v) * (1.0 / (1.0 + math.exp(-u)))
                total += params.Wa[m, a] * gate
            logits.append(total)
        top = max(logits)
        denom = sum(math.exp(x - top) for x in logits)
        for k in range(N):
            scores[m][k] = math.exp(logits[k] - top) / denom
    return np.array(scores)


def test_default_param_count():
    for n in (2, 6):
        cfg = ModelConfig(num_classes=n)
        assert cfg.n_params == 512 * 768 + 2 * (256 * 512) + n * 256 + n * 512


def test_init_deterministic_and_bounded():
    cfg = ModelConfig(20, 10, 8, 3)
    a = init_params(cfg, derive_rng(1))
    b = init_params(cfg, derive_rng(1))
    assert np.array_equal(a.flatten(), b.flatten())
    for name, tensor in a.tensors().items():
        fan_in = cfg.shapes[name][1]
        assert np.all(np.abs(tensor) <= math.sqrt(1.0 / fan_in))


def test_flatten_roundtrip(small_config):
    p = init_params(small_config, derive_rng(3))
    q = ModelParams.unflatten(small_config, p.flatten())
    for name in p.tensors():
        assert np.array_equal(getattr(p, name), getattr(q, name))
    with pytest.raises(ShapeError):
        ModelParams.unflatten(small_config, np.zeros(3))


def test_project_identity_extended():
    cfg = ModelConfig(4, 3, 2, 2)
    p = init_params(cfg, derive_rng(0))
    p.W1 = np.eye(3, 4) + 0.5 * np.arange(12).reshape(3, 4)
    H = project(p, np.array([[1.0, 0.0, 0.0, 0.0]]))
    assert H.shape == (1, 3)
    np.testing.assert_array_equal(H[0], p.W1[:, 0])


def test_project_matches_row_loop(small_config):
    p = init_params(small_config, derive_rng(4))
    Z = derive_rng(5).normal(size=(7, 6))
    expected = np.array([[sum(p.W1[i, j] * z[j] for j in range(6)) for i in range(5)] for z in Z])
    np.testing.assert_allclose(project(p, Z), expected, rtol=1e-12, atol=1e-14)


def test_project_errors(small_config):
    p = init_params(small_config, derive_rng(0))
    with pytest.raises(ValueError):
        project(p, np.zeros((0, 6)))
    with pytest.raises(ShapeError):
        project(p, np.zeros((3, 5)))


def test_attention_singleton_and_symmetry(small_config):
    p = scaled_params(small_config, 1)
    _, att = attention_scores(p, derive_rng(2).normal(size=(1, 5)))
    np.testing.assert_array_equal(att, np.ones((2, 1)))
    row = derive_rng(3).normal(size=(1, 5))
    _, att = attention_scores(p, np.vstack([row, row]))
    np.testing.assert_allclose(att, 0.5, atol=1e-15)


def test_attention_matches_scalar_oracle():
    cfg = ModelConfig(6, 5, 4, 3)
    p = scaled_params(cfg, 8)
    H = derive_rng(9).normal(size=(3, 5))
    _, att = attention_scores(p, H)
    np.testing.assert_allclose(att, scalar_attention_oracle(p, H), rtol=1e-12, atol=1e-15)


def test_pool_bag_examples():
    H = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(pool_bag(np.array([[0.5, 0.5]]), H), [[2.0, 4.0]])
    np.testing.assert_allclose(pool_bag(np.array([[1 - 1e-12, 1e-12]]), H), [H[0]], atol=1e-10)
    rng = derive_rng(11)
    H = rng.normal(size=(5, 4))
    a = rng.dirichlet(np.ones(5), size=3)
    expected = np.array([sum(a[m, k] * H[k] for k in range(5)) for m in range(3)])
    np.testing.assert_allclose(pool_bag(a, H), expected, rtol=1e-12)
    with pytest.raises(ShapeError):
        pool_bag(a[:, :4], H)


def test_classify_examples():
    cfg = ModelConfig(3, 2, 2, 2)
    p = init_params(cfg, derive_rng(0))
    p.Wc = np.zeros((2, 2))
    assert np.array_equal(classify(p, np.ones((2, 2))), [0.0, 0.0])
    p.Wc = np.array([[1.0, 2.0], [-1.0, 0.5]])
    pooled = np.array([[3.0, 4.0], [2.0, 2.0]])
    np.testing.assert_array_equal(classify(p, pooled), [1 * 3 + 2 * 4, -1 * 2 + 0.5 * 2])
    rng = derive_rng(1)
    cfg = ModelConfig(3, 6, 2, 4)
    p = init_params(cfg, rng)
    pooled = rng.normal(size=(4, 6))
    expected = [sum(p.Wc[m, j] * pooled[m, j] for j in range(6)) for m in range(4)]
    np.testing.assert_allclose(classify(p, pooled), expected, rtol=1e-12)


def test_forward_is_composition(small_config):
    p = scaled_params(small_config, 2)
    Z = derive_rng(3).normal(size=(5, 6))
    trace = forward(p, Z)
    H = project(p, Z)
    _, att = attention_scores(p, H)
    np.testing.assert_array_equal(trace.logits, classify(p, pool_bag(att, H)))
    assert trace.logits.shape == (2,)


def _loss_fn(cfg, Z, label, server_att, mu=1.0):
    def f(x):
        q = ModelParams.unflatten(cfg, x)
        tr = forward(q, Z)
        br, dl, da = total_loss(tr.logits, label, tr.attention, server_att, mu)
        return br.total, backward(q, tr, dl, da)

    return f


@pytest.mark.parametrize("num_classes", [2, 6])
@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_backward_matches_finite_differences(num_classes, n):
    cfg = ModelConfig(6, 5, 4, num_classes)
    rng = derive_rng(n, num_classes)
    p = scaled_params(cfg, 100 + n)
    server = scaled_params(cfg, 200 + n)
    Z = rng.normal(size=(n, 6))
    _, server_att = attention_scores(server, project(server, Z))
    label = int(rng.integers(num_classes))
    assert grad_check(_loss_fn(cfg, Z, label, server_att), p.flatten(), eps=1e-5) < 1e-4


def test_backward_zero_upstream(small_config):
    p = scaled_params(small_config, 0)
    tr = forward(p, derive_rng(1).normal(size=(4, 6)))
    g = backward(p, tr, np.zeros(2), np.zeros((2, 4)))
    assert np.array_equal(g, np.zeros(small_config.n_params))


def test_backward_one_hot_touches_only_that_head():
    cfg = ModelConfig(6, 5, 4, 3)
    p = scaled_params(cfg, 5)
    tr = forward(p, derive_rng(6).normal(size=(4, 6)))
    g = ModelParams.unflatten(cfg, backward(p, tr, np.array([0.0, 1.0, 0.0])))
    assert np.all(g.Wc[[0, 2]] == 0)
    assert np.any(g.Wc[1] != 0)


def test_backward_rejects_foreign_trace(small_config):
    p = scaled_params(small_config, 0)
    q = p.copy()
    tr = forward(p, np.ones((2, 6)))
    with pytest.raises(StateError):
        backward(q, tr, np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 256), seed=st.integers(0, 2**32 - 1), num_classes=st.sampled_from([2, 6]))
def test_attention_rows_sum_to_one(n, seed, num_classes):
    cfg = ModelConfig(6, 5, 4, num_classes)
    p = scaled_params(cfg, seed % 1000, scale=5.0)
    tr = forward(p, derive_rng(seed).normal(size=(n, 6)) * 3)
    np.testing.assert_allclose(tr.attention.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(tr.attention > 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(n, seed):
    cfg = ModelConfig(6, 5, 4, 6)
    p = scaled_params(cfg, seed % 997)
    rng = derive_rng(seed)
    Z = rng.normal(size=(n, 6))
    perm = rng.permutation(n)
    a, b = forward(p, Z), forward(p, Z[perm])
    np.testing.assert_allclose(b.attention, a.attention[:, perm], atol=1e-12)
    np.testing.assert_allclose(b.pooled, a.pooled, atol=1e-10)
    np.testing.assert_allclose(b.logits, a.logits, atol=1e-10)


def test_checkpoint_roundtrip(tmp_path, small_config):
    p = init_params(small_config, derive_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FACL"
    assert len(raw) == 4 + 4 + 16 + 8 * small_config.n_params
    q = load_checkpoint(path)
    assert q.config == small_config
    assert np.array_equal(q.flatten(), p.flatten())


def test_checkpoint_errors(tmp_path, small_config):
    p = init_params(small_config, derive_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "version").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad_magic")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short")
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "version")
    with pytest.raises(VersionError):
        load_checkpoint(path, expected_config=ModelConfig(6, 5, 4, 6))
