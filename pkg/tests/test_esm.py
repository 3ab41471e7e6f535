import math

import pytest
import torch

from dmf2mel.esm import ESM, ConfigError, EsmConfig, MultiHeadAttention



@torch.no_grad()
def loop_mha(mha, q, k, v):
    """Per-head, per-position attention with explicit loops."""
    B, T, d = q.shape
    h = mha.n_heads
    hd = d // h
    Q, K, V = mha.q(q), mha.k(k), mha.v(v)
    out = torch.zeros(B, T, d)
    for b in range(B):
        for head in range(h):
            sl = slice(head * hd, (head + 1) * hd)
            for t in range(T):
                logits = [float(Q[b, t, sl] @ K[b, s, sl]) / math.sqrt(hd) for s in range(T)]
                m = max(logits)
                w = [math.exp(l - m) for l in logits]
                z = sum(w)
                out[b, t, sl] = sum(w[s] / z * V[b, s, sl] for s in range(T))
    return mha.o(out)


@pytest.fixture(autouse=True)
def _f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def test_mha_matches_loop_oracle():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2)
    x = torch.randn(1, 5, 8)
    assert torch.allclose(mha(x, x, x), loop_mha(mha, x, x, x), atol=1e-6)


def test_mha_single_position():
    torch.manual_seed(1)
    mha = MultiHeadAttention(4, 2)
    x = torch.randn(2, 1, 4)
    assert torch.allclose(mha(x, x, x), mha.o(mha.v(x)), atol=1e-12)


def test_mha_uniform_keys():
    torch.manual_seed(2)
    mha = MultiHeadAttention(4, 2)
    q = torch.randn(1, 6, 4)
    k = torch.ones(1, 6, 4)
    v = torch.randn(1, 6, 4)
    expected = mha.o(mha.v(v).mean(dim=1, keepdim=True)).expand(1, 6, 4)
    assert torch.allclose(mha(q, k, v), expected, atol=1e-12)


def test_mha_divisibility():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4)
    with pytest.raises(ConfigError):
        EsmConfig(d_model=6, n_heads=4).validate()


def test_esm_shape_and_subject_effect():
    torch.manual_seed(0)
    esm = ESM(64, EsmConfig(n_subjects_table=4))
    x = torch.randn(1, 320, 64).expand(2, 320, 64)
    y = esm(x, [0, 1])
    assert y.shape == (2, 320, 64)
    assert not torch.equal(y[0], y[1])


def test_esm_unknown_subject_uses_mean():
    torch.manual_seed(0)
    esm = ESM(5, EsmConfig(d_model=4, n_heads=2, d_ff=8, n_subjects_table=3))
    with torch.no_grad():
        esm.embed.table.copy_(torch.tensor([0.3, -0.1, 0.2, 0.5]).expand(3, 4))
    x = torch.randn(1, 7, 5)
    known = esm(x, [1])
    unknown = esm(x, [99], allow_unknown=True)
    assert torch.allclose(known, unknown, atol=1e-12)


def test_esm_rejects_unknown_in_training():
    esm = ESM(5, EsmConfig(d_model=4, n_heads=2, d_ff=8, n_subjects_table=3))
    with pytest.raises(IndexError):
        esm(torch.randn(1, 4, 5), [3])


def test_esm_batch_permutation():
    torch.manual_seed(3)
    esm = ESM(5, EsmConfig(d_model=4, n_heads=2, d_ff=8, n_subjects_table=3))
    x = torch.randn(3, 6, 5)
    y = esm(x, [0, 1, 2])
    perm = [2, 0, 1]
    assert torch.allclose(esm(x[perm], [2, 0, 1]), y[perm], atol=1e-12)


def test_esm_frozen_is_bitwise_deterministic():
    torch.manual_seed(4)
    esm = ESM(5, EsmConfig(d_model=4, n_heads=2, d_ff=8, n_subjects_table=3)).eval()
    x = torch.randn(2, 6, 5)
    with torch.no_grad():
        assert torch.equal(esm(x, [0, 1]), esm(x, [0, 1]))
