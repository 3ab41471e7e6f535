import math

import pytest
import torch

from dmf2mel.dcfam import CDFA, DCFAM, DcfamConfig, GlobalBranch, LocalBranch, channel_shuffle, shuffle_order
from dmf2mel.esm import ConfigError


@pytest.fixture(autouse=True)
def _f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@torch.no_grad()
def loop_cdfa(cdfa, f_conv, f_atten):
    """Triple loop over (t, window position, channel) with zero padding."""
    B, T, d = f_conv.shape
    W = cdfa.window
    half = W // 2
    a_fg, a_bg = cdfa.maps(f_conv, f_atten)
    out = torch.zeros(B, T, d)
    for b in range(B):
        for t in range(T):
            for i in range(W):
                s = t + i - half
                if 0 <= s < T:
                    for c in range(d):
                        out[b, t, c] += (a_fg[b, t, i] + a_bg[b, t, i]) * f_conv[b, s, c]
    return out


@torch.no_grad()
def loop_attention(q, k, v):
    B, T, d = q.shape
    out = torch.zeros_like(v)
    for b in range(B):
        for t in range(T):
            logits = [float(q[b, t] @ k[b, s]) / math.sqrt(d) for s in range(T)]
            m = max(logits)
            w = [math.exp(l - m) for l in logits]
            z = sum(w)
            for s in range(T):
                out[b, t] += w[s] / z * v[b, s]
    return out


def test_shuffle_permutation():
    assert shuffle_order(4, 2) == [0, 2, 1, 3]
    x = torch.arange(4.0)
    assert channel_shuffle(channel_shuffle(x, 2), 2).tolist() == [0, 1, 2, 3]
    assert sorted(shuffle_order(12, 4)) == list(range(12))


def test_local_branch_zero_in_zero_out():
    lb = LocalBranch(8, 4)
    with torch.no_grad():
        for m in (lb.pw_in, lb.pw_out, lb.dw.conv):
            m.bias.zero_()
    assert torch.equal(lb(torch.zeros(2, 10, 8)), torch.zeros(2, 10, 8))


def test_global_branch_single_step():
    torch.manual_seed(0)
    gb = GlobalBranch(8)
    x = torch.randn(2, 1, 8)
    v = gb.dw(gb.qkv(x))[..., 16:]
    assert torch.allclose(gb(x), v * gb.w_global, atol=1e-12)


def test_global_branch_closed_gate():
    gb = GlobalBranch(8)
    with torch.no_grad():
        gb.w_global.zero_()
    assert torch.count_nonzero(gb(torch.randn(1, 5, 8))) == 0


def test_global_branch_vs_loop():
    torch.manual_seed(1)
    gb = GlobalBranch(8)
    x = torch.randn(1, 6, 8)
    q, k, v = gb.dw(gb.qkv(x)).split(8, dim=-1)
    assert torch.allclose(gb(x), loop_attention(q, k, v) * gb.w_global, atol=1e-6)


def test_cdfa_uniform_maps():
    torch.manual_seed(2)
    cdfa = CDFA(4, 3)
    with torch.no_grad():
        cdfa.w_fg.weight.zero_()
        cdfa.w_bg.weight.zero_()
    f = torch.randn(1, 8, 4)
    out = cdfa(f, torch.randn(1, 8, 4))
    for t in range(1, 7):
        assert torch.allclose(out[0, t], 2 * f[0, t - 1 : t + 2].mean(0), atol=1e-12)


def test_cdfa_constant_interior():
    torch.manual_seed(3)
    cdfa = CDFA(4, 5)
    f = torch.full((1, 10, 4), 1.7)
    out = cdfa(f, torch.randn(1, 10, 4))
    assert torch.allclose(out[0, 2:8], torch.full((6, 4), 3.4), atol=1e-12)


def test_cdfa_vs_triple_loop():
    torch.manual_seed(4)
    cdfa = CDFA(4, 3)
    fc, fa = torch.randn(1, 8, 4), torch.randn(1, 8, 4)
    assert torch.allclose(cdfa(fc, fa), loop_cdfa(cdfa, fc, fa), atol=1e-6)


def test_contrast_maps_rows_sum_to_one():
    torch.manual_seed(5)
    for _ in range(1000):
        cdfa = CDFA(4, 5)
        fg, bg = cdfa.maps(torch.randn(1, 3, 4) * 5, torch.randn(1, 3, 4) * 5)
        for a in (fg, bg):
            assert (a >= 0).all()
            assert torch.allclose(a.sum(-1), torch.ones(1, 3), atol=1e-6)


def test_cdfa_inside_doubled_hull():
    torch.manual_seed(6)
    W = 5
    cdfa = CDFA(3, W)
    fc = torch.randn(2, 12, 3)
    out = cdfa(fc, torch.randn(2, 12, 3))
    for t in range(2, 10):
        win = fc[:, t - 2 : t + 3]
        assert (out[:, t] <= 2 * win.max(1).values + 1e-12).all()
        assert (out[:, t] >= 2 * win.min(1).values - 1e-12).all()


def test_dcfam_shape_and_config():
    net = DCFAM(DcfamConfig(d_model=8, window=9, shuffle_groups=4, n_blocks=2))
    assert net(torch.randn(2, 20, 8)).shape == (2, 20, 8)
    with pytest.raises(ConfigError):
        DcfamConfig(window=4).validate()
    with pytest.raises(ConfigError):
        DcfamConfig(d_model=6, shuffle_groups=4).validate()
    with pytest.raises(ConfigError):
        DcfamConfig(n_blocks=0).validate()
