import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from plm.network import (
    DEFAULT,
    GROUPS,
    TINY,
    ConfigError,
    MatchingNetwork,
    backward,
    init_network,
    load_checkpoint,
    local_response_norm,
    loss,
    parameter_hash,
    profile,
    save_checkpoint,
)


def lrn_oracle(a, size, alpha, beta, k):
    """Channel loop straight from b_c = a_c / (k + alpha/n * sum a_j^2)^beta."""
    a = np.asarray(a, dtype=np.float64)
    c = a.shape[1]
    out = np.empty_like(a)
    for ch in range(c):
        lo = max(0, ch - size // 2)
        hi = min(c - 1, ch + (size - 1) // 2)
        s = (a[:, lo : hi + 1] ** 2).sum(axis=1)
        out[:, ch] = a[:, ch] / (k + alpha / size * s) ** beta
    return out


def l1_oracle(p, l):
    n = p.shape[0]
    total = 0.0
    for x in range(n):
        for y in range(n):
            total += abs(float(p[x, y]) - float(l[x, y]))
    return total / (n * n)


def pair(batch=1, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    q = torch.rand((batch, 3, 100, 100), generator=g, dtype=dtype)
    s = torch.rand((batch, 3, 100, 100), generator=g, dtype=dtype)
    return q, s


@pytest.mark.parametrize("size,alpha,beta,k", [(5, 1e-4, 0.75, 1.0), (3, 0.5, 0.75, 2.0), (4, 1.0, 0.5, 1.0)])
def test_lrn_matches_oracle(size, alpha, beta, k):
    a = torch.randn(2, 9, 4, 5, dtype=torch.float64) * 3
    np.testing.assert_allclose(local_response_norm(a, size, alpha, beta, k).numpy(), lrn_oracle(a.numpy(), size, alpha, beta, k), rtol=1e-13)


def test_lrn_agrees_with_torch_for_odd_windows():
    a = torch.rand(2, 8, 6, 6, dtype=torch.float64) * 10
    np.testing.assert_allclose(
        local_response_norm(a, 5, 1e-2, 0.75, 1.0).numpy(),
        F.local_response_norm(a, 5, alpha=1e-2, beta=0.75, k=1.0).numpy(),
        rtol=1e-12,
    )


@given(st.floats(1.0, 5.0), st.integers(1, 7))
@settings(max_examples=25, deadline=None)
def test_lrn_never_amplifies_when_k_at_least_one(k, size):
    a = torch.randn(1, 6, 3, 3, dtype=torch.float64) * 5
    assert torch.all(local_response_norm(a, size, 1e-2, 0.75, k).abs() <= a.abs() + 1e-15)


@pytest.mark.parametrize("depth", [1, 3, 9])
def test_output_is_50x50_for_every_decoder_depth(depth):
    cfg = profile("tiny", decoder_depth=depth)
    net = init_network(cfg, 0).double()
    out = net(*pair(batch=2))
    assert out.shape == (2, 50, 50)


@pytest.mark.parametrize("depth", [1, 2, 3, 9, 10])
def test_decoder_channel_schedule(depth):
    ch = profile("tiny", decoder_depth=depth).decoder_channels()
    assert ch[0] == 1 and ch[-1] == 1
    assert ch[1] == 2 ** (depth - 1)
    assert all(ch[i + 1] * 2 == ch[i] for i in range(1, len(ch) - 1))
    assert len(ch) == depth + 1


def test_default_decoder_is_nine_layers_from_256():
    assert DEFAULT.decoder_depth == 9
    assert DEFAULT.decoder_channels() == [1, 256, 128, 64, 32, 16, 8, 4, 2, 1]


def test_default_compressors_divide_by_16():
    net = MatchingNetwork(DEFAULT)
    assert [c.conv.out_channels for c in net.compressors] == [4, 8, 16]
    assert [c.conv.in_channels for c in net.compressors] == [64, 128, 256]
    assert DEFAULT.stage_sizes() == [50, 25, 13]
    assert DEFAULT.fc_input_size() == 2 * (50 * 50 * 4 + 25 * 25 * 8 + 13 * 13 * 16)


def test_config_errors():
    with pytest.raises(ConfigError):
        profile("default", compression_ratio=7)
    with pytest.raises(ConfigError):
        profile("tiny", fc_sizes=(64, 64, 64, 100))
    with pytest.raises(ConfigError):
        profile("tiny", decoder_depth=0)
    with pytest.raises(ConfigError):
        profile("huge")


def test_single_layer_uses_last_raw_stage():
    cfg = profile("tiny", single_layer=True)
    net = init_network(cfg, 0).double()
    assert len(net.compressors) == 0
    assert cfg.fc_input_size() == 2 * 25 * 25 * 16
    assert net(*pair()).shape == (1, 50, 50)


def test_weight_sharing_bit_identical_features():
    net = init_network(TINY, 3)
    x = pair(dtype=torch.float32)[0]
    raw_q, raw_s = net.extract_features(x), net.extract_features(x.clone())
    for a, b in zip(raw_q, raw_s):
        assert torch.equal(a, b)
    for a, b in zip(net.compress(raw_q), net.compress(raw_s)):
        assert torch.equal(a, b)
    # one copy of the shared weights only
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))


def test_stage_shapes_default():
    net = init_network(DEFAULT, 0)
    feats = net.extract_features(torch.zeros(1, 3, 100, 100))
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 50, 50), (128, 25, 25), (256, 13, 13)]


def test_wrong_input_shape_rejected():
    net = init_network(TINY, 0)
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 64, 64), torch.zeros(1, 3, 64, 64))


def test_init_is_deterministic_and_seeded():
    a, b, c = init_network(TINY, 5), init_network(TINY, 5), init_network(TINY, 6)
    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(c)
    assert len(a.group_parameters()) == 4


def test_init_scale_matches_he_uniform():
    net = init_network(DEFAULT, 0)
    w = net.similarity_fc[1].weight.detach().double()
    fan_in = w.shape[1]
    assert w.abs().max() <= np.sqrt(6.0 / fan_in)
    assert float(w.std()) == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.01)
    assert float(w.mean()) == pytest.approx(0.0, abs=1e-3)


def test_loss_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.normal(size=(50, 50))
        l = (rng.random((50, 50)) > 0.5).astype(np.float64)
        got = float(loss(torch.from_numpy(p), torch.from_numpy(l)))
        assert abs(got - l1_oracle(p, l)) < 1e-12


def test_loss_hand_values():
    ones, zeros = torch.ones(50, 50, dtype=torch.float64), torch.zeros(50, 50, dtype=torch.float64)
    assert float(loss(ones, zeros)) == 1.0
    p = torch.rand(50, 50, dtype=torch.float64)
    assert float(loss(p, p)) == 0.0
    assert float(loss(ones * 0.5, zeros, "l2sq")) == 0.25
    with pytest.raises(ValueError):
        loss(ones, torch.zeros(49, 50))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_loss_symmetric_and_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(50, 50, generator=g, dtype=torch.float64)
    b = torch.randn(50, 50, generator=g, dtype=torch.float64)
    for kind in ("l1", "l2sq"):
        assert float(loss(a, b, kind)) == float(loss(b, a, kind)) >= 0


def test_backward_zero_at_target():
    net = init_network(TINY, 0).double()
    out = net(*pair())
    grads = backward(net, out, out.detach().clone())
    for g in grads.values():
        for t in g.values():
            assert torch.count_nonzero(t) == 0


def test_backward_omits_frozen_group():
    net = init_network(TINY, 0).double()
    net.set_trainable(extractor=False)
    out = net(*pair())
    grads = backward(net, out, torch.ones_like(out))
    assert "extractor" not in grads
    assert set(grads) == {"compressors", "similarity_fc", "decoder"}


def test_checkpoint_round_trip(tmp_path):
    net = init_network(TINY, 2)
    net.channel_mean.copy_(torch.tensor([0.1, 0.2, 0.3]))
    save_checkpoint(net, tmp_path / "a.pt", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "a.pt")
    assert parameter_hash(back) == parameter_hash(net)
    assert extra == {"note": "x"}
    assert back.cfg == net.cfg
    torch.testing.assert_close(back.channel_mean, net.channel_mean)
    q, s = pair(dtype=torch.float32)
    assert torch.equal(back(q, s), net(q, s))
    save_checkpoint(back, tmp_path / "b.pt", {"note": "x"})
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")


def test_groups_partition_parameters():
    net = MatchingNetwork(TINY)
    grouped = sum(p.numel() for g in GROUPS for p in net.group(g).parameters())
    assert grouped == sum(p.numel() for p in net.parameters())


def test_fc_init_knobs():
    net = init_network(TINY, 0)
    fcs = list(net.similarity_fc)
    for fc in fcs[:3]:
        assert torch.all(fc.bias == TINY.fc_hidden_bias)
    bound = TINY.fc_out_scale * np.sqrt(6.0 / fcs[3].weight.shape[1])
    assert float(fcs[3].weight.detach().abs().max()) <= bound
    assert torch.count_nonzero(fcs[3].bias) == 0
    plain = init_network(DEFAULT, 0)
    assert all(torch.count_nonzero(fc.bias) == 0 for fc in plain.similarity_fc)


def test_fc_input_lengths():
    assert DEFAULT.fc_input_size() == 35408
    assert profile("default", single_layer=True).fc_input_size() == 2 * 13 * 13 * 256


def test_zero_patch_gives_zero_features():
    net = init_network(TINY, 0)
    with torch.no_grad():
        feats = net.extract_features(torch.zeros(1, 3, 100, 100))
    assert all(torch.count_nonzero(f) == 0 for f in feats)


def test_lrn_constant_channel_closed_form():
    a, c, n = 2.0, 9, 5
    x = torch.full((1, c, 2, 2), a, dtype=torch.float64)
    out = local_response_norm(x, n, 1e-1, 0.75, 1.0)
    for ch in range(c):
        m = min(c - 1, ch + 2) - max(0, ch - 2) + 1
        assert float(out[0, ch, 0, 0]) == pytest.approx(a / (1 + 0.1 / n * m * a * a) ** 0.75, rel=1e-14)


def test_compressed_activations_nonnegative():
    net = init_network(TINY, 1)
    with torch.no_grad():
        comp = net.compress(net.extract_features(torch.rand(2, 3, 100, 100)))
    assert all(bool((f >= 0).all()) for f in comp)


def test_zero_weights_constant_table():
    net = init_network(TINY, 0).double()
    with torch.no_grad():
        net.similarity_fc[-1].weight.zero_()
        net.similarity_fc[-1].bias.fill_(0.37)
        feats = net.stream(torch.rand(1, 3, 100, 100, dtype=torch.float64))
        table = net.encode_similarity(feats, feats)
    assert table.shape[-2:] == (50, 50)
    assert torch.all(table == 0.37)


def test_batch_consistency():
    net = init_network(TINY, 0).double()
    q, s = pair(batch=3)
    with torch.no_grad():
        batched = net(q, s)
        for i in range(3):
            torch.testing.assert_close(batched[i], net(q[i : i + 1], s[i : i + 1])[0], rtol=1e-12, atol=1e-12)


def test_loss_half_example():
    half = torch.full((50, 50), 0.5, dtype=torch.float64)
    assert float(loss(half, torch.zeros_like(half))) == 0.5
