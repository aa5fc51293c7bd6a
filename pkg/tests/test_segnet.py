import numpy as np
import pytest
import torch
from torch import nn

from gliomaseg.segnet import (
    GroupNorm3d, SegNetConfig, ShapeError, baseline_config, build, channel_plan, decoder_plan, expanded_config,
    forward, group_normalize, parameter_count,
)


def shape_walk_parameter_count(levels, base, max_filters, multiplier, in_ch=4, out_ch=3, heads=None):
    """Count parameters by walking layer shapes, independent of the module code."""
    heads = levels - 2 if heads is None else heads
    enc = [min(base * multiplier * 2**i, max_filters) for i in range(levels)]
    dec = [min(base * 2**i, max_filters) for i in range(levels)]

    def block(cin, cout):
        # two 3x3x3 convs without bias, each followed by a norm with scale and shift
        return cin * cout * 27 + 2 * cout + cout * cout * 27 + 2 * cout

    total, cin = 0, in_ch
    for c in enc:
        total += block(cin, c)
        cin = c
    below = enc[-1]
    for i in range(levels - 2, -1, -1):
        total += below * dec[i] * 8 + dec[i]       # 2x2x2 transpose conv with bias
        total += block(dec[i] + enc[i], dec[i])
        below = dec[i]
    for h in range(heads + 1):
        total += dec[h] * out_ch + out_ch            # 1x1x1 head with bias
    return total


def test_channel_plans():
    assert channel_plan(baseline_config(base_filters=32, levels=5)) == [32, 64, 128, 256, 320]
    assert channel_plan(expanded_config(base_filters=32, levels=5)) == [64, 128, 256, 512, 512]
    assert channel_plan(SegNetConfig(base_filters=8, levels=3, max_filters=64)) == [8, 16, 32]
    assert decoder_plan(expanded_config(base_filters=32, levels=5)) == [32, 64, 128, 256, 512]


def test_desk_parameter_counts_match_shape_walk():
    base = build(baseline_config())
    exp = build(expanded_config())
    assert parameter_count(base) == shape_walk_parameter_count(3, 8, 320, 1) == 85894
    assert parameter_count(exp) == shape_walk_parameter_count(3, 8, 512, 2) == 260422
    assert parameter_count(exp) > parameter_count(base)


@pytest.mark.parametrize("levels,base,heads", [(2, 2, 0), (4, 4, 1), (4, 4, 2), (5, 32, None)])
def test_parameter_count_other_configs(levels, base, heads):
    for make, cap, mult in ((baseline_config, 320, 1), (expanded_config, 512, 2)):
        cfg = make(levels=levels, base_filters=base, deep_supervision_heads=heads, patch_shape=(16, 16, 16))
        model = build(cfg)
        assert parameter_count(model) == shape_walk_parameter_count(levels, base, cap, mult, heads=heads)


def test_build_deterministic_and_seed_sensitive():
    a = build(baseline_config(), init_seed=3).state_dict()
    b = build(baseline_config(), init_seed=3).state_dict()
    c = build(baseline_config(), init_seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a if a[k].is_floating_point())


def test_indivisible_patch_rejected():
    with pytest.raises(ShapeError):
        build(baseline_config(patch_shape=(30, 32, 32)))


def test_config_validation():
    with pytest.raises(ValueError):
        SegNetConfig(levels=1)
    with pytest.raises(ValueError):
        SegNetConfig(levels=3, deep_supervision_heads=2)
    with pytest.raises(ValueError):
        SegNetConfig(levels=2, deep_supervision_heads=1)
    with pytest.raises(ValueError):
        SegNetConfig(norm="group", base_filters=6, group_count=4)
    assert SegNetConfig(levels=5).ds_heads == 3


def test_forward_heads_and_range():
    cfg = baseline_config(levels=4, deep_supervision_heads=2, patch_shape=(16, 16, 16))
    model = build(cfg)
    outs = forward(model, torch.randn(4, 16, 16, 16))
    assert [tuple(o.shape) for o in outs] == [(3, 16, 16, 16), (3, 8, 8, 8), (3, 4, 4, 4)]
    for o in outs:
        assert ((o > 0) & (o < 1)).all()
    with pytest.raises(ShapeError):
        forward(model, torch.randn(4, 8, 16, 16))
    with pytest.raises(ShapeError):
        forward(model, torch.randn(2, 3, 16, 16, 16))


def test_finite_difference_gradients():
    torch.manual_seed(0)
    cfg = baseline_config(base_filters=2, levels=2, patch_shape=(8, 8, 8))
    model = build(cfg, init_seed=1).double()
    model.train()
    x = torch.randn(2, 4, 8, 8, 8, dtype=torch.float64)

    def f():
        return sum(o.sum() for o in model(x))

    model.zero_grad()
    f().backward()
    # small step: with thousands of LeakyReLU inputs, a 1e-6 step already straddles kinks for some weights
    h = 1e-7
    worst = []
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().ravel()
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
        err = (analytic - numeric).norm() / max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        assert err < 1e-4, (name, float(err))
        worst.append(float(err))
    print("max relative FD error", max(worst))


def test_group_normalize_matches_torch(rng):
    x = torch.from_numpy(rng.normal(2.0, 3.0, size=(3, 8, 4, 5, 6)))
    scale = torch.from_numpy(rng.normal(size=8))
    shift = torch.from_numpy(rng.normal(size=8))
    ours = group_normalize(x, 4, 1e-5, scale, shift)
    ref = nn.functional.group_norm(x, 4, scale, shift, 1e-5)
    torch.testing.assert_close(ours, ref, rtol=1e-10, atol=1e-10)


def test_group_normalize_instance_case_by_hand():
    x = torch.zeros(1, 2, 1, 1, 4, dtype=torch.float64)
    x[0, 0, 0, 0] = torch.tensor([1.0, 2.0, 3.0, 4.0])
    x[0, 1, 0, 0] = torch.tensor([10.0, 10.0, 20.0, 20.0])
    y = group_normalize(x, 2, eps=0.0)
    # channel 0: mean 2.5, var 1.25; channel 1: mean 15, var 25
    expected0 = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25)
    expected1 = (np.array([10, 10, 20, 20]) - 15.0) / 5.0
    np.testing.assert_allclose(y[0, 0, 0, 0].numpy(), expected0, atol=1e-12)
    np.testing.assert_allclose(y[0, 1, 0, 0].numpy(), expected1, atol=1e-12)


def test_group_normalize_constant_and_statistics(rng):
    const = torch.full((2, 4, 3, 3, 3), 5.0)
    assert group_normalize(const, 2).abs().max() < 1e-3
    x = torch.from_numpy(rng.normal(1.0, 4.0, size=(2, 8, 6, 6, 6)))
    y = group_normalize(x, 4).reshape(2, 4, -1)
    assert y.mean(-1).abs().max() < 1e-5
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-3
    with pytest.raises(ValueError):
        group_normalize(x, 3)


def test_group_norm_module_parameters():
    gn = GroupNorm3d(8, 4)
    assert torch.equal(gn.weight, torch.ones(8)) and torch.equal(gn.bias, torch.zeros(8))


def test_group_norm_no_batch_coupling_but_batch_norm_couples():
    torch.manual_seed(0)
    x = torch.randn(3, 4, 16, 16, 16)
    for make, coupled in ((expanded_config, False), (baseline_config, True)):
        model = build(make(patch_shape=(16, 16, 16)), init_seed=0)
        model.train()
        with torch.no_grad():
            together = model(x)[0]
            alone = model(x[1:2])[0]
            permuted = model(x[[2, 0, 1]])[0]
        same = torch.allclose(together[1:2], alone, atol=1e-6)
        assert same is not coupled
        if not coupled:
            torch.testing.assert_close(permuted, together[[2, 0, 1]], rtol=0, atol=1e-6)


def test_every_parameter_gets_gradient():
    torch.manual_seed(0)
    for make in (baseline_config, expanded_config):
        model = build(make(patch_shape=(16, 16, 16)), init_seed=2)
        outs = model(torch.randn(2, 4, 16, 16, 16))
        weights = [torch.randn_like(o) for o in outs]
        sum((w * o).sum() for w, o in zip(weights, outs)).backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
        assert not dead, dead


def test_maximum_head_count_runs():
    model = build(baseline_config(levels=3, deep_supervision_heads=1, patch_shape=(8, 8, 8)))
    assert [tuple(o.shape) for o in model(torch.randn(1, 4, 8, 8, 8))] == [(1, 3, 8, 8, 8), (1, 3, 4, 4, 4)]


def test_head_count_follows_levels():
    assert len(build(baseline_config(levels=5, patch_shape=(16, 16, 16))).heads) == 4
    assert len(build(baseline_config(levels=2, patch_shape=(8, 8, 8))).heads) == 1
