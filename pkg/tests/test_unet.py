import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_specs, small_spec
from unetslim import diffkit as dk
from unetslim.compress import PrunePlan, prune_layers
from unetslim.diffkit import ConfigError, ContractError, DimensionError, Tensor
from unetslim.distill import LossWeights, make_state, train_step
from unetslim.profiler import count_params
from unetslim.unet import (
    CondConvUnit,
    LayerSpec,
    ResNetUnitSpec,
    UNetSpec,
    build_unet,
    condconv_forward,
    forward,
    forward_with_taps,
    make_spec,
    null_tokens,
    timestep_embed,
    validate_spec,
)


def test_default_forward_on_zeros(spec, teacher):
    out = forward(teacher, np.zeros((1, 4, 16, 16)), 0, null_tokens(spec))
    assert out.shape == (1, 4, 16, 16)
    assert np.isfinite(out.data).all()


def test_same_seed_same_parameters(spec):
    a, b = build_unet(spec, 5), build_unet(spec, 5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_different_seed_different_parameters(spec):
    a, b = build_unet(spec, 5), build_unet(spec, 6)
    assert not np.array_equal(a.conv_in.weight.data, b.conv_in.weight.data)


def test_three_level_census():
    spec = make_spec(
        channel_multipliers=(1, 2, 4),
        down_layers=(2, 2, 2),
        up_layers=(3, 3, 3),
        down_transformer=(True, True, False),
        up_transformer=(False, True, True),
        downsample=(True, True, False),
    )
    report = count_params(spec)
    assert [report.row(f"dn{i}").layers for i in range(3)] == [2, 2, 2]
    assert [report.row(f"up{i}").layers for i in range(3)] == [3, 3, 3]
    assert spec.layer_census() == {"dn0": 2, "dn1": 2, "dn2": 2, "mid": 2, "up0": 3, "up1": 3, "up2": 3}


@pytest.mark.parametrize("t", [0, 1, 500, 999])
def test_output_shape_for_valid_timesteps(spec, teacher, batch, t):
    latents, tokens = batch
    assert forward(teacher, latents, t, tokens).shape == latents.shape


def test_taps_consistent_with_forward(spec, teacher, batch):
    latents, tokens = batch
    out = forward(teacher, latents, 10, tokens)
    tapped, mid = forward_with_taps(teacher, latents, 10, tokens)
    assert out.data.tobytes() == tapped.data.tobytes()
    deepest = spec.base_channels * spec.channel_multipliers[-1]
    assert mid.shape == (2, deepest, spec.latent_size // 4, spec.latent_size // 4)


def test_timestep_out_of_range(spec, teacher):
    with pytest.raises(ContractError):
        forward(teacher, np.zeros((1, 4, 16, 16)), spec.T_max, null_tokens(spec))
    with pytest.raises(ContractError):
        forward(teacher, np.zeros((1, 4, 16, 16)), -1, null_tokens(spec))


def test_wrong_latent_shape(spec, teacher):
    with pytest.raises(DimensionError):
        forward(teacher, np.zeros((1, 4, 8, 8)), 0, null_tokens(spec))


def test_conditioning_separates_outputs_after_training():
    spec = small_spec()
    model = build_unet(spec, 1)
    state = make_state(model, seed=3, cond_dropout=0.1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.standard_normal((2, 4, 8, 8))
        tokens = rng.integers(1, spec.vocab_size, (2, spec.cond_seq_len))
        train_step(state, (x, tokens), LossWeights(1, 0, 0, 0), 1e-3)
    x = rng.standard_normal((1, 4, 8, 8))
    a = forward(model, x, 300, np.full(spec.cond_seq_len, 3)).data
    b = forward(model, x, 300, np.full(spec.cond_seq_len, 7)).data
    assert np.linalg.norm(a - b) > 0


# ----------------------------------------------------------- timestep embed


def test_timestep_embed_at_zero():
    e = timestep_embed(0, 16)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_timestep_embeddings_bounded_and_distinct():
    emb = timestep_embed(np.arange(1000), 32, 1000)
    assert np.abs(emb).max() <= 1.0
    worst = np.inf
    for i in range(1000):
        d = np.abs(emb[i + 1 :] - emb[i]).max(axis=1)
        if d.size:
            worst = min(worst, d.min())
    assert worst > 0


def test_timestep_embed_odd_dim():
    with pytest.raises(ConfigError):
        timestep_embed(3, 15)


# ----------------------------------------------------------------- condconv


def _unit(n, cin=3, cout=4, seed=0):
    rng = np.random.default_rng(seed)
    unit = CondConvUnit(cin, cout, n)
    unit.experts.data[...] = rng.normal(size=unit.experts.shape)
    unit.bias.data[...] = rng.normal(size=cout)
    unit.route_w.data[...] = rng.normal(size=unit.route_w.shape)
    return unit


def test_single_expert_is_plain_conv():
    unit = _unit(1)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5, 5)))
    out = condconv_forward(unit, x).data
    ref = dk.conv2d(x, Tensor(unit.experts.data[0]), unit.bias, 1, 1).data
    assert out.tobytes() == ref.tobytes()


def test_saturated_routing_matches_expert_zero():
    unit = _unit(2)
    unit.route_w.data[...] = 0.0
    unit.route_b.data[...] = [25.0, 0.0]
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 5, 5)))
    out = condconv_forward(unit, x).data
    ref = dk.conv2d(x, Tensor(unit.experts.data[0]), unit.bias, 1, 1).data
    assert np.abs(out - ref).max() / np.abs(ref).max() <= 1e-9


def test_uniform_routing_uses_mean_kernel():
    unit = _unit(2)
    unit.route_w.data[...] = 0.0
    unit.route_b.data[...] = 0.0
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 5, 5)))
    out = condconv_forward(unit, x).data
    ref = dk.conv2d(x, Tensor(unit.experts.data.mean(axis=0)), unit.bias, 1, 1).data
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_condconv_channel_mismatch():
    with pytest.raises(DimensionError):
        condconv_forward(_unit(2), Tensor(np.zeros((1, 5, 4, 4))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_routing_is_convex(n, seed):
    unit = _unit(n, seed=seed)
    x = Tensor(np.random.default_rng(seed).uniform(-5, 5, (3, 3, 4, 4)))
    r = unit.routing(x).data
    assert (r >= 0).all()
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)
    k = dk.mix_kernels(unit.routing(x), unit.experts).data
    lo, hi = unit.experts.data.min(axis=0), unit.experts.data.max(axis=0)
    assert (k >= lo - 1e-12).all() and (k <= hi + 1e-12).all()


# ------------------------------------------------------------ spec checks


@settings(max_examples=50, deadline=None)
@given(random_specs())
def test_param_census_matches_enumeration(spec):
    model = build_unet(spec, 0)
    assert count_params(spec).total_params == sum(p.size for p in model.parameters())


def test_spec_roundtrips_through_dict(spec):
    assert UNetSpec.from_dict(spec.to_dict()) == spec


def test_bad_channel_arithmetic_names_layer(spec):
    up1 = spec.block("up1")
    bad_layer = dataclasses.replace(up1.layers[1], resnet=ResNetUnitSpec(40, 128))
    bad = spec.with_block("up1", dataclasses.replace(up1, layers=(up1.layers[0], bad_layer, up1.layers[2])))
    with pytest.raises(ConfigError, match="up1 layer 1"):
        validate_spec(bad)


def test_empty_mid_rejected(spec):
    with pytest.raises(ConfigError, match="mid"):
        validate_spec(dataclasses.replace(spec, mid_block=dataclasses.replace(spec.mid_block, layers=())))


def test_pruned_forward_never_visits_removed_layers(spec, batch):
    plan = PrunePlan.of(("dn0", 1), ("up3", 1), ("up1", 0))
    pruned = prune_layers(spec, plan)
    model = build_unet(pruned, 0)
    visited = []
    latents, tokens = batch
    model.forward(latents, 5, tokens, trace=visited)
    census = [f"{b}.{l.index}" for b in pruned.block_ids() for l in pruned.block(b).layers]
    assert visited == census
    assert not {"dn0.1", "up3.1", "up1.0"} & set(visited)


def test_gradients_reach_parameters(spec, batch):
    model = build_unet(spec, 2)
    latents, tokens = batch
    x, t, _ = random_batch(spec, 2, 4)
    loss = dk.mse(model.forward(x, t, tokens), Tensor(latents))
    dk.backward(loss)
    params = model.parameters()
    dead = sum(1 for p in params if p.grad is None or not p.grad.any())
    assert dead / len(params) < 0.05
