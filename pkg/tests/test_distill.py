import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_spec
from oracles import GRAD_TOL, check_grads, conv_loop, mse_loop, toy_total_loss
from unetslim import config
from unetslim import diffkit as dk
from unetslim.compress import all_teacher_plan
from unetslim.diffkit import ConfigError, DimensionError, Tensor
from unetslim.distill import (
    TERMS,
    AlignmentError,
    DivergenceError,
    LossWeights,
    PerceptualProbe,
    divergence,
    incubation_run,
    make_heldout,
    make_state,
    midblock_loss,
    output_kd_loss,
    perceptual_loss,
    run_stage,
    task_loss,
    total_loss,
    train_step,
)
from unetslim.data import gen_dataset, stack
from unetslim.unet import build_unet

SMALL = dict(
    base_channels=16,
    channel_multipliers=[1, 2, 2],
    down_layers=[2, 2, 2],
    up_layers=[3, 3, 3],
    down_transformer=[True, True, False],
    up_transformer=[False, True, True],
    downsample=[True, True, False],
    head_dim=8,
    cond_dim=16,
    time_embed_dim=32,
    norm_groups=4,
)


def small_cfg(**distill):
    d = dict(stage1_steps=3, stage2_steps=6, eval_every=2, eval_size=2, freeze_check_every=2)
    d.update(distill)
    return config.parse({"architecture": SMALL, "distill": d, "data": {"size": 8, "batch": 2}})


@pytest.fixture(scope="module")
def small_teacher():
    return build_unet(small_spec(latent_size=16), 0)


def _rand(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


# ------------------------------------------------------------------ losses


def test_identical_inputs_give_zero():
    x = _rand(0, 2, 4, 8, 8)
    assert task_loss(Tensor(x), Tensor(x)).data == 0.0
    assert output_kd_loss(Tensor(x), Tensor(x)).data == 0.0
    assert midblock_loss(Tensor(x), Tensor(x)).data == 0.0
    assert perceptual_loss(PerceptualProbe(), Tensor(x), Tensor(x)).data == 0.0


def test_unit_offset_gives_one():
    x = _rand(1, 1, 4, 4, 4)
    assert task_loss(Tensor(x), Tensor(x + 1.0)).data == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("fn", [task_loss, output_kd_loss, midblock_loss])
def test_mse_terms_match_loop(fn):
    a, b = _rand(2, 2, 3, 4, 4), _rand(3, 2, 3, 4, 4)
    assert abs(float(fn(Tensor(a), Tensor(b)).data) - mse_loop(a, b)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distillation_terms_symmetric(seed):
    a, b = _rand(seed, 1, 4, 8, 8), _rand(seed + 1, 1, 4, 8, 8)
    probe = PerceptualProbe(seed=seed)
    for fn in (output_kd_loss, midblock_loss):
        assert fn(Tensor(a), Tensor(b)).data == fn(Tensor(b), Tensor(a)).data
    pa = float(perceptual_loss(probe, Tensor(a), Tensor(b)).data)
    pb = float(perceptual_loss(probe, Tensor(b), Tensor(a)).data)
    assert abs(pa - pb) <= 1e-15 * max(pa, 1.0)


def test_mismatched_shapes():
    with pytest.raises(DimensionError):
        task_loss(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 4, 4, 4))))
    with pytest.raises(AlignmentError):
        midblock_loss(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 16, 4, 4))))


def test_probe_loss_matches_hand_composition():
    probe = PerceptualProbe(seed=5, channels=(4, 6))
    a, b = _rand(4, 1, 4, 8, 8), _rand(5, 1, 4, 8, 8)

    def feats(x):
        out = []
        for conv in probe.stages:
            x = conv_loop(x, conv.weight.data, conv.bias.data, 2, 1)
            x = x / (1 + np.exp(-x))
            out.append(x)
        return out

    expected = sum(w * mse_loop(x, y) for w, x, y in zip((0.3, 2.0), feats(a), feats(b)))
    got = float(perceptual_loss(probe, Tensor(a), Tensor(b), (0.3, 2.0)).data)
    assert abs(got - expected) < 1e-12


def test_probe_is_frozen_and_seeded():
    a, b = PerceptualProbe(seed=1), PerceptualProbe(seed=1)
    assert all(not p.requires_grad for p in a.parameters())
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))


def test_total_loss_is_weighted_dot_product():
    terms = {k: Tensor(np.array(v)) for k, v in zip(TERMS, (0.7, 1.3, 2.9, 0.11))}
    w = LossWeights(1.0, 0.5, 0.25, 0.125)
    expected = 0.7 * 1.0 + 1.3 * 0.5 + 2.9 * 0.25 + 0.11 * 0.125
    assert abs(float(total_loss(w, terms).data) - expected) < 1e-15


def test_zero_weight_terms_ignored():
    terms = {k: Tensor(np.array(v)) for k, v in zip(TERMS, (0.7, np.nan, np.nan, np.nan))}
    assert float(total_loss(LossWeights(1, 0, 0, 0), terms).data) == 0.7


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(1.0, -0.1, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_toy_total_loss_gradients(seed):
    f, leaves = toy_total_loss(np.random.default_rng([seed, 3]), LossWeights(1.0, 1.0, 0.5, 0.1))
    assert check_grads(f, leaves) < GRAD_TOL


# --------------------------------------------------------------- training


def _batch(seed=0):
    return stack(gen_dataset(seed, 2))


def _fresh_state(freeze=None, seed=0, teacher=None):
    model = build_unet(small_spec(latent_size=16), 3)
    return make_state(model, teacher=teacher, freeze=freeze, seed=seed)


def test_zero_lr_keeps_parameters_but_moves_moments():
    state = _fresh_state()
    before = [p.data.copy() for p in state.student.parameters()]
    train_step(state, _batch(), LossWeights(1, 0, 0, 0), 0.0)
    assert all(np.array_equal(p.data, b) for p, b in zip(state.student.parameters(), before))
    assert any(m.any() for m in state.m.values())
    assert state.step == 1


def test_full_freeze_changes_nothing():
    model = build_unet(small_spec(latent_size=16), 3)
    state = make_state(model, freeze={n: True for n, _ in model.named_parameters()})
    before = [p.data.copy() for p in model.parameters()]
    for i in range(3):
        train_step(state, _batch(i), LossWeights(1, 0, 0, 0), 1e-2)
    assert all(np.array_equal(p.data, b) for p, b in zip(model.parameters(), before))
    assert not state.m and not state.v


def test_optimizer_state_only_for_trainable():
    model = build_unet(small_spec(latent_size=16), 3)
    freeze = {n: n.startswith("down.") for n, _ in model.named_parameters()}
    state = make_state(model, freeze=freeze)
    assert set(state.m) == set(state.v) == {n for n, f in freeze.items() if not f}


def test_freeze_names_must_exist():
    with pytest.raises(KeyError):
        _fresh_state(freeze={"nope": True})


def test_training_is_bitwise_reproducible():
    runs = []
    for _ in range(2):
        state = _fresh_state(seed=11)
        metrics, _ = run_stage(state, lambda i: _batch(i), 10, LossWeights(1, 0, 0, 0), 1e-3)
        runs.append(([p.data.tobytes() for p in state.student.parameters()], metrics))
    assert runs[0] == runs[1]


def test_non_finite_loss_raises():
    state = _fresh_state()
    latents, tokens = _batch()
    latents[0, 0, 0, 0] = np.inf
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        train_step(state, (latents, tokens), LossWeights(1, 0, 0, 0), 1e-3)


def test_metrics_record_every_term(small_teacher):
    state = _fresh_state(teacher=small_teacher)
    metrics, _ = run_stage(state, lambda i: _batch(i), 3, LossWeights(), 1e-3)
    assert [m["step"] for m in metrics] == [0, 1, 2]
    for m in metrics:
        assert set(TERMS) <= set(m) and np.isfinite(m["total"])
        assert m["total"] == pytest.approx(m["L_task"] + m["L_out"] + 0.5 * m["L_mid"] + 0.1 * m["L_feat"], rel=1e-12)


def test_frozen_parameters_untouched_while_others_train(small_teacher):
    model = build_unet(small_spec(latent_size=16), 3)
    freeze = {n: n.startswith("up.") for n, _ in model.named_parameters()}
    state = make_state(model, teacher=small_teacher, freeze=freeze)
    snap = {n: p.data.copy() for n, p in model.named_parameters()}
    run_stage(state, lambda i: _batch(i), 4, LossWeights(), 1e-3, check_freeze_every=1)
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, snap[n]) == freeze[n], n


# -------------------------------------------------------------- incubation


def test_divergence_of_identical_models_is_zero(small_teacher):
    held = make_heldout(gen_dataset(1, 2), 3, 1000)
    assert divergence(small_teacher, small_teacher, held) == {"output_mse": 0.0, "mid_mse": 0.0}


def test_all_teacher_frozen_incubation_stays_identical(small_teacher):
    assignments = all_teacher_plan(small_teacher.spec).assignments
    cfg = config.parse({
        "architecture": SMALL,
        "distill": dict(stage1_steps=2, stage2_steps=4, eval_every=1, eval_size=2, freeze_check_every=1),
        "data": {"size": 8, "batch": 2},
        "combination_plan": {"name": None, "assignments": dict(assignments), "freeze_teacher_part": True},
    })
    result = incubation_run(cfg, teacher=small_teacher)
    assert [e["step"] for e in result.divergence] == list(range(5))
    assert all(e["output_mse"] == 0.0 and e["mid_mse"] == 0.0 for e in result.divergence)


def test_incubation_writes_artifacts(small_teacher, tmp_path):
    result = incubation_run(small_cfg(), teacher=small_teacher, out_dir=tmp_path)
    assert len(result.metrics["stage1"]) == 3 and len(result.metrics["stage2"]) == 6
    lines = (tmp_path / "metrics_stage2.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == list(range(6))
    report = json.loads((tmp_path / "divergence.json").read_text())
    assert set(report) == {"initial", "final", "evaluations"}
    assert [e["step"] for e in report["evaluations"]] == [0, 2, 4, 6]
    assert all(result.freeze[n] == (src == "teacher") for n, src in result.stage2.provenance.items())


def test_missing_teacher_is_config_error(tmp_path):
    cfg = config.parse({"architecture": SMALL, "paths": {"teacher_checkpoint": str(tmp_path / "none.asdm")}})
    with pytest.raises(ConfigError, match="paths.teacher_checkpoint"):
        incubation_run(cfg)


def test_short_stage2_reduces_divergence(small_teacher):
    # the toy teacher is untrained, so only the distillation terms point toward it
    weights = {"task": 0.0, "out": 1.0, "mid": 0.5, "feat": 0.1}
    cfg = small_cfg(stage2_steps=30, eval_every=30, eval_size=4, weights=weights)
    result = incubation_run(cfg, teacher=small_teacher)
    first, last = result.divergence[0], result.divergence[-1]
    assert last["output_mse"] < first["output_mse"]
