"""Two-stage progressive distillation with semantic-aware supervision.

The student objective is

    total = w_task * MSE(student_eps, eps)
          + w_out  * MSE(student_eps, teacher_eps)
          + w_mid  * MSE(student_mid, teacher_mid)
          + w_feat * sum_s MSE(probe_s(student_eps), probe_s(teacher_eps))

where ``probe`` is a frozen, seed-pinned strided conv network.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkit as dk
from .checkpoint import load_model, save_model
from .compress import TEACHER, inherit_condconv, prune_layers, recombine, transplant_weights
from .data import batch_at, gen_dataset, stack
from .diffkit import ConfigError, DimensionError, Tensor
from .sampler import NoiseSchedule
from .unet import Conv2d, Module, UNetModel, build_unet, init_module, null_tokens

log = logging.getLogger(__name__)

TERMS = ("L_task", "L_out", "L_mid", "L_feat")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class AlignmentError(DimensionError):
    """Teacher and student taps are not architecturally aligned."""


@dataclass(frozen=True)
class LossWeights:
    task: float = 1.0
    out: float = 1.0
    mid: float = 0.5
    feat: float = 0.1

    def __post_init__(self):
        w = (self.task, self.out, self.mid, self.feat)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ConfigError(f"loss weights must be nonnegative with one positive, got {w}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.task, self.out, self.mid, self.feat)


TEACHER_WEIGHTS = LossWeights(1.0, 0.0, 0.0, 0.0)


class PerceptualProbe(Module):
    """Frozen random 4-stage strided conv net; one tap per stage."""

    def __init__(self, seed: int = 0, in_channels: int = 4, channels=(8, 16, 32, 32)):
        super().__init__()
        stages = []
        c = in_channels
        for o in channels:
            stages.append(Conv2d(c, o, 3, stride=2))
            c = o
        self.stages = stages
        init_module(self, seed)
        for p in self.parameters():
            p.requires_grad = False

    def features(self, x: Tensor) -> list[Tensor]:
        taps = []
        for conv in self.stages:
            x = dk.silu(conv(x))
            taps.append(x)
        return taps


def _mse(a: Tensor, b: Tensor, what: str) -> Tensor:
    a, b = dk.as_tensor(a), dk.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return dk.mse(a, b)


def task_loss(pred_noise, true_noise) -> Tensor:
    return _mse(pred_noise, true_noise, "task loss")


def output_kd_loss(student_pred, teacher_pred) -> Tensor:
    return _mse(student_pred, teacher_pred, "output distillation")


def midblock_loss(student_mid, teacher_mid) -> Tensor:
    student_mid, teacher_mid = dk.as_tensor(student_mid), dk.as_tensor(teacher_mid)
    if student_mid.shape != teacher_mid.shape:
        raise AlignmentError(f"mid-block taps differ: {student_mid.shape} vs {teacher_mid.shape}")
    return dk.mse(student_mid, teacher_mid)


def perceptual_loss(probe: PerceptualProbe, student_out, teacher_out, stage_weights=None) -> Tensor:
    a, b = dk.as_tensor(student_out), dk.as_tensor(teacher_out)
    if a.shape != b.shape:
        raise DimensionError(f"perceptual loss: shapes {a.shape} and {b.shape} differ")
    fa, fb = probe.features(a), probe.features(b)
    ws = [1.0] * len(fa) if stage_weights is None else list(stage_weights)
    total = None
    for w, x, y in zip(ws, fa, fb):
        term = dk.scale(dk.mse(x, y), w)
        total = term if total is None else total + term
    return total


def total_loss(weights: LossWeights, terms: dict[str, Tensor]) -> Tensor:
    """Weighted sum of the four terms; zero-weight terms stay out of the graph."""
    out = None
    for w, key in zip(weights.as_tuple(), TERMS):
        if w == 0.0:
            continue
        t = dk.scale(dk.as_tensor(terms[key]), w)
        out = t if out is None else out + t
    return out


# ------------------------------------------------------------- training


@dataclass
class TrainState:
    student: UNetModel
    teacher: UNetModel | None
    freeze: dict[str, bool]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    cond_dropout: float = 0.1
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    probe: PerceptualProbe | None = None
    metrics: dict | None = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.student.named_parameters() if not self.freeze.get(n, False)]


def make_state(
    student: UNetModel,
    teacher: UNetModel | None = None,
    freeze: dict[str, bool] | None = None,
    seed: int = 0,
    cond_dropout: float = 0.1,
    probe_seed: int = 0,
) -> TrainState:
    freeze = dict(freeze or {})
    names = [n for n, _ in student.named_parameters()]
    unknown = set(freeze) - set(names)
    if unknown:
        raise KeyError(f"freeze mask names unknown parameters: {sorted(unknown)[:5]}")
    for n in names:
        freeze.setdefault(n, False)
    for n, p in student.named_parameters():
        p.requires_grad = not freeze[n]
    if teacher is not None:
        for p in teacher.parameters():
            p.requires_grad = False
    state = TrainState(
        student,
        teacher,
        freeze,
        seed=seed,
        cond_dropout=cond_dropout,
        noise=NoiseSchedule(T=student.spec.T_max),
        probe=PerceptualProbe(probe_seed, student.spec.latent_channels),
    )
    for n, p in state.trainable():
        state.m[n] = np.zeros_like(p.data)
        state.v[n] = np.zeros_like(p.data)
    return state


ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def noised_batch(state: TrainState, latents: np.ndarray, tokens: np.ndarray):
    """Seeded (x_t, t, eps, tokens) for the current step."""
    rng = np.random.default_rng([state.seed, state.step])
    B = latents.shape[0]
    t = rng.integers(0, state.noise.T, size=B)
    eps = rng.standard_normal(latents.shape)
    drop = rng.random(B) < state.cond_dropout
    tokens = np.where(drop[:, None], null_tokens(state.student.spec, B), tokens)
    return state.noise.add_noise(latents, eps, t), t, eps, tokens


def loss_terms(state: TrainState, x_t, t, eps, tokens, weights: LossWeights) -> dict[str, Tensor]:
    pred, mid = state.student.forward(x_t, t, tokens, taps=True)
    terms = {"L_task": task_loss(pred, Tensor(eps))}
    if state.teacher is None:
        zero = Tensor(np.zeros(()))
        terms.update(L_out=zero, L_mid=zero, L_feat=zero)
        return terms
    with dk.no_grad():
        t_pred, t_mid = state.teacher.forward(x_t, t, tokens, taps=True)
    t_pred, t_mid = Tensor(t_pred.data), Tensor(t_mid.data)

    def term(w, fn):
        if w == 0.0:
            with dk.no_grad():
                return fn()
        return fn()

    terms["L_out"] = term(weights.out, lambda: output_kd_loss(pred, t_pred))
    terms["L_mid"] = term(weights.mid, lambda: midblock_loss(mid, t_mid))
    terms["L_feat"] = term(weights.feat, lambda: perceptual_loss(state.probe, pred, t_pred))
    return terms


def train_step(state: TrainState, batch, weights: LossWeights, lr: float) -> TrainState:
    """One optimizer step on ``batch = (latents, tokens)``; frozen parameters are untouched."""
    latents, tokens = batch
    x_t, t, eps, toks = noised_batch(state, np.asarray(latents), np.asarray(tokens))
    terms = loss_terms(state, x_t, t, eps, toks, weights)
    total = total_loss(weights, terms)
    value = float(total.data)
    if not math.isfinite(value):
        raise DivergenceError(state.step)
    trainable = state.trainable()
    if trainable and total.requires_grad:
        for _, p in trainable:
            p.grad = None
        dk.backward(total)
        k = state.step + 1
        c1, c2 = 1.0 - ADAM_B1**k, 1.0 - ADAM_B2**k
        for n, p in trainable:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = state.m[n]
            v = state.v[n]
            m *= ADAM_B1
            m += (1.0 - ADAM_B1) * g
            v *= ADAM_B2
            v += (1.0 - ADAM_B2) * g * g
            if lr != 0.0:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            p.grad = None
    state.metrics = {"step": state.step, **{k: float(terms[k].data) for k in TERMS}, "total": value}
    state.step += 1
    return state


# ------------------------------------------------------------ evaluation


@dataclass
class HeldOut:
    x_t: np.ndarray
    t: np.ndarray
    tokens: np.ndarray


def make_heldout(dataset, seed: int, T: int) -> HeldOut:
    latents, tokens = stack(dataset)
    rng = np.random.default_rng([seed, 7919])
    t = rng.integers(0, T, size=len(dataset))
    eps = rng.standard_normal(latents.shape)
    return HeldOut(NoiseSchedule(T=T).add_noise(latents, eps, t), t, tokens)


def divergence(student: UNetModel, teacher: UNetModel, heldout: HeldOut) -> dict[str, float]:
    """Output and mid-block MSE between student and teacher on fixed inputs."""
    with dk.no_grad():
        sp, sm = student.forward(heldout.x_t, heldout.t, heldout.tokens, taps=True)
        tp, tm = teacher.forward(heldout.x_t, heldout.t, heldout.tokens, taps=True)
    out = {"output_mse": float(np.mean((sp.data - tp.data) ** 2))}
    out["mid_mse"] = float(np.mean((sm.data - tm.data) ** 2)) if sm.shape == tm.shape else float("nan")
    return out


def task_loss_on(model: UNetModel, dataset, seed: int) -> float:
    """Mean denoising loss on fixed noise, for conditioning A/B checks."""
    latents, tokens = stack(dataset)
    rng = np.random.default_rng([seed, 104729])
    ns = NoiseSchedule(T=model.spec.T_max)
    t = rng.integers(0, ns.T, size=len(dataset))
    eps = rng.standard_normal(latents.shape)
    with dk.no_grad():
        pred = model.forward(ns.add_noise(latents, eps, t), t, tokens).data
    return float(np.mean((pred - eps) ** 2))


def run_stage(
    state: TrainState,
    batches,
    steps: int,
    weights: LossWeights,
    lr: float,
    heldout: HeldOut | None = None,
    eval_every: int = 0,
    check_freeze_every: int = 0,
    on_record=None,
) -> tuple[list[dict], list[dict]]:
    """Train for ``steps`` steps from a batch source ``batches(i) -> batch``.

    Returns (per-step metrics, divergence evaluations). When
    ``check_freeze_every`` is set, frozen parameters are compared bitwise to
    their starting values at that interval.
    """
    frozen0 = {}
    if check_freeze_every:
        frozen0 = {n: p.data.copy() for n, p in state.student.named_parameters() if state.freeze[n]}
    teacher0 = None
    if check_freeze_every and state.teacher is not None:
        teacher0 = [p.data.copy() for p in state.teacher.parameters()]
    metrics, evals = [], []

    def evaluate(i):
        if heldout is not None and state.teacher is not None:
            evals.append({"step": i, **divergence(state.student, state.teacher, heldout)})

    if eval_every:
        evaluate(0)
    params = dict(state.student.named_parameters())
    for i in range(steps):
        train_step(state, batches(i), weights, lr)
        metrics.append(state.metrics)
        if on_record is not None:
            on_record(state.metrics)
        if check_freeze_every and (i + 1) % check_freeze_every == 0:
            for n, d in frozen0.items():
                if not np.array_equal(params[n].data, d):
                    raise AssertionError(f"frozen parameter {n} changed by step {state.step}")
            if teacher0 is not None:
                for p, d in zip(state.teacher.parameters(), teacher0):
                    if not np.array_equal(p.data, d):
                        raise AssertionError("teacher parameters changed")
        if eval_every and (i + 1) % eval_every == 0:
            evaluate(i + 1)
        if (i + 1) % 100 == 0:
            log.info("step %d total %.5f", state.step, state.metrics["total"])
    if eval_every and steps % eval_every:
        evaluate(steps)
    return metrics, evals


# -------------------------------------------------------------- pipeline


def sub_seed(seed: int, role: str) -> int:
    """Independent 32-bit seed for one role of a run."""
    return int(np.random.SeedSequence([seed, *role.encode()]).generate_state(1)[0])


def weights_from(cfg) -> LossWeights:
    w = cfg.distill.weights
    return LossWeights(w.task, w.out, w.mid, w.feat)


def _datasets(cfg):
    train = gen_dataset(sub_seed(cfg.seed, "data"), cfg.data.size)
    held = gen_dataset(sub_seed(cfg.seed, "heldout"), cfg.distill.eval_size)
    return train, held


def _batches(cfg, dataset, role: str):
    seed = sub_seed(cfg.seed, role)
    return lambda i: batch_at(dataset, cfg.data.batch, seed, i)


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def train_teacher(cfg, out_dir=None) -> tuple[UNetModel, list[dict]]:
    """Train a teacher from scratch on the task loss alone."""
    train, _ = _datasets(cfg)
    model = build_unet(cfg.spec(), sub_seed(cfg.seed, "teacher-init"))
    state = make_state(model, None, seed=sub_seed(cfg.seed, "teacher"), cond_dropout=cfg.distill.cond_dropout)
    metrics, _ = run_stage(state, _batches(cfg, train, "teacher-batches"), cfg.distill.teacher_steps,
                           TEACHER_WEIGHTS, cfg.distill.lr)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "teacher.asdm", model, meta={"role": "teacher", "steps": state.step, "seed": cfg.seed})
        _write_jsonl(out / "metrics_teacher.jsonl", metrics)
    return model, metrics


def run_stage1(cfg, teacher: UNetModel, train) -> tuple[UNetModel, list[dict]]:
    """Prune, transplant teacher weights, then distill the compressed model."""
    pruned = prune_layers(teacher.spec, cfg.prune(teacher.spec))
    student, _ = transplant_weights(pruned, teacher, seed=sub_seed(cfg.seed, "transplant"))
    state = make_state(student, teacher, seed=sub_seed(cfg.seed, "stage1"),
                       cond_dropout=cfg.distill.cond_dropout, probe_seed=cfg.distill.probe_seed)
    metrics, _ = run_stage(state, _batches(cfg, train, "stage1-batches"), cfg.distill.stage1_steps,
                           weights_from(cfg), cfg.distill.lr)
    return student, metrics


def assemble_stage2(cfg, teacher: UNetModel, student: UNetModel) -> tuple[UNetModel, dict[str, bool]]:
    """Recombine per the plan and optionally attach CondConv units."""
    plan = cfg.combination()
    model, freeze = recombine(teacher, student, plan)
    if cfg.condconv.target_blocks:
        for b in cfg.condconv.target_blocks:
            model = inherit_condconv(teacher, b, cfg.condconv.n_experts, seed=sub_seed(cfg.seed, "condconv"), base=model)
        freeze = {n: plan.freeze_teacher_part and src == TEACHER for n, src in model.provenance.items()}
    return model, freeze


def run_stage2(cfg, teacher: UNetModel, combined: UNetModel, freeze, train, heldout: HeldOut,
               weights: LossWeights | None = None):
    """Distill the recombined model; returns (metrics, divergence evaluations)."""
    state = make_state(combined, teacher, freeze, seed=sub_seed(cfg.seed, "stage2"),
                       cond_dropout=cfg.distill.cond_dropout, probe_seed=cfg.distill.probe_seed)
    return run_stage(
        state,
        _batches(cfg, train, "stage2-batches"),
        cfg.distill.stage2_steps,
        weights or weights_from(cfg),
        cfg.distill.lr,
        heldout=heldout,
        eval_every=cfg.distill.eval_every or cfg.distill.stage2_steps,
        check_freeze_every=cfg.distill.freeze_check_every,
    )


@dataclass
class IncubationResult:
    stage1: UNetModel
    stage2: UNetModel
    freeze: dict[str, bool]
    metrics: dict[str, list[dict]]
    divergence: list[dict]
    paths: dict[str, str]

    @property
    def report(self) -> dict:
        first, last = self.divergence[0], self.divergence[-1]
        return {"initial": first, "final": last, "evaluations": self.divergence}


def incubation_run(cfg, teacher: UNetModel | None = None, out_dir=None) -> IncubationResult:
    """Stage 1 (prune + distill) then stage 2 (recombine + distill unfrozen blocks)."""
    if teacher is None:
        path = cfg.paths.teacher_checkpoint
        if path is None or not Path(path).is_file():
            raise ConfigError(f"paths.teacher_checkpoint: no teacher checkpoint at {path!r}")
        teacher, _ = load_model(path)
    train, held = _datasets(cfg)
    heldout = make_heldout(held, sub_seed(cfg.seed, "heldout-noise"), teacher.spec.T_max)
    stage1, m1 = run_stage1(cfg, teacher, train)
    combined, freeze = assemble_stage2(cfg, teacher, stage1)
    m2, evals = run_stage2(cfg, teacher, combined, freeze, train, heldout)
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: str(out / v) for k, v in {
            "stage1": "stage1.asdm", "stage2": "stage2.asdm", "metrics_stage1": "metrics_stage1.jsonl",
            "metrics_stage2": "metrics_stage2.jsonl", "divergence": "divergence.json"}.items()}
        save_model(paths["stage1"], stage1, meta={"role": "stage1", "seed": cfg.seed})
        save_model(paths["stage2"], combined, freeze, meta={"role": "stage2", "seed": cfg.seed})
        _write_jsonl(paths["metrics_stage1"], m1)
        _write_jsonl(paths["metrics_stage2"], m2)
    result = IncubationResult(stage1, combined, freeze, {"stage1": m1, "stage2": m2}, evals, paths)
    if out_dir is not None:
        Path(paths["divergence"]).write_text(json.dumps(result.report, indent=2) + "\n")
    return result
