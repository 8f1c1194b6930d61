"""DDIM sampling with classifier-free guidance over multi-UNet schedules."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffkit as dk
from .diffkit import ContractError
from .unet import UNetModel, null_tokens

DEFAULT_GUIDANCE = 8.0
DEFAULT_STEPS = 30


class NumericDivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str = "latent"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def add_noise(self, x0: np.ndarray, noise: np.ndarray, t: np.ndarray) -> np.ndarray:
        ab = self.alphas_cumprod[np.asarray(t)].reshape(-1, *([1] * (x0.ndim - 1)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


@dataclass
class SamplerSchedule:
    """Ordered ``(handle, n_steps)`` segments; earliest inference steps first."""

    segments: list[tuple[str, int]]
    models: Mapping[str, UNetModel] = field(default_factory=dict)

    def __post_init__(self):
        self.segments = [(str(h), int(n)) for h, n in self.segments]
        if not self.segments:
            raise ContractError("schedule needs at least one segment")
        for h, n in self.segments:
            if n < 1:
                raise ContractError(f"segment {h!r} has {n} steps; need >= 1")

    @property
    def total_steps(self) -> int:
        return sum(n for _, n in self.segments)

    def boundaries(self) -> list[int]:
        return list(np.cumsum([n for _, n in self.segments])[:-1])

    def check_models(self) -> None:
        shapes = {}
        for h, _ in self.segments:
            if h not in self.models:
                raise ContractError(f"schedule handle {h!r} has no model")
            s = self.models[h].spec
            shapes[h] = (s.latent_channels, s.latent_size, s.latent_size, s.cond_seq_len)
        if len(set(shapes.values())) > 1:
            raise ContractError(f"models disagree on latent/condition shape: {shapes}")


def s_schedule(name: str, small: str = "base", large: str = "sd") -> list[tuple[str, int]]:
    """S1: small 10 then large 15; S2: large 15 then small 10; S3: large 10 then small 15."""
    table = {
        "S1": [(small, 10), (large, 15)],
        "S2": [(large, 15), (small, 10)],
        "S3": [(large, 10), (small, 15)],
    }
    return table[name]


def select_model(schedule: SamplerSchedule, step_index: int) -> str:
    total = schedule.total_steps
    if not 0 <= step_index < total:
        raise ContractError(f"step {step_index} outside [0, {total})")
    edge = 0
    for handle, n in schedule.segments:
        edge += n
        if step_index < edge:
            return handle
    raise AssertionError("unreachable")


def ddim_timesteps(total_steps: int, T: int) -> np.ndarray:
    """Descending training timesteps visited by a ``total_steps`` run."""
    if not 1 <= total_steps <= T:
        raise ContractError(f"need 1 <= steps <= {T}")
    return np.round(np.linspace(T - 1, 0, total_steps)).astype(np.int64)


@dataclass
class TraceRecord:
    step: int
    timestep: int
    model: str
    latent_norm: float


def trace_jsonl(trace: list[TraceRecord]) -> str:
    return "".join(json.dumps(asdict(r)) + "\n" for r in trace)


def guided_noise(model: UNetModel, x: np.ndarray, t: int, tokens: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance; at scale 1 only the conditional branch runs."""
    with dk.no_grad():
        cond = model.forward(x, t, tokens).data
        if scale == 1.0:
            return cond
        uncond = model.forward(x, t, null_tokens(model.spec, x.shape[0])).data
    return uncond + scale * (cond - uncond)


def ddim_sample(
    schedule: SamplerSchedule,
    cond_tokens,
    guidance_scale: float = DEFAULT_GUIDANCE,
    seed: int = 0,
    eta: float = 0.0,
    noise_schedule: NoiseSchedule | None = None,
    n_samples: int | None = None,
) -> tuple[np.ndarray, list[TraceRecord]]:
    """Run DDIM from seeded Gaussian noise; returns (final latent, trace)."""
    if guidance_scale < 0:
        raise ContractError("guidance scale must be >= 0")
    schedule.check_models()
    ns = noise_schedule or NoiseSchedule(T=schedule.models[schedule.segments[0][0]].spec.T_max)
    spec = schedule.models[schedule.segments[0][0]].spec
    tokens = np.asarray(cond_tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    n = n_samples or tokens.shape[0]
    tokens = np.broadcast_to(tokens, (n, tokens.shape[1]))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.latent_channels, spec.latent_size, spec.latent_size))
    abar = ns.alphas_cumprod
    ts = ddim_timesteps(schedule.total_steps, ns.T)
    trace = []
    for i, t in enumerate(ts):
        handle = select_model(schedule, i)
        eps = guided_noise(schedule.models[handle], x, int(t), tokens, guidance_scale)
        a_t = abar[t]
        a_prev = abar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)) if eta else 0.0
        x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev - sigma**2) * eps
        if eta:
            x = x + sigma * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericDivergenceError(i)
        trace.append(TraceRecord(i, int(t), handle, float(np.linalg.norm(x))))
    return x, trace


def schedule_cost(schedule: SamplerSchedule, flops: Mapping[str, int], guidance_scale: float = DEFAULT_GUIDANCE) -> int:
    """Total UNet FLOPs of a run: per segment, steps x per-forward FLOPs x (1 or 2 guidance branches)."""
    branches = 1 if guidance_scale == 1.0 else 2
    return sum(n * flops[h] * branches for h, n in schedule.segments)
