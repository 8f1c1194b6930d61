"""Desk-scale toolkit for slimming latent-diffusion UNets.

Modules: ``diffkit`` (float64 reverse-mode autodiff), ``unet`` (spec and
model), ``profiler`` (closed-form accounting), ``compress`` (pruning,
recombination, CondConv inheritance), ``sampler`` (DDIM with guidance over
multi-model schedules), ``distill`` (two-stage distillation), ``data``
(synthetic latents), ``config``/``checkpoint``/``cli`` (plumbing).
"""

__version__ = "0.1.0"
