"""A few-minute teacher plus two-stage incubation on a shrunken UNet.

Writes checkpoints, per-step metrics and a divergence report to
runs/tiny (or the directory given as the first argument).
"""
import sys

from unetslim import config, distill

cfg = config.parse({
    "architecture": {
        "base_channels": 16,
        "channel_multipliers": [1, 2, 2],
        "down_layers": [2, 2, 2],
        "up_layers": [3, 3, 3],
        "down_transformer": [True, True, False],
        "up_transformer": [False, True, True],
        "downsample": [True, True, False],
        "head_dim": 8,
        "cond_dim": 16,
        "time_embed_dim": 32,
        "norm_groups": 4,
    },
    "distill": {"teacher_steps": 150, "stage1_steps": 30, "stage2_steps": 150, "eval_every": 25, "eval_size": 4},
    "data": {"size": 64, "batch": 2},
})
out = sys.argv[1] if len(sys.argv) > 1 else "runs/tiny"

teacher, metrics = distill.train_teacher(cfg, out)
print(f"teacher task loss {metrics[0]['L_task']:.4f} -> {metrics[-1]['L_task']:.4f}")
result = distill.incubation_run(cfg, teacher=teacher, out_dir=out)
for e in result.divergence:
    print(f"step {e['step']:>4}: output MSE {e['output_mse']:.5f}  mid MSE {e['mid_mse']:.5f}")
print("artifacts:", ", ".join(sorted(result.paths)))
