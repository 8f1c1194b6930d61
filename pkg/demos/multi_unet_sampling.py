"""Hand a DDIM run between a small and a large UNet and compare costs.

Weights are untrained here; the point is where hand-offs land and what they cost.
"""
from unetslim.compress import default_prune_plan, prune_layers, transplant_weights
from unetslim.data import gen_dataset
from unetslim.profiler import estimate_flops
from unetslim.sampler import SamplerSchedule, ddim_sample, s_schedule, schedule_cost
from unetslim.unet import build_unet, desk_spec

spec = desk_spec()
large = build_unet(spec, 0)
small, _ = transplant_weights(prune_layers(spec, default_prune_plan(spec)), large)
models = {"base": small, "sd": large}
flops = {h: estimate_flops(m.spec).total_flops for h, m in models.items()}
prompt = gen_dataset(5, 1)[0].tokens

full = SamplerSchedule([("sd", 25)], models)
print(f"large only: {schedule_cost(full, flops) / 1e9:.2f} GFLOPs")
for name in ("S1", "S2", "S3"):
    sched = SamplerSchedule(s_schedule(name), models)
    _, trace = ddim_sample(sched, prompt, 8.0, seed=0)
    hand = [r.step for a, r in zip(trace, trace[1:]) if a.model != r.model]
    print(f"{name}: {sched.segments} hand-off at step {hand}, "
          f"{schedule_cost(sched, flops) / 1e9:.2f} GFLOPs")
