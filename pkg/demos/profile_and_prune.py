"""Census of the desk UNet, then what the default prune plan buys."""
from unetslim.compress import default_prune_plan, prune_layers
from unetslim.profiler import profile, speedup_estimate
from unetslim.unet import desk_spec, sd15_spec

spec = desk_spec()
print(profile(spec).to_table())

plan = default_prune_plan(spec)
print("\nremoving", ", ".join(f"{b}.{i}" for b, i in plan.removals))
pruned = prune_layers(spec, plan)
print(profile(pruned).to_table())

for name, s in (("desk", spec), ("SD-shaped", sd15_spec())):
    est = speedup_estimate(s, prune_layers(s, default_prune_plan(s)))
    print(f"{name:>9}: UNet FLOPs -{100 * est['unet_flop_reduction']:.1f}%, pipeline -{100 * est['pipeline_reduction']:.1f}%")
