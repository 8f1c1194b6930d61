"""Hybrid teacher/student models and the identities they should satisfy."""
import numpy as np

from unetslim.compress import (
    all_teacher_plan,
    default_prune_plan,
    inherit_condconv,
    m_plan,
    origin_audit,
    prune_layers,
    recombine,
    transplant_weights,
)
from unetslim.data import gen_dataset, stack
from unetslim.profiler import count_params
from unetslim.unet import build_unet, desk_spec

spec = desk_spec()
teacher = build_unet(spec, 0)
student, report = transplant_weights(prune_layers(spec, default_prune_plan(spec)), teacher)
print(f"student: {len(report.copied)} tensors copied, {len(report.fresh)} fresh")

latents, tokens = stack(gen_dataset(1, 2))
ref = teacher.forward(latents, 300, tokens).data

same, _ = recombine(teacher, student, all_teacher_plan(spec))
print("all-teacher hybrid bitwise equal:", same.forward(latents, 300, tokens).data.tobytes() == ref.tobytes())

for name in ("M1", "M2", "M3"):
    hybrid, freeze = recombine(teacher, student, m_plan(name))
    audit = origin_audit(hybrid.provenance)
    trainable = sum(p.size for n, p in hybrid.named_parameters() if not freeze[n])
    diff = np.abs(hybrid.forward(latents, 300, tokens).data - ref).max()
    print(f"{name}: student blocks {sorted(b for b, s in audit.items() if s == 'student')}, "
          f"{trainable:,} trainable params, max |out - teacher| {diff:.3g}")

one = inherit_condconv(teacher, "up3", 1)
print("1-expert condconv bitwise equal:", one.forward(latents, 300, tokens).data.tobytes() == ref.tobytes())
two = inherit_condconv(teacher, "up3", 2)
print(f"2-expert condconv adds {count_params(two.spec).total_params - count_params(spec).total_params:,} params; "
      f"max |out - teacher| {np.abs(two.forward(latents, 300, tokens).data - ref).max():.3g}")
