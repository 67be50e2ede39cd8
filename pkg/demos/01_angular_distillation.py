"""Why angular distillation leaves room to move.

A teacher and a student embed the same batch. We rotate and rescale the
student's descriptors and watch three distillation terms: the angle-based
loss ignores the change, the distance-based one sees the rescale, and the
point-wise one penalises everything. Then the analytic gradient of each term is
compared with central differences.
"""

import numpy as np

from pcpr import checks, losses

rng = np.random.default_rng(7)
teacher = rng.standard_normal((8, 16))
triplets = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 0]])

# a random rotation (QR of a gaussian) plus a 1.5x scale, then a shift
q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
student = 1.5 * teacher @ q + 0.3

angular = losses.DistillSpec(margin=0.0)
euclid = losses.DistillSpec(kind="euclidean", margin=0.0)
print("student = similarity transform of teacher")
print(f"  angular loss   {losses.distillation_loss('angular', student, teacher, triplets, angular).value:.3e}")
print(f"  euclidean loss {losses.distillation_loss('euclidean', student, teacher, triplets, euclid).value:.3e}")
print(f"  point loss     {losses.point_distill(student, teacher).value:.3e}")

print("\nworst relative gradient error over 20 random instances")
for name in checks.GRADIENT_TARGETS:
    print(f"  {name:17s} {max(checks.gradient_errors(name, 20, seed=1)):.1e}")

# the relaxation schedule: distillation fades out over one step
sched = losses.ScheduleSpec(60)
print("\nrelaxation weight at epochs 0, 15, 30, 45, 60:")
print("  " + "  ".join(f"{losses.relaxation_weight(g, sched):.3f}" for g in (0, 15, 30, 45, 60)))
