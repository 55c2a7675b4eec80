"""
Dynamic codebook against a static one and against paired data alone
===================================================================

Three arms on the same corpus and seed.  Pass ``--quick`` for reduced step
counts (about a minute); the default budget takes a few minutes.
"""

import sys

from dynvq.eval import ablation_arms, sweep
from dynvq.trainer import TrainConfig

base = TrainConfig()
if "--quick" in sys.argv:
    base = base.with_overrides({"stage1_steps": 600, "stage3_steps": 600})

result = sweep(base, ablation_arms())
print(result.to_table())

rows = result.by_arm()
dyn = rows["dynamic-semi"]
for other in ("static-semi", "fully-supervised"):
    r = rows[other]
    print(f"dynamic vs {other}: PER {dyn['per']:.3f} vs {r['per']:.3f}, distortion {dyn['distortion']:.3f} vs {r['distortion']:.3f}")
