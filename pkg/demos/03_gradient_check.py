"""
Checking backpropagation against finite differences
===================================================
"""
from scheme import BlockConfig, MixerConfig
from scheme import tensor as T
from scheme.training import gradcheck

for kind, g in (("dense", 1), ("bdmlp", 2), ("scheme", 4), ("scheme_shuffle", 2)):
    report = gradcheck(BlockConfig(mixer=kind, mixer_cfg=MixerConfig(d=0, E=2, g1=g, g2=g)), (16, 8))
    print(f"{kind:15s}", {k: f"{v:.1e}" for k, v in report.errors.items()})

# break one rule by 1% and the checker notices
good = T.GRAD_RULES["gelu"]
T.GRAD_RULES["gelu"] = lambda ctx, inputs, g: [1.01 * r for r in good(ctx, inputs, g)]
try:
    report = gradcheck(BlockConfig(mixer="scheme", mixer_cfg=MixerConfig(d=0, E=2, g1=2, g2=2)))
    print("corrupted gelu rule -> passed:", report.passed, " worst:", f"{report.worst:.1e}")
finally:
    T.GRAD_RULES["gelu"] = good
