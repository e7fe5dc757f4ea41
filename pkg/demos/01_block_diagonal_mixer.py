"""
Block-diagonal channel mixing
=============================

A grouped MLP stores one small weight block per group.  With a larger
expansion it costs exactly what a dense MLP costs.
"""
import numpy as np

from scheme import MixerConfig, bd_mlp_forward, dense_mlp_forward, init_params
from scheme.accounting import effective_expansion, iso_flop_plan, mixer_macs, mixer_params

rng = np.random.default_rng(0)

# one group is just the dense MLP
cfg = MixerConfig(d=16, E=2)
p = init_params(cfg, rng)
x = rng.normal(size=(16, 10))  # channels x tokens
print("g=1 max |dense - grouped|:", np.abs(dense_mlp_forward(x, p).data - bd_mlp_forward(x, cfg, p).data).max())

# four groups: W1 is stored as 4 blocks of shape (E*d/g, d/g)
cfg = MixerConfig(d=16, E=8, g1=4, g2=4)
p = init_params(cfg, rng)
print(cfg.name, "W1 blocks:", p.W1.shape, "output:", bd_mlp_forward(x, cfg, p).shape)

# the dense 11-e2 mixer and the grouped 44-e8 mixer cost the same
E_grouped = effective_expansion(2, 4, 4)
print("effective expansion of E=2 at g=4:", E_grouped)
for c in (MixerConfig(d=64, E=2), MixerConfig(d=64, E=E_grouped, g1=4, g2=4)):
    print(f"  {c.name:6s} params {mixer_params(c):6d}  MACs/token {mixer_macs(c, 1)}")

# every configuration that fits the same budget, widest hidden layer first
for c, rep in iso_flop_plan(64, 16384, [1, 2, 4, 8, 16], [1, 2, 4, 8])[:6]:
    print(f"  {c.name:6s} hidden {c.hidden:4d}  params {rep.params}")
