"""
Covariance-weighted channel mixing during training only
=======================================================

The training-time branch re-weights channels by a softmax over their
covariance across tokens.  A learned weight alpha fuses it with the grouped
MLP; in inference mode the branch is skipped.
"""
import numpy as np

from scheme import MixerConfig, cca_forward, init_params, scheme_forward
from scheme.accounting import cost_report

rng = np.random.default_rng(1)

# two orthogonal channels: each row of the attention puts e/(e+1) on itself
print(cca_forward(np.eye(2)).data.round(4))

# a single channel passes through unchanged
x1 = rng.normal(size=(1, 5))
print(np.allclose(cca_forward(x1).data, x1))

cfg = MixerConfig(d=8, E=2, g1=2, g2=2)
p = init_params(cfg, rng)
x = rng.normal(size=(8, 6))
print("alpha at init:", p.alpha)

# train mode mixes the branches, inference keeps only the MLP
train_out = scheme_forward(x, cfg, p).data
infer_cfg = MixerConfig(d=8, E=2, g1=2, g2=2, mode="inference")
infer_out = scheme_forward(x, infer_cfg, p).data
print("train vs inference differ by", np.abs(train_out - infer_out).max())

# at alpha = 1 the two modes agree exactly
p.alpha_raw.data[...] = np.inf
print("with alpha=1:", np.abs(scheme_forward(x, cfg, p).data - infer_out).max())

# the branch costs 2*N*d^2 MACs, paid only while training
for c in (cfg, infer_cfg):
    r = cost_report(c, 196)
    print(f"{c.mode:9s} MACs {r.macs_total}  (CCA counted: {r.includes_cca})")
