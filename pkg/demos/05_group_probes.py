"""
Per-group linear probes and their ensemble
==========================================

When each group sees only part of the evidence, averaging the group
classifiers beats any single one.
"""
import numpy as np

from scheme import BlockConfig, Hyper, ModelConfig, build_model, generate_synthetic, train
from scheme.analysis import class_separability, extract_group_features, group_probe
from scheme.data import block_mean

# label = 2a + b, with bit a drawn in the left half and bit b in the right
data = generate_synthetic(0, 200, 4, structure="group_complementary")
halves = [block_mean(data.samples[..., :16], 8), block_mean(data.samples[..., 16:], 8)]
report = group_probe(halves, data.labels)
print("pixel halves:", [round(a, 3) for a in report.group_accuracy], "ensemble", report.ensemble_accuracy)

# the same probes on a trained model's grouped features (after the MLP, max over tokens)
model = build_model(ModelConfig(), BlockConfig())
train(model, data, Hyper(epochs=5))
model.set_mode("inference")
feats = extract_group_features(model, data, [0, 1, 2, 3])
report = group_probe(feats, data.labels)
print("model groups:", [round(a, 3) for a in report.group_accuracy], "ensemble", report.ensemble_accuracy)

# nearest-neighbour label agreement of the concatenated features
sep = class_separability(np.concatenate(feats, axis=1), data.labels)
print(sep.metric, [round(s, 3) for s in sep.per_class], "mean", round(sep.mean, 3))
