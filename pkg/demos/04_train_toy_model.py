"""
Training the toy classifier and watching alpha
==============================================

Four well-separated classes of 32x32 images.  The fusion weight of each
layer is logged every epoch; whether 1 - alpha shrinks at this scale is
something to look at, not something to expect.
"""
import numpy as np

from scheme import BlockConfig, Hyper, ModelConfig, build_model, generate_synthetic, train
from scheme.training import evaluate

train_set = generate_synthetic(0, 200, 4)
eval_set = generate_synthetic(1, 50, 4, split="eval")

model = build_model(ModelConfig(), BlockConfig())  # widths 32 -> 64, 44-e8 mixers
print("parameters:", model.num_params())

log = train(model, train_set, Hyper(epochs=15), eval_dataset=eval_set)
for e in range(log.epochs):
    alphas = " ".join(f"{v:.3f}" for v in log.one_minus_alpha[e])
    print(f"epoch {e + 1:2d} loss {log.loss[e]:.3f} train {log.train_acc[e]:.3f} eval {log.eval_acc[e]:.3f}  1-alpha {alphas}")

# eval_acc above is measured with the branch removed; compare with it kept
print("eval accuracy, train mode:", evaluate(model, eval_set, mode="train"))
print("eval accuracy, inference mode:", evaluate(model, eval_set, mode="inference"))
print("mean 1-alpha:", np.mean(log.initial_one_minus_alpha), "->", np.mean(log.one_minus_alpha[-1]))
