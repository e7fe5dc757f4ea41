"""Optimizer, training loop, fusion-weight logging and the gradient checker."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BlockConfig, Model
from .errors import ConfigError, DivergenceError, NumericError
from .mixers import ChannelMixer, MixerConfig
from .tensor import Tape, Tensor

METRICS_COLUMNS = ("epoch", "loss", "train_acc", "eval_acc", "sec")
ALPHA_COLUMNS = ("epoch", "layer_index", "one_minus_alpha")


@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters.

    ``stop_at_train_acc`` ends training after the first epoch whose train
    accuracy reaches it (``None`` runs every epoch).
    """

    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    schedule: str = "cosine"
    warmup_epochs: int = 1
    label_smoothing: float = 0.1
    seed: int = 0
    stop_at_train_acc: float | None = None

    def validate(self) -> "Hyper":
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs and batch size must be positive, warmup non-negative")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label smoothing must be in [0, 1)")
        return self


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies only to tensors with two or more axes; biases, norm
    weights, layer scales and fusion logits are left alone.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(hyper: Hyper, step: int, steps_per_epoch: int) -> float:
    """Linear warmup then cosine decay to zero (or constant), evaluated per step."""
    warm = hyper.warmup_epochs * steps_per_epoch
    if step < warm:
        return hyper.lr * (step + 1) / warm
    if hyper.schedule == "constant":
        return hyper.lr
    total = max(hyper.epochs * steps_per_epoch - warm, 1)
    return 0.5 * hyper.lr * (1.0 + math.cos(math.pi * (step - warm) / total))


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    eval_acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    layer_indices: list[int] = field(default_factory=list)
    one_minus_alpha: list[list[float]] = field(default_factory=list)
    initial_one_minus_alpha: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for e in range(self.epochs):
            w.writerow([e + 1, repr(self.loss[e]), repr(self.train_acc[e]), repr(self.eval_acc[e]), f"{self.seconds[e]:.6f}"])
        return buf.getvalue()

    def alpha_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ALPHA_COLUMNS)
        for e, row in enumerate(self.one_minus_alpha):
            for layer, value in zip(self.layer_indices, row):
                w.writerow([e + 1, layer, repr(value)])
        return buf.getvalue()

    def write(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "metrics.csv").write_text(self.metrics_csv())
        (outdir / "alpha.csv").write_text(self.alpha_csv())


def one_minus_alpha(model: Model) -> tuple[list[int], list[float]]:
    layers, values = [], []
    for i, m in enumerate(model.mixers):
        if m.params.alpha_raw is not None:
            layers.append(i)
            values.append(1.0 - m.params.alpha)
    return layers, values


def set_mode(model: Model, mode: str) -> Model:
    """Switch every mixer between ``train`` and ``inference``; parameters are untouched."""
    return model.set_mode(mode)


def predict(model: Model, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(model(samples[i : i + batch_size]).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Model, dataset, batch_size: int = 256, mode: str = "inference") -> float:
    previous = model.mode
    model.set_mode(mode)
    try:
        logits = predict(model, dataset.samples, batch_size)
    finally:
        model.set_mode(previous)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def train(model: Model, dataset, hyper: Hyper, eval_dataset=None, on_epoch: Callable | None = None) -> TrainLog:
    """Train in place with AdamW and label-smoothed cross-entropy.

    Evaluation accuracy (if ``eval_dataset`` is given) is measured in
    inference mode.  Raises :class:`DivergenceError` on a non-finite loss.
    """
    hyper.validate()
    n = len(dataset.labels)
    if n == 0:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(hyper.seed)
    params = list(model.params.values())
    opt = AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    layers, start = one_minus_alpha(model)
    log = TrainLog(layer_indices=layers, initial_one_minus_alpha=start, config=asdict(hyper))
    step = 0
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * hyper.batch_size : (b + 1) * hyper.batch_size]
            xb, yb = dataset.samples[idx], dataset.labels[idx]
            try:
                with Tape():
                    logits = model(xb)
                    loss = T.cross_entropy(logits, yb, hyper.label_smoothing)
                    opt.zero_grad()
                    T.backward(loss)
            except NumericError as exc:
                raise DivergenceError(f"non-finite value at epoch {epoch + 1}, step {b + 1}: {exc}") from exc
            opt.step(learning_rate(hyper, step, steps_per_epoch))
            step += 1
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        log.loss.append(total_loss / n)
        log.train_acc.append(correct / n)
        log.eval_acc.append(evaluate(model, eval_dataset) if eval_dataset is not None else float("nan"))
        log.one_minus_alpha.append(one_minus_alpha(model)[1])
        log.seconds.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch + 1, log)
        if hyper.stop_at_train_acc is not None and log.train_acc[-1] >= hyper.stop_at_train_acc:
            break
    return log


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("tensor", "rel_err", "passed"))
        for name, err in self.errors.items():
            w.writerow((name, repr(err), int(err <= self.tol)))
        return buf.getvalue()


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-6) -> dict[str, float]:
    """Relative error between backpropagated and central-difference gradients, per tensor."""
    for t in tensors.values():
        t.grad = None
    with Tape():
        loss = loss_fn()
        T.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return {k: T.relative_error(analytic[k], T.finite_diff_grad(loss_fn, t, eps)) for k, t in tensors.items()}


def gradcheck(
    blockcfg: BlockConfig,
    shape: tuple[int, int] = (8, 4),
    eps: float = 1e-6,
    tol: float = 1e-5,
    seed: int = 0,
    batch: int | None = None,
) -> GradcheckReport:
    """Check every mixer parameter and the input gradient for one mixer of ``blockcfg``'s kind.

    Parameters are drawn with a larger scale than training init so the
    nonlinear paths are exercised; the loss is a random projection of the
    mixer output.
    """
    d, n = shape
    rng = np.random.default_rng(seed)
    cfg: MixerConfig = blockcfg.for_width(d)
    mixer = ChannelMixer.create(blockcfg.mixer, cfg, rng, std=0.5)
    if mixer.params.alpha_raw is not None:
        mixer.params.alpha_raw.data[...] = rng.normal()
    for t in (mixer.params.b1, mixer.params.b2):
        t.data[...] = rng.normal(scale=0.5, size=t.shape)
    xshape = (d, n) if batch is None else (batch, d, n)
    x = Tensor(rng.normal(size=xshape), requires_grad=True)
    proj = Tensor(rng.normal(size=xshape))
    tensors = {"x": x, **mixer.params.tensors()}
    errors = check_gradients(lambda: T.sum(mixer(x) * proj), tensors, eps)
    return GradcheckReport(errors, tol)
