"""Channel mixers: dense MLP, block-diagonal MLP, channel covariance attention,
and their learned fusion.

All forward functions take ``x`` laid out as ``(d, N)`` or ``(B, d, N)``:
channels on the second-to-last axis, tokens on the last.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

ACTIVATIONS = {"gelu": T.gelu, "identity": T.identity}
MIXER_KINDS = ("dense", "bdmlp", "scheme", "scheme_shuffle")
MODES = ("train", "inference")


def as_fraction(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**6)
    return Fraction(value)


def format_fraction(value: Fraction) -> str:
    value = Fraction(value)
    return str(value.numerator) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


@dataclass(frozen=True)
class MixerConfig:
    """Hyperparameters of one channel mixer.

    ``E`` is a rational expansion ratio; the hidden width is ``E * d``.
    Validation is deferred to :meth:`validate` so a configuration can be
    assembled before the channel count is final.
    """

    d: int
    E: Fraction = Fraction(4)
    g1: int = 1
    g2: int = 1
    tau: float = 1.0
    activation: str = "gelu"
    alpha_init: float = 0.0
    mode: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "E", as_fraction(self.E))

    @property
    def hidden(self) -> int:
        return int(self.E * self.d)

    @property
    def name(self) -> str:
        """Short ``{g1}{g2}-e{E}`` tag, e.g. ``44-e8``."""
        return f"{self.g1}{self.g2}-e{format_fraction(self.E)}"

    def validate(self) -> "MixerConfig":
        if self.d < 1 or self.g1 < 1 or self.g2 < 1:
            raise ConfigError(f"d, g1, g2 must be >= 1 (got d={self.d}, g1={self.g1}, g2={self.g2})")
        width = self.E * self.d
        if width.denominator != 1 or width < 1:
            raise ConfigError(f"E*d must be a positive integer, got {width}")
        width = int(width)
        for label, g in (("g1", self.g1), ("g2", self.g2)):
            if self.d % g or width % g:
                raise ConfigError(f"{label}={g} must divide d={self.d} and E*d={width}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        return self


@dataclass
class MixerParams:
    """Learnable mixer state.

    Block weights are stacked: ``W1`` is ``(g1, E*d/g1, d/g1)`` and ``W2`` is
    ``(g2, d/g2, E*d/g2)``.  ``alpha_raw`` is ``None`` for mixers without a
    fusion branch.
    """

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    alpha_raw: Tensor | None = None

    @property
    def W1_blocks(self) -> list[np.ndarray]:
        return list(self.W1.data)

    @property
    def W2_blocks(self) -> list[np.ndarray]:
        return list(self.W2.data)

    @property
    def alpha(self) -> float:
        return float(expit(self.alpha_raw.data)) if self.alpha_raw is not None else 1.0

    def tensors(self) -> dict[str, Tensor]:
        out = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        if self.alpha_raw is not None:
            out["alpha_raw"] = self.alpha_raw
        return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples with ``std``, redrawn until all lie within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_params(cfg: MixerConfig, rng: np.random.Generator, std: float = 0.02, with_alpha: bool = True) -> MixerParams:
    cfg.validate()
    d, h = cfg.d, cfg.hidden
    w1 = trunc_normal(rng, (cfg.g1, h // cfg.g1, d // cfg.g1), std)
    w2 = trunc_normal(rng, (cfg.g2, d // cfg.g2, h // cfg.g2), std)
    return MixerParams(
        W1=Tensor(w1, requires_grad=True),
        b1=Tensor(np.zeros(h), requires_grad=True),
        W2=Tensor(w2, requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
        alpha_raw=Tensor(np.array(float(cfg.alpha_init)), requires_grad=True) if with_alpha else None,
    )


def _column(b: Tensor) -> Tensor:
    return T.reshape(b, (b.shape[0], 1))


def _check_input(x: Tensor, d: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-2] != d:
        raise DimensionError(f"mixer input must be (..., {d}, N), got {x.shape}")


def dense_mlp_forward(x, params: MixerParams, activation: str = "gelu") -> Tensor:
    """``W2 act(W1 x + b1) + b2`` with unstructured weight matrices."""
    x = T.as_tensor(x)
    if params.W1.shape[0] != 1 or params.W2.shape[0] != 1:
        raise ConfigError("dense mixer requires g1 = g2 = 1")
    w1 = T.reshape(params.W1, params.W1.shape[1:])
    w2 = T.reshape(params.W2, params.W2.shape[1:])
    _check_input(x, w1.shape[1])
    if w2.shape[1] != w1.shape[0] or params.b1.shape[0] != w1.shape[0] or params.b2.shape[0] != w2.shape[0]:
        raise DimensionError("inconsistent dense mixer parameter shapes")
    z = ACTIVATIONS[activation](T.matmul(w1, x) + _column(params.b1))
    return T.matmul(w2, z) + _column(params.b2)


def shuffle_permutation(rows: int, g: int) -> np.ndarray:
    if g < 1 or rows % g:
        raise ConfigError(f"shuffle groups g={g} must divide row count {rows}")
    return np.arange(rows).reshape(g, rows // g).T.reshape(-1)


def channel_shuffle(z, g: int) -> Tensor:
    """Interleave the ``g`` contiguous row groups of ``z`` (ShuffleNet order)."""
    z = T.as_tensor(z)
    return T.take(z, shuffle_permutation(z.shape[-2], g), axis=-2)


def bd_mlp_forward(x, cfg: MixerConfig, params: MixerParams, shuffle: bool = False) -> Tensor:
    """Block-diagonal MLP with ``g1`` groups in the expansion and ``g2`` in the reduction.

    Groups are contiguous row ranges.  The hidden activations are regrouped
    into ``g2`` contiguous slices for the second layer; with ``shuffle`` they
    are channel-shuffled (``g1`` groups) first.
    """
    cfg.validate()
    x = T.as_tensor(x)
    _check_input(x, cfg.d)
    z = ACTIVATIONS[cfg.activation](T.block_matmul(params.W1, x) + _column(params.b1))
    if shuffle:
        z = channel_shuffle(z, cfg.g1)
    return T.block_matmul(params.W2, z) + _column(params.b2)


def cca_forward(x, tau: float = 1.0) -> Tensor:
    """Channel covariance attention: ``softmax_rows(x x^T / tau) x``.

    No centering happens here; inputs are expected to come out of a
    normalization layer.
    """
    x = T.as_tensor(x)
    cov = T.matmul(x, T.transpose(x))
    return T.matmul(T.softmax_rows(cov, tau), x)


def scheme_forward(x, cfg: MixerConfig, params: MixerParams, shuffle: bool = False) -> Tensor:
    """``alpha * BD-MLP(x) + (1 - alpha) * CCA(x)`` in train mode; the BD-MLP alone in inference mode."""
    cfg.validate()
    if cfg.mode == "inference":
        return bd_mlp_forward(x, cfg, params, shuffle=shuffle)
    if params.alpha_raw is None:
        raise ConfigError("scheme mixer needs an alpha_raw parameter")
    x = T.as_tensor(x)
    return _fuse(x, bd_mlp_forward(x, cfg, params, shuffle=shuffle), cfg, params)


def _fuse(x: Tensor, y: Tensor, cfg: MixerConfig, params: MixerParams) -> Tensor:
    alpha = T.sigmoid(params.alpha_raw)
    return alpha * y + (1.0 - alpha) * cca_forward(x, cfg.tau)


class ChannelMixer:
    """A mixer layer: kind + configuration + parameters.

    ``last_y`` keeps the most recent BD-MLP branch output when
    ``capture`` is set, for the feature probes.
    """

    def __init__(self, kind: str, cfg: MixerConfig, params: MixerParams):
        if kind not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer kind {kind!r}; expected one of {MIXER_KINDS}")
        cfg.validate()
        if kind == "dense" and (cfg.g1 != 1 or cfg.g2 != 1):
            raise ConfigError("dense mixer requires g1 = g2 = 1")
        self.kind = kind
        self.cfg = cfg
        self.params = params
        self.capture = False
        self.last_y: np.ndarray | None = None

    @classmethod
    def create(cls, kind: str, cfg: MixerConfig, rng: np.random.Generator, std: float = 0.02) -> "ChannelMixer":
        has_alpha = kind in ("scheme", "scheme_shuffle")
        return cls(kind, cfg, init_params(cfg, rng, std, with_alpha=has_alpha))

    @property
    def has_cca(self) -> bool:
        return self.kind in ("scheme", "scheme_shuffle")

    @property
    def training_cca_active(self) -> bool:
        return self.has_cca and self.cfg.mode == "train"

    def set_mode(self, mode: str) -> None:
        self.cfg = dataclasses.replace(self.cfg, mode=mode).validate()

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if self.kind == "dense":
            y = dense_mlp_forward(x, self.params, self.cfg.activation)
        else:
            y = bd_mlp_forward(x, self.cfg, self.params, shuffle=self.kind == "scheme_shuffle")
        if self.capture:
            self.last_y = y.data
        if not self.training_cca_active:
            return y
        return _fuse(x, y, self.cfg, self.params)
