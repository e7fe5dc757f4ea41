"""A small MetaFormer-style image classifier hosting the channel mixers.

Layout::

    patch embed -> stages of [norm -> pool mixer -> scaled residual
                              -> norm -> channel mixer -> scaled residual]
    (2x2 patch merge between stages) -> norm -> mean over tokens -> linear head

Feature maps are kept as ``(B, d, N)`` token matrices, tokens in row-major
grid order.
"""
from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .mixers import ChannelMixer, MixerConfig, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class BlockConfig:
    """Per-block settings.  ``mixer_cfg.d`` is a placeholder; each stage substitutes its width."""

    mixer: str = "scheme"
    mixer_cfg: MixerConfig = field(default_factory=lambda: MixerConfig(d=0, E=8, g1=4, g2=4))
    pool_size: int = 3
    layerscale_init: float = 1e-5

    def for_width(self, d: int) -> MixerConfig:
        return dataclasses.replace(self.mixer_cfg, d=d)


@dataclass(frozen=True)
class ModelConfig:
    in_shape: tuple[int, int, int] = (1, 32, 32)
    patch_size: int = 4
    widths: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (2, 2)
    num_classes: int = 4
    seed: int = 0
    downsample: int = 2

    def grids(self) -> list[tuple[int, int]]:
        _, h, w = self.in_shape
        h, w = h // self.patch_size, w // self.patch_size
        out = [(h, w)]
        for _ in self.widths[1:]:
            h, w = h // self.downsample, w // self.downsample
            out.append((h, w))
        return out

    def validate(self, blockcfg: BlockConfig | None = None) -> "ModelConfig":
        c, h, w = self.in_shape
        if min(c, h, w, self.patch_size, self.num_classes) < 1:
            raise ConfigError("input shape, patch size and class count must be positive")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} must divide input {h}x{w}")
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ConfigError("widths and depths must be nonempty and of equal length")
        gh, gw = h // self.patch_size, w // self.patch_size
        for _ in self.widths[1:]:
            if gh % self.downsample or gw % self.downsample:
                raise ConfigError(f"downsample factor {self.downsample} must divide token grid {gh}x{gw}")
            gh, gw = gh // self.downsample, gw // self.downsample
        if blockcfg is not None:
            if blockcfg.pool_size < 1 or blockcfg.pool_size % 2 == 0:
                raise ConfigError(f"pool size must be odd, got {blockcfg.pool_size}")
            for d in self.widths:
                blockcfg.for_width(d).validate()
        return self


@functools.lru_cache(maxsize=64)
def _pool_matrix(h: int, w: int, k: int) -> np.ndarray:
    """``(N, N)`` matrix ``M`` with ``x @ M == avgpool_k(x) - x`` for zero-padded, stride-1 pooling."""
    n = h * w
    pool = np.zeros((n, n))
    r = k // 2
    for i in range(h):
        for j in range(w):
            dst = i * w + j
            for a in range(max(0, i - r), min(h, i + r + 1)):
                for b in range(max(0, j - r), min(w, j + r + 1)):
                    pool[dst, a * w + b] = 1.0 / (k * k)
    out = pool.T - np.eye(n)
    out.setflags(write=False)
    return out


def pool_token_mixer(x, grid: tuple[int, int], k: int = 3) -> Tensor:
    """Average pooling over the token grid minus the identity.

    Zero padding; the window average always divides by ``k*k``.
    """
    x = T.as_tensor(x)
    h, w = grid
    if x.shape[-1] != h * w:
        raise DimensionError(f"{x.shape[-1]} tokens do not form a {h}x{w} grid")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"pool size must be odd, got {k}")
    return T.matmul(x, Tensor(_pool_matrix(h, w, k)))


def _col(v: Tensor) -> Tensor:
    return T.reshape(v, (v.shape[0], 1))


def channel_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over channels with a per-channel affine map."""
    return T.layer_norm(x, axis=-2, eps=eps) * _col(weight) + _col(bias)


class Block:
    def __init__(self, prefix: str, d: int, grid: tuple[int, int], blockcfg: BlockConfig, mixer: ChannelMixer, params: dict):
        self.prefix = prefix
        self.d = d
        self.grid = grid
        self.pool_size = blockcfg.pool_size
        self.mixer = mixer
        self.p = params

    def __call__(self, x: Tensor) -> Tensor:
        p = self.p
        h = channel_norm(x, p["norm1.weight"], p["norm1.bias"])
        x = x + _col(p["scale1"]) * pool_token_mixer(h, self.grid, self.pool_size)
        h = channel_norm(x, p["norm2.weight"], p["norm2.bias"])
        return x + _col(p["scale2"]) * self.mixer(h)


def patchify(images, p: int) -> Tensor:
    """``(B, C, H, W)`` -> ``(B, C*p*p, (H/p)*(W/p))`` patch columns."""
    images = T.as_tensor(images)
    b, c, h, w = images.shape
    x = T.reshape(images, (b, c, h // p, p, w // p, p))
    x = T.permute(x, (0, 1, 3, 5, 2, 4))
    return T.reshape(x, (b, c * p * p, (h // p) * (w // p)))


def merge_tokens(x: Tensor, grid: tuple[int, int], f: int) -> Tensor:
    """Stack each ``f x f`` neighbourhood of tokens into one token with ``f*f`` times the channels."""
    b, d, _ = x.shape
    h, w = grid
    x = T.reshape(x, (b, d, h // f, f, w // f, f))
    x = T.permute(x, (0, 1, 3, 5, 2, 4))
    return T.reshape(x, (b, d * f * f, (h // f) * (w // f)))


class Model:
    """Classifier with named parameters (insertion order is the canonical order)."""

    def __init__(self, cfg: ModelConfig, blockcfg: BlockConfig):
        cfg.validate(blockcfg)
        self.cfg = cfg
        self.blockcfg = blockcfg
        self.params: dict[str, Tensor] = {}
        self.blocks: list[Block] = []
        self.stage_of_block: list[int] = []
        rng = np.random.default_rng(cfg.seed)
        c = cfg.in_shape[0]
        grids = cfg.grids()
        self._weight("embed.W", (cfg.widths[0], c * cfg.patch_size**2), rng)
        self._zeros("embed.b", cfg.widths[0])
        for s, (d, depth) in enumerate(zip(cfg.widths, cfg.depths)):
            if s > 0:
                self._weight(f"stages.{s}.down.W", (d, cfg.widths[s - 1] * cfg.downsample**2), rng)
                self._zeros(f"stages.{s}.down.b", d)
            for i in range(depth):
                prefix = f"stages.{s}.blocks.{i}"
                local = {}
                for tag in ("norm1", "norm2"):
                    local[f"{tag}.weight"] = self._full(f"{prefix}.{tag}.weight", d, 1.0)
                    local[f"{tag}.bias"] = self._zeros(f"{prefix}.{tag}.bias", d)
                local["scale1"] = self._full(f"{prefix}.scale1", d, blockcfg.layerscale_init)
                local["scale2"] = self._full(f"{prefix}.scale2", d, blockcfg.layerscale_init)
                mixer = ChannelMixer.create(blockcfg.mixer, blockcfg.for_width(d), rng)
                for name, t in mixer.params.tensors().items():
                    self._register(f"{prefix}.mixer.{name}", t)
                self.blocks.append(Block(prefix, d, grids[s], blockcfg, mixer, local))
                self.stage_of_block.append(s)
        self._full("norm.weight", cfg.widths[-1], 1.0)
        self._zeros("norm.bias", cfg.widths[-1])
        self._weight("head.W", (cfg.num_classes, cfg.widths[-1]), rng)
        self._zeros("head.b", cfg.num_classes)

    def _register(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def _weight(self, name, shape, rng):
        return self._register(name, Tensor(trunc_normal(rng, shape, 0.02)))

    def _zeros(self, name, n):
        return self._register(name, Tensor(np.zeros(n)))

    def _full(self, name, n, value):
        return self._register(name, Tensor(np.full(n, float(value))))

    @property
    def mixers(self) -> list[ChannelMixer]:
        return [b.mixer for b in self.blocks]

    @property
    def mode(self) -> str:
        return self.blocks[0].mixer.cfg.mode if self.blocks else "train"

    def set_mode(self, mode: str) -> "Model":
        for m in self.mixers:
            m.set_mode(mode)
        return self

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("state names do not match the model's parameters")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def features(self, batch) -> Tensor:
        """Token features after the last block and final norm, ``(B, d, N)``."""
        batch = T.as_tensor(batch)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(self.cfg.in_shape):
            raise DimensionError(f"batch must be (B, {', '.join(map(str, self.cfg.in_shape))}), got {batch.shape}")
        p = self.params
        grids = self.cfg.grids()
        x = T.matmul(p["embed.W"], patchify(batch, self.cfg.patch_size)) + _col(p["embed.b"])
        stage = 0
        for block, s in zip(self.blocks, self.stage_of_block):
            while s > stage:
                stage += 1
                merged = merge_tokens(x, grids[stage - 1], self.cfg.downsample)
                x = T.matmul(p[f"stages.{stage}.down.W"], merged) + _col(p[f"stages.{stage}.down.b"])
            x = block(x)
        return channel_norm(x, p["norm.weight"], p["norm.bias"])

    def __call__(self, batch) -> Tensor:
        pooled = T.mean(self.features(batch), axis=-1)
        return T.matmul(pooled, T.transpose(self.params["head.W"])) + self.params["head.b"]


def build_model(cfg: ModelConfig, blockcfg: BlockConfig) -> Model:
    return Model(cfg, blockcfg)


def forward_classify(model: Model, batch) -> Tensor:
    return model(batch)


# ---------------------------------------------------------------------------
# checkpoints: raw little-endian float64 payload plus a tab-separated manifest
# of (name, shape, byte offset).

MANIFEST_HEADER = "# scheme checkpoint v1: name\tshape\toffset"


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    lines = [MANIFEST_HEADER]
    offset = 0
    with open(path, "wb") as fh:
        for name, t in model.params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(raw)
            lines.append(f"{name}\t{','.join(map(str, t.shape))}\t{offset}")
            offset += len(raw)
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")
    return path


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    payload = path.read_bytes()
    out = {}
    for lineno, line in enumerate(Path(str(path) + ".manifest").read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        try:
            name, shape_txt, offset_txt = line.split("\t")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
            offset = int(offset_txt)
        except ValueError:
            raise FormatError(f"bad manifest line {lineno}: {line!r}") from None
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise FormatError(f"checkpoint truncated while reading {name}", offset=len(payload))
        out[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
    return out


def load_checkpoint(model: Model, path) -> Model:
    model.load_state(read_checkpoint(path))
    return model
