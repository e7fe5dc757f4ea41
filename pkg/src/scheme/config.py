"""Line-oriented ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key is namespaced
(``mixer.g1``, ``train.lr``, ...), unknown keys are rejected, and values are
type-checked.  :func:`emit_config` writes every key, so its output parses
back to an equal :class:`RunConfig`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .backbone import BlockConfig, ModelConfig
from .errors import ParseError
from .mixers import MixerConfig, as_fraction, format_fraction
from .training import Hyper

COMMANDS = ("train", "gradcheck", "plan", "probe", "bench", "eval")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    structure: str = "separable"
    classes: int = 4
    n_per_class: int = 200
    eval_n_per_class: int = 50
    noise: float = 0.05
    seed: int = 0
    images: str = ""
    labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""


@dataclass(frozen=True)
class PathsConfig:
    out: str = "out"
    checkpoint: str = ""


@dataclass(frozen=True)
class GradcheckConfig:
    d: int = 8
    N: int = 4
    eps: float = 1e-6
    tol: float = 1e-5


@dataclass(frozen=True)
class PlanConfig:
    d: int = 64
    budget: int = 0
    dense_E: Fraction = Fraction(2)
    expansions: tuple[Fraction, ...] = (Fraction(1), Fraction(2), Fraction(4), Fraction(8), Fraction(16))
    groups: tuple[int, ...] = (1, 2, 4, 8)
    rel_tol: float = 0.01


@dataclass(frozen=True)
class ProbeConfig:
    layers: tuple[int, ...] = (0, 1, 2, 3)
    train_frac: float = 0.5
    epochs: int = 200
    lr: float = 1e-2


@dataclass(frozen=True)
class BenchConfig:
    d: int = 256
    N: int = 196
    E: Fraction = Fraction(2)
    g: int = 4
    reps: int = 20
    warmup: int = 3
    dtype: str = "float64"


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    hyper: Hyper = field(default_factory=Hyper)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed (model init, data, training shuffle)."""
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
            hyper=dataclasses.replace(self.hyper, seed=seed),
        )


# value codecs -------------------------------------------------------------


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _opt_float(s: str):
    return None if s == "" else float(s)


def _str(s: str) -> str:
    return s


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",")) if s else ()


def _frac_list(s: str) -> tuple[Fraction, ...]:
    return tuple(as_fraction(p) for p in s.split(",")) if s else ()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, Fraction):
        return format_fraction(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (section, field, parser); "mixer" lives inside block.mixer_cfg and
# "model.channels/height/width" inside model.in_shape.
_KEYS: dict[str, tuple[str, str, object]] = {}


def _register(section: str, cls, parsers: dict[str, object], prefix: str | None = None) -> None:
    prefix = prefix or section
    for f in dataclasses.fields(cls):
        if f.name in parsers:
            _KEYS[f"{prefix}.{f.name}"] = (section, f.name, parsers[f.name])


_register("data", DataConfig, {
    "source": _str, "structure": _str, "classes": _int, "n_per_class": _int, "eval_n_per_class": _int,
    "noise": _float, "seed": _int, "images": _str, "labels": _str, "eval_images": _str, "eval_labels": _str,
})
_register("paths", PathsConfig, {"out": _str, "checkpoint": _str})
_KEYS["model.channels"] = ("model", "channels", _int)
_KEYS["model.height"] = ("model", "height", _int)
_KEYS["model.width"] = ("model", "width", _int)
_register("model", ModelConfig, {
    "patch_size": _int, "widths": _int_list, "depths": _int_list, "num_classes": _int, "seed": _int, "downsample": _int,
})
_register("block", BlockConfig, {"mixer": _str, "pool_size": _int, "layerscale_init": _float})
_register("mixer", MixerConfig, {
    "E": as_fraction, "g1": _int, "g2": _int, "tau": _float, "activation": _str, "alpha_init": _float,
})
_register("hyper", Hyper, {
    "epochs": _int, "batch_size": _int, "lr": _float, "weight_decay": _float, "schedule": _str,
    "warmup_epochs": _int, "label_smoothing": _float, "seed": _int, "stop_at_train_acc": _opt_float,
}, prefix="train")
_register("gradcheck", GradcheckConfig, {"d": _int, "N": _int, "eps": _float, "tol": _float})
_register("plan", PlanConfig, {
    "d": _int, "budget": _int, "dense_E": as_fraction, "expansions": _frac_list, "groups": _int_list, "rel_tol": _float,
})
_register("probe", ProbeConfig, {"layers": _int_list, "train_frac": _float, "epochs": _int, "lr": _float})
_register("bench", BenchConfig, {
    "d": _int, "N": _int, "E": as_fraction, "g": _int, "reps": _int, "warmup": _int, "dtype": _str,
})

KNOWN_KEYS = tuple(_KEYS)


def _flatten(rc: RunConfig) -> dict[str, object]:
    out = {}
    for key, (section, name, _) in _KEYS.items():
        if section == "model" and name in ("channels", "height", "width"):
            out[key] = rc.model.in_shape[("channels", "height", "width").index(name)]
        elif section == "mixer":
            out[key] = getattr(rc.block.mixer_cfg, name)
        else:
            out[key] = getattr(getattr(rc, section), name)
    return out


def _build(values: dict[str, object], command: str) -> RunConfig:
    sections: dict[str, dict] = {}
    for key, value in values.items():
        section, name, _ = _KEYS[key]
        sections.setdefault(section, {})[name] = value
    m = sections.pop("model")
    in_shape = (m.pop("channels"), m.pop("height"), m.pop("width"))
    model = ModelConfig(in_shape=in_shape, **m)
    mixer_cfg = MixerConfig(d=0, **sections.pop("mixer"))
    block = BlockConfig(mixer_cfg=mixer_cfg, **sections.pop("block"))
    return RunConfig(
        command=command,
        model=model,
        block=block,
        data=DataConfig(**sections["data"]),
        paths=PathsConfig(**sections["paths"]),
        hyper=Hyper(**sections["hyper"]),
        gradcheck=GradcheckConfig(**sections["gradcheck"]),
        plan=PlanConfig(**sections["plan"]),
        probe=ProbeConfig(**sections["probe"]),
        bench=BenchConfig(**sections["bench"]),
    )


def parse_config_text(text: str, command: str = "train") -> RunConfig:
    values = _flatten(RunConfig())
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        try:
            values[key] = _KEYS[key][2](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"bad value for {key}: {value!r} ({exc})", line=lineno) from None
    if command not in COMMANDS:
        raise ParseError(f"unknown command {command!r}")
    if values["data.source"] not in ("synthetic", "idx"):
        raise ParseError(f"data.source must be synthetic or idx, got {values['data.source']!r}")
    if values["data.source"] == "idx":
        for key in ("data.images", "data.labels"):
            if not values[key]:
                raise ParseError(f"missing required key {key} for data.source=idx", line=len(lines) + 1)
    return _build(values, command)


def parse_config(path, command: str = "train") -> RunConfig:
    return parse_config_text(Path(path).read_text(), command)


def emit_config(rc: RunConfig) -> str:
    return "".join(f"{key}={_fmt(value)}\n" for key, value in _flatten(rc).items())
