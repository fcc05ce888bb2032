"""Run configuration: INI-style sections with strict keys.

Every key has a typed default; unknown sections or keys are rejected with
the offending file line. Overrides use ``section.key=value``. The resolved
configuration is written back in a canonical order so runs are comparable
byte for byte.
"""

import configparser
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .graph import build_hand_skeleton, load_graph
from .model import ModelConfig
from .objective import PCK_DELTAS, LossConfig
from .synth import CorruptionConfig, SynthConfig
from .train import TrainConfig


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip and not callable(f.default_factory)}


DEFAULTS = {
    "synth": _dataclass_defaults(SynthConfig),
    "corruption": _dataclass_defaults(CorruptionConfig),
    "model": {"graph": "", "seed": 0, **_dataclass_defaults(ModelConfig, skip=("map_shape",))},
    "train": {**_dataclass_defaults(TrainConfig, skip=("loss", "deltas")), "val_split": "val"},
    "loss": {"alpha_schedule": ((0, 1.0), (12, 0.1))},
    "eval": {"split": "test", "deltas": PCK_DELTAS, "batch_size": 64},
    "gradcheck": {"nodes": 4, "n_heads": 2, "n_layers": 2, "map_size": 8, "kernel_size": 3,
                  "init_noise": 0.2, "epsilon": 1e-6, "tolerance": 1e-6, "seed": 0, "max_params": 5000},
}

PRESETS = {
    "desk": {},
    "full": {
        "synth": {"height": 64, "width": 64, "gt_sigma": 3.0},
        "model": {"n_heads": 10, "n_layers": 5, "kernel_size": 45},
        "train": {"lr": 7.5e-4, "epochs": 100, "milestones": (60, 80)},
        "loss": {"alpha_schedule": ((0, 1.0), (40, 0.1))},
    },
}


def _parse_value(default, text, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], tuple):
                pairs = [t.split(":") for t in items]
                return tuple((int(e), float(a)) for e, a in pairs)
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(int(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{e}:{a!r}" for e, a in value)
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _line_of(lines, section, key):
    current = None
    for i, raw in enumerate(lines, 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and line.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return i
    return 0


def default_config(preset="desk"):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    for s, v in PRESETS[preset].items():
        cfg[s].update(v)
    return cfg


def parse_config_text(text, source="<config>", preset="desk"):
    cfg = default_config(preset)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = text.splitlines()
    for section in parser.sections():
        if section not in cfg:
            line = next((i for i, l in enumerate(lines, 1) if l.strip() == f"[{section}]"), 0)
            raise ConfigError(f"{source}:{line}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = f"{source}:{_line_of(lines, section, key)}"
            if key not in cfg[section]:
                raise ConfigError(f"{where}: unknown key '{key}' in section [{section}]")
            cfg[section][key] = _parse_value(DEFAULTS[section][key], raw, where)
    return cfg


def load_config(path=None, overrides=(), preset="desk"):
    if path is None:
        cfg = default_config(preset)
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config_text(path.read_text(encoding="utf-8"), source=str(path), preset=preset)
    for item in overrides:
        apply_override(cfg, item)
    validate(cfg)
    return cfg


def apply_override(cfg, item):
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, value = item.split("=", 1)
    section, key = dotted.strip().split(".", 1)
    if section not in cfg:
        raise ConfigError(f"override {item!r}: unknown section [{section}]")
    if key not in cfg[section]:
        raise ConfigError(f"override {item!r}: unknown key '{key}' in section [{section}]")
    cfg[section][key] = _parse_value(DEFAULTS[section][key], value, f"override {item!r}")


def validate(cfg):
    """Instantiate every typed config once so range errors surface early."""
    synth_config(cfg)
    corruption_config(cfg)
    model_config(cfg, (cfg["synth"]["height"], cfg["synth"]["width"]))
    train_config(cfg)


def format_config(cfg):
    out = []
    for section in DEFAULTS:
        out.append(f"[{section}]")
        out += [f"{k} = {_format_value(cfg[section][k])}" for k in DEFAULTS[section]]
        out.append("")
    return "\n".join(out)


def synth_config(cfg):
    return SynthConfig(**cfg["synth"])


def corruption_config(cfg):
    return CorruptionConfig(**cfg["corruption"])


def model_config(cfg, map_shape):
    kw = {k: v for k, v in cfg["model"].items() if k not in ("graph", "seed")}
    return ModelConfig(map_shape=tuple(map_shape), **kw)


def model_graph(cfg):
    path = cfg["model"]["graph"]
    return load_graph(path) if path else build_hand_skeleton()


def train_config(cfg):
    kw = {k: v for k, v in cfg["train"].items() if k != "val_split"}
    return TrainConfig(loss=LossConfig(cfg["loss"]["alpha_schedule"]), deltas=cfg["eval"]["deltas"], **kw)
