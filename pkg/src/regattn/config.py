"""Run configuration: TOML file + ``key=value`` overrides, validated by JSON schema.

The schema ships as ``config_schema.json`` next to this module. The config
hash (SHA-256 of the canonical JSON, ``output_dir`` excluded) is embedded in
every checkpoint, manifest and report.
"""

import copy
import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import jsonschema
import tomli

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"x_dir": None, "y_dir": None, "image_size": 256, "batch_size": 1},
    "model": {
        "ngf": 64,
        "n_res_blocks": 9,
        "dilation": 2,
        "ndf": 64,
        "vgg_width": 64,
        "pretrained": True,
        "weights_dir": None,
    },
    "loss": {
        "reg_layers": ["relu1_2", "relu2_2", "relu3_3"],
        "reg_weights": [1.0 / 32, 1.0 / 16, 1.0 / 8],
    },
    "optim": {
        "base_lr": 2e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "eps": 1e-8,
        "joint_lr_scale": 0.1,
        "decay_start_fraction": 0.5,
    },
    "schedule": {
        "g0_iters": 10000,
        "attn_iters": 5000,
        "joint_iters": 5000,
        "reset_d_per_stage": False,
        "sample_every": 1000,
        "buffer_size": 50,
    },
    "lambda": {
        "step_size": 0.1,
        "interval": 100,
        "threshold": 1.2 * math.log(2.0),
        "ema_decay": 0.99,
        "warmup": 0,
    },
}

_UNHASHED = ("output_dir",)


def schema():
    text = resources.files(__package__).joinpath("config_schema.json").read_text()
    return json.loads(text)


def _merge(base, extra, path=""):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        try:
            return tomli.loads(f"v = {text}")["v"]
        except tomli.TOMLDecodeError:
            return text


def apply_override(cfg, item):
    """Apply one ``dotted.key=value`` override in place (value parsed as JSON/TOML)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a config section")
        node = node[p]
    node[parts[-1]] = _parse_value(text.strip())


def validate(cfg):
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            field = ".".join(str(p) for p in e.absolute_path) or "<root>"
            if e.validator == "required":
                missing = e.message.split("'")[1] if "'" in e.message else e.message
                field = f"{field}.{missing}" if field != "<root>" else missing
            lines.append(f"{field}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    sched = cfg["schedule"]
    if len(cfg["loss"]["reg_weights"]) != len(cfg["loss"]["reg_layers"]):
        raise ConfigError("loss.reg_weights: length must equal loss.reg_layers")
    if cfg["model"]["pretrained"] and cfg["model"]["vgg_width"] != 64:
        raise ConfigError("model.vgg_width: pretrained VGG-19 requires 64")
    if min(sched["g0_iters"], sched["attn_iters"], sched["joint_iters"]) < 1:
        raise ConfigError("schedule: every stage needs at least one iteration")
    return cfg


def load_config(path=None, overrides=(), seed=None, validate_data=True, base=None):
    """Build a validated config from ``base`` (default: DEFAULTS), a TOML file and overrides."""
    cfg = copy.deepcopy(DEFAULTS if base is None else base)
    if path is not None:
        try:
            with open(path, "rb") as f:
                _merge(cfg, tomli.load(f))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config {path}: {exc}") from exc
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    if not validate_data:
        return validate_partial(cfg)
    return validate(cfg)


def validate_partial(cfg):
    # data paths are not needed when a config is only used to rebuild models
    tmp = copy.deepcopy(cfg)
    tmp["data"]["x_dir"] = tmp["data"]["x_dir"] or "."
    tmp["data"]["y_dir"] = tmp["data"]["y_dir"] or "."
    validate(tmp)
    return cfg


def config_hash(cfg):
    payload = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def make_config(**sections):
    """Defaults merged with keyword sections, e.g. ``make_config(model={"ngf": 8})``.

    Data paths are not required; use :func:`validate` before training.
    """
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, {k: v for k, v in sections.items()})
    return validate_partial(cfg)


def toy_config(x_dir=None, y_dir=None, output_dir="runs/toy", seed=0, **sections):
    """CPU-sized configuration for the synthetic 64x64 benchmark."""
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, {
        "seed": seed,
        "output_dir": str(output_dir),
        "data": {"x_dir": x_dir and str(x_dir), "y_dir": y_dir and str(y_dir),
                 "image_size": 64, "batch_size": 4},
        "model": {"ngf": 16, "n_res_blocks": 4, "ndf": 16, "vgg_width": 16, "pretrained": False},
        "schedule": {"g0_iters": 600, "attn_iters": 800, "joint_iters": 200, "sample_every": 0},
    })
    _merge(cfg, sections)
    return validate_partial(cfg)


def dump_toml(cfg, path):
    """Write ``cfg`` as TOML (flat sections only, which is all the schema has)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(i) for i in v) + "]"
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items() if not isinstance(v, dict) and v is not None]
    for section, body in cfg.items():
        if isinstance(body, dict):
            lines.append(f"\n[{section}]")
            lines += [f"{k} = {fmt(v)}" for k, v in body.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")
