"""Experiment configuration: a strict key-value text format.

One `key = value` per line, full-line # comments, no unknown keys. Every
run echoes its fully-defaulted effective configuration back to the run
directory, and that echo re-parses to the identical configuration.
"""

from dataclasses import dataclass, fields

from .samplers import KINDS


class ConfigError(ValueError):
    """Invalid configuration; message names the offending key/line."""


@dataclass
class ExperimentConfig:
    kind: str = None
    seed: int = None
    out_dir: str = None
    epochs: int = 10
    batch_size: int = 512
    schedule_kind: str = None  # defaulted per sampler kind
    schedule_a: float = 1e-5
    schedule_b: float = 100.0
    schedule_gamma: float = 0.55
    prior_precision: float = 1e-4
    rmsprop_alpha: float = 0.99
    rmsprop_epsilon: float = 1e-5
    kfac_damping: float = 1e-3
    kfac_decay: float = 0.95
    kfac_refresh_every: int = 20
    kfac_noise_mode: str = "literal"
    snapshot_stride: int = 50
    snapshot_max: int = 20
    burnin_fraction: float = 0.5
    diag_stride: int = 10
    diag_coords: int = 512
    data_source: str = "synthetic"
    data_train_images: str = None
    data_train_labels: str = None
    data_test_images: str = None
    data_test_labels: str = None
    data_ood_images: str = None
    data_ood_labels: str = None
    data_truncate: int = None
    synthetic_n: int = 2048
    synthetic_test_n: int = 512
    synthetic_classes: int = 4
    synthetic_side: int = 12
    synthetic_ood: bool = False
    arch_conv_channels: tuple = (32, 64)
    arch_dense_units: int = 1024
    arch_filter_size: int = 5
    arch_pool: int = 2
    attack_enabled: bool = False
    attack_epsilon: float = 0.25


# key -> (attribute, type tag); type tags: int, float, str, bool, int_list,
# or a tuple of allowed strings.
SCHEMA = {
    "kind": ("kind", KINDS),
    "seed": ("seed", "int"),
    "out_dir": ("out_dir", "str"),
    "epochs": ("epochs", "int"),
    "batch_size": ("batch_size", "int"),
    "schedule.kind": ("schedule_kind", ("poly", "constant")),
    "schedule.a": ("schedule_a", "float"),
    "schedule.b": ("schedule_b", "float"),
    "schedule.gamma": ("schedule_gamma", "float"),
    "prior_precision": ("prior_precision", "float"),
    "rmsprop.alpha": ("rmsprop_alpha", "float"),
    "rmsprop.epsilon": ("rmsprop_epsilon", "float"),
    "kfac.damping": ("kfac_damping", "float"),
    "kfac.decay": ("kfac_decay", "float"),
    "kfac.refresh_every": ("kfac_refresh_every", "int"),
    "kfac.noise_mode": ("kfac_noise_mode", ("literal", "inverse-sqrt")),
    "snapshots.stride": ("snapshot_stride", "int"),
    "snapshots.max": ("snapshot_max", "int"),
    "burnin_fraction": ("burnin_fraction", "float"),
    "diagnostics.stride": ("diag_stride", "int"),
    "diagnostics.coords": ("diag_coords", "int"),
    "data.source": ("data_source", ("idx", "synthetic")),
    "data.train_images": ("data_train_images", "str"),
    "data.train_labels": ("data_train_labels", "str"),
    "data.test_images": ("data_test_images", "str"),
    "data.test_labels": ("data_test_labels", "str"),
    "data.ood_images": ("data_ood_images", "str"),
    "data.ood_labels": ("data_ood_labels", "str"),
    "data.truncate": ("data_truncate", "int"),
    "data.synthetic.n": ("synthetic_n", "int"),
    "data.synthetic.test_n": ("synthetic_test_n", "int"),
    "data.synthetic.classes": ("synthetic_classes", "int"),
    "data.synthetic.side": ("synthetic_side", "int"),
    "data.synthetic.ood": ("synthetic_ood", "bool"),
    "arch.conv_channels": ("arch_conv_channels", "int_list"),
    "arch.dense_units": ("arch_dense_units", "int"),
    "arch.filter_size": ("arch_filter_size", "int"),
    "arch.pool": ("arch_pool", "int"),
    "attack.enabled": ("attack_enabled", "bool"),
    "attack.epsilon": ("attack_epsilon", "float"),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in SCHEMA.items()}


def _parse_value(key, kind, raw, line_no):
    def bad(why):
        return ConfigError(f"line {line_no}: key '{key}': {why}")

    raw = raw.strip()
    if isinstance(kind, tuple):
        if raw not in kind:
            raise bad(f"expected one of {', '.join(kind)}, got '{raw}'")
        return raw
    if kind == "str":
        return raw
    if kind == "bool":
        if raw not in ("true", "false"):
            raise bad(f"expected true/false, got '{raw}'")
        return raw == "true"
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise bad(f"expected an integer, got '{raw}'") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise bad(f"expected a number, got '{raw}'") from None
    if kind == "int_list":
        try:
            return tuple(int(part) for part in raw.split(","))
        except ValueError:
            raise bad(f"expected comma-separated integers, got '{raw}'") from None
    raise AssertionError(kind)


def _validate(cfg):
    def require(ok, key, why):
        if not ok:
            raise ConfigError(f"key '{key}': {why}")

    require(cfg.epochs >= 1, "epochs", "must be >= 1")
    require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    require(cfg.schedule_a > 0, "schedule.a", "must be positive")
    if cfg.schedule_kind == "poly":
        require(cfg.schedule_b > 0, "schedule.b", "must be positive")
        require(0.5 < cfg.schedule_gamma <= 1.0, "schedule.gamma", "must lie in (0.5, 1]")
    require(cfg.prior_precision >= 0, "prior_precision", "must be non-negative")
    require(0 <= cfg.rmsprop_alpha < 1, "rmsprop.alpha", "must lie in [0, 1)")
    require(cfg.rmsprop_epsilon > 0, "rmsprop.epsilon", "must be positive")
    require(cfg.kfac_damping > 0, "kfac.damping", "must be positive")
    require(0 < cfg.kfac_decay < 1, "kfac.decay", "must lie in (0, 1)")
    require(cfg.kfac_refresh_every >= 1, "kfac.refresh_every", "must be >= 1")
    require(cfg.snapshot_stride >= 1, "snapshots.stride", "must be >= 1")
    require(cfg.snapshot_max >= 1, "snapshots.max", "must be >= 1")
    require(0 <= cfg.burnin_fraction < 1, "burnin_fraction", "must lie in [0, 1)")
    require(cfg.diag_stride >= 1, "diagnostics.stride", "must be >= 1")
    require(cfg.diag_coords >= 1, "diagnostics.coords", "must be >= 1")
    require(cfg.attack_epsilon >= 0, "attack.epsilon", "must be non-negative")
    require(cfg.synthetic_n >= 1 and cfg.synthetic_test_n >= 1, "data.synthetic.n", "must be >= 1")
    require(cfg.synthetic_classes >= 2, "data.synthetic.classes", "must be >= 2")
    require(len(cfg.arch_conv_channels) >= 1, "arch.conv_channels", "need at least one conv layer")
    require(cfg.data_truncate is None or cfg.data_truncate >= 1, "data.truncate", "must be >= 1")
    if cfg.data_source == "idx":
        for key in ("data.train_images", "data.train_labels",
                    "data.test_images", "data.test_labels"):
            attr = SCHEMA[key][0]
            require(getattr(cfg, attr) is not None, key, "required when data.source = idx")


def parse_config(text):
    """Parse and validate; returns (config, names of defaulted keys)."""
    cfg = ExperimentConfig()
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {line_no}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key '{key}'")
        seen.add(key)
        attr, kind = SCHEMA[key]
        setattr(cfg, attr, _parse_value(key, kind, raw, line_no))
    if "kind" not in seen:
        raise ConfigError("missing required key 'kind'")
    if "seed" not in seen:
        raise ConfigError("missing required key 'seed'")
    if cfg.schedule_kind is None:
        cfg.schedule_kind = "constant" if cfg.kind == "FSGD" else "poly"
        defaulted_schedule_kind = True
    else:
        defaulted_schedule_kind = False
    _validate(cfg)
    defaulted = [key for key in SCHEMA
                 if key not in seen and getattr(cfg, SCHEMA[key][0]) is not None]
    if defaulted_schedule_kind and "schedule.kind" not in defaulted:
        defaulted.append("schedule.kind")
    return cfg, sorted(defaulted)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg):
    """Effective configuration echo; re-parses to an identical config."""
    lines = []
    for key, (attr, _) in SCHEMA.items():
        value = getattr(cfg, attr)
        if value is None:
            continue
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_equal(a, b):
    return all(getattr(a, f.name) == getattr(b, f.name) for f in fields(ExperimentConfig))
