"""Run configuration files.

The format is flat ``key = value`` lines, ``#`` comments and ``[section]``
headers.  Keys before the first header belong to ``[train]``.  Example::

    mode = enhance
    loss_variant = ls

    [data]
    n_train = 2000

    [classifier]
    target_accuracy = 0.65

Every malformed input raises a subclass of :class:`ConfigError` that names
the offending key or line.
"""

import math
from dataclasses import dataclass, field

from pgn import train
from pgn.models import (
    ACCESS_POLICIES,
    WHITE_BOX,
    default_classifier_spec,
    default_discriminator_spec,
    default_generator_spec,
    validate_spec,
    SpecError,
)


class ConfigError(ValueError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class TypeMismatchError(ConfigError):
    pass


class MissingFieldError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    pass


def _none_or(kind):
    def parse(text):
        return None if text.lower() in ("none", "") else kind(text)

    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _finite(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


_bool.__name__ = "bool"
_ints.__name__ = "comma-separated ints"
_floats.__name__ = "comma-separated floats"
_finite.__name__ = "float"

# section -> key -> (parser, default)
SCHEMA = {
    "train": {
        "mode": (str, None),
        "loss_variant": (str, None),
        "gamma": (_none_or(_finite), None),
        "lambda": (_finite, 1.0),
        "lr": (_finite, 1e-4),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "access_policy": (str, WHITE_BOX),
        "discriminator_init": (_none_or(str), None),
    },
    "data": {
        "source": (str, "synthetic"),
        "format": (str, "idx_binary"),
        "normalization": (str, "vanilla_01"),
        "n_train": (int, 2000),
        "n_test": (int, 1000),
        "seed": (int, 0),
        "contrast": (_floats, (1.0, 1.0)),
    },
    "classifier": {
        "checkpoint": (_none_or(str), None),
        "widths": (_ints, (16, 32, 64, 64)),
        "lr": (_finite, 5e-4),
        "epochs": (int, 15),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "target_accuracy": (_none_or(_finite), None),
        "check_every": (_none_or(int), 21),
    },
    "generator": {
        "widths": (_ints, (16, 32, 64)),
        "zero_final": (_bool, True),
    },
    "discriminator": {
        "widths": (_ints, (24, 48, 96)),
        "train_trunk": (_bool, True),
    },
    "eval": {
        "fgsm_epsilon": (_finite, 0.03),
    },
}

ALIASES = {("train", "loss"): "loss_variant", ("train", "lam"): "lambda"}


@dataclass
class RunConfig:
    """Everything a command needs: training config, network specs and settings."""

    train: object  # TrainConfig, or None when no mode was given
    values: dict  # section -> key -> parsed value, defaults filled in
    specs: dict = field(default_factory=dict)

    def section(self, name):
        return self.values[name]


def _split_key(key, section):
    key = key.strip()
    if "." in key:
        section, key = key.split(".", 1)
    return section.strip(), ALIASES.get((section.strip(), key.strip()), key.strip())


def _coerce(section, key, text):
    if section not in SCHEMA:
        raise UnknownKeyError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise UnknownKeyError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        return parser(text.strip())
    except ValueError:
        raise TypeMismatchError(
            f"{section}.{key}: expected {parser.__name__}, got {text.strip()!r}"
        ) from None


def parse_text(text, origin="<config>"):
    """Parse config text into ``{section: {key: value}}`` (explicit keys only)."""
    out = {}
    section = "train"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigSyntaxError(f"{origin}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise UnknownKeyError(f"{origin}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        if not key.strip():
            raise ConfigSyntaxError(f"{origin}:{lineno}: empty key")
        sec, key = _split_key(key, section)
        try:
            out.setdefault(sec, {})[key] = _coerce(sec, key, value)
        except ConfigError as exc:
            raise type(exc)(f"{origin}:{lineno}: {exc}") from None
    return out


def parse_override(item):
    """``key=value`` or ``section.key=value`` from the command line."""
    if "=" not in item:
        raise ConfigSyntaxError(f"override {item!r} must look like key=value")
    key, value = item.split("=", 1)
    sec, key = _split_key(key, "train")
    return sec, key, _coerce(sec, key, value)


def build_run_config(explicit, require_mode=True):
    """Fill defaults, validate, and build the TrainConfig and network specs."""
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, keys in explicit.items():
        values[sec].update(keys)
    t = values["train"]
    if t["mode"] is None:
        if require_mode:
            raise MissingFieldError("missing required field 'mode' (enhance or adversarial)")
        cfg = None
    else:
        if t["access_policy"] not in ACCESS_POLICIES:
            raise ConfigValidationError(
                f"train.access_policy must be one of {ACCESS_POLICIES}, got {t['access_policy']!r}"
            )
        try:
            cfg = train.TrainConfig(
                mode=t["mode"],
                loss_variant=t["loss_variant"] or train.LEAST_SQUARES,
                gamma=t["gamma"],
                lam=t["lambda"],
                lr=t["lr"],
                epochs=t["epochs"],
                batch_size=t["batch_size"],
                seed=t["seed"],
                access_policy=t["access_policy"],
                discriminator_init=t["discriminator_init"],
            )
        except ValueError as exc:
            raise ConfigValidationError(f"train: {exc}") from None

    d, c = values["data"], values["classifier"]
    if len(d["contrast"]) != 2 or not 0 < d["contrast"][0] <= d["contrast"][1]:
        raise ConfigValidationError(f"data.contrast must be 'lo, hi' with 0 < lo <= hi, got {d['contrast']}")
    for sec, key in (("data", "n_train"), ("data", "n_test"), ("classifier", "epochs"), ("classifier", "batch_size")):
        if values[sec][key] < 1:
            raise ConfigValidationError(f"{sec}.{key} must be >= 1, got {values[sec][key]}")
    if not c["lr"] > 0:
        raise ConfigValidationError(f"classifier.lr must be > 0, got {c['lr']}")
    if c["target_accuracy"] is not None and not 0 < c["target_accuracy"] <= 1:
        raise ConfigValidationError(f"classifier.target_accuracy must lie in (0, 1], got {c['target_accuracy']}")

    for sec in ("classifier", "generator", "discriminator"):
        if not values[sec]["widths"]:
            raise ConfigValidationError(f"{sec}.widths must list at least one channel count")
    try:
        specs = {
            "classifier": default_classifier_spec(widths=c["widths"]),
            "generator": default_generator_spec(
                widths=values["generator"]["widths"], zero_final=values["generator"]["zero_final"]
            ),
            "discriminator": default_discriminator_spec(widths=values["discriminator"]["widths"]),
        }
        for spec in specs.values():
            validate_spec(spec)
    except (SpecError, IndexError) as exc:
        raise ConfigValidationError(f"network widths: {exc}") from None
    return RunConfig(cfg, values, specs)


def parse_config(path=None, overrides=(), require_mode=True):
    """Read ``path`` (optional), apply ``key=value`` overrides, validate.

    Returns a :class:`RunConfig`; ``.train`` is the TrainConfig with defaults
    for learning rate, epochs, lambda and the per-mode gamma filled in.
    """
    explicit = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        explicit = parse_text(text, origin=str(path))
    for item in overrides:
        sec, key, value = parse_override(item)
        explicit.setdefault(sec, {})[key] = value
    return build_run_config(explicit, require_mode=require_mode)


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(run):
    """Config text that parses back to the same resolved values."""
    values = {sec: dict(keys) for sec, keys in run.values.items()}
    if run.train is not None:
        t = values["train"]
        t["loss_variant"] = run.train.loss_variant
        t["gamma"] = run.train.gamma
        t["discriminator_init"] = run.train.discriminator_init
    lines = []
    for sec, keys in values.items():
        lines.append(f"[{sec}]")
        lines += [f"{key} = {_format(value)}" for key, value in keys.items()]
        lines.append("")
    return "\n".join(lines)

