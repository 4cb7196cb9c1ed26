"""Strict sectioned ``key = value`` run configuration.

Every known key has a type and a default; unknown sections or keys are
rejected. Radii may be written as fractions (``4/255``). The resolved config
(all defaults filled in) is what a run directory stores.
"""

from __future__ import annotations

import configparser
import io
from fractions import Fraction

STAGE_PREFIX = "stage"


class ConfigError(ValueError):
    pass


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text):
    t = text.strip()
    return float(Fraction(t)) if "/" in t else float(t)


def _str_tuple(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


PARSERS = {bool: _bool, int: int, float: _float, str: str.strip, tuple: _str_tuple}

SCHEMA = {
    "run": {"seed": (int, 0), "out": (str, "runs/default")},
    "data": {"count": (int, 2048), "seed": (int, 0), "resolution": (int, 32)},
    "model": {"width": (int, 64), "heads": (int, 4), "blocks": (int, 2), "embed_dim": (int, 32),
              "grid": (int, 4), "mlp_ratio": (int, 4)},
    "clip": {"unit": (int, 2048), "lr": (float, 3e-4), "batch_size": (int, 32),
             "cap_weight": (float, 0.5), "adversarial": (bool, True), "patch_mode": (str, "random"),
             "adv_patch_mode": (str, "resample"),
             "vision_init": (str, "scratch"), "attack_caption": (bool, True),
             "vision_only": (bool, False), "clean_mix": (bool, False), "weight_decay": (float, 1e-4)},
    "captioner": {"variant": (str, "delta2-toy"), "epochs": (int, 2), "lr": (float, 3e-4),
                  "batch_size": (int, 32), "adv_steps": (int, 3), "adv_eps": (float, 4 / 255),
                  "vision_lr_ratio": (float, 1 / 20), "clean_mix": (bool, False),
                  "weight_decay": (float, 1e-4)},
    "attack": {"kind": (str, "apgd"), "loss": (str, "ce"), "eps": (float, 4 / 255), "steps": (int, 20),
               "target": (str, ""), "count": (int, 64), "norm": (str, "inf")},
    "eval": {"zero_shot_eps": (tuple, ("0", "4/255")), "zero_shot_steps": (int, 20),
             "zero_shot_count": (int, 192), "caption_eps": (tuple, ("2/255", "4/255", "8/255")),
             "caption_steps": (int, 20), "caption_count": (int, 64),
             "targeted_eps": (tuple, ("4/255", "16/255")), "targeted_steps": (int, 60),
             "targets_per_string": (int, 10)},
}
# optional repeated sections [stage1], [stage2], ... override the default clip schedule
STAGE_SCHEMA = {"resolution": (int, 32), "steps": (int, 0), "eps": (float, 0.0), "samples": (int, 2048)}


def _schema_for(section):
    if section in SCHEMA:
        return SCHEMA[section]
    if section.startswith(STAGE_PREFIX) and section[len(STAGE_PREFIX):].isdigit():
        return STAGE_SCHEMA
    raise ConfigError(f"unknown section [{section}]")


class RunConfig:
    """Typed view of a parsed config: ``cfg["clip"]["lr"]``."""

    def __init__(self, sections):
        self.sections = sections

    def __getitem__(self, section):
        return self.sections[section]

    def stages(self):
        names = sorted((s for s in self.sections if s.startswith(STAGE_PREFIX)),
                       key=lambda s: int(s[len(STAGE_PREFIX):]))
        return [self.sections[n] for n in names]

    def eps_list(self, key):
        return [_float(v) for v in self.sections["eval"][key]]

    def set(self, dotted, value):
        """Override ``section.key`` with a string value (parsed with the key's type)."""
        section, _, key = dotted.partition(".")
        schema = _schema_for(section)
        if key not in schema:
            raise ConfigError(f"unknown key {dotted!r}")
        typ, default = schema[key]
        try:
            parsed = PARSERS[typ](value)
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
        self.sections.setdefault(section, {k: d for k, (_, d) in schema.items()})[key] = parsed

    def resolved(self):
        """Canonical text with every default filled in; stable ordering."""
        parser = configparser.ConfigParser(interpolation=None)
        order = list(SCHEMA) + [s for s in self.sections if s not in SCHEMA]
        for section in order:
            if section not in self.sections:
                continue
            parser[section] = {k: _format(v) for k, v in self.sections[section].items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(v):
    if isinstance(v, tuple):
        return ", ".join(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def default_config():
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = default_config()
    for section in parser.sections():
        schema = _schema_for(section)
        if section not in cfg.sections:
            cfg.sections[section] = {k: d for k, (_, d) in schema.items()}
        for key, raw in parser[section].items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            cfg.set(f"{section}.{key}", raw)
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
