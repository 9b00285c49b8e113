"""Flat sectioned key-value configuration for the command-line front end.

INI-style sections (register, sequence, protocol, readout, sweep, bayes,
analytic, strategy, fit); every key can be overridden on the command line
with ``--set section.key=value``.  Numeric grids accept either a comma
list (``0, 200, 400``), a half-open range ``start:stop:step``, or
``log:start:stop:count`` for log spacing.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .dm_sim import (NuclearSpinSpec, ReadoutModel, Register, SequenceConfig,
                     te_us_for_step)


class ConfigError(ValueError):
    """Malformed or missing configuration (exit code 2)."""


@dataclass(frozen=True)
class ExperimentManifest:
    """What to run: command, config source, output directory, seed, overrides."""

    command: str
    config_path: str
    output_dir: str
    seed: int | None = None
    overrides: tuple[str, ...] = ()


def load_config(path: str, overrides=()) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as handle:
            parser.read_file(handle, source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())
    return parser


def config_sha256(parser: configparser.ConfigParser) -> str:
    canon = []
    for section in sorted(parser.sections()):
        for key in sorted(parser[section]):
            canon.append(f"{section}.{key}={parser[section][key]}")
    return hashlib.sha256("\n".join(canon).encode()).hexdigest()


def _get(parser, section: str, key: str, default=None, required: bool = False) -> str | None:
    if parser.has_option(section, key):
        return parser.get(section, key)
    if required:
        raise ConfigError(f"missing required key [{section}] {key}")
    return default


def get_float(parser, section, key, default=None, required=False) -> float | None:
    raw = _get(parser, section, key, None, required)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from exc


def get_int(parser, section, key, default=None, required=False) -> int | None:
    raw = _get(parser, section, key, None, required)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not an integer") from exc


def get_bool(parser, section, key, default=False) -> bool:
    raw = _get(parser, section, key)
    if raw is None:
        return default
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")


def get_str(parser, section, key, default=None, required=False) -> str | None:
    raw = _get(parser, section, key, None, required)
    return default if raw is None else raw.strip()


def parse_grid(raw: str, *, integer: bool = False) -> list:
    """Comma list, half-open 'start:stop:step', or 'log:start:stop:count'."""
    raw = raw.strip()
    try:
        if raw.startswith("log:"):
            _, lo, hi, count = raw.split(":")
            vals = np.geomspace(float(lo), float(hi), int(count))
            return [float(v) for v in vals]
        if ":" in raw:
            start, stop, step = raw.split(":")
            vals = np.arange(float(start), float(stop), float(step))
        else:
            vals = np.array([float(tok) for tok in raw.split(",") if tok.strip()])
    except ValueError as exc:
        raise ConfigError(f"cannot parse grid {raw!r}") from exc
    if integer:
        ints = [int(round(v)) for v in vals]
        if any(abs(i - v) > 1e-9 for i, v in zip(ints, vals)):
            raise ConfigError(f"grid {raw!r} must contain integers")
        return ints
    return [float(v) for v in vals]


def get_grid(parser, section, key, default=None, *, integer=False, required=False):
    raw = _get(parser, section, key, None, required)
    if raw is None:
        return default
    return parse_grid(raw, integer=integer)


def get_str_list(parser, section, key, default=None) -> list[str] | None:
    raw = _get(parser, section, key)
    if raw is None:
        return default
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


def build_register(parser, max_nuclei: int = 3) -> Register:
    if not parser.has_section("register"):
        raise ConfigError("missing [register] section")
    spins = []
    for label, raw in parser["register"].items():
        parts = [tok.strip() for tok in raw.split(",")]
        if len(parts) != 3:
            raise ConfigError(
                f"[register] {label} must be 'A_par_kHz, A_perp_kHz, role', got {raw!r}")
        try:
            spins.append(NuclearSpinSpec(label=label, a_par_khz=float(parts[0]),
                                         a_perp_khz=float(parts[1]), role=parts[2]))
        except ValueError as exc:
            raise ConfigError(f"[register] {label}: {exc}") from exc
    try:
        return Register(spins=tuple(spins), max_nuclei=max_nuclei)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_sequence(parser, register: Register, seed: int | None = None) -> SequenceConfig:
    sec = "sequence"
    t_i_us = get_float(parser, sec, "t_i_us", 0.5)
    tau_d_ns = get_float(parser, sec, "tau_d_ns", 92.0)
    t_e_us = get_float(parser, sec, "t_e_us")
    step = get_float(parser, sec, "effective_step")
    if t_e_us is None and step is None:
        raise ConfigError("[sequence] needs t_e_us or effective_step")
    if t_e_us is None:
        try:
            t_e_us = te_us_for_step(register.memory.a_par_khz, step,
                                    t_i_us=t_i_us, tau_d_ns=tau_d_ns)
        except ValueError as exc:
            raise ConfigError(f"[sequence] effective_step: {exc}") from exc
    alpha_sq = get_float(parser, sec, "alpha_sq", 0.5)
    if not 0.0 <= alpha_sq <= 1.0:
        raise ConfigError("[sequence] alpha_sq must lie in [0, 1]")
    try:
        return SequenceConfig(
            t_e_us=t_e_us, t_i_us=t_i_us, tau_d_ns=tau_d_ns,
            omega_l_khz=get_float(parser, sec, "omega_l_khz", 432.0),
            alpha=math.sqrt(alpha_sq),
            echo_at_half=get_bool(parser, sec, "echo_at_half", True),
            seed=seed if seed is not None else get_int(parser, sec, "seed", 0))
    except ValueError as exc:
        raise ConfigError(f"[sequence]: {exc}") from exc


def build_readout(parser) -> ReadoutModel:
    sec = "readout"
    try:
        return ReadoutModel(
            f00=get_float(parser, sec, "f00", 1.0),
            f01=get_float(parser, sec, "f01", 0.0),
            f10=get_float(parser, sec, "f10", 0.0),
            f11=get_float(parser, sec, "f11", 1.0),
            spinflip_dephases=get_bool(parser, sec, "spinflip_dephases", False))
    except ValueError as exc:
        raise ConfigError(f"[readout]: {exc}") from exc
