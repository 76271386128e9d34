"""Experiment configuration files.

Flat INI text (``configparser``) with one section per concern and a
``[meta] schema_version`` key. Every key is optional except the schema
version; missing keys take the defaults of :class:`FederationConfig`.

Example::

    [meta]
    schema_version = 1

    [experiment]
    strategy = fcclplus
    seed = 7
    epochs = 20
    local_rounds = 5

    [scenario]
    train_sizes = 150, 80, 500, 300

    [models]
    client_widths = 32x8, 48x12, 24x10, 40x16
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import ScenarioConfig
from .errors import ConfigError
from .federation import FederationConfig

SCHEMA_VERSION = 1


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _widths(text: str) -> tuple[tuple[int, ...], ...]:
    """``32x8, 48x12`` -> ((32, 8), (48, 12))"""
    return tuple(tuple(int(w) for w in item.strip().split("x")) for item in text.split(",") if item.strip())


def _fmt_widths(widths) -> str:
    return ", ".join("x".join(str(w) for w in ws) for ws in widths)


def _fmt_list(values) -> str:
    return ", ".join(str(v) for v in values)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    target: str  # "fed.<field>", "scenario.<field>" or "output.<field>"
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str] = str


SCHEMA: tuple[Key, ...] = (
    Key("experiment", "strategy", "fed.strategy", str.strip),
    Key("experiment", "seed", "fed.seed", int),
    Key("experiment", "epochs", "fed.epochs", int),
    Key("experiment", "local_rounds", "fed.local_rounds", int),
    Key("experiment", "collab_passes", "fed.collab_passes", int),
    Key("experiment", "pretrain_epochs", "fed.pretrain_epochs", int),
    Key("experiment", "parallel", "fed.parallel", _bool, lambda v: str(v).lower()),
    Key("scenario", "domains", "scenario.domains", int),
    Key("scenario", "classes", "scenario.classes", int),
    Key("scenario", "input_dim", "scenario.input_dim", int),
    Key("scenario", "train_sizes", "scenario.train_sizes", _int_list, _fmt_list),
    Key("scenario", "test_size", "scenario.test_size", int),
    Key("scenario", "public_size", "scenario.public_size", int),
    Key("scenario", "shift_strength", "scenario.shift_strength", float, repr),
    Key("scenario", "class_sep", "scenario.class_sep", float, repr),
    Key("scenario", "noise", "scenario.noise", float, repr),
    Key("scenario", "public_mode", "scenario.public_mode", str.strip),
    Key("models", "client_widths", "fed.client_widths", _widths, _fmt_widths),
    Key("models", "activation", "fed.activation", str.strip),
    Key("optim", "lr", "fed.lr", float, repr),
    Key("optim", "collab_batch", "fed.collab_batch", int),
    Key("optim", "local_batch", "fed.local_batch", int),
    Key("losses", "lambda", "fed.lam", float, repr),
    Key("losses", "mu", "fed.mu", float, repr),
    Key("losses", "omega", "fed.omega", float, repr),
    Key("losses", "tau", "fed.tau", float, repr),
    Key("losses", "fntd_variant", "fed.fntd_variant", str.strip),
    Key("losses", "ewc_lambda", "fed.ewc_lambda", float, repr),
    Key("data", "augment", "fed.augment", str.strip),
    Key("output", "correlation_dumps", "output.correlation_dumps", _bool, lambda v: str(v).lower()),
    Key("output", "correlation_batch", "output.correlation_batch", int),
)
_BY_SECTION = {(k.section, k.name): k for k in SCHEMA}
_BY_NAME: dict[str, list[Key]] = {}
for _k in SCHEMA:
    _BY_NAME.setdefault(_k.name, []).append(_k)


@dataclass(frozen=True)
class OutputOptions:
    correlation_dumps: bool = False
    correlation_batch: int = 128


@dataclass(frozen=True)
class RunConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    output: OutputOptions = field(default_factory=OutputOptions)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number (1-based) of every ``key = value`` entry, by section."""
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def parse_text(text: str, source: str = "<config>") -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(f"{source}: {exc.message}", line=line) from exc
    return parser


def build(parser: configparser.ConfigParser, lines: dict[tuple[str, str], int] | None = None) -> RunConfig:
    """Typed :class:`RunConfig` from a parsed file; raises :class:`ConfigError` with field and line."""
    lines = lines or {}
    if not parser.has_section("meta") or not parser.has_option("meta", "schema_version"):
        raise ConfigError("missing [meta] schema_version", "meta.schema_version")
    version = parser.get("meta", "schema_version").strip()
    if version != str(SCHEMA_VERSION):
        raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}", "meta.schema_version", lines.get(("meta", "schema_version")))
    values: dict[str, dict[str, Any]] = {"fed": {}, "scenario": {}, "output": {}}
    for section in parser.sections():
        for name, raw in parser.items(section):
            if section == "meta":
                if name != "schema_version":
                    raise ConfigError("unknown key", f"meta.{name}", lines.get((section, name)))
                continue
            key = _BY_SECTION.get((section, name))
            if key is None:
                raise ConfigError("unknown key", f"{section}.{name}", lines.get((section, name)))
            try:
                value = key.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"cannot parse {raw!r}: {exc}", f"{section}.{name}", lines.get((section, name))) from exc
            group, attr = key.target.split(".")
            values[group][attr] = value

    fed_values = values["fed"]
    seed = fed_values.get("seed", FederationConfig.seed)
    # the scenario draws from the root seed; its streams are named separately
    scenario = dataclasses.replace(ScenarioConfig(), seed=seed, **values["scenario"])
    fed = dataclasses.replace(FederationConfig(), scenario=scenario, **fed_values)
    out = dataclasses.replace(OutputOptions(), **values["output"])
    try:
        fed.validate()
    except ConfigError as exc:
        section = _locate(exc.field)
        raise ConfigError(str(exc).rsplit(" (", 1)[0], exc.field, lines.get(section) if section else None) from exc
    if out.correlation_batch < 2:
        raise ConfigError("must be >= 2", "output.correlation_batch", lines.get(("output", "correlation_batch")))
    return RunConfig(fed, out)


def _locate(field_name: str | None) -> tuple[str, str] | None:
    if field_name is None:
        return None
    for key in SCHEMA:
        attr = key.target.split(".")[1]
        if field_name in (attr, key.name):
            return key.section, key.name
    return None


def loads(text: str, source: str = "<config>") -> RunConfig:
    return build(parse_text(text, source), _key_lines(text))


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "path") from exc
    return loads(text, str(path))


def resolve_axis(name: str) -> Key:
    """Sweep axis by bare key name (``omega``) or ``section.key``."""
    if "." in name:
        section, key = name.split(".", 1)
        if (section, key) in _BY_SECTION:
            return _BY_SECTION[(section, key)]
    elif len(_BY_NAME.get(name, ())) == 1:
        return _BY_NAME[name][0]
    raise ConfigError(f"unknown sweep axis {name!r}", "axis")


def with_override(text: str, axis: str, value: str, source: str = "<config>") -> RunConfig:
    """Parse ``text`` with one key replaced, as if it had been written in the file."""
    key = resolve_axis(axis)
    parser = parse_text(text, source)
    if not parser.has_section(key.section):
        parser.add_section(key.section)
    parser.set(key.section, key.name, value)
    return build(parser, _key_lines(text))


def dumps(cfg: RunConfig) -> str:
    """Serialize every key; ``loads(dumps(cfg)) == cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["meta"] = {"schema_version": str(SCHEMA_VERSION)}
    objs = {"fed": cfg.federation, "scenario": cfg.federation.scenario, "output": cfg.output}
    for key in SCHEMA:
        group, attr = key.target.split(".")
        if not parser.has_section(key.section):
            parser.add_section(key.section)
        parser.set(key.section, key.name, key.fmt(getattr(objs[group], attr)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
