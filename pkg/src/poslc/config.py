"""Scenario files: a flat INI dialect with one section per concern.

    [protocol]   every ProtocolParams field
    [probes]     start, interval
    [sweep]      key = v1, v2, ...   (grid over protocol keys)
    [batch]      replications, max_runs, out

Values round-trip exactly: floats are written with ``repr``.
"""

from __future__ import annotations

import configparser
import io
import itertools
from dataclasses import dataclass, field, fields

from .engine import ProbeSchedule
from .lottery import ConfigError, ProtocolParams

_DEFAULTS = ProtocolParams()
_OPTIONAL_INT = {"download_cap"}


def _kind(key: str) -> type:
    if key in _OPTIONAL_INT:
        return int
    return type(getattr(_DEFAULTS, key))


def parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _OPTIONAL_INT and raw.lower() in ("", "none"):
        return None
    kind = _kind(key)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Scenario:
    params: ProtocolParams = field(default_factory=ProtocolParams)
    probes: ProbeSchedule = field(default_factory=ProbeSchedule)
    sweep: tuple[tuple[str, tuple], ...] = ()
    replications: int = 1
    max_runs: int = 100_000
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        names = set(ProtocolParams.field_names())
        for key, values in self.sweep:
            if key not in names:
                raise ConfigError(f"sweep key {key!r} is not a protocol parameter")
            if not values:
                raise ConfigError(f"sweep key {key!r} has no values")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.num_runs > self.max_runs:
            raise ConfigError(f"{self.num_runs} runs exceed max_runs={self.max_runs}")
        for point in self.grid():
            self.params.with_(**point)

    @property
    def num_runs(self) -> int:
        size = 1
        for _, values in self.sweep:
            size *= len(values)
        return size * self.replications

    def grid(self) -> list[dict]:
        keys = [k for k, _ in self.sweep]
        return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in self.sweep))]

    def runs(self, seed: int | None = None) -> list[tuple[str, ProtocolParams]]:
        """(gridpoint label, params) per run, grid-major then replication."""
        base = self.params.seed if seed is None else seed
        out = []
        for point in self.grid():
            label = gridpoint_label(point)
            for r in range(self.replications):
                out.append((label, self.params.with_(seed=base + r, **point)))
        return out


def gridpoint_label(point: dict) -> str:
    if not point:
        return "base"
    return "+".join(f"{k}={format_value(v)}" for k, v in point.items())


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip() == key:
            return no
    return None


def _fail(text: str, section: str, key: str, msg: str) -> ConfigError:
    line = _line_of(text, section, key)
    where = f"line {line}: " if line else ""
    return ConfigError(f"{where}[{section}] {key}: {msg}")


def loads(text: str) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"protocol", "probes", "sweep", "batch"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    names = set(ProtocolParams.field_names())
    proto = {}
    if cp.has_section("protocol"):
        for key, raw in cp.items("protocol"):
            if key not in names:
                raise _fail(text, "protocol", key, "unknown key")
            try:
                proto[key] = parse_value(key, raw)
            except ValueError as exc:
                raise _fail(text, "protocol", key, str(exc)) from None
    try:
        params = ProtocolParams(**proto)
    except ConfigError as exc:
        key = next((k for k in proto if k in str(exc)), "")
        raise _fail(text, "protocol", key, str(exc)) from None
    probe_kw = {}
    if cp.has_section("probes"):
        for key, raw in cp.items("probes"):
            if key not in ("start", "interval"):
                raise _fail(text, "probes", key, "unknown key")
            try:
                probe_kw[key] = int(raw)
            except ValueError as exc:
                raise _fail(text, "probes", key, str(exc)) from None
    sweep = []
    if cp.has_section("sweep"):
        for key, raw in cp.items("sweep"):
            if key not in names:
                raise _fail(text, "sweep", key, "not a protocol parameter")
            try:
                values = tuple(parse_value(key, v) for v in raw.split(",") if v.strip())
            except ValueError as exc:
                raise _fail(text, "sweep", key, str(exc)) from None
            sweep.append((key, values))
    batch = {}
    if cp.has_section("batch"):
        for key, raw in cp.items("batch"):
            if key in ("replications", "max_runs"):
                try:
                    batch[key] = int(raw)
                except ValueError as exc:
                    raise _fail(text, "batch", key, str(exc)) from None
            elif key == "out":
                batch["out_dir"] = raw.strip()
            else:
                raise _fail(text, "batch", key, "unknown key")
    try:
        return Scenario(params, ProbeSchedule(**probe_kw), tuple(sweep), **batch)
    except ConfigError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def load(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(sc: Scenario) -> str:
    buf = io.StringIO()
    buf.write("[protocol]\n")
    for f in fields(ProtocolParams):
        buf.write(f"{f.name} = {format_value(getattr(sc.params, f.name))}\n")
    buf.write("\n[probes]\n")
    buf.write(f"start = {sc.probes.start}\ninterval = {sc.probes.interval}\n")
    if sc.sweep:
        buf.write("\n[sweep]\n")
        for key, values in sc.sweep:
            buf.write(f"{key} = {', '.join(format_value(v) for v in values)}\n")
    buf.write("\n[batch]\n")
    buf.write(f"replications = {sc.replications}\nmax_runs = {sc.max_runs}\nout = {sc.out_dir}\n")
    return buf.getvalue()
