"""Flat ``key = value`` experiment configs and cartesian sweep generation."""

from __future__ import annotations

import itertools
import json
import os
import re
from dataclasses import dataclass, field

from .engine import ExperimentConfig
from .exceptions import InputError, ParseError, SchemaError
from .sensor import SensorModel


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    return int(s, 0) if isinstance(s, str) else int(s)


def _opt_str(s: str):
    return s or None


def _pair(s: str) -> tuple[int, int]:
    parts = [p.strip() for p in str(s).split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {s!r}")
    return int(parts[0]), int(parts[1])


def _dispatcher(s: str):
    """``x,y,z`` or ``below:H`` (H meters under the ground-truth centroid)."""
    s = str(s).strip()
    if s.startswith("below:"):
        return ("below", float(s[6:]))
    parts = [float(p) for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 'x,y,z' or 'below:H', got {s!r}")
    return tuple(parts)


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    "plan": (_opt_str, ""),
    "duration_s": (_float, "60"),
    "tick_interval_ms": (_float, "100"),
    "max_speed": (_float, "1.0"),
    "policy": (str, "continuous"),
    "filter_window": (_int, "20"),
    "mode": (str, "deterministic"),
    "seed": (_int, "0"),
    "output_dir": (_opt_str, ""),
    "deploy.alpha": (_float, "10"),
    "deploy.dispatcher": (_dispatcher, "below:10"),
    "sensor.range_blind": (_float, "0.05"),
    "sensor.range_sweet_max": (_float, "0.5"),
    "sensor.range_max": (_float, "3.0"),
    "sensor.err_sweet": (_float, "0.005"),
    "sensor.err_decay_slope": (_float, "0.01"),
    "transport": (str, "bus"),
    "bus.latency_us": (_pair, "0,0"),
    "bus.drop_probability": (_float, "0"),
    "net.port": (_int, "47474"),
    "net.broadcast_addr": (_opt_str, ""),
    "net.bind_addr": (str, ""),
}


def parse_config_text(text: str, source="<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError("expected 'key = value'", line=lineno, path=source)
        key = key.strip()
        if key not in SCHEMA:
            raise SchemaError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def config_from_mapping(values: dict) -> ExperimentConfig:
    """Build a validated config from flat string (or native) values."""
    unknown = set(values) - set(SCHEMA)
    if unknown:
        raise SchemaError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    merged = {k: default for k, (_, default) in SCHEMA.items()}
    merged.update({k: v for k, v in values.items()})
    parsed = {}
    for key, raw in merged.items():
        parser = SCHEMA[key][0]
        try:
            parsed[key] = parser(raw) if isinstance(raw, str) else _native(parser, raw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"config key {key!r}: {exc}") from None

    disp = parsed["deploy.dispatcher"]
    below = 10.0
    if disp and disp[0] == "below":
        below, disp = disp[1], None
    sensor = SensorModel(
        range_blind=parsed["sensor.range_blind"],
        range_sweet_max=parsed["sensor.range_sweet_max"],
        range_max=parsed["sensor.range_max"],
        err_sweet=parsed["sensor.err_sweet"],
        err_decay_slope=parsed["sensor.err_decay_slope"],
    )
    return ExperimentConfig(
        plan_path=parsed["plan"],
        duration_s=parsed["duration_s"],
        tick_interval_ms=parsed["tick_interval_ms"],
        max_speed=parsed["max_speed"],
        policy=parsed["policy"],
        filter_window=parsed["filter_window"],
        dispatcher=disp,
        dispatcher_below=below,
        alpha=parsed["deploy.alpha"],
        sensor=sensor,
        mode=parsed["mode"],
        transport=parsed["transport"],
        latency_us=parsed["bus.latency_us"],
        drop_probability=parsed["bus.drop_probability"],
        net_port=parsed["net.port"],
        net_broadcast_addr=parsed["net.broadcast_addr"],
        net_bind_addr=parsed["net.bind_addr"],
        seed=parsed["seed"],
        output_dir=parsed["output_dir"],
    )


def _native(parser, value):
    if parser in (_pair, _dispatcher):
        if isinstance(value, (list, tuple)):
            return parser(",".join(str(v) for v in value))
    if parser is _opt_str:
        return value or None
    return parser(value)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_mapping(parse_config_text(fh.read(), source=path))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_mapping(config: ExperimentConfig) -> dict[str, str]:
    s = config.sensor
    disp = (f"below:{float(config.dispatcher_below)!r}" if config.dispatcher is None
            else _fmt(tuple(float(c) for c in config.dispatcher)))
    return {
        "plan": _fmt(config.plan_path),
        "duration_s": _fmt(float(config.duration_s)),
        "tick_interval_ms": _fmt(float(config.tick_interval_ms)),
        "max_speed": _fmt(float(config.max_speed)),
        "policy": config.policy.value,
        "filter_window": str(int(config.filter_window)),
        "mode": config.mode.value,
        "seed": str(int(config.seed)),
        "output_dir": _fmt(config.output_dir),
        "deploy.alpha": _fmt(float(config.alpha)),
        "deploy.dispatcher": disp,
        "sensor.range_blind": _fmt(float(s.range_blind)),
        "sensor.range_sweet_max": _fmt(float(s.range_sweet_max)),
        "sensor.range_max": _fmt(float(s.range_max)),
        "sensor.err_sweet": _fmt(float(s.err_sweet)),
        "sensor.err_decay_slope": _fmt(float(s.err_decay_slope)),
        "transport": config.transport,
        "bus.latency_us": _fmt(config.latency_us),
        "bus.drop_probability": _fmt(float(config.drop_probability)),
        "net.port": str(int(config.net_port)),
        "net.broadcast_addr": _fmt(config.net_broadcast_addr),
        "net.bind_addr": config.net_bind_addr,
    }


def config_to_text(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_mapping(config).items())


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(config))


@dataclass
class SweepTemplate:
    base: dict = field(default_factory=dict)
    varying: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        for key in list(self.base) + list(self.varying):
            if key not in SCHEMA:
                raise SchemaError(f"unknown config key {key!r}")
        for key, vals in self.varying.items():
            if not isinstance(vals, list) or not vals:
                raise SchemaError(f"varying values for {key!r} must be a non-empty list")

    @classmethod
    def load(cls, path) -> "SweepTemplate":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, line=exc.lineno, path=path) from exc
        if not isinstance(doc, dict) or set(doc) - {"base", "varying"}:
            raise SchemaError(f"{path}: template must be an object with 'base' and 'varying'")
        return cls(dict(doc.get("base", {})), dict(doc.get("varying", {})))

    def expand(self) -> list[tuple[str, ExperimentConfig]]:
        """One ``(name, config)`` per cartesian combination of the varying values."""
        keys = list(self.varying)
        out = []
        for combo in itertools.product(*(self.varying[k] for k in keys)):
            values = dict(self.base)
            values.update(zip(keys, combo))
            name = "_".join(f"{k}={_slug(v)}" for k, v in zip(keys, combo)) or "base"
            out.append((name, config_from_mapping(values)))
        return out


def _slug(v) -> str:
    return re.sub(r"[^A-Za-z0-9.,:+-]", "-", _fmt(v))


def generate_sweep(template: SweepTemplate, outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for name, cfg in template.expand():
        p = os.path.join(outdir, f"{name}.conf")
        save_config(cfg, p)
        paths.append(p)
    return paths
