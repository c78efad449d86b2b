"""Plain ``key = value`` run configuration with per-command schemas."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _name_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    domain: str = ""


def _pos(v) -> bool:
    return v > 0


def _rate(v) -> bool:
    return 0.0 <= v < 1.0


def _rates(vs) -> bool:
    return len(vs) > 0 and all(_rate(v) for v in vs)


SCHEMAS: dict[str, dict[str, Field]] = {
    "fading-flash": {
        "steps": Field(int, 3000, _pos, "positive integer"),
        "batch": Field(int, 32, _pos, "positive integer"),
        "lr": Field(float, 3e-3, _pos, "positive float"),
        "states": Field(int, 16, _pos, "positive integer"),
        "tides_hidden": Field(int, 16, _pos, "positive integer"),
        "bc_rank": Field(int, 2, _pos, "positive integer"),
    },
    "droprate": {
        "dataset": Field(str, "synthetic", lambda v: bool(v), "'synthetic' or a CSV path"),
        "specs": Field(_name_list, ("s5", "mamba", "tides", "tides_lambda", "tides_bc", "tides_full"), lambda v: len(v) > 0, "comma-separated variant names"),
        "n_seeds": Field(int, 3, _pos, "positive integer"),
        "epochs": Field(int, 400, _pos, "positive integer"),
        "batch": Field(int, 16, _pos, "positive integer"),
        "lr": Field(float, 1e-3, _pos, "positive float"),
        "weight_decay": Field(float, 0.1, lambda v: v >= 0, "non-negative float"),
        "r_train": Field(float, 0.5, _rate, "float in [0, 1)"),
        "r_test": Field(_float_list, (0.1, 0.3, 0.5, 0.7, 0.9), _rates, "comma-separated floats in [0, 1)"),
        "n_train": Field(int, 64, _pos, "positive integer"),
        "n_test": Field(int, 96, _pos, "positive integer"),
        "test_fraction": Field(float, 0.3, lambda v: 0 < v < 1, "float in (0, 1)"),
        "workers": Field(int, 1, _pos, "positive integer"),
    },
    "verify": {},
    "bench": {
        "lengths": Field(_int_list, (1024, 2048, 4096), lambda v: len(v) > 0 and min(v) >= 64, "comma-separated integers >= 64"),
        "repeats": Field(int, 5, _pos, "positive integer"),
        "batch": Field(int, 8, _pos, "positive integer"),
    },
}


def defaults(command: str) -> dict[str, Any]:
    return {k: f.default for k, f in _schema(command).items()}


def _schema(command: str) -> dict[str, Field]:
    if command not in SCHEMAS:
        raise ConfigError(f"no configuration schema for command {command!r}")
    return SCHEMAS[command]


def set_value(command: str, cfg: dict[str, Any], key: str, raw: str, where: str = "") -> None:
    schema = _schema(command)
    if key not in schema:
        known = ", ".join(sorted(schema)) or "none"
        raise ConfigError(f"{where}unknown config key {key!r} for {command} (known keys: {known})")
    field = schema[key]
    try:
        value = field.parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for {key!r}: {exc}") from None
    if not field.check(value):
        raise ConfigError(f"{where}{key} = {raw!r} is outside its domain ({field.domain})")
    cfg[key] = value


def parse_config(command: str, text: str, source: str = "<config>") -> dict[str, Any]:
    """Defaults overlaid with the ``key = value`` lines of ``text``."""
    cfg = defaults(command)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        seen.add(key)
        set_value(command, cfg, key, raw, f"{source}:{lineno}: ")
    return cfg


def load_config(command: str, path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return defaults(command)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(command, text, str(path))


def serialize_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(cfg.items()))


def config_snapshot(cfg: dict[str, Any]) -> dict[str, str]:
    return {k: _fmt(v) for k, v in sorted(cfg.items())}
