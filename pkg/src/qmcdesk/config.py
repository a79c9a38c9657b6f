"""Run configuration: a key=value text file plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .sampler import DEFAULT_WALKERS, DEFAULT_WINDOW, MODES
from .slater import DEFAULT_K_BLOCK, DEFAULT_VARIANT, VARIANTS
from .wavefunction import PRECISIONS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    store: str = ""
    mode: str = "dmc"
    tau: float = 0.01
    precision: str = "mixed"
    walkers: int = DEFAULT_WALKERS
    steps: int = 1000
    warmup_steps: int = 0
    window: int = DEFAULT_WINDOW
    # stop conditions; at least one must be set
    wall_seconds: float | None = None
    target_error: float | None = None
    max_blocks: int | None = None
    # topology
    forwarders: int = 1
    workers_per_forwarder: int = 1
    host: str = "127.0.0.1"
    server_port: int = 0
    seed: int = 12345
    variant: str = DEFAULT_VARIANT
    k_block: int = DEFAULT_K_BLOCK
    n_kept: int = 1000
    poll_interval: float = 5.0
    max_poll_failures: int = 5
    network_timeout: float = 60.0
    rpc_timeout: float = 10.0
    restart_workers: bool = False
    max_restarts: int = 3
    combine_interval: float = 0.5
    idle_flush_min: float = 5.0
    idle_flush_max: float = 15.0
    shutdown_grace: float = 10.0
    shutdown_timeout: float = 60.0
    log_dir: str = ""

    def validate(self) -> "RunConfig":
        if not self.store:
            raise ConfigError("store path is required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {', '.join(PRECISIONS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.walkers < 1:
            raise ConfigError("walkers must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.forwarders < 1 or self.workers_per_forwarder < 1:
            raise ConfigError("need at least one forwarder and one worker per forwarder")
        if self.wall_seconds is None and self.target_error is None and self.max_blocks is None:
            raise ConfigError("set at least one stop condition: wall_seconds, target_error or max_blocks")
        if not 0 < self.idle_flush_min <= self.idle_flush_max:
            raise ConfigError("idle flush range must satisfy 0 < min <= max")
        return self

    @property
    def total_workers(self) -> int:
        return self.forwarders * self.workers_per_forwarder

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(name: str, text: str):
    f = {f.name: f for f in fields(RunConfig)}.get(name)
    if f is None:
        raise ConfigError(f"unknown config key {name!r}")
    t = str(f.type)
    text = text.strip()
    if "None" in t and text.lower() in ("", "none"):
        return None
    try:
        if t.startswith("bool"):
            if text.lower() in ("1", "yes", "true", "on"):
                return True
            if text.lower() in ("0", "no", "false", "off"):
                return False
            raise ValueError(text)
        if t.startswith("int"):
            return int(text)
        if t.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {name}") from None
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        setattr(cfg, k.strip(), _convert(k.strip(), v))
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        k, v = item.split("=", 1)
        setattr(cfg, k.strip(), _convert(k.strip(), v))
    return cfg
