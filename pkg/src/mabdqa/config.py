"""Application configuration: TOML file, then command-line overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import tomli

from .bandit import RetrievalParams
from .gateway import GatewayConfig
from .reasoner import ReasonerParams


class ConfigError(ValueError):
    pass


@dataclass
class GraphParams:
    theta_g: float = 0.8
    theta_h: int = 10


@dataclass
class PathsConfig:
    index: Optional[str] = None
    graph: Optional[str] = None
    manifest: Optional[str] = None
    dataset: Optional[str] = None
    reports: str = "reports"
    mock_script: Optional[str] = None


@dataclass
class AppConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    graph: GraphParams = field(default_factory=GraphParams)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    reasoner: ReasonerParams = field(default_factory=ReasonerParams)
    paths: PathsConfig = field(default_factory=PathsConfig)
    mock_dim: int = 32
    embed_seed: int = 0

    def echo(self) -> dict:
        """Effective configuration for reports, with the API key masked."""
        doc = asdict(self)
        if doc["gateway"].get("api_key"):
            doc["gateway"]["api_key"] = "***"
        return doc


_SECTIONS = {
    "gateway": GatewayConfig,
    "graph": GraphParams,
    "retrieval": RetrievalParams,
    "reasoner": ReasonerParams,
    "paths": PathsConfig,
}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def load_config(path: Optional[str] = None, env_gateway: bool = True) -> AppConfig:
    doc: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    cfg = AppConfig()
    if env_gateway:
        cfg.gateway = GatewayConfig.from_env()
    for name, cls in _SECTIONS.items():
        if name in doc:
            base = asdict(getattr(cfg, name))
            base.update(doc[name])
            setattr(cfg, name, _build(cls, base, name))
    for key in ("mock_dim", "embed_seed"):
        if key in doc:
            setattr(cfg, key, int(doc[key]))
    extra = set(doc) - set(_SECTIONS) - {"mock_dim", "embed_seed"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    return cfg


def override(cfg: AppConfig, section: str, **values) -> None:
    """Apply non-None overrides to one section, re-validating it."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return
    current = asdict(getattr(cfg, section))
    current.update(values)
    setattr(cfg, section, _build(_SECTIONS[section], current, section))
