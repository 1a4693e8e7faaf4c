"""Run configuration: a TOML file plus ``key=value`` overrides, with a stable fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .client import ClientConfig, HashingEmbedder, HTTPChatClient, HTTPEmbedClient, MockChatClient


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # model clients
    chat_backend: str = "http"  # http | mock
    embed_backend: str = "http"  # http | hashing
    mock_chat_fixture: str = ""
    embed_dim: int = 256
    chat_base_url: str = "http://localhost:8000/v1"
    chat_model: str = "gpt-4o"
    embed_base_url: str = "http://localhost:8000/v1"
    embed_model: str = "text-embedding-3-small"
    api_key_env_var: str = "OPENAI_API_KEY"
    max_concurrency: int = 8
    max_retries: int = 3
    request_timeout_seconds: float = 60.0
    # synthesis
    chunk_max_tokens: int = 256
    drift_threshold: float = 0.70
    max_failed_fraction: float = 0.5
    # retrieval
    m: int = 200
    n_hops: int = 5
    k: int = 10
    path_hops: int = 2
    per_query: int = 20
    # evaluation
    coverage_threshold: float = 0.88

    def fingerprint(self) -> str:
        values = dataclasses.asdict(self)
        # fixture location varies between checkouts; its content does not
        fixture = values.pop("mock_chat_fixture")
        if fixture and Path(fixture).exists():
            values["mock_chat_fixture_sha256"] = hashlib.sha256(Path(fixture).read_bytes()).hexdigest()
        payload = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def client_config(self) -> ClientConfig:
        names = {f.name for f in fields(ClientConfig)}
        return ClientConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def chat_client(self):
        if self.chat_backend == "mock":
            if not self.mock_chat_fixture:
                raise ConfigError("chat_backend = mock needs mock_chat_fixture")
            return MockChatClient.from_fixture(self.mock_chat_fixture, max_concurrency=self.max_concurrency)
        if self.chat_backend == "http":
            return HTTPChatClient(self.client_config())
        raise ConfigError(f"unknown chat_backend {self.chat_backend!r}")

    def embed_client(self):
        if self.embed_backend == "hashing":
            return HashingEmbedder(self.embed_dim, max_concurrency=self.max_concurrency)
        if self.embed_backend == "http":
            return HTTPEmbedClient(self.client_config())
        raise ConfigError(f"unknown embed_backend {self.embed_backend!r}")


def _coerce(name: str, raw, typ):
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> Config:
    """Read a TOML file (top-level keys or any one level of tables) and apply overrides."""
    values: dict[str, object] = {}
    if path:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, val in data.items():
            if isinstance(val, dict):
                values.update(val)
            else:
                values[key] = val
    values.update(overrides or {})
    known = {f.name: f.type for f in fields(Config)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**{k: _coerce(k, v, known[k]) for k, v in values.items()})
