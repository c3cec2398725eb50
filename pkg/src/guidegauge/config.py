"""Run configuration with layered overrides: defaults < TOML file < GG_* env
vars < command-line flags."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import DEFAULT_CHUNK_SIZE, DEFAULT_FIELD_MAP, DEFAULT_OVERLAP, ChunkParams
from .embedding import DEFAULT_FULL_DIM, EmbedderConfig
from .pipeline import DEFAULT_N_QUERIES, DEFAULT_TOP_K, QUERY_MODES

LLM_BACKENDS = ("remote", "mock")

# Environment overrides applied between the config file and CLI flags.
# GG_API_KEY is deliberately absent: credentials are read at request time.
_ENV_FIELDS = {
    "GG_BASE_URL": ("base_url", str),
    "GG_MODEL": ("llm_model", str),
    "GG_WORKERS": ("workers", int),
    "GG_QUERIES": ("n_queries", int),
    "GG_K": ("k", int),
}

# TOML section -> config attribute per key.
_SECTIONS = {
    "corpus": {
        "field_map": "field_map",
        "chunk_size": "chunk_size",
        "overlap": "overlap",
        "strict": "strict",
    },
    "embedding": {
        "backend": "embed_backend",
        "model": "embed_model",
        "full_dim": "full_dim",
        "truncate_dim": "truncate_dim",
        "base_url": "base_url",
    },
    "retrieval": {
        "n_queries": "n_queries",
        "query_mode": "query_mode",
        "k": "k",
    },
    "llm": {
        "backend": "llm_backend",
        "model": "llm_model",
        "max_tokens": "max_tokens",
        "base_url": "base_url",
    },
    "run": {
        "workers": "workers",
        "prompt_dir": "prompt_dir",
    },
}


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass
class Config:
    field_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FIELD_MAP))
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    strict: bool = True
    embed_backend: str = "hash"
    embed_model: str = ""
    full_dim: int = DEFAULT_FULL_DIM
    truncate_dim: int | None = None
    base_url: str | None = None
    n_queries: int = DEFAULT_N_QUERIES
    query_mode: str = "fixed"
    k: int = DEFAULT_TOP_K
    llm_backend: str = "remote"
    llm_model: str = "llama-3-70b-instruct"
    max_tokens: int = 1024
    workers: int = 1
    prompt_dir: str | None = None

    def chunk_params(self) -> ChunkParams:
        return ChunkParams(chunk_size=self.chunk_size, overlap=self.overlap)

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(
            backend=self.embed_backend,
            model_name=self.embed_model,
            full_dim=self.full_dim,
            truncate_dim=self.truncate_dim,
            base_url=self.base_url,
        )

    def validate(self) -> None:
        if self.n_queries < 1:
            raise ConfigError("n_queries must be at least 1")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.llm_backend not in LLM_BACKENDS:
            raise ConfigError(f"llm backend must be one of {LLM_BACKENDS}")
        if self.prompt_dir is not None and not Path(self.prompt_dir).is_dir():
            raise ConfigError(f"prompt_dir {self.prompt_dir!r} is not a directory")
        try:
            self.chunk_params()
            self.embedder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, environ: dict | None = None) -> Config:
    """Build a Config from an optional TOML file plus GG_* env overrides.

    Flags beat env beats file beats defaults; flag application happens in
    the CLI layer, after this returns.
    """
    config = Config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            with path.open("rb") as handle:
                data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        valid_names = {f.name for f in fields(Config)}
        for section, mapping in _SECTIONS.items():
            table = data.get(section, {})
            if not isinstance(table, dict):
                raise ConfigError(f"config section [{section}] must be a table")
            for key, value in table.items():
                if key not in mapping:
                    raise ConfigError(f"unknown config key {section}.{key}")
                attr = mapping[key]
                assert attr in valid_names
                setattr(config, attr, value)
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    environ = os.environ if environ is None else environ
    for env_name, (attr, cast) in _ENV_FIELDS.items():
        raw = environ.get(env_name)
        if raw:
            try:
                setattr(config, attr, cast(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for ${env_name}: {raw!r}") from exc

    config.validate()
    return config
