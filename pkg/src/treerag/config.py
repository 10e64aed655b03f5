"""Engine configuration: one JSON file, validated, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clustering import ClusterConfig
from .corpus import CorpusConfig
from .embedding import EmbedderConfig
from .errors import TreeRagError
from .llm import LlmConfig
from .retrieval import RetrievalConfig
from .tree import SummarizerConfig


class ConfigError(TreeRagError):
    pass


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index_dir: str = "index"


class JudgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    provider: Literal["containment", "remote_llm"] = "containment"
    llm: LlmConfig | None = None
    logit_bias: dict[str, float] | None = None


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    jobs: int = Field(1, ge=1)
    corpus: CorpusConfig = CorpusConfig()
    embedder: EmbedderConfig = EmbedderConfig()
    summarizer: SummarizerConfig = SummarizerConfig()
    clustering: ClusterConfig = ClusterConfig()
    retrieval: RetrievalConfig = RetrievalConfig()
    paths: PathsConfig = PathsConfig()
    generator: LlmConfig | None = None
    judge: JudgeConfig = JudgeConfig()


def load_config(path: str | Path | None) -> EngineConfig:
    """Read an :class:`EngineConfig` from JSON; ``None`` gives the defaults."""
    if path is None:
        return EngineConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return EngineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc
