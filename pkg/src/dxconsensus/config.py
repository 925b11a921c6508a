"""Service configuration (JSON file, unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .audit import canonical_json
from .backend import BackendConfig, Role
from .prompts import DEFAULT_ADJUDICATION_TEMPLATE, DEFAULT_DIAGNOSTIC_TEMPLATE

ENV_LISTEN = "DXC_LISTEN"
ENV_AUDIT_PATH = "DXC_AUDIT_PATH"

Mode = Literal["adjudicate", "deterministic"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Limits(_Strict):
    max_transcript_turns: int = Field(500, gt=0)
    max_concurrent_diagnoses: int = Field(8, gt=0)
    request_deadline_ms: int = Field(90_000, gt=0)
    max_prompt_chars: int = Field(24_000, gt=0)
    rationale_budget: int = Field(1_200, gt=0)


class TemplateSettings(_Strict):
    diagnostic: str = DEFAULT_DIAGNOSTIC_TEMPLATE
    adjudication: str = DEFAULT_ADJUDICATION_TEMPLATE
    dirs: list[str] = Field(default_factory=list)


class ServiceConfig(_Strict):
    fleet: list[BackendConfig] = Field(min_length=1)
    adjudicator: BackendConfig | None = None
    mode: Mode = "adjudicate"
    templates: TemplateSettings = TemplateSettings()
    listen: str = "127.0.0.1:8080"
    audit_path: str = "audit/audit.jsonl"
    limits: Limits = Limits()

    @model_validator(mode="after")
    def _check_fleet(self) -> "ServiceConfig":
        names = [b.name for b in self.fleet]
        if self.adjudicator is not None:
            names.append(self.adjudicator.name)
            if self.adjudicator.role is not Role.ADJUDICATOR:
                raise ValueError("adjudicator backend must have role 'adjudicator'")
        if len(names) != len(set(names)):
            raise ValueError("backend names must be unique")
        for b in self.fleet:
            if b.role is not Role.CONSORTIUM_MEMBER:
                raise ValueError(f"fleet backend {b.name} must have role 'consortium_member'")
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"listen must be host:port, got {self.listen!r}")
        return self

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump(mode="json")).encode()).hexdigest()


def load_config(path: str | Path, env: dict[str, str] | None = None) -> ServiceConfig:
    """Read a JSON config, then apply DXC_LISTEN / DXC_AUDIT_PATH overrides."""
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if env.get(ENV_LISTEN):
        raw["listen"] = env[ENV_LISTEN]
    if env.get(ENV_AUDIT_PATH):
        raw["audit_path"] = env[ENV_AUDIT_PATH]
    try:
        return ServiceConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
