"""The main JSON configuration file and the objects built from it."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .backends import Backend, EmbeddingCache, HttpBackend, MockBackend, MockModelConfig
from .classifier import TrainingConfig
from .core import Labels, LabelSchema, MailCascadeError, ModelSpec
from .profiler import DEFAULT_GRID, CalibrationSchedule, OperatorConstraints


class ConfigError(MailCascadeError):
    pass


@dataclass
class AppConfig:
    models: list[ModelSpec]
    baseline_model: str
    embedding_model: str | None = None
    schema: LabelSchema = field(default_factory=LabelSchema.default)
    backend: dict = field(default_factory=lambda: {"kind": "mock"})
    data: dict = field(default_factory=dict)
    profiler: dict = field(default_factory=dict)
    enforce_constraints: bool = True
    available_model_pool: list[str] | None = None
    constraints: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    drift: dict = field(default_factory=dict)
    provisioning: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = Path(".")

    @property
    def specs(self) -> dict[str, ModelSpec]:
        return {m.name: m for m in self.models}

    def spec(self, name: str) -> ModelSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise ConfigError(f"config names unknown model {name!r}") from None

    def path(self, key: str) -> Path:
        try:
            return self.base_dir / self.data[key]
        except KeyError:
            raise ConfigError(f"config has no data.{key} path") from None

    @property
    def grid(self) -> tuple[float, ...]:
        return tuple(self.profiler.get("threshold_grid", DEFAULT_GRID))

    @property
    def schedule(self) -> CalibrationSchedule:
        return CalibrationSchedule(**self.profiler.get("calibration", {}))

    def operator_constraints(self) -> OperatorConstraints:
        c = self.constraints
        pool = self.available_model_pool
        return OperatorConstraints(
            allowed_model_pool=tuple(pool) if pool is not None else None,
            banned_families=tuple(c.get("banned_families", ())),
            max_cascade_size=c.get("max_cascade_size"),
            tradeoff_weights=tuple(c.get("tradeoff_weights", (1.0, 1.0))),
        )

    def build_backend(self, truth: Labels | None = None, cache_path: Path | None = None) -> Backend:
        cache = EmbeddingCache(cache_path) if cache_path is not None else None
        kind = self.backend.get("kind", "mock")
        if kind == "mock":
            mocks = {k: MockModelConfig.from_dict(v) for k, v in self.backend.get("mock_configs", {}).items()}
            return MockBackend(
                self.models,
                mocks,
                truth or {},
                embedding_dim=int(self.backend.get("embedding_dim", 32)),
                embedding_signal=float(self.backend.get("embedding_signal", 3.0)),
                signal_labels=self.backend.get("signal_labels", ()),
                cache=cache,
            )
        if kind == "http":
            try:
                endpoint = self.backend["endpoint"]
            except KeyError:
                raise ConfigError("http backend needs an endpoint") from None
            return HttpBackend(
                self.models,
                endpoint,
                api_key_env=self.backend.get("api_key_env", "MAILCASCADE_API_KEY"),
                timeout=float(self.backend.get("timeout", 30.0)),
                cache=cache,
            )
        raise ConfigError(f"unknown backend kind {kind!r}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "models": [m.to_dict() for m in self.models],
            "baseline_model": self.baseline_model,
            "embedding_model": self.embedding_model,
            "schema": self.schema.to_list(),
            "backend": self.backend,
            "data": self.data,
            "profiler": self.profiler,
            "enforce_constraints": self.enforce_constraints,
            "available_model_pool": self.available_model_pool,
            "constraints": self.constraints,
            "training": self.training.to_dict(),
            "drift": self.drift,
            "provisioning": self.provisioning,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Path = Path(".")) -> AppConfig:
        try:
            models = [ModelSpec.from_dict(m) for m in d["models"]]
            cfg = cls(
                models=models,
                baseline_model=d["baseline_model"],
                embedding_model=d.get("embedding_model"),
                schema=LabelSchema.from_list(d["schema"]) if "schema" in d else LabelSchema.default(),
                backend=dict(d.get("backend", {"kind": "mock"})),
                data=dict(d.get("data", {})),
                profiler=dict(d.get("profiler", {})),
                enforce_constraints=bool(d.get("enforce_constraints", True)),
                available_model_pool=d.get("available_model_pool"),
                constraints=dict(d.get("constraints", {})),
                training=TrainingConfig.from_dict(d.get("training", {})),
                drift=dict(d.get("drift", {})),
                provisioning=dict(d.get("provisioning", {})),
                seed=int(d.get("seed", 0)),
                base_dir=base_dir,
            )
        except (KeyError, TypeError, ValueError, MailCascadeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        names = cfg.specs
        for ref in (cfg.baseline_model, cfg.embedding_model):
            if ref is not None and ref not in names:
                raise ConfigError(f"config names unknown model {ref!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> AppConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)
