"""Model invocation surface: a deterministic mock, an HTTP client, and a replay cache.

Every backend keeps per-model invocation counters and billing totals so that
cost accounting can be audited against what the cascade reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Iterable, Mapping

import numpy as np

from .core import (
    Email,
    LabelDef,
    LabelValue,
    MailCascadeError,
    ModelKind,
    ModelSpec,
    TokenUsage,
    check_pool,
    estimate_tokens,
    request_cost,
)

logger = logging.getLogger(__name__)


class BackendError(MailCascadeError):
    pass


class BackendUnavailable(BackendError):
    """Transport failure or timeout; carries the partial cascade trace when raised from one."""

    trace = None


class MalformedOutput(BackendError):
    def __init__(self, message: str, usage: TokenUsage | None = None):
        super().__init__(message)
        self.usage = usage or TokenUsage()


@dataclass(frozen=True)
class GenerationResult:
    value: LabelValue
    token_logprobs: tuple[float, ...]
    usage: TokenUsage

    def __post_init__(self) -> None:
        if not self.token_logprobs:
            raise ValueError("token_logprobs must be nonempty")
        if any(lp > 0 for lp in self.token_logprobs):
            raise ValueError("log-probabilities must be <= 0")


class Backend:
    """Shared registry, counters, and embedding cache for concrete backends."""

    def __init__(self, specs: Iterable[ModelSpec], cache: EmbeddingCache | None = None):
        self.specs: dict[str, ModelSpec] = {s.name: s for s in specs}
        check_pool(self.specs.values())
        self.cache = cache if cache is not None else EmbeddingCache()
        self.calls: Counter[str] = Counter()
        self.billed: Counter[str] = Counter()
        self._lock = threading.Lock()

    def spec(self, name: str) -> ModelSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise BackendError(f"unknown model {name!r}") from None

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    @property
    def total_billed(self) -> int:
        return sum(self.billed.values())

    def _record(self, model: str, usage: TokenUsage) -> int:
        cost = request_cost(self.spec(model), usage)
        with self._lock:
            self.calls[model] += 1
            self.billed[model] += cost
        return cost

    def generate_label(self, model: str, email: Email, label: LabelDef) -> GenerationResult:
        spec = self.spec(model)
        if spec.kind is not ModelKind.GENERATIVE:
            raise BackendError(f"{model!r} is not a generative model")
        try:
            result = self._generate(spec, email, label)
        except MalformedOutput as exc:
            self._record(model, exc.usage)
            raise
        if result.value.value not in label.classes:
            self._record(model, result.usage)
            raise MalformedOutput(
                f"{model!r} returned {result.value.value} for {label.name!r}", result.usage
            )
        self._record(model, result.usage)
        return result

    def embed(self, model: str, email: Email) -> np.ndarray:
        return self.embed_with_cost(model, email)[0]

    def embed_with_cost(self, model: str, email: Email) -> tuple[np.ndarray, int]:
        """Embedding plus the cost billed by this call (zero on a cache hit)."""
        spec = self.spec(model)
        if spec.kind is not ModelKind.EMBEDDING:
            raise BackendError(f"{model!r} is not an embedding model")
        hit = self.cache.get(model, email.id)
        if hit is not None:
            return hit, 0
        vec, usage = self._embed(spec, email)
        cost = 0
        if self.cache.put(model, email.id, vec):
            cost = self._record(model, usage)
        return self.cache.get(model, email.id), cost

    def embedding_usage(self, model: str, email: Email) -> TokenUsage:
        """Token usage that an uncached ``embed`` call is billed for."""
        return TokenUsage(email.token_count_estimate, 0)

    def _generate(self, spec: ModelSpec, email: Email, label: LabelDef) -> GenerationResult:
        raise NotImplementedError

    def _embed(self, spec: ModelSpec, email: Email) -> tuple[np.ndarray, TokenUsage]:
        raise NotImplementedError


class EmbeddingCache:
    """Embeddings keyed by (model, email id); concurrent reads, exclusive writes."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self.load(self.path)

    def __len__(self) -> int:
        return len(self._data)

    def get(self, model: str, email_id: str) -> np.ndarray | None:
        return self._data.get((model, email_id))

    def put(self, model: str, email_id: str, vec: np.ndarray) -> bool:
        """Insert unless present; returns whether this call stored the vector."""
        vec = np.asarray(vec, dtype=np.float64)
        vec.setflags(write=False)
        with self._lock:
            if (model, email_id) in self._data:
                return False
            self._data[(model, email_id)] = vec
            return True

    def save(self, path: str | Path | None = None) -> None:
        path = Path(path or self.path)
        with self._lock:
            blob: dict[str, dict[str, list[float]]] = {}
            for (model, eid), vec in sorted(self._data.items()):
                blob.setdefault(model, {})[eid] = vec.tolist()
        path.write_text(json.dumps(blob, sort_keys=True))

    def load(self, path: str | Path) -> None:
        blob = json.loads(Path(path).read_text())
        for model, rows in blob.items():
            for eid, vec in rows.items():
                self.put(model, eid, np.array(vec, dtype=np.float64))


# -- mock backend -------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceDist:
    """Normal(mean, std) truncated to (0, 1]; std 0 means a constant."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not 0 < self.mean <= 1:
            raise ValueError("confidence mean must lie in (0, 1]")
        if self.std < 0:
            raise ValueError("confidence std must be >= 0")

    def sample(self, u: float) -> float:
        if self.std == 0:
            return self.mean
        nd = NormalDist(self.mean, self.std)
        lo, hi = nd.cdf(0.0), nd.cdf(1.0)
        p = lo + u * (hi - lo)
        p = min(max(p, 1e-300), 1 - 1e-16)
        return min(max(nd.inv_cdf(p), 1e-12), 1.0)


@dataclass(frozen=True)
class MockModelConfig:
    seed: int = 0
    agreement_rate: float = 1.0
    confidence_when_correct: ConfidenceDist = ConfidenceDist(0.9, 0.05)
    confidence_when_wrong: ConfidenceDist = ConfidenceDist(0.6, 0.15)
    usage_profile: TokenUsage | None = None
    label_agreement: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        rates = [self.agreement_rate, *self.label_agreement.values()]
        if any(not 0 <= r <= 1 for r in rates):
            raise ValueError("agreement rates must lie in [0, 1]")

    def agreement_for(self, label: str) -> float:
        return self.label_agreement.get(label, self.agreement_rate)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "agreement_rate": self.agreement_rate,
            "confidence_when_correct": [self.confidence_when_correct.mean, self.confidence_when_correct.std],
            "confidence_when_wrong": [self.confidence_when_wrong.mean, self.confidence_when_wrong.std],
            "label_agreement": dict(self.label_agreement),
        }
        if self.usage_profile is not None:
            d["usage_profile"] = [self.usage_profile.input_tokens, self.usage_profile.output_tokens]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> MockModelConfig:
        usage = d.get("usage_profile")
        return cls(
            seed=int(d.get("seed", 0)),
            agreement_rate=float(d.get("agreement_rate", 1.0)),
            confidence_when_correct=ConfidenceDist(*d.get("confidence_when_correct", (0.9, 0.05))),
            confidence_when_wrong=ConfidenceDist(*d.get("confidence_when_wrong", (0.6, 0.15))),
            usage_profile=TokenUsage(*usage) if usage is not None else None,
            label_agreement={str(k): float(v) for k, v in (d.get("label_agreement") or {}).items()},
        )


def hash_uniforms(*parts: object, n: int = 4) -> list[float]:
    """``n`` uniforms in [0, 1) derived from a stable hash of ``parts``."""
    key = "\x1f".join(str(p) for p in parts).encode()
    out: list[float] = []
    counter = 0
    while len(out) < n:
        digest = hashlib.blake2b(key + counter.to_bytes(4, "little"), digest_size=32).digest()
        out.extend(w / 2.0**64 for w in struct.unpack("<4Q", digest))
        counter += 1
    return out[:n]


def hash_seed(*parts: object) -> int:
    key = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


TruthSource = Callable[[str, str], "int | None"]

DEFAULT_PROMPT_TOKENS = 40


class MockBackend(Backend):
    """Deterministic stand-in for hosted models.

    Every output is a pure function of (config seed, email id, label name,
    model name). The baseline label each mock agrees or disagrees with comes
    from ``truth``, either a mapping ``{email_id: {label: value}}`` or a
    callable ``(email_id, label) -> value``.
    """

    def __init__(
        self,
        specs: Iterable[ModelSpec],
        configs: Mapping[str, MockModelConfig],
        truth: Mapping[str, Mapping[str, int]] | TruthSource,
        *,
        embedding_dim: int = 32,
        embedding_signal: float = 3.0,
        signal_labels: Iterable[str] = (),
        cache: EmbeddingCache | None = None,
    ):
        super().__init__(specs, cache)
        self.configs = dict(configs)
        if callable(truth):
            self._truth = truth
        else:
            table = truth
            self._truth = lambda eid, name: table.get(eid, {}).get(name)
        self.embedding_dim = embedding_dim
        self.embedding_signal = embedding_signal
        self.signal_labels = list(signal_labels)

    def config(self, model: str) -> MockModelConfig:
        return self.configs.get(model, MockModelConfig())

    def truth(self, email_id: str, label: str) -> int | None:
        return self._truth(email_id, label)

    def _generate(self, spec: ModelSpec, email: Email, label: LabelDef) -> GenerationResult:
        cfg = self.config(spec.name)
        u_agree, u_conf, u_wrong, _ = hash_uniforms(cfg.seed, email.id, label.name, spec.name)
        truth = self.truth(email.id, label.name)
        if truth is None:
            # No recorded baseline: draw one from the email identity alone.
            truth = label.classes[int(hash_uniforms("truth", email.id, label.name, n=1)[0] * len(label.classes))]
        if u_agree < cfg.agreement_for(label.name):
            value, conf = truth, cfg.confidence_when_correct.sample(u_conf)
        else:
            others = [c for c in label.classes if c != truth]
            value = others[int(u_wrong * len(others))]
            conf = cfg.confidence_when_wrong.sample(u_conf)
        usage = cfg.usage_profile or TokenUsage(email.token_count_estimate + DEFAULT_PROMPT_TOKENS, 1)
        return GenerationResult(LabelValue(label.name, value), (math.log(conf),), usage)

    def _embed(self, spec: ModelSpec, email: Email) -> tuple[np.ndarray, TokenUsage]:
        cfg = self.config(spec.name)
        rng = np.random.default_rng(hash_seed(cfg.seed, spec.name, email.id))
        vec = rng.standard_normal(self.embedding_dim)
        for name in self.signal_labels:
            t = self.truth(email.id, name)
            if t is None:
                continue
            direction = np.random.default_rng(hash_seed(cfg.seed, spec.name, "dir", name)).standard_normal(
                self.embedding_dim
            )
            direction /= np.linalg.norm(direction)
            vec += self.embedding_signal * (2 * t - 1) * direction
        return vec, self.embedding_usage(spec.name, email)

    def embedding_usage(self, model: str, email: Email) -> TokenUsage:
        cfg = self.config(model)
        return cfg.usage_profile or TokenUsage(email.token_count_estimate, 0)


# -- HTTP backend -------------------------------------------------------------

PROMPT_TEMPLATE = (
    "You label emails for importance.\n"
    "Label: {label}\n"
    "Allowed values: {classes}\n"
    "Answer with a single integer.\n\n"
    "Subject: {subject}\n\n{body}"
)


def render_prompt(email: Email, label: LabelDef) -> str:
    return PROMPT_TEMPLATE.format(
        label=label.name,
        classes=", ".join(str(c) for c in label.classes),
        subject=email.subject,
        body=email.body,
    )


class HttpBackend(Backend):
    """Chat-completions style JSON client. Three attempts per request, then BackendUnavailable."""

    ATTEMPTS = 3

    def __init__(
        self,
        specs: Iterable[ModelSpec],
        endpoint: str,
        *,
        api_key: str | None = None,
        api_key_env: str = "MAILCASCADE_API_KEY",
        timeout: float = 30.0,
        client=None,
        cache: EmbeddingCache | None = None,
    ):
        import httpx

        super().__init__(specs, cache)
        self.endpoint = endpoint.rstrip("/")
        key = api_key if api_key is not None else os.environ.get(api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)
        self._httpx = httpx

    def _post(self, path: str, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(1, self.ATTEMPTS + 1):
            try:
                resp = self.client.post(f"{self.endpoint}{path}", json=payload)
                if resp.status_code >= 500:
                    raise self._httpx.HTTPStatusError("server error", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()
            except (self._httpx.HTTPError, ValueError) as exc:
                last = exc
                logger.warning("POST %s attempt %d/%d failed: %s", path, attempt, self.ATTEMPTS, exc)
        raise BackendUnavailable(f"{path}: {last}")

    def _generate(self, spec: ModelSpec, email: Email, label: LabelDef) -> GenerationResult:
        prompt = render_prompt(email, label)
        body = self._post(
            "/chat/completions",
            {
                "model": spec.name,
                "messages": [{"role": "user", "content": prompt}],
                "logprobs": True,
                "temperature": 0,
                "max_tokens": 4,
            },
        )
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"].strip()
            logprobs = tuple(float(t["logprob"]) for t in choice["logprobs"]["content"])
        except (KeyError, IndexError, TypeError, AttributeError) as exc:
            raise BackendUnavailable(f"unexpected response shape: {exc}") from None
        usage_blob = body.get("usage") or {}
        usage = TokenUsage(
            int(usage_blob.get("prompt_tokens", estimate_tokens(prompt))),
            int(usage_blob.get("completion_tokens", estimate_tokens(text))),
        )
        try:
            value = int(text)
        except ValueError:
            raise MalformedOutput(f"{spec.name!r} answered {text!r}", usage) from None
        if not logprobs:
            raise MalformedOutput(f"{spec.name!r} returned no logprobs", usage)
        logprobs = tuple(min(lp, 0.0) for lp in logprobs)
        return GenerationResult(LabelValue(label.name, value), logprobs, usage)

    def _embed(self, spec: ModelSpec, email: Email) -> tuple[np.ndarray, TokenUsage]:
        body = self._post("/embeddings", {"model": spec.name, "input": email.text})
        try:
            vec = np.array(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"unexpected response shape: {exc}") from None
        tokens = (body.get("usage") or {}).get("prompt_tokens", email.token_count_estimate)
        return vec, TokenUsage(int(tokens), 0)


# -- replay backend -----------------------------------------------------------


@dataclass(frozen=True)
class SoloOutput:
    """One model's answer for one (email, label); ``value`` is None when the answer was malformed."""

    value: int | None
    token_logprobs: tuple[float, ...]
    confidence: float
    cost: int
    usage: TokenUsage


class ReplayBackend(Backend):
    """Serves previously captured outputs without touching a real backend.

    ``outputs`` maps (model, email id, label) to a :class:`SoloOutput`;
    ``embeddings`` maps (model, email id) to a vector. A miss raises
    BackendUnavailable, which makes accidental live calls visible.
    """

    def __init__(
        self,
        specs: Iterable[ModelSpec],
        outputs: Mapping[tuple[str, str, str], SoloOutput],
        embeddings: Mapping[tuple[str, str], np.ndarray] | None = None,
        embedding_usage: Mapping[tuple[str, str], TokenUsage] | None = None,
    ):
        super().__init__(specs)
        self.outputs = outputs
        self.embeddings = embeddings or {}
        self._embedding_usage = embedding_usage or {}

    def _generate(self, spec: ModelSpec, email: Email, label: LabelDef) -> GenerationResult:
        try:
            out = self.outputs[(spec.name, email.id, label.name)]
        except KeyError:
            raise BackendUnavailable(f"no recorded output for {spec.name}/{email.id}/{label.name}") from None
        if out.value is None:
            raise MalformedOutput(f"recorded malformed output for {spec.name}/{email.id}/{label.name}", out.usage)
        return GenerationResult(LabelValue(label.name, out.value), out.token_logprobs, out.usage)

    def _embed(self, spec: ModelSpec, email: Email) -> tuple[np.ndarray, TokenUsage]:
        try:
            vec = self.embeddings[(spec.name, email.id)]
        except KeyError:
            raise BackendUnavailable(f"no recorded embedding for {spec.name}/{email.id}") from None
        return vec, self.embedding_usage(spec.name, email)

    def embedding_usage(self, model: str, email: Email) -> TokenUsage:
        return self._embedding_usage.get((model, email.id), TokenUsage(email.token_count_estimate, 0))
