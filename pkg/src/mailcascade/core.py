"""Domain types shared across the package: emails, label schemas, models, costs.

Currency is carried as integer micro-units (``int``) so that cost comparisons
are exact. Prices on :class:`ModelSpec` are micro-units per token.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence


class MailCascadeError(Exception):
    """Base class for all package errors."""


class SchemaError(MailCascadeError):
    pass


class DatasetError(MailCascadeError):
    pass


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class Email:
    id: str
    subject: str
    body: str
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.body is None:
            raise DatasetError(f"email {self.id!r} has no body")

    @property
    def text(self) -> str:
        return f"{self.subject}\n\n{self.body}" if self.subject else self.body

    @property
    def token_count_estimate(self) -> int:
        if not self.subject and not self.body:
            return 0
        return max(1, estimate_tokens(self.subject) + estimate_tokens(self.body))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "subject": self.subject,
            "body": self.body,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Email:
        try:
            return cls(
                id=str(d["id"]),
                subject=str(d.get("subject", "")),
                body=str(d["body"]),
                metadata={str(k): str(v) for k, v in (d.get("metadata") or {}).items()},
            )
        except KeyError as exc:
            raise DatasetError(f"email record missing field {exc}") from None


class Arity(enum.Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"


@dataclass(frozen=True)
class LabelDef:
    name: str
    arity: Arity = Arity.BINARY
    classes: tuple[int, ...] = (0, 1)

    def __post_init__(self) -> None:
        if self.arity is Arity.BINARY and tuple(self.classes) != (0, 1):
            raise SchemaError(f"binary label {self.name!r} must have classes (0, 1)")
        if self.arity is Arity.MULTICLASS and len(self.classes) < 3:
            raise SchemaError(f"multiclass label {self.name!r} needs at least 3 classes")
        if len(set(self.classes)) != len(self.classes):
            raise SchemaError(f"label {self.name!r} has duplicate classes")

    @property
    def is_binary(self) -> bool:
        return self.arity is Arity.BINARY

    @classmethod
    def binary(cls, name: str) -> LabelDef:
        return cls(name, Arity.BINARY, (0, 1))

    @classmethod
    def multiclass(cls, name: str, classes: Iterable[int]) -> LabelDef:
        return cls(name, Arity.MULTICLASS, tuple(classes))

    def to_dict(self) -> dict:
        return {"name": self.name, "arity": self.arity.value, "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: Mapping) -> LabelDef:
        return cls(d["name"], Arity(d.get("arity", "binary")), tuple(d.get("classes", (0, 1))))


@dataclass(frozen=True)
class LabelSchema:
    labels: tuple[LabelDef, ...]

    def __post_init__(self) -> None:
        names = [lab.name for lab in self.labels]
        if len(set(names)) != len(names):
            raise SchemaError("label names must be unique")

    @classmethod
    def default(cls) -> LabelSchema:
        return cls(
            (
                LabelDef.multiclass("Priority", range(1, 6)),
                LabelDef.binary("NeedsReply"),
                LabelDef.binary("IsUrgent"),
                LabelDef.binary("NeedsAction"),
                LabelDef.binary("NeedsScheduling"),
            )
        )

    @property
    def names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    @property
    def binary_labels(self) -> list[LabelDef]:
        return [lab for lab in self.labels if lab.is_binary]

    def __getitem__(self, name: str) -> LabelDef:
        for lab in self.labels:
            if lab.name == name:
                return lab
        raise KeyError(name)

    def __iter__(self) -> Iterator[LabelDef]:
        return iter(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_list(self) -> list[dict]:
        return [lab.to_dict() for lab in self.labels]

    @classmethod
    def from_list(cls, items: Sequence[Mapping]) -> LabelSchema:
        return cls(tuple(LabelDef.from_dict(d) for d in items))


@dataclass(frozen=True)
class LabelValue:
    label_name: str
    value: int

    def check(self, label: LabelDef) -> None:
        if self.value not in label.classes:
            raise SchemaError(f"{self.value} is not a class of {label.name!r}")


class ModelKind(enum.Enum):
    GENERATIVE = "generative"
    EMBEDDING = "embedding"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: ModelKind
    price_in: int
    price_out: int
    size_rank: int
    family: str = ""

    def __post_init__(self) -> None:
        if self.price_in < 0 or self.price_out < 0:
            raise SchemaError(f"model {self.name!r} has a negative price")
        if self.size_rank < 1:
            raise SchemaError(f"model {self.name!r} needs a positive size_rank")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "price_in": self.price_in,
            "price_out": self.price_out,
            "size_rank": self.size_rank,
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        return cls(
            name=d["name"],
            kind=ModelKind(d.get("kind", "generative")),
            price_in=int(d["price_in"]),
            price_out=int(d["price_out"]),
            size_rank=int(d["size_rank"]),
            family=d.get("family", ""),
        )


def check_pool(specs: Iterable[ModelSpec]) -> None:
    ranks = [s.size_rank for s in specs]
    if len(set(ranks)) != len(ranks):
        raise SchemaError("size_rank must be unique within a model pool")


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens


def request_cost(spec: ModelSpec, usage: TokenUsage) -> int:
    """Billed cost of one request, in micro-units."""
    return spec.price_in * usage.input_tokens + spec.price_out * usage.output_tokens


def blended_price(spec: ModelSpec) -> float:
    """Per-token price under a 3:1 input:output token mix.

    Reporting only; billing always goes through :func:`request_cost`.
    """
    return (3 * spec.price_in + spec.price_out) / 4


def blended_cost(spec: ModelSpec, usage: TokenUsage) -> float:
    return blended_price(spec) * usage.total


# -- dataset IO ---------------------------------------------------------------

_CSV_CORE = ("id", "subject", "body")


def read_emails(path: str | Path) -> list[Email]:
    """Load emails from ``.jsonl`` or ``.csv``; ids must be unique."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        emails = _read_csv(path)
    else:
        emails = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    emails.append(Email.from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: {exc}") from None
    seen: set[str] = set()
    for e in emails:
        if e.id in seen:
            raise DatasetError(f"duplicate email id {e.id!r} in {path}")
        seen.add(e.id)
    return emails


def _read_csv(path: Path) -> list[Email]:
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("id", "body") if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}")
        out = []
        for row in reader:
            meta = {k: v for k, v in row.items() if k not in _CSV_CORE}
            out.append(Email(row["id"], row.get("subject") or "", row["body"] or "", meta))
        return out


def write_emails(path: str | Path, emails: Iterable[Email]) -> None:
    path = Path(path)
    emails = list(emails)
    if path.suffix.lower() == ".csv":
        meta_keys = sorted({k for e in emails for k in e.metadata})
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*_CSV_CORE, *meta_keys])
            for e in emails:
                w.writerow([e.id, e.subject, e.body, *(e.metadata.get(k, "") for k in meta_keys)])
        return
    with path.open("w", encoding="utf-8") as fh:
        for e in emails:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


# Labels keyed by email id, then label name.
Labels = dict[str, dict[str, int]]


def read_labels(path: str | Path) -> Labels:
    out: Labels = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(str(rec["email_id"]), {})[rec["label_name"]] = int(rec["value"])
    return out


def write_labels(path: str | Path, labels: Labels, schema: LabelSchema | None = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for email_id, by_label in labels.items():
            names = schema.names if schema else list(by_label)
            for name in names:
                if name in by_label:
                    rec = {"email_id": email_id, "label_name": name, "value": by_label[name]}
                    fh.write(json.dumps(rec) + "\n")
