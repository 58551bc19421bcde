"""Attribute schemas and the mapping from raw example attributes to control-prefix ids."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

OOV = "<oov>"
RATIO_BIN_WIDTH = 0.05
RATIO_CAP = 2.0
N_RATIO_BINS = 41
OOV_RATE = 0.02
MAX_ATTRIBUTES = 4


class GuidanceError(ValueError):
    pass


def discretize_ratio(ratio: float) -> int:
    """Bin a length ratio into 0.05-wide bins, capping the ratio at 2 (bins 0..40)."""
    if not isinstance(ratio, (int, float)) or isinstance(ratio, bool) or not math.isfinite(ratio):
        raise GuidanceError(f"ratio must be a finite number, got {ratio!r}")
    if ratio < 0:
        raise GuidanceError(f"ratio must be non-negative, got {ratio}")
    # multiply rather than divide by 0.05: 0.15 / 0.05 == 2.9999999999999996
    idx = math.floor(min(ratio, RATIO_CAP) * 20 + 1e-9)
    return max(0, min(idx, N_RATIO_BINS - 1))


@dataclass(frozen=True)
class Attribute:
    name: str
    labels: tuple[str, ...]
    rho_c: int = 1
    oov: bool = True
    ratio: bool = False

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"attribute {self.name!r} has duplicate labels")
        if OOV in self.labels:
            raise ValueError(f"{OOV!r} is reserved")
        if self.rho_c < 1:
            raise ValueError(f"attribute {self.name!r}: rho_c must be >= 1")

    @classmethod
    def length_ratio(cls, name: str = "len_ratio", rho_c: int = 1, oov: bool = False) -> "Attribute":
        return cls(name, tuple(str(i) for i in range(N_RATIO_BINS)), rho_c, oov, ratio=True)

    @property
    def oov_id(self) -> int:
        return len(self.labels)

    @property
    def all_labels(self) -> tuple[str, ...]:
        """Labels including the OOV slot, in id order."""
        return self.labels + (OOV,)

    def label_id(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise GuidanceError(f"label {label!r} not in attribute {self.name!r}") from None

    def to_dict(self) -> dict:
        return {"name": self.name, "labels": list(self.labels), "rho_c": self.rho_c,
                "oov": self.oov, "ratio": self.ratio}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Attribute":
        return cls(d["name"], tuple(d["labels"]), int(d["rho_c"]), bool(d["oov"]), bool(d.get("ratio", False)))


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...] = ()

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names")
        if len(names) > MAX_ATTRIBUTES:
            raise ValueError(f"at most {MAX_ATTRIBUTES} attributes are supported")

    def __iter__(self):
        return iter(self.attributes)

    def __len__(self) -> int:
        return len(self.attributes)

    def __getitem__(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def rho_c_total(self) -> int:
        return sum(a.rho_c for a in self.attributes)

    def to_dict(self) -> dict:
        return {"attributes": [a.to_dict() for a in self.attributes]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttributeSchema":
        return cls(tuple(Attribute.from_dict(a) for a in d.get("attributes", [])))


@dataclass(frozen=True)
class Guidance:
    """(attribute, label) pairs in schema declaration order; labels may be ``OOV``."""

    pairs: tuple[tuple[str, str], ...] = ()

    def label_ids(self, schema: AttributeSchema) -> tuple[int, ...]:
        if tuple(a for a, _ in self.pairs) != schema.names:
            raise GuidanceError(f"guidance attributes {[a for a, _ in self.pairs]} != schema {list(schema.names)}")
        ids = []
        for attr, (_, label) in zip(schema.attributes, self.pairs):
            ids.append(attr.oov_id if label == OOV else attr.label_id(label))
        return tuple(ids)


# ------------------------------------------------------------ embedding fixture

_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_label(label: str) -> list[str]:
    """``"MeanOfTransportation"`` -> ``["mean", "of", "transportation"]``."""
    return [w.lower() for w in _CAMEL.findall(label)] or [label.lower()]


@dataclass
class EmbeddingFixture:
    """Label -> vector lookup standing in for pretrained word vectors."""

    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"fixture vectors have mixed shapes {sorted(dims)}")
        for k, v in self.vectors.items():
            if not np.linalg.norm(v) > 0:
                raise ValueError(f"fixture vector for {k!r} has zero norm")

    def __contains__(self, label: str) -> bool:
        return label in self.vectors

    def __getitem__(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise GuidanceError(f"label {label!r} missing from embedding fixture") from None

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingFixture":
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    label, vec = line.split("\t", 1)
                    vectors[label] = np.array([float(x) for x in vec.split()], dtype=np.float64)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad fixture record ({exc})") from None
        return cls(vectors)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for label, vec in self.vectors.items():
                fh.write(label + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")

    @classmethod
    def from_words(cls, labels: Iterable[str], words: "EmbeddingFixture") -> "EmbeddingFixture":
        """Embed each label as the mean vector of its (camel-case split) words."""
        out = {}
        for label in labels:
            parts = [w for w in split_label(label) if w in words]
            if not parts:
                raise GuidanceError(f"no word of label {label!r} is in the word vectors")
            out[label] = np.mean([words[w] for w in parts], axis=0)
        return cls(out)


def default_fixture_path() -> Path:
    return Path(__file__).with_name("data") / "label_words.tsv"


def default_fixture(labels: Iterable[str]) -> EmbeddingFixture:
    return EmbeddingFixture.from_words(labels, EmbeddingFixture.load(default_fixture_path()))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise GuidanceError("zero-norm vector")
    return float(a @ b / (na * nb))


def zero_shot_map(unseen: str, seen: Sequence[str], fixture: EmbeddingFixture) -> str:
    """The seen label with the highest cosine similarity to ``unseen`` (ties: lexicographic)."""
    if not seen:
        raise GuidanceError("no seen labels to map onto")
    v = fixture[unseen]
    best, best_sim = None, -math.inf
    for label in sorted(seen):
        sim = cosine(v, fixture[label])
        if sim > best_sim:
            best, best_sim = label, sim
    return best


# -------------------------------------------------------------------- resolver

class GuidanceResolver:
    """Turns raw ``attrs`` dicts into per-attribute label ids.

    In ``train`` mode each attribute with OOV enabled is independently replaced
    by its OOV id with probability ``oov_rate``.  In ``infer`` mode unknown labels
    go through zero-shot mapping when a fixture is given, otherwise to the OOV
    prefix when ``use_oov`` is set (and the attribute has one).
    """

    def __init__(
        self,
        schema: AttributeSchema,
        fixture: EmbeddingFixture | None = None,
        use_oov: bool = True,
        oov_rate: float = OOV_RATE,
    ):
        self.schema = schema
        self.fixture = fixture
        self.use_oov = use_oov
        self.oov_rate = oov_rate
        self.mappings: dict[tuple[str, str], str] = {}

    def label_of(self, attr: Attribute, value) -> str:
        if attr.ratio:
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    raise GuidanceError(f"attribute {attr.name!r} expects a ratio, got {value!r}") from None
            return str(discretize_ratio(value))
        return str(value)

    def resolve(self, attrs: Mapping, mode: str = "infer", rng: np.random.Generator | None = None) -> list[int]:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        ids = []
        for attr in self.schema:
            if attr.name not in attrs:
                raise GuidanceError(f"example lacks attribute {attr.name!r}")
            label = self.label_of(attr, attrs[attr.name])
            if mode == "train":
                idx = attr.oov_id if label == OOV else attr.label_id(label)
                if attr.oov and rng is not None and rng.random() < self.oov_rate:
                    idx = attr.oov_id
                ids.append(idx)
                continue
            if label in attr.labels:
                ids.append(attr.label_id(label))
            elif label == OOV and attr.oov:
                ids.append(attr.oov_id)
            elif self.fixture is not None:
                mapped = zero_shot_map(label, attr.labels, self.fixture)
                self.mappings[(attr.name, label)] = mapped
                ids.append(attr.label_id(mapped))
            elif self.use_oov and attr.oov:
                ids.append(attr.oov_id)
            else:
                raise GuidanceError(f"unknown label {label!r} for attribute {attr.name!r}")
        return ids

    def guidance(self, attrs: Mapping, mode: str = "infer", rng: np.random.Generator | None = None) -> Guidance:
        ids = self.resolve(attrs, mode, rng)
        return Guidance(tuple((a.name, a.all_labels[i]) for a, i in zip(self.schema, ids)))
