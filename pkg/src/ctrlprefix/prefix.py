"""General and control prefixes: storage, per-example selection, accounting and export."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .guidance import AttributeSchema, Guidance
from .reparam import ClassExpander, expand
from .tensor import Parameter, Tensor
from .transformer import ATTENTION_CLASSES, AttentionClass, ModelConfig, PrefixKV


@dataclass(frozen=True)
class PrefixConfig:
    rho: int = 2
    k: int = 800
    init_std: float = 0.02
    shared_expanders: bool = True

    def __post_init__(self):
        if self.rho < 0 or self.k < 1:
            raise ValueError("rho must be >= 0 and k >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _cls(c) -> AttentionClass:
    return AttentionClass(c)


class PrefixBank:
    """Prefixes for the three attention classes, compact (``rho x d``) or folded (``rho x 2dL``).

    Control prefixes exist for every label of every attribute plus one OOV
    entry per attribute.  Rows for one example are ordered
    ``[C(attr_k), ..., C(attr_1), P]`` so the general prefix sits next to the
    sequence keys.
    """

    classes = ATTENTION_CLASSES

    def __init__(self, schema: AttributeSchema, d: int, layers: int, rho: int, folded: bool):
        self.schema = schema
        self.d, self.layers, self.rho = d, layers, rho
        self.folded = folded
        self.general: dict[AttentionClass, Parameter] = {}
        self.controls: dict[str, dict[str, dict[AttentionClass, Parameter]]] = {}
        self._shared: dict[AttentionClass, ClassExpander] = {}
        self._own: dict[tuple[str, str, AttentionClass], ClassExpander] = {}
        self._layout()

    # ------------------------------------------------------------ construction

    @classmethod
    def create(
        cls,
        schema: AttributeSchema,
        model: ModelConfig,
        config: PrefixConfig,
        rng: np.random.Generator,
    ) -> "PrefixBank":
        d, layers = model.d, model.layers
        bank = cls(schema, d, layers, config.rho, folded=False)
        for c in cls.classes:
            bank.general[c] = Parameter(rng.normal(0.0, config.init_std, (config.rho, d)), f"prefix.general.{c.value}")
        for attr in schema:
            bank.controls[attr.name] = {
                label: {c: Parameter(rng.normal(0.0, config.init_std, (attr.rho_c, d)),
                                     f"prefix.control.{attr.name}.{label}.{c.value}")
                        for c in cls.classes}
                for label in attr.all_labels
            }
        for c in cls.classes:
            bank._shared[c] = ClassExpander(c, d, config.k, layers, rng, f"reparam.{c.value}")
        if not config.shared_expanders:
            for attr in schema:
                for label in attr.all_labels:
                    for c in cls.classes:
                        bank._own[(attr.name, label, c)] = bank._shared[c].clone(
                            f"reparam.{attr.name}.{label}.{c.value}")
        return bank

    @classmethod
    def from_arrays(
        cls,
        schema: AttributeSchema,
        d: int,
        layers: int,
        rho: int,
        general: Mapping,
        controls: Mapping,
        folded: bool,
    ) -> "PrefixBank":
        bank = cls(schema, d, layers, rho, folded)
        for c, arr in general.items():
            c = _cls(c)
            bank.general[c] = Parameter(arr, f"prefix.general.{c.value}")
        for attr in schema:
            bank.controls[attr.name] = {
                label: {_cls(c): Parameter(arr, f"prefix.control.{attr.name}.{label}.{_cls(c).value}")
                        for c, arr in controls[attr.name][label].items()}
                for label in attr.all_labels
            }
        return bank

    def set_expanders(self, shared: Mapping, own: Mapping | None = None) -> None:
        self._shared = {_cls(c): e for c, e in shared.items()}
        self._own = dict(own or {})

    def clone_expander_for(self, attr: str, label: str, cls: AttentionClass) -> ClassExpander:
        """Give one control prefix its own copy of the class expander (used by sharing checks)."""
        exp = self._shared[cls].clone(f"reparam.{attr}.{label}.{cls.value}")
        self._own[(attr, label, cls)] = exp
        return exp

    def _layout(self) -> None:
        # row offsets of every prefix inside the per-class row table
        self._offset: dict[tuple[str, int], int] = {}
        row = self.rho
        for attr in self.schema:
            for i in range(len(attr.all_labels)):
                self._offset[(attr.name, i)] = row
                row += attr.rho_c
        self.n_rows = row

    # ------------------------------------------------------------------ access

    @property
    def rho_total(self) -> int:
        return self.rho + self.schema.rho_c_total

    @property
    def shared_expanders(self) -> bool:
        return not self._own

    def expander_for(self, attr: str | None, label: str | None, cls: AttentionClass) -> ClassExpander:
        if self.folded:
            raise ValueError("folded banks have no expanders")
        return self._own.get((attr, label, _cls(cls)), self._shared[_cls(cls)])

    @property
    def expanders(self) -> list[ClassExpander]:
        if self.folded:
            return []
        return list(self._shared.values()) + list(self._own.values())

    def prefix_parameters(self) -> list[Parameter]:
        out = [self.general[c] for c in self.classes]
        for labels in self.controls.values():
            for per_cls in labels.values():
                out.extend(per_cls[c] for c in self.classes)
        return out

    def parameters(self) -> list[Parameter]:
        out = self.prefix_parameters()
        for e in self.expanders:
            out.extend(e.parameters)
        return out

    def row_table(self, cls: AttentionClass) -> Tensor:
        """All prefix rows of one class in expanded form: (n_rows, 2dL)."""
        cls = _cls(cls)
        blocks: list[Tensor] = [self.general[cls]]
        owners: list[tuple[str | None, str | None]] = [(None, None)]
        for attr in self.schema:
            for label in attr.all_labels:
                blocks.append(self.controls[attr.name][label][cls])
                owners.append((attr.name, label))
        if self.folded:
            return T.concat(blocks, axis=0)
        if self.shared_expanders:
            return expand(T.concat(blocks, axis=0), self._shared[cls])
        return T.concat([expand(b, self.expander_for(a, lab, cls)) for b, (a, lab) in zip(blocks, owners)], axis=0)

    def row_index(self, label_ids: Sequence[Sequence[int]]) -> np.ndarray:
        """(B, rho_total) table rows for per-example label ids (schema order)."""
        n_attr = len(self.schema)
        out = np.empty((len(label_ids), self.rho_total), dtype=np.int64)
        general = np.arange(self.rho)
        for b, ids in enumerate(label_ids):
            if len(ids) != n_attr:
                raise ValueError(f"expected {n_attr} label ids, got {len(ids)}")
            parts = []
            for attr, i in reversed(list(zip(self.schema, ids))):
                if not 0 <= i < len(attr.all_labels):
                    raise ValueError(f"label id {i} out of range for {attr.name!r}")
                start = self._offset[(attr.name, i)]
                parts.append(np.arange(start, start + attr.rho_c))
            parts.append(general)
            out[b] = np.concatenate(parts) if parts else general
        return out

    def materialize_batch(self, label_ids: Sequence[Sequence[int]]) -> PrefixKV:
        """Prefix keys/values for every (class, layer), each (B, rho_total, d)."""
        if self.rho_total == 0:
            return {}
        idx = self.row_index(label_ids)
        d = self.d
        out = {}
        for c in self.classes:
            rows = T.take_rows(self.row_table(c), idx)
            for layer in range(self.layers):
                base = 2 * d * layer
                out[(c, layer)] = (rows[:, :, base:base + d], rows[:, :, base + d:base + 2 * d])
        return out

    def materialize(self, guidance: Guidance, cls: AttentionClass, layer: int) -> tuple[Tensor, Tensor]:
        """(prefix_K, prefix_V) for one example, each (rho_total, d)."""
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer {layer} out of range")
        idx = self.row_index([guidance.label_ids(self.schema)])[0]
        rows = T.take_rows(self.row_table(cls), idx)
        base = 2 * self.d * layer
        return rows[:, base:base + self.d], rows[:, base + self.d:base + 2 * self.d]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}


# ---------------------------------------------------------------- accounting

def expander_size(d: int, k: int, layers: int) -> int:
    return d * k + k + k * 2 * d * layers + 2 * d * layers


def param_count(schema: AttributeSchema, model: ModelConfig, config: PrefixConfig) -> dict[str, int]:
    """Closed-form parameter counts.

    ``trainable_compact`` = compact prefixes + expanders (what is optimised);
    ``inference_expanded`` = folded prefixes kept for inference.  OOV slots count
    as labels.
    """
    d, layers, rho = model.d, model.layers, config.rho
    n_controls = sum(len(a.all_labels) for a in schema)
    control_rows = sum(len(a.all_labels) * a.rho_c for a in schema)
    n_expanders = 3 * (1 if config.shared_expanders else 1 + n_controls)
    counts = {
        "general_compact": 3 * rho * d,
        "control_compact": 3 * control_rows * d,
        "expanders": n_expanders * expander_size(d, config.k, layers),
        "general_expanded": rho * 6 * d * layers,
        "control_expanded": control_rows * 6 * d * layers,
    }
    counts["trainable_compact"] = counts["general_compact"] + counts["control_compact"] + counts["expanders"]
    counts["inference_expanded"] = counts["general_expanded"] + counts["control_expanded"]
    return counts


# -------------------------------------------------------------------- export

def pca_2d(rows: np.ndarray) -> np.ndarray:
    """Project rows onto their top two principal axes (sign fixed by the largest loading)."""
    x = np.asarray(rows, dtype=np.float64)
    out = np.zeros((x.shape[0], 2))
    if x.shape[0] < 2:
        return out
    xc = x - x.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    # project each distinct row once so duplicate rows land on bit-identical points
    uniq, inverse = np.unique(xc, axis=0, return_inverse=True)
    for j in range(min(2, vt.shape[0])):
        if s[j] <= 1e-12 * max(s[0], 1e-300):
            continue
        axis = vt[j]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        out[:, j] = (uniq @ axis)[inverse.reshape(-1)]
    return out


def export_rows(
    bank: PrefixBank,
    attribute: str,
    cls: AttentionClass | str,
    include_oov: bool = False,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Flattened control prefixes of one attribute/class, one row per label, plus a 2-D PCA projection."""
    if not bank.folded:
        raise ValueError("export_rows needs a folded bank")
    try:
        cls = _cls(cls)
    except ValueError:
        raise ValueError(f"unknown attention class {cls!r}") from None
    if attribute not in bank.controls:
        raise ValueError(f"unknown attribute {attribute!r}")
    attr = bank.schema[attribute]
    labels = list(attr.all_labels if include_oov else attr.labels)
    rows = np.stack([bank.controls[attribute][lab][cls].data.reshape(-1) for lab in labels])
    return labels, rows, pca_2d(rows)


def write_export(labels: Iterable[str], rows: np.ndarray, proj: np.ndarray, out_dir: str | Path,
                 stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = list(labels)
    rows_path, pca_path = out_dir / f"{stem}_rows.csv", out_dir / f"{stem}_pca.csv"
    with open(rows_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"dim_{i}" for i in range(rows.shape[1])])
        for lab, r in zip(labels, rows):
            w.writerow([lab] + [repr(float(x)) for x in r])
    with open(pca_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "x", "y"])
        for lab, (x, y) in zip(labels, proj):
            w.writerow([lab, repr(float(x)), repr(float(y))])
    return rows_path, pca_path


def write_svg(labels: Iterable[str], proj: np.ndarray, path: str | Path, size: int = 480) -> Path:
    """Plain scatter plot with a text label next to every point."""
    labels = list(labels)
    pad = 40
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = pad + (proj - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for lab, (x, y) in zip(labels, pts):
        y = size - y
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="10">{_escape(lab)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    return Path(path)


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")

