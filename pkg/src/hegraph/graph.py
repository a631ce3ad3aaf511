"""Typed class-level graph over positive-text, negative-text and visual
embeddings: node initialization (prompt fusion, class means) and the six
relation matrices with their sign conventions and degree vectors.

Construction is deterministic and pure; a built HeteroGraph is frozen and its
arrays are marked read-only, so it may be shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyClassError,
    InvariantError,
    NonUnitRowError,
    ZeroRowError,
)
from .tensor import as_matrix, check_finite, row_l2_normalize, row_norms

# Relation keys, named destination-last: "p->n" flows positive -> negative.
RELATION_KINDS = ("n->p", "v->p", "p->p", "p->n", "v->n", "v->v")

# Relations that require negative text nodes to exist.
NEGATIVE_KINDS = ("n->p", "p->n", "v->n")

UNIT_ROW_TOL = 1e-4


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClassManifest:
    """Task shape: ordered class names, positive prompts per class, shots per class."""

    class_names: tuple[str, ...]
    positive_prompt_counts: tuple[int, ...]
    shot_count: int

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise InvariantError("need at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise InvariantError("class names must be unique")
        if len(self.positive_prompt_counts) != len(self.class_names):
            raise InvariantError("one prompt count per class required")
        if any(c < 1 for c in self.positive_prompt_counts):
            raise EmptyClassError("every class needs at least one positive prompt")
        if self.shot_count < 1:
            raise InvariantError("shot count must be >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class RelationMatrix:
    """One typed edge family: dense C x C weights plus absolute-degree vectors.

    Row index is the destination node, column index the source node.
    dest_degrees[i] = sum_j |w[i, j]|, src_degrees[j] = sum_i |w[i, j]|.
    """

    kind: str
    weights: np.ndarray
    dest_degrees: np.ndarray = field(repr=False)
    src_degrees: np.ndarray = field(repr=False)

    @classmethod
    def from_weights(cls, kind: str, weights: np.ndarray) -> "RelationMatrix":
        if kind not in RELATION_KINDS:
            raise InvariantError(f"unknown relation kind {kind!r}")
        w = np.asarray(weights)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimMismatchError(f"relation weights must be square, got {w.shape}")
        a = np.abs(w)
        return cls(
            kind=kind,
            weights=_readonly(w),
            dest_degrees=_readonly(a.sum(axis=1)),
            src_degrees=_readonly(a.sum(axis=0)),
        )

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class HeteroGraph:
    """The full class-level graph plus the per-sample cache feature set.

    xn and the negative relations are None for tasks loaded without negative
    prompts (variants that never touch them).
    """

    xp: np.ndarray
    xn: Optional[np.ndarray]
    xv: np.ndarray
    xcache: np.ndarray
    labels: np.ndarray
    onehot: np.ndarray
    relations: dict[str, RelationMatrix]

    @property
    def num_classes(self) -> int:
        return self.xp.shape[0]

    @property
    def dim(self) -> int:
        return self.xp.shape[1]

    @property
    def num_cache(self) -> int:
        return self.xcache.shape[0]

    @property
    def shots(self) -> int:
        return self.num_cache // self.num_classes

    @property
    def has_negatives(self) -> bool:
        return self.xn is not None

    def astype(self, dtype) -> "HeteroGraph":
        """Cast all float arrays (used by the float64 verification harness)."""
        relations = {
            k: RelationMatrix.from_weights(k, r.weights.astype(dtype))
            for k, r in self.relations.items()
        }
        return replace(
            self,
            xp=_readonly(self.xp.astype(dtype)),
            xn=None if self.xn is None else _readonly(self.xn.astype(dtype)),
            xv=_readonly(self.xv.astype(dtype)),
            xcache=_readonly(self.xcache.astype(dtype)),
            onehot=_readonly(self.onehot.astype(dtype)),
            relations=relations,
        )

    def validate(self) -> "HeteroGraph":
        """Check every structural invariant; raises InvariantError on violation."""
        c, d = self.xp.shape
        if c < 1 or d < 1:
            raise InvariantError("graph must have at least one class and one dim")
        node_sets = {"xp": self.xp, "xv": self.xv, "xcache": self.xcache}
        if self.xn is not None:
            node_sets["xn"] = self.xn
        for name, m in node_sets.items():
            check_finite(m, name)
            if m.shape[1] != d:
                raise InvariantError(f"{name} dim {m.shape[1]} != {d}")
            if np.max(np.abs(row_norms(m) - 1.0)) > 1e-5:
                raise InvariantError(f"{name} rows are not unit-norm within 1e-5")
        for name in ("xv",) + (("xn",) if self.xn is not None else ()):
            if node_sets[name].shape[0] != c:
                raise InvariantError(f"{name} must have {c} rows")

        s = self.xcache.shape[0]
        if self.labels.shape != (s,):
            raise InvariantError(f"labels shape {self.labels.shape} != ({s},)")
        if self.onehot.shape != (s, c):
            raise InvariantError(f"onehot shape {self.onehot.shape} != ({s}, {c})")
        if np.any(self.labels < 0) or np.any(self.labels >= c):
            raise InvariantError("labels out of range")
        if not np.all(self.onehot.sum(axis=1) == 1.0):
            raise InvariantError("onehot rows must sum to exactly 1")
        if not np.all(self.onehot[np.arange(s), self.labels] == 1.0):
            raise InvariantError("onehot disagrees with labels")
        counts = np.bincount(self.labels, minlength=c)
        if np.any(counts != counts[0]):
            raise InvariantError(f"unbalanced shots per class: {counts.tolist()}")

        expected = set(RELATION_KINDS) if self.xn is not None else (
            set(RELATION_KINDS) - set(NEGATIVE_KINDS)
        )
        if set(self.relations) != expected:
            raise InvariantError(
                f"relation kinds {sorted(self.relations)} != expected {sorted(expected)}"
            )
        for kind, rel in self.relations.items():
            w = rel.weights
            if w.shape != (c, c):
                raise InvariantError(f"{kind} weights shape {w.shape} != ({c}, {c})")
            if np.max(np.abs(w)) > 1.0 + 1e-6:
                raise InvariantError(f"{kind} has weights outside [-1, 1]")
            a = np.abs(w)
            if np.max(np.abs(rel.dest_degrees - a.sum(axis=1))) > 1e-5:
                raise InvariantError(f"{kind} dest_degrees disagree with row sums")
            if np.max(np.abs(rel.src_degrees - a.sum(axis=0))) > 1e-5:
                raise InvariantError(f"{kind} src_degrees disagree with column sums")
        for kind in ("p->p", "v->v"):
            if np.any(np.diag(self.relations[kind].weights) != 0.0):
                raise InvariantError(f"{kind} diagonal must be exactly zero")
        if self.xn is not None:
            np_w = self.relations["n->p"].weights
            if np.any(np_w[~np.eye(c, dtype=bool)] != 0.0):
                raise InvariantError("n->p must be diagonal-only")
        return self


def onehot_labels(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def class_mean_nodes(cache: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class L2-normalized arithmetic mean of the cache rows."""
    cache = np.asarray(cache)
    labels = np.asarray(labels, dtype=np.int64)
    if cache.ndim != 2 or labels.shape != (cache.shape[0],):
        raise DimMismatchError(
            f"cache {cache.shape} and labels {labels.shape} are inconsistent"
        )
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise EmptyClassError(f"class {missing} has no cache samples")
    sums = np.zeros((num_classes, cache.shape[1]), dtype=cache.dtype)
    np.add.at(sums, labels, cache)
    return row_l2_normalize(sums / counts[:, None])


def prompt_nodes(per_class_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Fuse each class's prompt embeddings into one unit-norm node feature.

    Fusion is mean-then-normalize, the same rule used for visual class means.
    Applied identically to positive and negative prompt sets.
    """
    if len(per_class_embeddings) == 0:
        raise EmptyClassError("no classes given")
    rows = []
    dim = None
    for c, block in enumerate(per_class_embeddings):
        m = np.asarray(block)
        if m.ndim == 1:
            m = m[None, :]
        if m.shape[0] == 0:
            raise EmptyClassError(f"class {c} has no prompt embeddings")
        if dim is None:
            dim = m.shape[1]
        elif m.shape[1] != dim:
            raise DimMismatchError(
                f"class {c} prompt dim {m.shape[1]} != {dim}"
            )
        rows.append(m.mean(axis=0))
    return row_l2_normalize(np.stack(rows))


def _require_unit_rows(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimMismatchError(f"{name} must be 2-D, got {m.shape}")
    if np.max(np.abs(row_norms(m) - 1.0)) > UNIT_ROW_TOL:
        raise NonUnitRowError(f"{name} rows must be unit-norm within {UNIT_ROW_TOL:g}")
    return m


def build_relations(
    xp: np.ndarray, xn: Optional[np.ndarray], xv: np.ndarray
) -> dict[str, RelationMatrix]:
    """Compute the six relation matrices (three when xn is None).

    Sign conventions: same-class positive/visual -> negative edges (and the
    diagonal-only negative -> positive edges) carry the flipped cosine
    -cos(x_i, x_i^n); every other edge carries the plain cosine. Rows of
    p->p and v->v have an exactly-zero diagonal because the aggregation's
    explicit self term already injects the node itself.
    """
    xp = _require_unit_rows(xp, "xp")
    xv = _require_unit_rows(xv, "xv")
    c = xp.shape[0]
    if xv.shape != xp.shape:
        raise DimMismatchError(f"xv shape {xv.shape} != xp shape {xp.shape}")

    def cos(a, b):
        # Rows are unit-norm by precondition; clamp rounding excursions.
        return np.clip(a @ b.T, -1.0, 1.0)

    pp = cos(xp, xp)
    np.fill_diagonal(pp, 0.0)
    vv = cos(xv, xv)
    np.fill_diagonal(vv, 0.0)
    vp = cos(xp, xv)  # dest positive i, source visual j; same-class edge kept

    rels = {
        "p->p": RelationMatrix.from_weights("p->p", pp),
        "v->v": RelationMatrix.from_weights("v->v", vv),
        "v->p": RelationMatrix.from_weights("v->p", vp),
    }
    if xn is None:
        return rels

    xn = _require_unit_rows(xn, "xn")
    if xn.shape != xp.shape:
        raise DimMismatchError(f"xn shape {xn.shape} != xp shape {xp.shape}")

    # dest negative i, source positive/visual j: plain cosine off-diagonal,
    # flipped cosine on the same-class diagonal.
    pn = cos(xn, xp)
    vn = cos(xn, xv)
    diag = np.arange(c)
    pn[diag, diag] = -pn[diag, diag]
    vn[diag, diag] = -vn[diag, diag]

    # negative -> positive is diagonal-only (no off-diagonal edges defined).
    npw = np.zeros_like(pp)
    npw[diag, diag] = -np.clip(np.einsum("ij,ij->i", xn, xp), -1.0, 1.0)

    rels["p->n"] = RelationMatrix.from_weights("p->n", pn)
    rels["v->n"] = RelationMatrix.from_weights("v->n", vn)
    rels["n->p"] = RelationMatrix.from_weights("n->p", npw)
    return rels


def build_graph(
    xp: np.ndarray,
    xn: Optional[np.ndarray],
    xv: np.ndarray,
    xcache: np.ndarray,
    labels: np.ndarray,
) -> HeteroGraph:
    """Assemble and validate a HeteroGraph from unit-norm node features."""
    labels = np.asarray(labels, dtype=np.int64)
    graph = HeteroGraph(
        xp=_readonly(np.asarray(xp)),
        xn=None if xn is None else _readonly(np.asarray(xn)),
        xv=_readonly(np.asarray(xv)),
        xcache=_readonly(np.asarray(xcache)),
        labels=_readonly(labels),
        onehot=_readonly(onehot_labels(labels, np.asarray(xp).shape[0],
                                       dtype=np.asarray(xp).dtype)),
        relations=build_relations(xp, xn, xv),
    )
    return graph.validate()


def assemble_graph(
    positive_prompts: Sequence[np.ndarray],
    negative_prompts: Optional[Sequence[np.ndarray]],
    cache: np.ndarray,
    labels: np.ndarray,
) -> HeteroGraph:
    """End-to-end construction from raw (already unit-norm) embedding blocks:
    prompt fusion, class means, relations, validation."""
    xp = prompt_nodes(positive_prompts)
    xn = None if negative_prompts is None else prompt_nodes(negative_prompts)
    cache = np.asarray(cache)
    xv = class_mean_nodes(cache, labels, xp.shape[0])
    if xn is not None and xn.shape != xp.shape:
        raise DimMismatchError(f"negative prompts shape {xn.shape} != {xp.shape}")
    return build_graph(xp, xn, xv, cache, labels)
