"""Seeded synthetic task generator, an independent scalar-loop oracle for the
adapter forward pass, and the finite-difference gradient-check suite. These
power all desk-scale verification without any pretrained encoder.

All randomness comes from PCG64 seeded through explicit SeedSequence entropy,
so the same spec produces identical bytes everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .adapter import AdapterOutput, AdapterWeights, MetaPathWeights, backward, forward
from .classifier import total_loss
from .errors import SpecError
from .graph import HeteroGraph, assemble_graph, build_graph
from .io import write_hgaf, write_manifest
from .tensor import finite_diff_grad, row_l2_normalize

_CENTER_STREAM = 11
_CACHE_STREAM = 12
_TEST_STREAM = 13
_POS_STREAM = 14
_NEG_STREAM = 15
_INSTANCE_STREAM = 16


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and noise levels of a generated task. The defaults are the
    standard benchmark task used by the acceptance suite."""

    c: int = 10
    k: int = 16
    d: int = 64
    test_per_class: int = 50
    cluster_spread: float = 0.35
    prompt_noise: float = 0.25
    negative_flip: float = 0.5
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.d < 2:
            raise SpecError(f"d must be >= 2, got {self.d}")
        if self.c < 2:
            raise SpecError(f"c must be >= 2, got {self.c}")
        if min(self.k, self.test_per_class) < 1:
            raise SpecError("k and test_per_class must be >= 1")
        if min(self.cluster_spread, self.prompt_noise, self.negative_flip) < 0:
            raise SpecError("spreads must be nonnegative")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecError(f"invalid spec JSON: {e}")
        if not isinstance(doc, dict):
            raise SpecError("spec must be a JSON object")
        known = set(asdict(cls()))
        unknown = set(doc) - known
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        return cls(**doc).validate()


@dataclass
class SyntheticTask:
    spec: SyntheticSpec
    graph: HeteroGraph
    test_queries: np.ndarray
    test_labels: np.ndarray
    # raw prompt matrices, kept so materialization writes the exact bytes
    _pos: Optional[np.ndarray] = None
    _neg: Optional[np.ndarray] = None

    def write(self, outdir) -> Path:
        """Materialize as HGAF files plus a manifest for CLI round trips."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_hgaf(self._pos, outdir / "positive.hgaf")
        write_hgaf(self._neg, outdir / "negative.hgaf")
        write_hgaf(self.graph.xcache, outdir / "cache.hgaf")
        write_hgaf(self.test_queries, outdir / "test.hgaf")
        c = self.spec.c
        doc = {
            "class_names": [f"class_{i:03d}" for i in range(c)],
            "shots": self.spec.k,
            "tau": 0.01,
            "positive_prompt_file": "positive.hgaf",
            "positive_prompt_counts": [1] * c,
            "negative_prompt_file": "negative.hgaf",
            "negative_prompt_counts": [1] * c,
            "cache_file": "cache.hgaf",
            "cache_labels": self.graph.labels.tolist(),
            "test_file": "test.hgaf",
            "test_labels": self.test_labels.tolist(),
        }
        manifest_path = outdir / "task.json"
        write_manifest(doc, manifest_path)
        return manifest_path


def _orthonormal_rows(g: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on rows; hand-rolled so the result is bitwise
    reproducible across LAPACK builds."""
    q = g.astype(np.float64, copy=True)
    for i in range(q.shape[0]):
        for j in range(i):
            q[i] -= (q[j] @ q[i]) * q[j]
        q[i] /= math.sqrt(q[i] @ q[i])
    return q


def _unit_f32(m: np.ndarray) -> np.ndarray:
    return row_l2_normalize(m).astype(np.float32)


def generate(spec: SyntheticSpec) -> SyntheticTask:
    """Near-orthogonal unit class centers; cache/test samples are renormalized
    noisy centers; positive prompts are noisy centers; negative prompts are
    renormalized mixtures -negative_flip * center + noise."""
    spec.validate()
    c, k, d = spec.c, spec.k, spec.d

    g = _rng(spec.seed, _CENTER_STREAM).standard_normal((c, d))
    if d >= c:
        centers = _orthonormal_rows(g)
    else:
        centers = row_l2_normalize(g)

    def noisy(rng, per_class, scale):
        rows = np.repeat(centers, per_class, axis=0)
        rows = rows + scale * rng.standard_normal(rows.shape)
        return _unit_f32(rows)

    cache = noisy(_rng(spec.seed, _CACHE_STREAM), k, spec.cluster_spread)
    cache_labels = np.repeat(np.arange(c, dtype=np.int64), k)
    test = noisy(_rng(spec.seed, _TEST_STREAM), spec.test_per_class,
                 spec.cluster_spread)
    test_labels = np.repeat(np.arange(c, dtype=np.int64), spec.test_per_class)

    pos = noisy(_rng(spec.seed, _POS_STREAM), 1, spec.prompt_noise)
    neg_raw = -spec.negative_flip * centers
    neg_raw = neg_raw + spec.prompt_noise * _rng(spec.seed, _NEG_STREAM).standard_normal(
        neg_raw.shape
    )
    neg = _unit_f32(neg_raw)

    graph = assemble_graph(
        [pos[i:i + 1] for i in range(c)],
        [neg[i:i + 1] for i in range(c)],
        cache, cache_labels,
    )
    task = SyntheticTask(spec=spec, graph=graph, test_queries=test,
                         test_labels=test_labels)
    task._pos = pos
    task._neg = neg
    return task


def standard_task() -> SyntheticTask:
    """The committed benchmark task behind the acceptance margins."""
    return generate(SyntheticSpec())


# --- scalar-loop oracle ------------------------------------------------------

def _oracle_project(x, w):
    rows, d = x.shape
    out = [[0.0] * d for _ in range(rows)]
    for j in range(rows):
        for t in range(d):
            acc = 0.0
            for l in range(d):
                acc += float(x[j, l]) * float(w[l, t])
            out[j][t] = acc
    return out


def _oracle_agg(x_dest, x_src, rel_weights, w, include_self):
    c, d = x_dest.shape
    dest_deg = [sum(abs(float(rel_weights[i, j])) for j in range(c)) for i in range(c)]
    src_deg = [sum(abs(float(rel_weights[i, j])) for i in range(c)) for j in range(c)]
    yd = _oracle_project(x_dest, w)
    ys = _oracle_project(x_src, w)
    out = [[0.0] * d for _ in range(c)]
    for i in range(c):
        for t in range(d):
            acc = 0.0
            if include_self:
                acc += yd[i][t] / (dest_deg[i] + 1.0)
            for j in range(c):
                r = float(rel_weights[i, j])
                if r != 0.0:
                    acc += r / math.sqrt((dest_deg[i] + 1.0) * (src_deg[j] + 1.0)) * ys[j][t]
            out[i][t] = acc if acc > 0.0 else 0.0
    return out


def oracle_forward(
    graph: HeteroGraph,
    weights: AdapterWeights,
    mp: MetaPathWeights,
    mode: str = "train",
    negative_enabled: bool = True,
    visual_enabled: bool = True,
) -> AdapterOutput:
    """Unoptimized per-node transcription of the three aggregation stages,
    sharing no code with the production forward pass."""
    alpha_np = mp.alpha_np(mode)
    c, d = graph.xp.shape
    rel = {k: v.weights for k, v in graph.relations.items()}

    xn_t = None
    if graph.xn is not None:
        xn_t = [[float(graph.xn[i, t]) for t in range(d)] for i in range(c)]
        if negative_enabled:
            m_pn = _oracle_agg(graph.xn, graph.xp, rel["p->n"], weights.wn, True)
            m_vn = _oracle_agg(graph.xn, graph.xv, rel["v->n"], weights.wn, True)
            for i in range(c):
                for t in range(d):
                    xn_t[i][t] += mp.beta_pn * m_pn[i][t] + mp.beta_vn * m_vn[i][t]

    m_pp = _oracle_agg(graph.xp, graph.xp, rel["p->p"], weights.wp, True)
    m_vp = _oracle_agg(graph.xp, graph.xv, rel["v->p"], weights.wp, True)
    if alpha_np != 0.0:
        m_np = _oracle_agg(graph.xp, np.asarray(xn_t), rel["n->p"], weights.wp, True)
    xp_t = [[0.0] * d for _ in range(c)]
    for i in range(c):
        for t in range(d):
            acc = float(graph.xp[i, t])
            acc += mp.alpha_pp * m_pp[i][t] + mp.alpha_vp * m_vp[i][t]
            if alpha_np != 0.0:
                acc += alpha_np * m_np[i][t]
            xp_t[i][t] = acc

    s = graph.xcache.shape[0]
    xcache_t = [[float(graph.xcache[si, t]) for t in range(d)] for si in range(s)]
    if visual_enabled and mp.gamma != 0.0:
        bias = _oracle_agg(graph.xv, graph.xv, rel["v->v"], weights.wv, False)
        for si in range(s):
            lab = int(graph.labels[si])
            for t in range(d):
                xcache_t[si][t] += mp.gamma * bias[lab][t]

    return AdapterOutput(
        xp_tilde=np.array(xp_t, dtype=np.float64),
        xn_tilde=None if xn_t is None else np.array(xn_t, dtype=np.float64),
        xcache_tilde=np.array(xcache_t, dtype=np.float64),
        tape=None,
    )


# --- randomized instances and the gradient-check suite -----------------------

def random_instance(
    seed: int,
    c: Optional[int] = None,
    d: Optional[int] = None,
    k: Optional[int] = None,
):
    """Random unit-feature graph plus non-degenerate weights and fusion
    coefficients; returns (graph, weights, mp, tau, lam)."""
    rng = _rng(seed, _INSTANCE_STREAM)
    c = int(c if c is not None else rng.integers(2, 7))
    d = int(d if d is not None else rng.integers(4, 33))
    k = int(k if k is not None else rng.integers(1, 5))
    xp = _unit_f32(rng.standard_normal((c, d)))
    xn = _unit_f32(rng.standard_normal((c, d)))
    xv = _unit_f32(rng.standard_normal((c, d)))
    cache = _unit_f32(rng.standard_normal((c * k, d)))
    labels = np.repeat(np.arange(c, dtype=np.int64), k)
    graph = build_graph(xp, xn, xv, cache, labels)
    weights = AdapterWeights.gaussian(d, rng, std=0.1)
    u = rng.uniform
    mp = MetaPathWeights(
        beta_pn=float(u(0.05, 0.5)),
        beta_vn=float(u(0.05, 0.5)),
        alpha_pp=float(u(0.02, 0.3)),
        alpha_vp=float(u(0.05, 0.5)),
        alpha_np_train=float(u(0.05, 0.4)),
        alpha_np_test=float(u(0.01, 0.05)),
        gamma=float(u(0.05, 0.5)),
    )
    tau = float(np.exp(u(np.log(0.07), np.log(1.0))))
    lam = float(u(0.05, 0.5))
    return graph, weights, mp, tau, lam


@dataclass(frozen=True)
class GradCheckResult:
    seed: int
    c: int
    d: int
    k: int
    errors: dict
    max_rel_error: float


def _max_rel_error(a: np.ndarray, f: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(f))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-2 * scale)
    return float(np.max(np.abs(a - f) / denom))


def gradient_check(
    seed: int,
    c: Optional[int] = None,
    d: Optional[int] = None,
    k: Optional[int] = None,
    dtype=np.float64,
    eps: float = 1e-5,
) -> GradCheckResult:
    """Analytic gradients of the combined loss vs central finite differences
    on one random instance. The probe runs at `dtype` (float64 by default, to
    keep the comparison meaningful); the relative-error metric floors the
    denominator at 1% of the gradient's own scale."""
    graph, weights, mp, tau, lam = random_instance(seed, c, d, k)
    graph = graph.astype(dtype)
    weights = weights.astype(dtype)
    queries, labels = graph.xcache, graph.labels

    out = forward(graph, weights, mp, "train")
    _, d_xp, d_xcache = total_loss(queries, labels, out, graph.onehot, tau, lam)
    analytic = backward(out.tape, d_xp, d_xcache)

    errors = {}
    for name in ("wn", "wp", "wv"):
        def loss_at(m, _name=name):
            probe = AdapterWeights(**{**weights.as_dict(), _name: m})
            o = forward(graph, probe, mp, "train")
            breakdown, _, _ = total_loss(queries, labels, o, graph.onehot, tau, lam)
            return breakdown.total

        fd = finite_diff_grad(loss_at, getattr(weights, name), eps=eps)
        errors[name] = _max_rel_error(analytic[name], fd)
    return GradCheckResult(
        seed=seed, c=graph.num_classes, d=graph.dim, k=graph.shots,
        errors=errors, max_rel_error=max(errors.values()),
    )


#: (c, d, k) shapes cycled by the suite, spanning C 2..6, d 4..32, K 1..4
SUITE_SHAPES = (
    (2, 4, 1), (3, 8, 2), (4, 12, 3), (5, 16, 4), (6, 24, 2),
    (2, 32, 1), (3, 16, 4), (4, 8, 2), (5, 32, 1), (6, 4, 3),
)


def run_gradient_suite(base_seed: int = 0, count: int = 10,
                       dtype=np.float64) -> list[GradCheckResult]:
    results = []
    for i in range(count):
        c, d, k = SUITE_SHAPES[i % len(SUITE_SHAPES)]
        results.append(gradient_check(base_seed + i, c=c, d=d, k=k, dtype=dtype))
    return results
