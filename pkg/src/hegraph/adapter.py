"""Three-stage heterogeneous message passing over the class graph: negative
text nodes aggregate first, then positive text nodes, then a per-class visual
bias is added to every cache sample. The forward pass records a tape of
intermediate activations; `backward` replays it to produce exact analytic
gradients for the three trainable projection matrices.

forward/backward are pure given their inputs and may run concurrently for
independent calls; a tape is single-consumer (one backward per forward).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DimMismatchError, TapeMismatchError
from .graph import HeteroGraph, RelationMatrix
from .tensor import relu

WEIGHT_INIT_STD = 1e-4


@dataclass
class AdapterWeights:
    """The three trainable d x d projections: wn (negative stage), wp
    (positive stage), wv (visual bias stage)."""

    wn: np.ndarray
    wp: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        d = self.wn.shape[0] if self.wn.ndim == 2 else -1
        for name in ("wn", "wp", "wv"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape != (d, d):
                raise DimMismatchError(f"{name} must be square d x d, got {w.shape}")

    @property
    def dim(self) -> int:
        return self.wn.shape[0]

    @classmethod
    def zeros(cls, dim: int, dtype=np.float32) -> "AdapterWeights":
        return cls(
            wn=np.zeros((dim, dim), dtype=dtype),
            wp=np.zeros((dim, dim), dtype=dtype),
            wv=np.zeros((dim, dim), dtype=dtype),
        )

    @classmethod
    def gaussian(
        cls, dim: int, rng: np.random.Generator, std: float = WEIGHT_INIT_STD,
        dtype=np.float32,
    ) -> "AdapterWeights":
        """Near-identity start: tiny zero-mean Gaussian entries so the first
        epoch behaves like the zero-shot baseline."""
        def draw():
            return (std * rng.standard_normal((dim, dim))).astype(dtype)
        return cls(wn=draw(), wp=draw(), wv=draw())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"wn": self.wn, "wp": self.wp, "wv": self.wv}

    def copy(self) -> "AdapterWeights":
        return AdapterWeights(self.wn.copy(), self.wp.copy(), self.wv.copy())

    def astype(self, dtype) -> "AdapterWeights":
        return AdapterWeights(
            self.wn.astype(dtype), self.wp.astype(dtype), self.wv.astype(dtype)
        )


@dataclass(frozen=True)
class MetaPathWeights:
    """Fixed fusion coefficients for each meta-path plus the visual bias scale.

    The negative->positive fusion weight is deliberately lower at test time
    than during training (its edges are negative links).
    """

    beta_pn: float = 0.2
    beta_vn: float = 0.2
    alpha_pp: float = 0.06
    alpha_vp: float = 0.24
    alpha_np_train: float = 0.2
    alpha_np_test: float = 0.1
    gamma: float = 0.2

    def __post_init__(self):
        for name in (
            "beta_pn", "beta_vn", "alpha_pp", "alpha_vp",
            "alpha_np_train", "alpha_np_test", "gamma",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def alpha_np(self, mode: str) -> float:
        if mode == "train":
            return self.alpha_np_train
        if mode == "test":
            return self.alpha_np_test
        raise ConfigError(f"mode must be 'train' or 'test', got {mode!r}")

    def zeroed(self) -> "MetaPathWeights":
        return MetaPathWeights(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def replace(self, **kw) -> "MetaPathWeights":
        return replace(self, **kw)


@dataclass
class _AggRecord:
    """Per-meta-path tape entry: combined input before projection, the
    pre-activation, and the degree-normalized relation matrix."""

    b: np.ndarray
    pre: np.ndarray
    norm: np.ndarray


@dataclass
class ForwardTape:
    mode: str
    mp: MetaPathWeights
    alpha_np: float
    num_classes: int
    dim: int
    num_cache: int
    wp: np.ndarray
    onehot: np.ndarray
    neg_pn: Optional[_AggRecord] = None
    neg_vn: Optional[_AggRecord] = None
    pos_pp: Optional[_AggRecord] = None
    pos_vp: Optional[_AggRecord] = None
    pos_np: Optional[_AggRecord] = None
    vis: Optional[_AggRecord] = None
    consumed: bool = False


@dataclass
class AdapterOutput:
    xp_tilde: np.ndarray
    xn_tilde: Optional[np.ndarray]
    xcache_tilde: np.ndarray
    tape: ForwardTape


def _norm_factors(rel: RelationMatrix):
    """Self scale 1/(d_i+1) and the normalized relation r_ij/sqrt((d_i+1)(d_j+1))."""
    di = rel.dest_degrees + 1.0
    dj = rel.src_degrees + 1.0
    return 1.0 / di, rel.weights / np.sqrt(np.outer(di, dj))


def _check_agg_shapes(x_dest, x_src, rel, w):
    c, d = x_dest.shape
    if x_src.shape != (rel.num_classes, d):
        raise DimMismatchError(
            f"source features {x_src.shape} inconsistent with relation "
            f"{rel.weights.shape} and dim {d}"
        )
    if rel.weights.shape != (c, rel.num_classes):
        raise DimMismatchError(
            f"relation {rel.weights.shape} inconsistent with {c} destinations"
        )
    if w.shape != (d, d):
        raise DimMismatchError(f"projection must be ({d}, {d}), got {w.shape}")


def _agg(x_dest, x_src, rel, w, include_self: bool):
    _check_agg_shapes(x_dest, x_src, rel, w)
    self_scale, norm = _norm_factors(rel)
    b = norm @ x_src
    if include_self:
        b = b + self_scale[:, None] * x_dest
    pre = b @ w
    return relu(pre), _AggRecord(b=b, pre=pre, norm=norm)


def aggregate_meta_path(
    x_dest_self: np.ndarray,
    x_src: np.ndarray,
    rel: RelationMatrix,
    w: np.ndarray,
    include_self: bool = True,
) -> np.ndarray:
    """One degree-normalized aggregation pass along a single meta-path:

        row i = relu( [self]/(d_i+1) * (x_i W)
                      + sum_j r_ij / sqrt((d_i+1)(d_j+1)) * (x_j W) )
    """
    m, _ = _agg(np.asarray(x_dest_self), np.asarray(x_src), rel, np.asarray(w),
                include_self)
    return m


def negative_stage(
    graph: HeteroGraph, wn: np.ndarray, beta_pn: float, beta_vn: float
) -> np.ndarray:
    """Refine negative text nodes from their positive-text and visual neighbors."""
    if graph.xn is None:
        raise ConfigError("graph has no negative text nodes")
    xn_t = graph.xn
    if beta_pn != 0.0:
        m, _ = _agg(graph.xn, graph.xp, graph.relations["p->n"], wn, True)
        xn_t = xn_t + beta_pn * m
    if beta_vn != 0.0:
        m, _ = _agg(graph.xn, graph.xv, graph.relations["v->n"], wn, True)
        xn_t = xn_t + beta_vn * m
    return xn_t


def positive_stage(
    graph: HeteroGraph,
    xn_tilde: Optional[np.ndarray],
    wp: np.ndarray,
    alpha_pp: float,
    alpha_vp: float,
    alpha_np: float,
) -> np.ndarray:
    """Refine positive text nodes from positive, visual and (already refined)
    negative neighbors."""
    xp_t = graph.xp
    if alpha_pp != 0.0:
        m, _ = _agg(graph.xp, graph.xp, graph.relations["p->p"], wp, True)
        xp_t = xp_t + alpha_pp * m
    if alpha_vp != 0.0:
        m, _ = _agg(graph.xp, graph.xv, graph.relations["v->p"], wp, True)
        xp_t = xp_t + alpha_vp * m
    if alpha_np != 0.0:
        if xn_tilde is None:
            raise ConfigError("alpha_np != 0 requires refined negative nodes")
        m, _ = _agg(graph.xp, xn_tilde, graph.relations["n->p"], wp, True)
        xp_t = xp_t + alpha_np * m
    return xp_t


def visual_stage(graph: HeteroGraph, wv: np.ndarray, gamma: float) -> np.ndarray:
    """Learn one bias vector per class from the visual-visual relation and add
    it (scaled by gamma) to every cache sample of that class. No self term."""
    if gamma == 0.0:
        return graph.xcache
    bias, _ = _agg(graph.xv, graph.xv, graph.relations["v->v"], wv, False)
    return graph.xcache + gamma * (graph.onehot @ bias)


def forward(
    graph: HeteroGraph,
    weights: AdapterWeights,
    mp: MetaPathWeights,
    mode: str = "train",
    *,
    negative_enabled: bool = True,
    visual_enabled: bool = True,
) -> AdapterOutput:
    """Run the three stages in order (negative, positive, visual) and record
    the tape needed by `backward`. Train and test mode differ only in the
    negative->positive fusion weight."""
    alpha_np = mp.alpha_np(mode)
    if weights.dim != graph.dim:
        raise DimMismatchError(
            f"adapter dim {weights.dim} != graph dim {graph.dim}"
        )
    if negative_enabled and not graph.has_negatives:
        raise ConfigError("negative stage enabled but the graph has no negative nodes")
    if not negative_enabled and alpha_np != 0.0:
        raise ConfigError("alpha_np != 0 requires the negative stage")

    tape = ForwardTape(
        mode=mode,
        mp=mp,
        alpha_np=alpha_np,
        num_classes=graph.num_classes,
        dim=graph.dim,
        num_cache=graph.num_cache,
        wp=weights.wp.copy(),
        onehot=graph.onehot,
    )

    # Stage 1: negative text nodes (residual update, self term included).
    xn_t = graph.xn
    if negative_enabled:
        if mp.beta_pn != 0.0:
            m, tape.neg_pn = _agg(graph.xn, graph.xp, graph.relations["p->n"],
                                  weights.wn, True)
            xn_t = xn_t + mp.beta_pn * m
        if mp.beta_vn != 0.0:
            m, tape.neg_vn = _agg(graph.xn, graph.xv, graph.relations["v->n"],
                                  weights.wn, True)
            xn_t = xn_t + mp.beta_vn * m

    # Stage 2: positive text nodes; the n->p meta-path reads the refined
    # negatives, the others read the original features.
    xp_t = graph.xp
    if mp.alpha_pp != 0.0:
        m, tape.pos_pp = _agg(graph.xp, graph.xp, graph.relations["p->p"],
                              weights.wp, True)
        xp_t = xp_t + mp.alpha_pp * m
    if mp.alpha_vp != 0.0:
        m, tape.pos_vp = _agg(graph.xp, graph.xv, graph.relations["v->p"],
                              weights.wp, True)
        xp_t = xp_t + mp.alpha_vp * m
    if alpha_np != 0.0:
        m, tape.pos_np = _agg(graph.xp, xn_t, graph.relations["n->p"],
                              weights.wp, True)
        xp_t = xp_t + alpha_np * m

    # Stage 3: per-class visual bias broadcast to the cache samples by label.
    xcache_t = graph.xcache
    if visual_enabled and mp.gamma != 0.0:
        bias, tape.vis = _agg(graph.xv, graph.xv, graph.relations["v->v"],
                              weights.wv, False)
        xcache_t = xcache_t + mp.gamma * (graph.onehot @ bias)

    return AdapterOutput(xp_tilde=xp_t, xn_tilde=xn_t, xcache_tilde=xcache_t,
                         tape=tape)


def backward(
    tape: ForwardTape, d_xp_tilde: np.ndarray, d_xcache_tilde: np.ndarray
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of any scalar loss through the recorded forward.

    Takes the loss partials w.r.t. the adapted positive prompts and the
    adapted cache; returns {"wn", "wp", "wv"} gradients. Includes the chain
    d_xp_tilde -> refined negatives -> wn through the n->p meta-path.
    """
    if tape.consumed:
        raise TapeMismatchError("tape already consumed by a previous backward")
    tape.consumed = True
    c, d, s = tape.num_classes, tape.dim, tape.num_cache
    d_xp_tilde = np.asarray(d_xp_tilde)
    d_xcache_tilde = np.asarray(d_xcache_tilde)
    if d_xp_tilde.shape != (c, d):
        raise TapeMismatchError(
            f"d_xp_tilde shape {d_xp_tilde.shape} != ({c}, {d})"
        )
    if d_xcache_tilde.shape != (s, d):
        raise TapeMismatchError(
            f"d_xcache_tilde shape {d_xcache_tilde.shape} != ({s}, {d})"
        )

    dtype = tape.wp.dtype
    dwn = np.zeros((d, d), dtype=dtype)
    dwp = np.zeros((d, d), dtype=dtype)
    dwv = np.zeros((d, d), dtype=dtype)

    # Positive stage: xp_tilde = xp + sum_phi alpha_phi relu(B_phi Wp).
    d_xn_t = None
    for rec, alpha in (
        (tape.pos_pp, tape.mp.alpha_pp),
        (tape.pos_vp, tape.mp.alpha_vp),
        (tape.pos_np, tape.alpha_np),
    ):
        if rec is None:
            continue
        ds = (alpha * d_xp_tilde) * (rec.pre > 0)
        dwp += rec.b.T @ ds
        if rec is tape.pos_np:
            # B_np = self-term + N_np @ xn_tilde, so the refined negatives
            # receive N_np^T (ds Wp^T).
            d_xn_t = rec.norm.T @ (ds @ tape.wp.T)

    # Visual stage: xcache_tilde = xcache + gamma * onehot @ relu(B_vv Wv).
    if tape.vis is not None:
        dbias = tape.mp.gamma * (tape.onehot.T @ d_xcache_tilde)
        ds = dbias * (tape.vis.pre > 0)
        dwv += tape.vis.b.T @ ds

    # Negative stage: xn_tilde = xn + sum_phi beta_phi relu(B_phi Wn).
    if d_xn_t is not None:
        for rec, beta in ((tape.neg_pn, tape.mp.beta_pn),
                          (tape.neg_vn, tape.mp.beta_vn)):
            if rec is None:
                continue
            ds = (beta * d_xn_t) * (rec.pre > 0)
            dwn += rec.b.T @ ds

    return {"wn": dwn, "wp": dwp, "wv": dwv}
