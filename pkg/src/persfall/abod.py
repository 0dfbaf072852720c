"""Angle-based outlier detection over feature vectors.

The outlier factor of a query ``A`` against a reference set is the
population variance, over unordered reference pairs ``{B, C}``, of

    <AB, AC> / (|AB|^2 * |AC|^2)

i.e. the cosine of the angle at ``A`` weighted by both inverse distances.
Points surrounded by references see widely spread angles (large variance);
points outside the cloud see every pair under a narrow cone (small
variance). A reference closer than ``eps_dup`` to the query is dropped from
every pair it would take part in.

Two evaluation routes exist:

* ``abof`` forms the difference vectors explicitly. It is the reference
  route, used for single queries.
* ``score_many`` / ``loo_scores`` work from the Gram matrix of the
  (centred) references and expand the squared terms algebraically so that a
  whole batch of queries costs a few matrix products. Calibration would be
  cubic per point otherwise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

EPS_DUP = 1e-9
ORIGIN_USER = 0
ORIGIN_EXTERNAL = 1
_ORIGINS = {"user": ORIGIN_USER, "external": ORIGIN_EXTERNAL}

ADL = "ADL"
FALL = "Fall"


class AbodError(ValueError):
    pass


@dataclass(frozen=True)
class AbodScore:
    value: float
    pairs_used: int
    skipped_refs: int = 0


def _check_query_refs(query, refs) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.float64).ravel()
    r = np.asarray(refs, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != q.shape[0]:
        raise AbodError(f"reference set shape {r.shape} does not match query dim {q.shape[0]}")
    return q, r


def abof(query, refs, eps_dup: float = EPS_DUP) -> AbodScore:
    q, r = _check_query_refs(query, refs)
    diff = r - q
    sq = np.einsum("ij,ij->i", diff, diff)
    keep = sq > eps_dup * eps_dup
    m = int(keep.sum())
    if m < 2:
        raise AbodError("degenerate reference set")
    diff, sq = diff[keep], sq[keep]
    gram = diff @ diff.T
    terms = gram / np.outer(sq, sq)
    iu = np.triu_indices(m, k=1)
    vals = terms[iu]
    return AbodScore(float(np.var(vals)), int(vals.size), int(len(keep) - m))


def nearest(query, refs, k: int) -> np.ndarray:
    """Indices of the ``k`` references closest to ``query`` (stable on ties)."""
    q, r = _check_query_refs(query, refs)
    d = r - q
    dist = np.einsum("ij,ij->i", d, d)
    return np.sort(np.argsort(dist, kind="stable")[:k])


def fast_abof(query, refs, k: int, eps_dup: float = EPS_DUP) -> AbodScore:
    """Outlier factor restricted to pairs among the ``k`` nearest references."""
    q, r = _check_query_refs(query, refs)
    if not 2 <= k <= len(r):
        raise AbodError(f"k must lie in [2, {len(r)}], got {k}")
    return abof(q, r[nearest(q, r, k)], eps_dup)


def _batch_stats(G: np.ndarray, g: np.ndarray, c0: np.ndarray, sqdist: np.ndarray,
                 eps_dup: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised variance of the angle terms for many queries at once.

    ``G`` is the n x n Gram matrix of the references, ``g`` the n x Q matrix
    of reference-query inner products, ``c0`` the Q query self products and
    ``sqdist`` the n x Q squared distances. With ``h = c0/2 - g`` the
    difference-vector inner product is ``G_bc + h_b + h_c``.
    """
    keep = sqdist > eps_dup * eps_dup
    w = np.where(keep, 1.0 / np.where(keep, sqdist, 1.0), 0.0)
    u = w * w
    h = 0.5 * c0[None, :] - g
    m = keep.sum(axis=0)

    Gw = G @ w
    sw = w.sum(axis=0)
    # sum_{b,c} w_b w_c (G_bc + h_b + h_c)
    s1 = np.einsum("iq,iq->q", w, Gw) + 2.0 * sw * np.einsum("iq,iq->q", w, h)
    Gu = G @ u
    GGu = (G * G) @ u
    su = u.sum(axis=0)
    uh = np.einsum("iq,iq->q", u, h)
    uh2 = np.einsum("iq,iq->q", u, h * h)
    # sum_{b,c} u_b u_c (G_bc + h_b + h_c)^2
    s2 = (np.einsum("iq,iq->q", u, GGu)
          + 4.0 * np.einsum("iq,iq->q", u * h, Gu)
          + 2.0 * su * uh2 + 2.0 * uh * uh)
    # diagonal terms are w_b (value) and w_b^2 (square)
    p1 = 0.5 * (s1 - sw)
    p2 = 0.5 * (s2 - (w * w).sum(axis=0))
    npairs = m * (m - 1) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = p1 / npairs
        var = p2 / npairs - mean * mean
    return np.maximum(var, 0.0), m


def _direct_sqdist(refs: np.ndarray, queries: np.ndarray, approx: np.ndarray,
                   scale: np.ndarray, eps_dup: float) -> np.ndarray:
    # Gram-derived distances lose absolute precision for near-coincident
    # points; recompute those entries from the raw coordinates.
    suspect = approx <= np.maximum(1e-8 * scale, 4 * eps_dup * eps_dup)
    if suspect.any():
        approx = approx.copy()
        for i, j in zip(*np.nonzero(suspect)):
            d = refs[i] - queries[j]
            approx[i, j] = float(d @ d)
    return approx


def score_many(queries, refs, eps_dup: float = EPS_DUP, chunk: int = 512) -> np.ndarray:
    """Outlier factors of every row of ``queries`` against ``refs``."""
    r = np.asarray(refs, dtype=np.float64)
    qs = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if r.ndim != 2 or qs.shape[1] != r.shape[1]:
        raise AbodError("query and reference dimensions differ")
    centre = r.mean(axis=0)
    rc = r - centre
    G = rc @ rc.T
    gdiag = np.diag(G)
    out = np.empty(len(qs))
    for lo in range(0, len(qs), chunk):
        qc = qs[lo:lo + chunk] - centre
        g = rc @ qc.T
        c0 = np.einsum("ij,ij->i", qc, qc)
        sq = gdiag[:, None] - 2.0 * g + c0[None, :]
        sq = _direct_sqdist(rc, qc, sq, gdiag[:, None] + c0[None, :], eps_dup)
        var, m = _batch_stats(G, g, c0, sq, eps_dup)
        if np.any(m < 2):
            raise AbodError("degenerate reference set")
        out[lo:lo + chunk] = var
    return out


def loo_scores(refs, eps_dup: float = EPS_DUP) -> np.ndarray:
    """Leave-one-out outlier factor of each reference against all the others."""
    r = np.asarray(refs, dtype=np.float64)
    n = len(r)
    rc = r - r.mean(axis=0)
    G = rc @ rc.T
    gdiag = np.diag(G).copy()
    # query j is reference j: g = G[:, j], c0 = G_jj, and its own distance is 0 exactly
    sq = gdiag[:, None] - 2.0 * G + gdiag[None, :]
    np.fill_diagonal(sq, 0.0)
    sq = _direct_sqdist(rc, rc, sq, gdiag[:, None] + gdiag[None, :], eps_dup)
    np.fill_diagonal(sq, 0.0)
    var, m = _batch_stats(G, G, gdiag, sq, eps_dup)
    if np.any(m < 2):
        raise AbodError("degenerate reference set")
    return var


def calibrate(refs, quantile: float = 0.01, safety: float = 0.5,
              eps_dup: float = EPS_DUP) -> float:
    """Threshold = safety * q-quantile of the leave-one-out scores."""
    r = np.asarray(refs, dtype=np.float64)
    if len(r) < 4:
        raise AbodError("too few references to calibrate")
    if not 0.0 <= quantile <= 1.0:
        raise AbodError("quantile must lie in [0, 1]")
    tau = safety * float(np.quantile(loo_scores(r, eps_dup), quantile, method="linear"))
    if not tau > 0:
        raise AbodError("calibration produced a non-positive threshold")
    return tau


def _origin_code(origin) -> int:
    if isinstance(origin, str):
        try:
            return _ORIGINS[origin]
        except KeyError:
            raise AbodError(f"unknown origin {origin!r}") from None
    return int(origin)


@dataclass(frozen=True, eq=False)
class AbodModel:
    """Reference set plus outlier threshold. Treated as an immutable value."""

    refs: np.ndarray
    origins: np.ndarray
    threshold: Optional[float] = None
    quantile: float = 0.01
    safety: float = 0.5
    cap: int = 2000
    recal_interval: int = 10
    pending: int = 0
    knn_k: Optional[int] = None
    eps_dup: float = EPS_DUP
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        refs = np.array(self.refs, dtype=np.float64)
        if refs.ndim != 2:
            raise AbodError("refs must be a 2-D array")
        origins = np.array(self.origins, dtype=np.uint8).ravel()
        if origins.shape[0] != refs.shape[0]:
            raise AbodError("one origin tag per reference required")
        if not 0.0 <= self.quantile <= 1.0:
            raise AbodError("quantile must lie in [0, 1]")
        if self.cap < 1 or self.recal_interval < 1:
            raise AbodError("cap and recal_interval must be >= 1")
        if len(refs) > self.cap:
            raise AbodError(f"{len(refs)} references exceed cap {self.cap}")
        if self.threshold is not None and self.threshold < 0:
            raise AbodError("threshold must be >= 0")
        refs.setflags(write=False)
        origins.setflags(write=False)
        object.__setattr__(self, "refs", refs)
        object.__setattr__(self, "origins", origins)

    @classmethod
    def fit(cls, refs, origin="external", **params) -> "AbodModel":
        refs = np.asarray(refs, dtype=np.float64)
        origins = np.full(len(refs), _origin_code(origin), dtype=np.uint8)
        model = cls(refs, origins, **params)
        return model.recalibrated()

    @property
    def calibrated(self) -> bool:
        return self.threshold is not None

    @property
    def size(self) -> int:
        return self.refs.shape[0]

    @property
    def user_count(self) -> int:
        return int(np.count_nonzero(self.origins == ORIGIN_USER))

    def recalibrated(self) -> "AbodModel":
        tau = calibrate(self.refs, self.quantile, self.safety, self.eps_dup)
        return replace(self, threshold=tau, pending=0)

    def score(self, query) -> AbodScore:
        if self.knn_k is not None:
            return fast_abof(query, self.refs, min(self.knn_k, self.size), self.eps_dup)
        return abof(query, self.refs, self.eps_dup)


def classify(query, model: AbodModel) -> tuple[str, AbodScore]:
    if not model.calibrated:
        raise AbodError("model is not calibrated")
    s = model.score(query)
    return (FALL if s.value < model.threshold else ADL), s


def classify_many(queries, model: AbodModel) -> list[str]:
    """Batch classification; exact route only (``knn_k`` falls back to a loop)."""
    if not model.calibrated:
        raise AbodError("model is not calibrated")
    if model.knn_k is not None:
        return [classify(q, model)[0] for q in np.atleast_2d(queries)]
    vals = score_many(queries, model.refs, model.eps_dup)
    return [FALL if v < model.threshold else ADL for v in vals]


def _evict(refs: np.ndarray, origins: np.ndarray, cap: int):
    while len(refs) > cap:
        ext = np.flatnonzero(origins == ORIGIN_EXTERNAL)
        drop = int(ext[0]) if ext.size else 0
        refs = np.delete(refs, drop, axis=0)
        origins = np.delete(origins, drop)
    return refs, origins


def retrain(model: AbodModel, v, origin="user") -> AbodModel:
    """Append ``v`` to the reference set; evict and recalibrate as configured."""
    vec = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(vec)) or (model.size and vec.shape[0] != model.refs.shape[1]):
        raise AbodError("invalid feature vector")
    refs = np.vstack([model.refs.reshape(-1, vec.shape[0]), vec[None, :]])
    origins = np.append(model.origins, np.uint8(_origin_code(origin)))
    refs, origins = _evict(refs, origins, model.cap)
    out = replace(model, refs=refs, origins=origins, pending=model.pending + 1)
    if out.pending >= out.recal_interval and out.size >= 4:
        out = out.recalibrated()
    return out


def extend(model: AbodModel, vectors, origin="user", recalibrate: bool = True) -> AbodModel:
    """Append many vectors at once (batch personalisation)."""
    vecs = np.asarray(vectors, dtype=np.float64).reshape(-1, model.refs.shape[1])
    if not np.all(np.isfinite(vecs)):
        raise AbodError("invalid feature vector")
    refs = np.vstack([model.refs, vecs])
    origins = np.concatenate([model.origins, np.full(len(vecs), _origin_code(origin), np.uint8)])
    refs, origins = _evict(refs, origins, model.cap)
    out = replace(model, refs=refs, origins=origins, pending=model.pending + len(vecs))
    return out.recalibrated() if recalibrate else out
