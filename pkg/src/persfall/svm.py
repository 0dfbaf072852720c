"""RBF-kernel binary SVM trained with sequential minimal optimisation.

Labels follow the project convention ADL = +1, fall = -1. The solver
updates two dual coefficients per iteration, choosing the pair with
second-order working-set selection over the maximal KKT violators, and
stops once the violation gap drops below ``kkt_tol``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

ADL_LABEL = 1
FALL_LABEL = -1
_TAU = 1e-12


class SvmError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    gamma: Optional[float] = None  # None -> 1 / n_features
    kkt_tol: float = 1e-3
    max_passes: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise SvmError("C must be > 0")
        if self.gamma is not None and not self.gamma > 0:
            raise SvmError("gamma must be > 0")
        if not self.kkt_tol > 0:
            raise SvmError("kkt_tol must be > 0")
        if self.max_passes < 1:
            raise SvmError("max_passes must be >= 1")

    def resolved_gamma(self, n_features: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / n_features


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_vectors: np.ndarray
    coeffs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sv = np.asarray(self.support_vectors, dtype=np.float64)
        co = np.asarray(self.coeffs, dtype=np.float64).ravel()
        if sv.ndim != 2 or sv.shape[0] != co.shape[0]:
            raise SvmError("one coefficient per support vector required")
        if not self.gamma > 0:
            raise SvmError("gamma must be > 0")
        if np.any(np.abs(co) > self.C * (1 + 1e-12)):
            raise SvmError("coefficient outside the box constraint")
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "coeffs", co)


def rbf_kernel(a, b, gamma: float) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise SvmError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not gamma > 0:
        raise SvmError("gamma must be > 0")
    d = a - b
    return float(np.exp(-gamma * (d @ d)))


def rbf_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        raise SvmError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    sq = (np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :]
          - 2.0 * (A @ B.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def _solve(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int):
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a, Q = yy' * K
    Kdiag = np.diag(K).copy()
    it = 0
    converged = False
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        gmax = yg[i]
        gmin = yg[low].min()
        if gmax - gmin < tol:
            converged = True
            break
        # second-order choice of j among violating low-set members
        cand = low & (yg < gmax)
        b = gmax - yg[cand]
        a = Kdiag[i] + Kdiag[cand] - 2.0 * K[i, cand]
        a = np.where(a > 0, a, _TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        yi, yj = y[i], y[j]
        quad = max(Kdiag[i] + Kdiag[j] - 2.0 * K[i, j], _TAU)
        ai_old, aj_old = alpha[i], alpha[j]
        if yi != yj:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        dai, daj = ai - ai_old, aj - aj_old
        alpha[i], alpha[j] = ai, aj
        grad += y * (K[:, i] * (yi * dai) + K[:, j] * (yj * daj))
        it += 1
    return alpha, grad, it, converged


def _bias(alpha, grad, y, C) -> float:
    yg = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    hi = yg[up].max() if up.any() else yg[low].min()
    lo = yg[low].min() if low.any() else hi
    return float(0.5 * (hi + lo))


def train_smo(X, y, cfg: TrainConfig = TrainConfig()) -> SvmModel:
    """Fit the dual by SMO. ``y`` holds +1 (ADL) / -1 (fall)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise SvmError("X must be (n, d) with one label per row")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("labels must be +1 (ADL) or -1 (fall)")
    if not ((y > 0).any() and (y < 0).any()):
        raise SvmError("both classes required")
    gamma = cfg.resolved_gamma(X.shape[1])
    K = rbf_matrix(X, X, gamma)
    max_iter = cfg.max_passes * max(len(y), 10)
    alpha, grad, iters, converged = _solve(K, y, cfg.C, cfg.kkt_tol, max_iter)
    if not converged:
        log.warning("SMO stopped at iteration cap %d before reaching kkt_tol", max_iter)
    b = _bias(alpha, grad, y, cfg.C)
    sv = alpha > 0
    meta = {"iterations": iters, "converged": converged, "n_train": int(len(y)),
            "kkt_tol": cfg.kkt_tol, "max_passes": cfg.max_passes, "seed": cfg.seed}
    return SvmModel(X[sv].copy(), alpha[sv] * y[sv], b, gamma, cfg.C, meta)


def decision(model: SvmModel, X) -> np.ndarray | float:
    """Kernel expansion plus bias; scalar for a single vector."""
    Xa = np.asarray(X, dtype=np.float64)
    single = Xa.ndim == 1
    Xa = np.atleast_2d(Xa)
    if Xa.shape[1] != model.support_vectors.shape[1]:
        raise SvmError(f"dimension mismatch: {Xa.shape[1]} vs {model.support_vectors.shape[1]}")
    f = rbf_matrix(Xa, model.support_vectors, model.gamma) @ model.coeffs + model.bias
    return float(f[0]) if single else f


def predict(model: SvmModel, X) -> np.ndarray:
    """+1 (ADL) or -1 (fall); an exact zero goes to ADL."""
    f = np.atleast_1d(decision(model, X))
    return np.where(f >= 0, ADL_LABEL, FALL_LABEL)


def grid_search(X, y, groups, cfg: TrainConfig = TrainConfig(), folds: int = 3) -> TrainConfig:
    """Pick C and gamma over {0.1, 1, 10} x {1/d, 1/(d var)} by grouped CV geometric mean."""
    from dataclasses import replace

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    d = X.shape[1]
    var = float(X.var()) or 1.0
    uniq = np.unique(groups)
    assign = {g: k % folds for k, g in enumerate(uniq)}
    fold_of = np.array([assign[g] for g in groups])
    best, best_score = cfg, -1.0
    for C in (0.1, 1.0, 10.0):
        for gamma in (1.0 / d, 1.0 / (d * var)):
            trial = replace(cfg, C=C, gamma=gamma)
            gms = []
            for f in range(min(folds, len(uniq))):
                tr, te = fold_of != f, fold_of == f
                if len(np.unique(y[tr])) < 2 or len(np.unique(y[te])) < 2:
                    continue
                pred = predict(train_smo(X[tr], y[tr], trial), X[te])
                se = np.mean(pred[y[te] < 0] < 0)
                sp = np.mean(pred[y[te] > 0] > 0)
                gms.append(np.sqrt(se * sp))
            score = float(np.mean(gms)) if gms else -1.0
            log.info("grid C=%g gamma=%g -> GM %.4f", C, gamma, score)
            if score > best_score:
                best, best_score = trial, score
    return best
