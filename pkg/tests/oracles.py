"""Independent brute-force reference implementations used by the tests.

Deliberately plain Python: explicit loops, no shared code with the package.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction


def smv_argmax(rows) -> int:
    best, best_i = -1.0, -1
    for i, (x, y, z) in enumerate(rows):
        m = math.sqrt(x * x + y * y + z * z)
        if m > best:
            best, best_i = m, i
    return best_i


def _dot(a, b):
    return math.fsum(p * q for p, q in zip(a, b))


def abof_pairs(query, refs, eps_dup=1e-9):
    """All pair terms <AB,AC>/(|AB|^2 |AC|^2), enumerating unordered pairs."""
    diffs = []
    for r in refs:
        d = [ri - qi for ri, qi in zip(r, query)]
        if math.sqrt(_dot(d, d)) > eps_dup:
            diffs.append(d)
    terms = []
    for b, c in itertools.combinations(diffs, 2):
        terms.append(_dot(b, c) / (_dot(b, b) * _dot(c, c)))
    return terms


def variance(vals):
    n = len(vals)
    mean = math.fsum(vals) / n
    return math.fsum((v - mean) ** 2 for v in vals) / n


def abof(query, refs, eps_dup=1e-9) -> float:
    terms = abof_pairs(query, refs, eps_dup)
    if len(terms) < 1:
        raise ValueError("degenerate")
    return variance(terms)


def abof_exact(query, refs) -> Fraction:
    """Rational-arithmetic ABOF for small integer inputs."""
    q = [Fraction(v) for v in query]
    diffs = [[Fraction(v) - qi for v, qi in zip(r, q)] for r in refs]
    terms = []
    for b, c in itertools.combinations(diffs, 2):
        bc = sum(x * y for x, y in zip(b, c))
        bb = sum(x * x for x in b)
        cc = sum(x * x for x in c)
        terms.append(bc / (bb * cc))
    n = len(terms)
    mean = sum(terms) / n
    return sum((t - mean) ** 2 for t in terms) / n


def quantile_linear(vals, q):
    s = sorted(vals)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def loo_threshold(refs, q=0.01, safety=0.5, eps_dup=1e-9):
    scores = []
    for i, r in enumerate(refs):
        others = [o for j, o in enumerate(refs) if j != i]
        scores.append(abof(r, others, eps_dup))
    return safety * quantile_linear(scores, q), scores


def rbf(a, b, gamma):
    return math.exp(-gamma * math.fsum((x - y) ** 2 for x, y in zip(a, b)))


def kernel_sum(svs, coeffs, bias, gamma, x):
    return math.fsum(c * rbf(s, x, gamma) for s, c in zip(svs, coeffs)) + bias


def kkt_violations(X, y, alpha, bias, gamma, C, tol):
    """Indices breaking the three KKT clauses, with f evaluated term by term."""
    bad = []
    for i in range(len(X)):
        f = math.fsum(alpha[j] * y[j] * rbf(X[j], X[i], gamma) for j in range(len(X))) + bias
        m = y[i] * f
        if alpha[i] == 0 and m < 1 - tol:
            bad.append(i)
        elif 0 < alpha[i] < C and abs(m - 1) > tol:
            bad.append(i)
        elif alpha[i] == C and m > 1 + tol:
            bad.append(i)
    return bad


def full_alphas(model, X):
    """Map stored support-vector coefficients back onto the training rows."""
    alpha = [0.0] * len(X)
    used = set()
    for sv, coef in zip(model.support_vectors.tolist(), model.coeffs.tolist()):
        for i, row in enumerate(X):
            if i not in used and list(row) == sv:
                alpha[i] = abs(coef)
                used.add(i)
                break
    return alpha
