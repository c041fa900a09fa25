"""Brute-force reference implementations used to cross-check the library.

Everything here is written from the defining formulas with plain Python
loops, deliberately avoiding the vectorised code paths under test.
"""

import math

import numpy as np

CLAMP = 1e-7
KL_EPS = 1e-6


def clamp(p: float) -> float:
    return min(max(p, CLAMP), 1.0 - CLAMP)


def brute_bce(pred, target) -> float:
    """Mean over rows of the summed per-entry binary cross-entropy."""
    n, d = pred.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            p = clamp(pred[i, j])
            t = target[i, j]
            total -= t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
    return total / n


def brute_focal(pred, target, alpha: float, gamma: float) -> float:
    n, d = pred.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            p = clamp(pred[i, j])
            t = target[i, j]
            total -= alpha * t * (1.0 - p) ** gamma * math.log(p)
            total -= (1.0 - alpha) * (1.0 - t) * p**gamma * math.log(1.0 - p)
    return total / n


def brute_latent_kl(mu, logsig) -> float:
    n, d = mu.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            total -= 0.5 * (1.0 + logsig[i, j] - mu[i, j] ** 2 - math.exp(logsig[i, j]))
    return total / n


def brute_softmin(values, temperature: float):
    shifted = [-(v - min(values)) / temperature for v in values]
    w = [math.exp(s) for s in shifted]
    z = sum(w)
    return np.array([v / z for v in w])


def brute_dbce(pred, micro, temperature: float):
    """Double-loop decoupled BCE; returns (loss, norm_kl, soft_index, per_row)."""
    n_t, d = pred.shape
    n = micro.shape[0]
    b = np.zeros((n_t, n))
    for i in range(n_t):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                p = clamp(pred[i, k])
                t = micro[j, k]
                acc -= t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
            b[i, j] = acc / d
    per_row = np.zeros(n_t)
    soft_index = np.zeros(n)
    for i in range(n_t):
        w = brute_softmin(b[i], temperature)
        per_row[i] = float((w * b[i]).sum())
        soft_index += w
    loss = float(per_row.mean())
    u = 1.0 / n
    kl = 0.0
    for j in range(n):
        q = soft_index[j] / n_t
        kl += (u + KL_EPS) * math.log((u + KL_EPS) / (q + KL_EPS))
    return loss, kl, soft_index, per_row


def brute_kl_metric(syn, ref, epsilon: float = KL_EPS) -> float:
    total = 0.0
    for s, r in zip(syn, ref):
        total += (s + epsilon) * math.log((s + epsilon) / (r + epsilon))
    return total


def brute_marginal_rmse(pred, hh_targets, person_targets, groups) -> float:
    """groups: iterable of (var, slot_or_None, start, stop); NA is the last column."""
    n_t = pred.shape[0]
    diffs = []
    person_num: dict[str, np.ndarray] = {}
    person_den: dict[str, float] = {}
    for var, slot, start, stop in groups:
        block = pred[:, start:stop]
        if slot is None:
            for c in range(stop - start):
                diffs.append(block[:, c].mean() - hh_targets[var][c])
        else:
            width = stop - start
            num = person_num.setdefault(var, np.zeros(width - 1))
            for c in range(width - 1):
                num[c] += block[:, c].sum()
            person_den[var] = person_den.get(var, 0.0) + float((1.0 - block[:, -1]).sum())
    for var, num in person_num.items():
        for c in range(num.size):
            diffs.append(num[c] / person_den[var] - person_targets[var][c])
    return math.sqrt(sum(d * d for d in diffs) / len(diffs))


def brute_dcr(row, reference) -> float:
    """Min over reference rows of the column-mean BCE of `row` against them."""
    best = math.inf
    d = row.size
    for j in range(reference.shape[0]):
        acc = 0.0
        for k in range(d):
            p = clamp(row[k])
            t = reference[j, k]
            acc -= t * math.log(p) + (1.0 - t) * math.log(1.0 - p)
        best = min(best, acc / d)
    return best


def central_difference(f, x0, step: float = 1e-5):
    """Full-coordinate central finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (f(xp) - f(xm)) / (2.0 * step)
        it.iternext()
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
