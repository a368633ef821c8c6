"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, direct formulas) and
shares no code with the package paths it checks.
"""

import math

import numpy as np
from scipy import integrate


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[b, ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                    out[b, o, i, j] = s
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for u in range(k):
                        for v in range(k):
                            best = max(best, x[b, ch, i * stride + u, j * stride + v])
                    out[b, ch, i, j] = best
    return out


def avgpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[b, ch, i, j]
            out[b, ch] = s / (h * w)
    return out


def affine_loops(x, scale, shift):
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    out[b, ch, i, j] = x[b, ch, i, j] * scale[ch] + shift[ch]
    return out


def relu_loops(x):
    flat = [v if v > 0 else 0.0 for v in np.ravel(x)]
    return np.array(flat).reshape(np.shape(x))


def cross_entropy_mp(logits, labels, dps=50):
    """Mean softmax cross-entropy evaluated with mpmath at ``dps`` digits."""
    import mpmath

    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, y in zip(logits, labels):
            terms = [mpmath.e ** mpmath.mpf(float(v)) for v in row]
            total += mpmath.log(mpmath.fsum(terms)) - mpmath.mpf(float(row[y]))
        return total / len(labels)


def confusion_counts(actual, predicted, k):
    out = [[0] * k for _ in range(k)]
    for a, p in zip(actual, predicted):
        out[a][p] += 1
    return np.array(out, dtype=float)


def vote_counts(votes):
    hist = {}
    for v in votes:
        hist[v] = hist.get(v, 0) + 1
    best = max(hist.values())
    return min(c for c, n in hist.items() if n == best)


def t_pdf(x, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_two_sided_p_quadrature(diffs):
    d = np.asarray(diffs, dtype=float)
    n = d.size
    t = d.mean() / (d.std(ddof=1) / math.sqrt(n))
    tail, _ = integrate.quad(t_pdf, abs(t), np.inf, args=(n - 1,), epsabs=1e-13, epsrel=1e-12)
    return t, 2 * tail


def relative_error(analytic, numeric, floor=1e-6):
    # central differences at h=1e-5 carry ~1e-11 of rounding error, so a
    # 1e-8 floor would flag gradients of order 1e-8 that are in fact exact
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_errors(loss_fn, params, h=1e-5):
    """Compare analytic ``.grad`` on each tensor in ``params`` with central differences.

    ``loss_fn()`` must return a float loss for the current parameter values.
    Returns a list of ``(name, index, analytic, numeric, rel_error)``.
    """
    out = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            out.append((name, i, grad[i], fd, relative_error(grad[i], fd)))
    return out
