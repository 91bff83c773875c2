"""Slow, direct reference implementations used only by the tests."""

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding : padding + H, padding : padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[n, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def max_pool_scan(x, k):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // k, W // k))
    for n in range(B):
        for c in range(C):
            for i in range(H // k):
                for j in range(W // k):
                    best = -math.inf
                    for di in range(k):
                        for dj in range(k):
                            best = max(best, x[n, c, i * k + di, j * k + dj])
                    out[n, c, i, j] = best
    return out


def bilinear_pixel(img, factor, p, q):
    """align_corners=False bilinear sample of output pixel (p, q)."""
    H, W = img.shape

    def coord(d, n):
        s = max((d + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n - 1)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    y0, y1, ly = coord(p, H)
    x0, x1, lx = coord(q, W)
    top = (1 - lx) * img[y0, x0] + lx * img[y0, x1]
    bottom = (1 - lx) * img[y1, x0] + lx * img[y1, x1]
    return (1 - ly) * top + ly * bottom


def matmul_loops(a, b):
    M, K = a.shape
    _, N = b.shape
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(K))
    return out


def cox_de_boor(i, p, x, t):
    """Textbook recursion for B_{i,p}(x) on knot vector ``t`` (half-open spans)."""
    if p == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0
    if t[i + p] != t[i]:
        left = (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(i, p - 1, x, t)
    right = 0.0
    if t[i + p + 1] != t[i + 1]:
        right = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(i + 1, p - 1, x, t)
    return left + right


def uniform_knots(lo, hi, G, k):
    h = (hi - lo) / G
    return [lo + (j - k) * h for j in range(G + 2 * k + 1)]


def silu_scalar(x):
    return x / (1.0 + math.exp(-x))


def kan_edge_sum(x_row, base, coeffs, lo, hi, G, k):
    """Output vector of a KAN layer for one input row, edge by edge."""
    t = uniform_knots(lo, hi, G, k)
    m, n = base.shape
    out = []
    for j in range(m):
        total = 0.0
        for i in range(n):
            xi = min(max(x_row[i], lo), hi)
            phi = base[j, i] * silu_scalar(x_row[i])
            for g in range(G + k):
                phi += coeffs[j, i, g] * cox_de_boor(g, k, xi, t)
            total += phi
        out.append(total)
    return np.array(out)


def otsu_exhaustive(normalized, bins=256):
    """Try every candidate threshold (k+1)/bins directly on quantized pixels."""
    quant = []
    for v in np.asarray(normalized, dtype=float).reshape(-1):
        b = min(max(math.ceil(v * bins) - 1, 0), bins - 1)
        quant.append((b, (b + 0.5) / bins))
    best_k, best_var = None, 0.0
    for k in range(bins):
        low = [c for b, c in quant if b <= k]
        high = [c for b, c in quant if b > k]
        if not low or not high:
            continue
        var = len(low) * len(high) * (sum(low) / len(low) - sum(high) / len(high)) ** 2
        if best_k is None or var > best_var:
            best_k, best_var = k, var
    if best_k is None or best_var <= 0:
        return None
    return (best_k + 1) / bins


def chi_square_2xk(table):
    rows = [sum(r) for r in table]
    cols = [sum(table[r][c] for r in range(len(table))) for c in range(len(table[0]))]
    total = sum(rows)
    stat = 0.0
    for r in range(len(table)):
        for c in range(len(table[0])):
            e = rows[r] * cols[c] / total
            stat += (table[r][c] - e) ** 2 / e
    return stat
