"""Independent reference implementations used to check the library.

Everything here is deliberately naive: scalar loops, explicit matrix
inverses, exhaustive grids. None of it shares code with the package.
"""

import numpy as np


def conv_forward_loops(x, kernels, bias=None, stride=1, padding=0):
    """Direct strided, zero-padded convolutional layer as nested scalar loops.

    x: (N, D, H, W); kernels: (D, M, k, k) in sliding (correlation) order.
    """
    n, d, h, w = x.shape
    _, m, k, _ = kernels.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, m, oh, ow))
    for t in range(n):
        for j in range(m):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for i in range(d):
                        for dy in range(k):
                            for dx in range(k):
                                yy = oy * stride + dy - padding
                                xx = ox * stride + dx - padding
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += x[t, i, yy, xx] * kernels[i, j, dy, dx]
                    out[t, j, oy, ox] = acc + (bias[j] if bias is not None else 0.0)
    return out


def loss_loops(w, coeffs, features, responses, eps_w, eps_l2, k):
    """Scalar-loop evaluation of the sparsification objective."""
    channels = len(w)
    m, n = responses.shape
    k2 = k * k
    ent = 0.0
    for wd in w:
        if wd > 0:
            ent += wd * np.log(wd)
    ridge = 0.0
    for row in coeffs:
        for val in row:
            ridge += val * val
    sse = 0.0
    for t in range(n):
        for j in range(m):
            pred = coeffs[j, 0]
            for d in range(channels):
                inner = 0.0
                for l in range(k2):
                    inner += coeffs[j, 1 + d * k2 + l] * features[d * k2 + l, t]
                pred += w[d] * inner
            sse += (responses[j, t] - pred) ** 2
    return eps_w * ent + eps_l2 * ridge + sse / (n * m)


def ridge_normal_equations(w, features, responses, k, eps_l2):
    """Ridge coefficients via an explicit inverse of the normal equations."""
    k2 = k * k
    scaled = features * np.repeat(np.asarray(w, dtype=float), k2)[:, None]
    n = features.shape[1]
    design = np.concatenate([np.ones((1, n)), scaled], axis=0).T  # (n, k2D+1)
    a = design.T @ design + eps_l2 * np.eye(design.shape[1])
    return (np.linalg.inv(a) @ design.T @ responses.T).T


def ridge_1feature_by_hand(x, y, eps_l2):
    """The (intercept, slope) ridge fit for scalar features, 2x2 inverse by hand."""
    n = len(x)
    sx = float(np.sum(x))
    sxx = float(np.sum(x * x))
    sy = float(np.sum(y))
    sxy = float(np.sum(x * y))
    a00, a01, a11 = n + eps_l2, sx, sxx + eps_l2
    det = a00 * a11 - a01 * a01
    intercept = (a11 * sy - a01 * sxy) / det
    slope = (-a01 * sy + a00 * sxy) / det
    return intercept, slope


def w_objective(w, quad, lin, eps_w):
    nz = w[w > 0]
    return float(w @ quad @ w - lin @ w + eps_w * (nz * np.log(nz)).sum())


def grid_search_simplex3(quad, lin, eps_w, resolution=1000):
    """Exhaustive minimum of the w objective over the 2-simplex grid i/res."""
    i, j = np.meshgrid(np.arange(resolution + 1), np.arange(resolution + 1), indexing="ij")
    mask = i + j <= resolution
    w1 = i[mask] / resolution
    w2 = j[mask] / resolution
    w3 = 1.0 - w1 - w2
    pts = np.stack([w1, w2, w3], axis=1)
    vals = np.einsum("ni,ij,nj->n", pts, quad, pts) - pts @ lin
    logs = np.where(pts > 0, np.log(np.where(pts > 0, pts, 1.0)), 0.0)
    vals = vals + eps_w * (pts * logs).sum(axis=1)
    best = int(np.argmin(vals))
    return float(vals[best]), pts[best]
