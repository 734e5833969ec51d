"""Brute-force reference implementations shared by the unit and acceptance tests.

Everything here uses plain Python loops and explicit formulas so that it is
independent of the vectorized code under test.
"""

import math

import numpy as np


def apply_h(T4, p):
    """Homogeneous 4x4 times point, by explicit sums."""
    return [sum(T4[r][c] * p[c] for c in range(3)) + T4[r][3] for r in range(3)]


def mtre(T_a4, T_b4, targets):
    total = 0.0
    for p in targets:
        a, b = apply_h(T_a4, p), apply_h(T_b4, p)
        total += math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(3)))
    return total / len(targets)


def project(geom, x):
    """Solve source + lam (x - source) = origin + a su row + b sv col for (a, b)."""
    su, sv = geom.pixel_spacing
    M = np.column_stack([np.asarray(x) - geom.source, -su * geom.row_axis, -sv * geom.col_axis])
    lam, a, b = np.linalg.solve(M, geom.detector_origin - geom.source)
    return a, b


def point_line_distance(p, a, b):
    """Distance from ``p`` to the line through ``a`` and ``b``: |(p - a) x (b - a)| / |b - a|."""
    u = np.asarray(p) - a
    d = np.asarray(b) - a
    return float(np.linalg.norm(np.cross(u, d)) / np.linalg.norm(d))


def mrpd(T_est4, T_true4, targets, geom):
    su, sv = geom.pixel_spacing
    total = 0.0
    for p in targets:
        a, b = project(geom, apply_h(T_est4, p))
        on_detector = geom.detector_origin + a * su * geom.row_axis + b * sv * geom.col_axis
        total += point_line_distance(apply_h(T_true4, p), geom.source, on_detector)
    return total / len(targets)


def registration_loss(T4, T_hat4, points):
    return mtre(T4, T_hat4, points)


def flow_loss(pred, gt, valid):
    total, n = 0.0, 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if valid[i][j]:
                total += math.hypot(pred[i, j, 0] - gt[i, j, 0], pred[i, j, 1] - gt[i, j, 1])
                n += 1
    return total / n


def _standardize(Z):
    B, D = Z.shape
    out = [[0.0] * D for _ in range(B)]
    for j in range(D):
        mean = sum(Z[b, j] for b in range(B)) / B
        var = sum((Z[b, j] - mean) ** 2 for b in range(B)) / B
        for b in range(B):
            out[b][j] = (Z[b, j] - mean) / math.sqrt(var)
    return out


def barlow_twins_loss(Z1, Z2, w_red):
    B, D = Z1.shape
    a, b = _standardize(Z1), _standardize(Z2)
    inv, red = 0.0, 0.0
    for i in range(D):
        for j in range(D):
            c = sum(a[k][i] * b[k][j] for k in range(B)) / B
            if i == j:
                inv += (1.0 - c) ** 2
            else:
                red += c * c
    return inv + w_red * red


def adversarial_feature_loss(p_sim, p_real):
    s = sum(math.log(p) for p in p_sim) / len(p_sim)
    r = sum(math.log(1.0 - p) for p in p_real) / len(p_real)
    return s + r


def rel_close(a, b, tol):
    return abs(a - b) <= tol * max(abs(b), 1e-300)
