"""Independent closed-form oracles (mpmath / plain numpy, no package imports)."""

import math

import mpmath as mp
import numpy as np

mp.mp.dps = 30


def helix_constants(k, d, r):
    k, d, r = mp.mpf(k), mp.mpf(d), mp.mpf(r)
    s2 = k * k + r * r
    alpha = d / (4 * mp.pi * k * mp.sqrt(s2))
    return {
        "alpha": float(alpha),
        "a1": float(d * k / (4 * mp.pi * s2)),
        "b1": float(d * r * r / (4 * mp.pi * s2)),
        "c_star": float(mp.sqrt(d * mp.sqrt(s2) / (k * mp.pi))),
        "energy_slope": float(d * d * mp.sqrt(s2) / k / (4 * mp.pi) - d * alpha * r * r / 2),
        "mu_slope": float(d * mp.sqrt(s2) / k / (2 * mp.pi) - alpha * r * r / 2),
    }


def Y_radial(rad, k, d, r_star):
    alpha = helix_constants(k, d, r_star)["alpha"]
    return d * math.sqrt(k * k + rad * rad) / (2 * math.pi * k) - alpha * rad * rad


def image_S(x, y, R=1.0):
    """Method-of-images regular part of the Dirichlet Laplacian Green's function on the disc."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ny = np.linalg.norm(y)
    if ny == 0:
        return math.log(R) / (2 * math.pi)
    ys = R * R * y / ny**2
    return math.log(ny * np.linalg.norm(x - ys) / R) / (2 * math.pi)


def p1_laplacian(nodes, tris):
    """Standard P1 stiffness matrix via cotangent weights (dense)."""
    n = len(nodes)
    A = np.zeros((n, n))
    for t in tris:
        for a in range(3):
            i, j, o = t[a], t[(a + 1) % 3], t[(a + 2) % 3]
            u, v = nodes[i] - nodes[o], nodes[j] - nodes[o]
            cot = (u @ v) / abs(u[0] * v[1] - u[1] * v[0])
            A[i, j] -= cot / 2
            A[j, i] -= cot / 2
            A[i, i] += cot / 2
            A[j, j] += cot / 2
    return A
