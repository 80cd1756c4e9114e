"""Helical coefficient fields and the scalar functions derived from them.

Everything here is a pure function of value inputs.  Points are arrays whose
last axis has length 2; matrix-valued results carry two trailing axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleMass, InvalidParameters, NonSPDInput


@dataclass(frozen=True)
class HelixParams:
    """Physical parameters of a helical vortex problem.

    ``eps`` may be omitted for purely geometric work (helix curves); every
    routine that needs the concentration parameter checks for it.
    """

    k: float
    d: float
    r_star: float
    R_star: float
    eps: float | None = None
    alpha: float = field(init=False)
    a1: float = field(init=False)
    b1: float = field(init=False)
    c_star: float = field(init=False)

    def __post_init__(self):
        k, d, r, R = self.k, self.d, self.r_star, self.R_star
        if not (k > 0 and d > 0 and R > 0):
            raise InvalidParameters("need k > 0, d > 0, R_star > 0", k=k, d=d, R_star=R)
        if not 0 < r < R:
            raise InvalidParameters("need 0 < r_star < R_star", r_star=r, R_star=R)
        if self.eps is not None:
            eps = self.eps
            if not 0 < eps < 1:
                raise InvalidParameters("need 0 < eps < 1", eps=eps)
            if d * eps**2 >= math.pi * R**2:
                raise InfeasibleMass("d*eps^2 must be below the disc area pi*R_star^2", eps=eps, d=d, R_star=R)
        s2 = k * k + r * r
        object.__setattr__(self, "alpha", d / (4 * math.pi * k * math.sqrt(s2)))
        object.__setattr__(self, "a1", d * k / (4 * math.pi * s2))
        object.__setattr__(self, "b1", d * r * r / (4 * math.pi * s2))
        object.__setattr__(self, "c_star", math.sqrt(d * math.sqrt(s2) / (k * math.pi)))

    @property
    def log_inv_eps(self) -> float:
        if self.eps is None:
            raise InvalidParameters("eps is required here")
        return -math.log(self.eps)

    def with_eps(self, eps: float) -> "HelixParams":
        return HelixParams(self.k, self.d, self.r_star, self.R_star, eps)

    def as_dict(self) -> dict:
        return {
            "k": self.k, "d": self.d, "r_star": self.r_star, "R_star": self.R_star,
            "eps": self.eps, "alpha": self.alpha, "a1": self.a1, "b1": self.b1,
            "c_star": self.c_star,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HelixParams":
        return cls(data["k"], data["d"], data["r_star"], data["R_star"], data.get("eps"))


def eval_KH(x, k: float) -> np.ndarray:
    """The helical coefficient matrix at point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    k2 = k * k
    scale = 1.0 / (k2 + x1 * x1 + x2 * x2)
    out = np.empty(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = (k2 + x2 * x2) * scale
    out[..., 0, 1] = -x1 * x2 * scale
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = (k2 + x1 * x1) * scale
    return out


def det_sqrt_KH(x, k: float):
    x = np.asarray(x, dtype=float)
    return k / np.sqrt(k * k + np.sum(x * x, axis=-1))


class CoefficientField:
    """A smooth SPD 2x2 field ``x -> K(x)`` with uniform ellipticity bounds.

    ``lambda1``/``lambda2`` are supplied by the constructors below when known
    in closed form, otherwise estimated by :meth:`ellipticity_bounds`.
    """

    def __init__(self, fn, name="custom", lambda1=None, lambda2=None):
        self._fn = fn
        self.name = name
        self.lambda1 = lambda1
        self.lambda2 = lambda2

    def eval(self, x) -> np.ndarray:
        return self._fn(np.asarray(x, dtype=float))

    __call__ = eval

    def det_sqrt(self, x):
        K = self.eval(x)
        return np.sqrt(K[..., 0, 0] * K[..., 1, 1] - K[..., 0, 1] * K[..., 1, 0])

    def ellipticity_bounds(self, points) -> tuple[float, float]:
        """Smallest/largest eigenvalue of K over a point sample."""
        eig = np.linalg.eigvalsh(self.eval(points))
        return float(eig[..., 0].min()), float(eig[..., 1].max())

    def __repr__(self):
        return f"CoefficientField({self.name})"


def identity_field() -> CoefficientField:
    def fn(x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        return out

    return CoefficientField(fn, "identity", 1.0, 1.0)


def helical_field(k: float, R_star: float | None = None) -> CoefficientField:
    """K_H for pitch ``k``; eigenvalues are k^2/(k^2+|x|^2) and 1."""
    if k <= 0:
        raise InvalidParameters("pitch k must be positive", k=k)
    lam1 = None if R_star is None else k * k / (k * k + R_star * R_star)
    return CoefficientField(lambda x: eval_KH(x, k), f"helical(k={k})", lam1, 1.0)


def factor_T(K) -> np.ndarray:
    """Upper-triangular T with positive diagonal and T^t T = K^{-1}.

    Works on a single matrix or a stack.  Equivalently T^{-1} T^{-t} = K.
    """
    K = np.asarray(K, dtype=float)
    # factor K = U U^t with U upper triangular, then T = U^{-1}; this avoids
    # forming K^{-1}, which loses digits at large condition numbers
    k11 = K[..., 1, 1]
    k01 = 0.5 * (K[..., 0, 1] + K[..., 1, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        u22 = np.sqrt(k11)
        u12 = k01 / u22
        schur = K[..., 0, 0] - u12 * u12
    # leading minors of K^{-1} are k11/det and 1/det
    if np.any(~(k11 > 0)) or np.any(~(schur > 0)) or np.any(~np.isfinite(schur)):
        raise NonSPDInput("a leading minor of K^{-1} is not positive")
    u11 = np.sqrt(schur)
    T = np.zeros(K.shape)
    T[..., 0, 0] = 1.0 / u11
    T[..., 0, 1] = -u12 / (u11 * u22)
    T[..., 1, 1] = 1.0 / u22
    return T


def potential_Y(x, params: HelixParams):
    """d sqrt(k^2+|x|^2)/(2 pi k) - alpha |x|^2, the limiting location potential."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return radial_Y(np.sqrt(r2), params, r2=r2)


def radial_Y(r, params: HelixParams, r2=None):
    r = np.asarray(r, dtype=float)
    if r2 is None:
        r2 = r * r
    k = params.k
    return params.d * np.sqrt(k * k + r2) / (2 * math.pi * k) - params.alpha * r2


def radial_dY(r, params: HelixParams):
    r = np.asarray(r, dtype=float)
    k = params.k
    return params.d * r / (2 * math.pi * k * np.sqrt(k * k + r * r)) - 2 * params.alpha * r


def Y_at_rstar(params: HelixParams) -> float:
    k, r, d = params.k, params.r_star, params.d
    return d * (2 * k * k + r * r) / (4 * math.pi * k * math.sqrt(k * k + r * r))


def energy_slope(params: HelixParams) -> float:
    """Leading ln(1/eps) coefficient of the maximal energy."""
    k, r, d = params.k, params.r_star, params.d
    inv_sqrt_det = math.sqrt(k * k + r * r) / k
    return d * d * inv_sqrt_det / (4 * math.pi) - d * params.alpha * r * r / 2


def multiplier_slope(params: HelixParams) -> float:
    """Leading ln(1/eps) coefficient of the Lagrange multiplier."""
    k, r, d = params.k, params.r_star, params.d
    inv_sqrt_det = math.sqrt(k * k + r * r) / k
    return d * inv_sqrt_det / (2 * math.pi) - params.alpha * r * r / 2
