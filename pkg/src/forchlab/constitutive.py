"""Generalized Forchheimer constitutive law.

The momentum law ``g(x, |v|) v = -grad p`` with

    g(x, s) = a_0(x) + a_1(x) s^alpha_1 + ... + a_N(x) s^alpha_N

is inverted pointwise into ``v = -K(x, |grad p|) grad p`` where
``K(x, xi) = 1 / g(x, s(x, xi))`` and ``s`` is the non-negative root of
``s g(x, s) = xi``.  Everything here is vectorized over grid points and
over ``xi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .report import Section, Verdict

RTOL = 1e-12
ATOL = 1e-14
QTOL = 1e-10
SLACK = 1e-8
MAXITER = 200


class NumericalError(RuntimeError):
    """A root solve or quadrature failed to converge."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


@dataclass(frozen=True)
class ForchheimerModel:
    """Exponents and grid-sampled coefficient fields of ``g``.

    ``coeffs`` has shape ``(N + 1, *grid_shape)``; a homogeneous pointwise
    model uses ``grid_shape == ()``.
    """

    alphas: np.ndarray
    coeffs: np.ndarray
    linear_test_mode: bool = False

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float).ravel()
        coeffs = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.shape[:1] != alphas.shape:
            raise ValueError(
                f"coeffs leading axis {coeffs.shape[:1]} does not match "
                f"{alphas.size} exponents")
        if alphas[0] != 0.0:
            raise ValueError(f"exponents must satisfy α₀=0<α₁<⋯<α_N (got {alphas.tolist()})")
        if np.any(np.diff(alphas) <= 0):
            raise ValueError(
                "exponents must satisfy α₀=0<α₁<⋯<α_N "
                f"(got {alphas.tolist()})")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficient fields must be finite")
        if np.any(coeffs < 0):
            raise ValueError("coefficient fields must be non-negative")
        if np.any(coeffs[0] <= 0):
            raise ValueError("a_0(x) must be strictly positive")
        if self.linear_test_mode:
            return
        if alphas.size < 2:
            raise ValueError("N >= 1 is required outside linear_test_mode")
        if np.any(coeffs[-1] <= 0):
            raise ValueError("a_N(x) must be strictly positive")

    @classmethod
    def homogeneous(cls, alphas, coeffs, shape=()):
        """Model with spatially constant coefficients broadcast to ``shape``."""
        c = np.asarray(coeffs, dtype=float).reshape((-1,) + (1,) * len(shape))
        return cls(np.asarray(alphas, float), np.broadcast_to(c, (c.shape[0],) + tuple(shape)).copy())

    @classmethod
    def darcy(cls, a0, shape=()):
        """Linear law ``g = a_0`` (outside the Forchheimer class; solver tests only)."""
        c = np.broadcast_to(np.asarray(a0, dtype=float), tuple(shape))[None].copy()
        return cls(np.array([0.0]), c, linear_test_mode=True)

    @property
    def N(self):
        return self.alphas.size - 1

    @property
    def degree(self):
        return float(self.alphas[-1])

    @property
    def a(self):
        """Degeneracy exponent ``alpha_N / (alpha_N + 1)``."""
        return self.degree / (self.degree + 1.0)

    @property
    def grid_shape(self):
        return self.coeffs.shape[1:]

    def at(self, x=None):
        """Coefficient vector(s) at grid index ``x`` (all points if None)."""
        if x is None:
            return self.coeffs
        return self.coeffs[(slice(None),) + np.index_exp[x]]

    def restrict(self, x):
        """Pointwise model at grid index ``x``."""
        return ForchheimerModel(self.alphas, self.at(x), self.linear_test_mode)


def _coeffs(model, x):
    c = model.at(x)
    return c


def _pow(s, alpha):
    if alpha == 0.0:
        return np.ones_like(s)
    return s ** alpha


def g_values(coeffs, alphas, s):
    """``sum_i a_i s^alpha_i`` with coefficients broadcast against ``s``."""
    out = 0.0
    for c, alpha in zip(coeffs, alphas):
        out = out + c * _pow(s, alpha)
    return out


def _s_gprime(coeffs, alphas, s):
    # s * g'(s) = sum a_i alpha_i s^alpha_i ; finite at s = 0
    out = 0.0
    for c, alpha in zip(coeffs[1:], alphas[1:]):
        out = out + c * alpha * s ** alpha
    return out


def eval_g(model, x, s):
    """Evaluate ``g(x, s)``.

    Raises
    ------
    ValueError
        If any ``s`` is negative.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("g(x, s) is defined for s >= 0 only")
    return g_values(_coeffs(model, x), model.alphas, s)


def solve_s_coeffs(coeffs, alphas, xi, rtol=RTOL, atol=ATOL, maxiter=MAXITER,
                   s_init=None, linear=False):
    """Vectorized root of ``s g(s) = xi`` for raw coefficient arrays.

    Newton's method safeguarded by bisection on the bracket
    ``[0, min((xi/a_N)^(1/(alpha_N+1)), xi/a_0)]``.  ``s g(s)`` is convex and
    increasing, so Newton from the upper end converges monotonically; the
    bisection fallback only matters for warm starts below the root.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("xi must be non-negative")
    coeffs = np.asarray(coeffs, dtype=float)
    a0 = coeffs[0]
    shape = np.broadcast_shapes(xi.shape, a0.shape)
    xi = np.broadcast_to(xi, shape)
    if linear or alphas.size == 1:
        return np.broadcast_to(xi / a0, shape).copy()
    if shape == ():
        return solve_s_coeffs([np.reshape(c, (1,)) for c in coeffs], alphas, xi.reshape(1),
                              rtol, atol, maxiter,
                              None if s_init is None else np.reshape(s_init, (1,)))[0]
    cs = [np.broadcast_to(c, shape) for c in coeffs]
    aN = cs[-1]
    hi = np.minimum((xi / aN) ** (1.0 / (alphas[-1] + 1.0)), xi / cs[0])
    lo = np.zeros(shape)
    s = hi.copy()
    if s_init is not None:
        s0 = np.broadcast_to(np.asarray(s_init, float), shape)
        inside = (s0 > lo) & (s0 < hi)
        s = np.where(inside, s0, s)
    tol = rtol * np.maximum(xi, atol)
    eps4 = 4.0 * np.finfo(float).eps
    for _ in range(maxiter):
        g = cs[0].copy()
        fp = cs[0].copy()
        for c, alpha in zip(cs[1:], alphas[1:]):
            sa = c * s ** alpha
            g += sa
            fp += (alpha + 1.0) * sa
        f = s * g - xi
        done = (np.abs(f) <= tol) | ((hi - lo) <= eps4 * hi)
        if done.all():
            return s
        hi = np.where(f > 0, s, hi)
        lo = np.where(f < 0, s, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = s - f / fp
        bad = ~((newton > lo) & (newton < hi))
        s = np.where(done, s, np.where(bad, 0.5 * (lo + hi), newton))
    k = np.flatnonzero(~done)[0]
    raise NumericalError(
        f"root solve did not converge in {maxiter} iterations",
        bracket=(float(lo.flat[k]), float(hi.flat[k])))


def solve_s(model, x, xi, rtol=RTOL, atol=ATOL, maxiter=MAXITER):
    """Unique non-negative ``s`` with ``s g(x, s) = xi``."""
    return solve_s_coeffs(_coeffs(model, x), model.alphas, xi, rtol, atol, maxiter,
                          linear=model.linear_test_mode)


def K_coeffs(coeffs, alphas, xi, s_init=None, linear=False):
    """``K`` and the root ``s`` for raw coefficient arrays."""
    s = solve_s_coeffs(coeffs, alphas, xi, s_init=s_init, linear=linear)
    return 1.0 / g_values(coeffs, alphas, s), s


def eval_K(model, x, xi):
    """``K(x, xi)`` and ``dK/dxi`` by implicit differentiation.

    ``ds/dxi = 1 / (g + s g')`` and ``dK/dxi = -g'(s) ds/dxi / g^2``.  At
    ``xi = 0`` with ``alpha_1 < 1`` the derivative is ``-inf``.
    """
    c = _coeffs(model, x)
    s = solve_s(model, x, xi)
    g = g_values(c, model.alphas, s)
    sgp = _s_gprime(c, model.alphas, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        gprime = np.where(s > 0, sgp / np.where(s > 0, s, 1.0), _gprime_at_zero(c, model.alphas))
        dK = -gprime / (g * g * (g + sgp))
    return 1.0 / g, dK


def _gprime_at_zero(c, alphas):
    if alphas.size < 2:
        return np.zeros_like(np.asarray(c[0], float))
    if alphas[1] < 1.0:
        return np.where(c[1] > 0, np.inf, 0.0) * np.ones_like(c[0])
    if alphas[1] == 1.0:
        return c[1] * np.ones_like(c[0])
    return np.zeros_like(np.asarray(c[0], float))


def xi_dK_dxi(model, x, xi):
    """``xi * dK/dxi`` in the overflow-free form ``-s g' / (g (g + s g'))``."""
    c = _coeffs(model, x)
    s = solve_s(model, x, xi)
    g = g_values(c, model.alphas, s)
    sgp = _s_gprime(c, model.alphas, s)
    return -sgp / (g * (g + sgp))


def H_coeffs(coeffs, alphas, xi, s=None, linear=False):
    """Closed form of ``integral_0^xi 2u K(u) du``.

    Substituting ``u = s g(s)`` gives ``2 s xi - 2 sum a_i s^(alpha_i+2)/(alpha_i+2)``.
    """
    xi = np.asarray(xi, dtype=float)
    if s is None:
        s = solve_s_coeffs(coeffs, alphas, xi, linear=linear)
    out = 2.0 * s * xi
    for c, alpha in zip(coeffs, alphas):
        out = out - 2.0 * c * s ** (alpha + 2.0) / (alpha + 2.0)
    return np.maximum(out, 0.0)


def eval_H(model, x, xi, method="closed", qtol=QTOL):
    """``H(x, xi) = integral_0^{xi^2} K(x, sqrt(s)) ds``.

    ``method="closed"`` uses the exact antiderivative along the root curve;
    ``method="quad"`` integrates ``2u K(x, u)`` adaptively to relative
    tolerance ``qtol`` (scalar points only, slow).
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("xi must be non-negative")
    if method == "closed":
        return H_coeffs(_coeffs(model, x), model.alphas, xi, linear=model.linear_test_mode)
    if method != "quad":
        raise ValueError(f"unknown method {method!r}")
    c = _coeffs(model, x)
    xis, *cs = np.broadcast_arrays(xi, *c)
    out = np.empty(xis.shape)
    for k in np.ndindex(xis.shape):
        pt = np.array([ci[k] for ci in cs])
        kfun = lambda u: 2.0 * u / g_values(pt, model.alphas,
                                           solve_s_coeffs(pt, model.alphas, u))
        val, err = integrate.quad(kfun, 0.0, float(xis[k]), epsabs=0.0,
                                  epsrel=qtol, limit=200)
        if err > 10 * qtol * max(abs(val), 1e-300):
            raise NumericalError(f"quadrature did not reach qtol={qtol} (err={err:g})")
        out[k] = val
    return out


@dataclass
class DerivedWeights:
    """Pointwise weight fields derived from the coefficients."""

    a: float
    M_field: np.ndarray
    m_field: np.ndarray
    W1_field: np.ndarray
    W2_field: np.ndarray
    B1: float
    Bstar: float
    undefined: bool = False


def compute_weights(model, cell_volume=None):
    """Weights ``M, m, W1, W2`` and the integrals ``B1``, ``B*``.

    ``cell_volume`` defaults to a unit-measure domain split evenly over the
    grid points.  For ``linear_test_mode`` a flagged sentinel with NaN
    fields is returned.
    """
    shape = model.grid_shape
    npts = int(np.prod(shape)) if shape else 1
    if cell_volume is None:
        cell_volume = 1.0 / npts
    if model.linear_test_mode:
        nan = np.full(shape, np.nan)
        return DerivedWeights(np.nan, nan, nan, nan, nan, np.nan, np.nan, undefined=True)
    c = model.coeffs
    a = model.a
    N = model.N
    aN = c[-1]
    M = c.max(axis=0)
    m = np.minimum(c[0], aN)
    W1 = aN ** a / (2.0 * N * M)
    W2 = N * M / (m * aN ** (1.0 - a))
    B1 = float(np.sum(aN) * cell_volume)
    return DerivedWeights(a, M, m, W1, W2, B1, max(B1, 1.0))


@dataclass
class SamplingPlan:
    """Grid points, gradient magnitudes and vector pairs for bound checks."""

    points: np.ndarray          # flat grid indices, shape (n,)
    xi: np.ndarray              # shape (n,)
    y: np.ndarray               # shape (n, dim)
    yp: np.ndarray              # shape (n, dim)


def make_sampling_plan(model, n, rng, dim=2, log_xi=(-6.0, 6.0)):
    npts = int(np.prod(model.grid_shape)) if model.grid_shape else 1
    points = rng.integers(0, npts, size=n)
    xi = 10.0 ** rng.uniform(*log_xi, size=n)
    xi[: max(1, n // 100)] = 0.0
    mags = 10.0 ** rng.uniform(*log_xi, size=(2, n))
    dirs = rng.normal(size=(2, n, dim))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    y = dirs[0] * mags[0][:, None]
    yp = dirs[1] * mags[1][:, None]
    # a few coincident and nearly coincident pairs
    k = max(1, n // 50)
    yp[:k] = y[:k]
    yp[k:2 * k] = y[k:2 * k] * (1.0 + 1e-3 * rng.normal(size=(k, 1)))
    return SamplingPlan(points, xi, y, yp)


def _flat_coeffs(model, points):
    c = model.coeffs.reshape(model.coeffs.shape[0], -1)
    return c[:, points]


def _le(lhs, rhs, slack=SLACK, floor=0.0):
    """Normalized slack of ``lhs <= rhs``; pass iff >= -slack."""
    scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(scale > 0, (rhs - lhs) / np.where(scale > 0, scale, 1.0), 0.0)
    return r


@dataclass
class _Family:
    name: str
    anchor: str
    slacks: list = field(default_factory=list)


def verify_pointwise_bounds(model, samples, slack=SLACK):
    """Check the six pointwise inequality families on ``samples``.

    Returns a report :class:`Section`; violations are entries, never
    exceptions.
    """
    if model.linear_test_mode:
        raise ValueError("pointwise bounds are undefined in linear_test_mode")
    w = compute_weights(model)
    a = w.a
    alphas = model.alphas
    pts = samples.points
    c = _flat_coeffs(model, pts)
    W1 = w.W1_field.reshape(-1)[pts]
    W2 = w.W2_field.reshape(-1)[pts]
    aN = c[-1]
    xi = samples.xi
    eps = np.finfo(float).eps

    s = solve_s_coeffs(c, alphas, xi)
    g = g_values(c, alphas, s)
    K = 1.0 / g
    sgp = _s_gprime(c, alphas, s)
    xiKx = -sgp / (g * (g + sgp))
    H = H_coeffs(c, alphas, xi, s=s)

    checks = []

    def add(name, anchor, *pairs):
        worst = np.inf
        where = None
        for lhs, rhs, mask, floor in pairs:
            r = _le(lhs, rhs, slack, floor)
            if mask is not None:
                r = np.where(mask, r, np.inf)
            k = int(np.argmin(r))
            if r[k] < worst:
                worst, where = float(r[k]), k
        checks.append((name, anchor, worst, where))

    pos = xi > 0
    xa = xi ** a
    x2a = xi ** (2.0 - a)
    add("K two-sided bound", "2W1/(xi^a+aN^a) <= K <= W2/xi^a",
        (2.0 * W1 / (xa + aN ** a), K, None, 0.0),
        (K, W2 / np.where(pos, xa, 1.0), pos, 0.0))
    add("K xi^2 two-sided bound", "W1 xi^(2-a) - aN/2 <= K xi^2 <= W2 xi^(2-a)",
        (W1 * x2a - aN / 2.0, K * xi ** 2, None, 4 * eps * aN),
        (K * xi ** 2, W2 * x2a, None, 0.0))

    # finite-difference derivative with a Richardson error estimate
    hstep = np.where(pos, 1e-4 * xi, 0.0)
    def Kat(v):
        return 1.0 / g_values(c, alphas, solve_s_coeffs(c, alphas, v))
    d1 = xi * (Kat(xi + hstep) - Kat(np.maximum(xi - hstep, 0))) / np.where(pos, 2 * hstep, 1.0)
    d2 = xi * (Kat(xi + hstep / 2) - Kat(np.maximum(xi - hstep / 2, 0))) / np.where(pos, hstep, 1.0)
    fd = np.where(pos, (4 * d2 - d1) / 3, 0.0)
    fd_err = np.abs(d2 - d1) + 1e3 * eps * K
    add("derivative bound", "-aK <= xi dK/dxi <= 0 (analytic and finite difference)",
        (-a * K, xiKx, None, 0.0),
        (xiKx, np.zeros_like(xiKx), None, eps * K),
        (-a * K - fd_err, fd, pos, 0.0),
        (fd, fd_err, pos, 0.0))
    add("H versus K xi^2", "K xi^2 <= H <= 2 K xi^2",
        (K * xi ** 2, H, None, 64 * eps * K * xi ** 2),
        (H, 2 * K * xi ** 2, None, 0.0))
    add("H versus weights", "W1 xi^(2-a) - aN/2 <= H <= 2 W2 xi^(2-a)",
        (W1 * x2a - aN / 2.0, H, None, 4 * eps * aN),
        (H, 2 * W2 * x2a, None, 0.0))

    ny = np.linalg.norm(samples.y, axis=1)
    nyp = np.linalg.norm(samples.yp, axis=1)
    Ky = 1.0 / g_values(c, alphas, solve_s_coeffs(c, alphas, ny))
    Kyp = 1.0 / g_values(c, alphas, solve_s_coeffs(c, alphas, nyp))
    Kmax = np.minimum(Ky, Kyp)  # K is nonincreasing: K(max(|y|,|y'|))
    diff = samples.y - samples.yp
    lhs = np.sum((Ky[:, None] * samples.y - Kyp[:, None] * samples.yp) * diff, axis=1)
    rhs = (1.0 - a) * Kmax * np.sum(diff ** 2, axis=1)
    floor = 64 * eps * np.maximum(Ky * ny, Kyp * nyp) * np.linalg.norm(diff, axis=1)
    add("monotonicity", "(K(|y|)y - K(|y'|)y').(y - y') >= (1-a) K(max(|y|,|y'|)) |y-y'|^2",
        (rhs, lhs, None, floor))

    section = Section("pointwise bounds")
    for name, anchor, worst, k in checks:
        ok = worst >= -slack
        detail = {"n_samples": int(xi.size), "worst_slack": worst}
        if not ok and k is not None:
            detail["sample"] = {"point": int(pts[k]), "xi": float(xi[k]),
                                "y": samples.y[k].tolist(), "yp": samples.yp[k].tolist()}
        section.add(Verdict(name=name, anchor=anchor,
                            status="PASS" if ok else "FAIL",
                            margin=worst, details=detail))
    return section
