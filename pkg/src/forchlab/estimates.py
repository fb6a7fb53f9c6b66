"""Weighted norms, boundary-data functionals and trajectory-level estimates.

Generic constants are handled empirically: for an inequality
``L <= E + C R`` (``E`` the part carrying an explicit unit coefficient) the
report records ``C_hat = sup L / (E + R)`` and ``C_min = sup (L - E) / R``
and asks that ``C_hat`` stay finite and grow by less than 25% under a
simultaneous halving of ``h`` and ``dt``.  Differential forms use central
differences with the slack of :func:`odetoolkit.differencing_slack`
subtracted from the left side.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .constitutive import H_coeffs, K_coeffs
from .fields import cell_gradient
from .odetoolkit import (certify_infinite_integral, cumulative, differencing_slack,
                         gronwall_linear_envelope, tail_mask)
from .report import Section, Verdict

REFINE_GROWTH = 1.25
REFINE_FLOOR = 1e-6
ZERO_FLOOR = 1e-6


def weighted_norm(u, w, p, cell_volume=None):
    """``(sum w |u|^p dV)^(1/p)`` by the midpoint rule; unit measure by default."""
    u = np.asarray(u, float)
    w = np.asarray(w, float)
    if w.ndim and w.shape != u.shape:
        raise ValueError(f"field shape {u.shape} does not match weight shape {w.shape}")
    if p < 1:
        raise ValueError("p must be >= 1")
    dv = 1.0 / u.size if cell_volume is None else cell_volume
    return float(np.sum(w * np.abs(u) ** p) * dv) ** (1.0 / p)


# ----------------------------------------------------------------- series


@dataclass
class DiagnosticsSeries:
    """Per-time diagnostics; CSV columns follow the declaration order."""

    times: np.ndarray
    pbar_L2phi_sq: np.ndarray = None
    H_integral: np.ndarray = None
    gradp_W1: np.ndarray = None
    gradpbar_W1: np.ndarray = None
    K_gradp_sq: np.ndarray = None
    pbar_t_L2phi_sq: np.ndarray = None
    K_gradq_sq: np.ndarray = None
    G: np.ndarray = None
    G1: np.ndarray = None
    G2: np.ndarray = None
    M: np.ndarray = None
    D: np.ndarray = None
    D1: np.ndarray = None
    D2: np.ndarray = None
    h1: np.ndarray = None
    h2: np.ndarray = None
    R: np.ndarray = None
    V: np.ndarray = None
    Pbar_L2phi_sq: np.ndarray = None
    gradPbar_W1: np.ndarray = None
    Kmax_gradPbar_sq: np.ndarray = None
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def columns(self):
        out = {"t": np.asarray(self.times)}
        for f in dc_fields(self):
            if f.name in ("times", "flags", "meta"):
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = np.asarray(v)
        return out

    @property
    def a(self):
        return self.meta["a"]


def _ctx(medium):
    w = medium.weights
    if w.undefined:
        raise ValueError("estimates need a Forchheimer model (linear_test_mode has no weights)")
    return w


def boundary_functionals(boundary, medium, times):
    """``G, G1, G2`` and the running envelope ``M = max(1, max_{[0,t]} G)``."""
    w = _ctx(medium)
    a = w.a
    grid = medium.grid
    dv = grid.cell_volume
    a0 = medium.model.coeffs[0]
    phi = medium.porosity
    times = np.asarray(times, float)
    G, G1, G2 = (np.empty(times.size) for _ in range(3))
    for i, t in enumerate(times):
        gpsi = boundary.grad_cells(grid, t)
        ng = np.sqrt(np.sum(gpsi ** 2, axis=0))
        gpt = boundary.grad_cells(grid, t, time_derivative=True)
        X, Y = grid.centers()
        pt = boundary.time_derivative(X, Y, t)
        ptt = boundary.second_time_derivative(X, Y, t)
        G[i] = (w.Bstar + np.sum(ng ** 2 / a0) * dv + np.sum(w.W1_field * ng ** (2 - a)) * dv
                + (np.sum(pt ** 2 * phi) * dv) ** ((2 - a) / (2 * (1 - a))))
        G1[i] = np.sum(np.sum(gpt ** 2, axis=0) / a0) * dv
        G2[i] = np.sum(ptt ** 2 * phi) * dv
    M = np.maximum.accumulate(np.maximum(G, 1.0))
    return {"G": G, "G1": G1, "G2": G2, "M": M}


def difference_functionals(bA, bB, medium, times):
    """``D = D2 + D2^(1/2) + D1^(1/2)`` for ``Phi = Psi_A - Psi_B``."""
    grid = medium.grid
    dv = grid.cell_volume
    a0 = medium.model.coeffs[0]
    X, Y = grid.centers()
    D1 = np.empty(len(times))
    D2 = np.empty(len(times))
    for i, t in enumerate(times):
        gphi = bA.grad_cells(grid, t) - bB.grad_cells(grid, t)
        pt = bA.time_derivative(X, Y, t) - bB.time_derivative(X, Y, t)
        D1[i] = np.sum(pt ** 2 * medium.porosity) * dv
        D2[i] = np.sum(np.sum(gphi ** 2, axis=0) / a0) * dv
    return {"D": D2 + np.sqrt(D2) + np.sqrt(D1), "D1": D1, "D2": D2}


def _grad_fields(traj):
    """Cell gradients of ``p`` (with Psi on the boundary) and of ``pbar`` (zero trace)."""
    grid = traj.grid
    gp, gpb = [], []
    for i, t in enumerate(traj.times):
        gp.append(cell_gradient(traj.p[i], grid, traj.boundary.faces(grid, t)))
        gpb.append(cell_gradient(traj.pbar[i], grid, 0.0))
    return np.stack(gp), np.stack(gpb)


def trajectory_functionals(traj, check_stride=True):
    """All single-solution series for one trajectory.

    In ``linear_test_mode`` (Darcy, ``K = 1/a0``) the weight-based columns
    ``gradp_W1``, ``gradpbar_W1`` and the boundary functionals are left out.
    """
    medium = traj.medium
    model = medium.model
    linear = model.linear_test_mode
    w = None if linear else medium.weights
    a = 0.0 if linear else w.a
    grid = medium.grid
    dv = grid.cell_volume
    phi = medium.porosity
    t = traj.times
    gp, gpb = _grad_fields(traj)
    ngp = np.sqrt(np.sum(gp ** 2, axis=1))
    ngpb = np.sqrt(np.sum(gpb ** 2, axis=1))
    coeffs = model.coeffs
    if linear:
        K = np.broadcast_to(1.0 / coeffs[0], ngp.shape)
        H = K * ngp ** 2
    else:
        K, s = K_coeffs(coeffs[:, None], model.alphas, ngp)
        H = H_coeffs(coeffs[:, None], model.alphas, ngp, s=s)
    ax = tuple(range(1, traj.p.ndim))
    series = DiagnosticsSeries(times=t.copy())
    series.pbar_L2phi_sq = np.sum(traj.pbar ** 2 * phi, axis=ax) * dv
    series.H_integral = np.sum(H, axis=ax) * dv
    if not linear:
        series.gradp_W1 = np.sum(w.W1_field * ngp ** (2 - a), axis=ax) * dv
        series.gradpbar_W1 = np.sum(w.W1_field * ngpb ** (2 - a), axis=ax) * dv
    series.K_gradp_sq = np.sum(K * ngp ** 2, axis=ax) * dv
    if t.size >= 3:
        pbt = np.gradient(traj.pbar, t, axis=0)
        pt = np.gradient(traj.p, t, axis=0)
        series.pbar_t_L2phi_sq = np.sum(pbt ** 2 * phi, axis=ax) * dv
        # q = p_t carries boundary data Psi_t
        gq = np.stack([cell_gradient(pt[i], grid, [_dt_faces(traj, k, ti) for k in range(grid.dim)])
                       for i, ti in enumerate(t)])
        series.K_gradq_sq = np.sum(K * np.sum(gq ** 2, axis=1), axis=ax) * dv
        if check_stride:
            ptt = np.gradient(pbt, t, axis=0)
            dt = np.gradient(t)
            num = np.max(np.sqrt(np.sum(ptt[1:-1] ** 2 * phi, axis=ax) * dv) * dt[1:-1])
            den = np.max(np.sqrt(series.pbar_t_L2phi_sq[1:-1]))
            if den > 0 and num > 0.5 * den:
                series.flags.append("stride too coarse for differencing p_t")
    series.meta = {"a": a, "medium": medium.name, "boundary": traj.boundary.source,
                   "psi_zero": bool(traj.boundary.is_zero),
                   "differenced": traj.boundary.differenced,
                   "h": list(grid.h), "dt": traj.config.dt, "linear_test_mode": linear}
    if not linear:
        b = boundary_functionals(traj.boundary, medium, t)
        series.G, series.G1, series.G2, series.M = b["G"], b["G1"], b["G2"], b["M"]
        series.meta.update(B1=w.B1, Bstar=w.Bstar)
    return series


def _dt_faces(traj, k, t):
    X, Y = traj.grid.face_centers(k)
    return traj.boundary.time_derivative(X, Y, t)


def pair_functionals(trajA, trajB, sA=None, sB=None):
    """Continuous-dependence series for two solutions on the same medium."""
    if trajA.grid != trajB.grid or trajA.medium is not trajB.medium and not _same_medium(trajA.medium, trajB.medium):
        raise ValueError("pair trajectories must share grid and medium")
    if trajA.times.shape != trajB.times.shape or np.any(trajA.times != trajB.times):
        raise ValueError("pair trajectories must share output times")
    medium = trajA.medium
    w = _ctx(medium)
    a = w.a
    grid = medium.grid
    dv = grid.cell_volume
    sA = trajectory_functionals(trajA) if sA is None else sA
    sB = trajectory_functionals(trajB) if sB is None else sB
    t = trajA.times
    ax = tuple(range(1, trajA.p.ndim))
    Pb = trajA.pbar - trajB.pbar
    gPb = np.stack([cell_gradient(Pb[i], grid, 0.0) for i in range(t.size)])
    ngPb = np.sqrt(np.sum(gPb ** 2, axis=1))
    gpA, _ = _grad_fields(trajA)
    gpB, _ = _grad_fields(trajB)
    coeffs = medium.model.coeffs[:, None]
    KA, _ = K_coeffs(coeffs, medium.model.alphas, np.sqrt(np.sum(gpA ** 2, axis=1)))
    KB, _ = K_coeffs(coeffs, medium.model.alphas, np.sqrt(np.sum(gpB ** 2, axis=1)))
    d = difference_functionals(trajA.boundary, trajB.boundary, medium, t)
    ps = DiagnosticsSeries(times=t.copy())
    ps.D, ps.D1, ps.D2 = d["D"], d["D1"], d["D2"]
    ps.G = sA.G + sB.G
    ps.G1 = sA.G1 + sB.G1
    ps.G2 = sA.G2 + sB.G2
    ps.M = sA.M + sB.M
    ps.h1 = w.B1 + sA.H_integral + sB.H_integral
    ps.h2 = 1.0 + sA.H_integral + sB.H_integral + sA.pbar_L2phi_sq + sB.pbar_L2phi_sq
    ps.R = np.sqrt(ps.h2) * ps.h1 ** (a / (2 - a)) * ps.D
    ps.V = ps.M ** (2 / (2 - a)) + window_integral(t, ps.G1 + ps.G2, 1.0)
    ps.Pbar_L2phi_sq = np.sum(Pb ** 2 * medium.porosity, axis=ax) * dv
    ps.gradPbar_W1 = np.sum(w.W1_field * ngPb ** (2 - a), axis=ax) * dv
    ps.Kmax_gradPbar_sq = np.sum(np.minimum(KA, KB) * ngPb ** 2, axis=ax) * dv
    ps.meta = {"a": a, "B1": w.B1, "Bstar": w.Bstar,
               "H0": float(sA.H_integral[0] + sB.H_integral[0]),
               "P0": float(sA.pbar_L2phi_sq[0] + sB.pbar_L2phi_sq[0]),
               "pt_norm_sum": (np.sqrt(sA.pbar_t_L2phi_sq) + np.sqrt(sB.pbar_t_L2phi_sq)),
               "boundary": [trajA.boundary.source, trajB.boundary.source],
               "dt": trajA.config.dt, "h": list(grid.h)}
    ps.flags = sorted(set(sA.flags) | set(sB.flags))
    return ps


def _same_medium(m1, m2):
    return (m1.grid == m2.grid and np.array_equal(m1.porosity, m2.porosity)
            and np.array_equal(m1.model.coeffs, m2.model.coeffs)
            and np.array_equal(m1.model.alphas, m2.model.alphas))


def window_integral(t, f, width):
    """``int_{max(0, t - width)}^t f``."""
    F = cumulative(t, f)
    return F - np.interp(np.maximum(t - width, t[0]), t, F)


def exp_convolution(t, f, rate=0.25):
    """``int_0^t e^{-rate (t - s)} f(s) ds`` by trapezoidal recursion."""
    out = np.zeros_like(t, dtype=float)
    for n in range(t.size - 1):
        dt = t[n + 1] - t[n]
        e = np.exp(-rate * dt)
        out[n + 1] = e * out[n] + 0.5 * dt * (e * f[n] + f[n + 1])
    return out


# ----------------------------------------------------------------- constants


@dataclass
class EstimateConstants:
    a: float
    c_P: float
    d3: float | None = None
    d4: float | None = None
    generic: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)

    @property
    def d1(self):
        return 2.0 ** (self.a - 1.0)

    @property
    def d2(self):
        return self.d1 * self.c_P ** (self.a - 2.0)

    @property
    def kappa0(self):
        return (2.0 + self.a) / (2.0 * (2.0 - self.a))

    def to_dict(self):
        return {"a": self.a, "c_P": self.c_P, "d1": self.d1, "d2": self.d2,
                "kappa0": self.kappa0, "d3": self.d3, "d4": self.d4,
                "generic": self.generic, "calibration": self.calibration}


@dataclass
class TailLimits:
    window: float
    A_hat: float
    B_hat: float
    G1_hat: float
    G2_hat: float
    G1_window_hat: float
    G12_window_hat: float
    D_hat: float | None = None

    def to_dict(self):
        return dict(self.__dict__)


def tail_limits(series, window=0.25):
    """Tail-window maxima standing in for the limsups of the boundary data."""
    t = series.times
    if t.size < 12:
        raise ValueError("series too short for tail estimates (need >= 12 samples)")
    tm = tail_mask(t, window)
    if tm.sum() < 3:
        raise ValueError("tail window holds fewer than 3 samples")
    dG = np.gradient(series.G, t)
    out = TailLimits(
        window=window,
        A_hat=float(np.max(series.G[tm])),
        B_hat=float(np.max(np.maximum(-dG, 0.0)[tm])),
        G1_hat=float(np.max(series.G1[tm])),
        G2_hat=float(np.max(series.G2[tm])),
        G1_window_hat=float(np.max(window_integral(t, series.G1, 1.0)[tm])),
        G12_window_hat=float(np.max(window_integral(t, series.G1 + series.G2, 1.0)[tm])),
    )
    if series.D is not None:
        out.D_hat = float(np.max(series.D[tm]))
    return out


# ----------------------------------------------------------------- protocol


@dataclass
class _Form:
    name: str
    anchor: str
    lhs: np.ndarray
    rhs: np.ndarray
    explicit: np.ndarray | float = 0.0
    mask: np.ndarray | None = None
    kind: str = "generic"        # generic | tail
    T: float | None = None
    zero_scale: float = 1.0


def _ratio(form):
    L = np.atleast_1d(np.asarray(form.lhs, float))
    E = np.broadcast_to(np.asarray(form.explicit, float), L.shape)
    Rr = np.broadcast_to(np.asarray(form.rhs, float), L.shape)
    m = np.ones(L.shape, bool) if form.mask is None else np.asarray(form.mask, bool)
    if not m.any():
        return {"C_hat": np.nan, "C_min": np.nan, "t_arg": None, "n": 0}
    L, E, Rr = L[m], E[m], Rr[m]
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(E)) and np.all(np.isfinite(Rr))):
        bad = ~(np.isfinite(L) & np.isfinite(E) & np.isfinite(Rr))
        return {"C_hat": np.nan, "C_min": np.nan, "arg": int(np.argmax(bad)), "n": int(m.sum()),
                "nonfinite": True}
    den = E + Rr
    zero_tol = ZERO_FLOOR * max(form.zero_scale, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, L / den, np.where(L > zero_tol, np.inf, 0.0))
        rm = np.where(Rr > 0, (L - E) / Rr, np.where(L - E > zero_tol, np.inf, 0.0))
    k = int(np.argmax(r))
    return {"C_hat": float(max(0.0, r[k])), "C_min": float(max(0.0, np.max(rm))),
            "arg": k, "n": int(m.sum())}


def _tail(times, values, window):
    return float(np.max(np.asarray(values)[tail_mask(times, window)]))


def _diff_lhs(t, y):
    """Central-difference derivative minus its differencing slack; end points masked."""
    dy = np.gradient(y, t)
    slack = differencing_slack(t, y)
    interior = np.ones(t.size, bool)
    interior[[0, -1]] = False
    return dy - slack, interior


def single_forms(series, constants, window=0.25, t0=0.5, T=1.0):
    """All single-solution estimates as ``L <= E + C R`` records."""
    s = series
    t = s.times
    a = s.a
    q2 = 2.0 / (2.0 - a)
    qB = 1.0 / (1.0 - a)
    tl = tail_limits(s, window)
    y = s.pbar_L2phi_sq
    H = s.H_integral
    J = s.gradp_W1
    pt2 = s.pbar_t_L2phi_sq
    G, G1, G2, M = s.G, s.G1, s.G2, s.M
    Mq = M ** q2
    y0, H0 = y[0], H[0]
    forms = []
    dlhs, interior = _diff_lhs(t, y)
    forms.append(_Form("energy inequality", "d/dt int pbar^2 phi + int K|grad p|^2 <= C G",
                       dlhs + s.K_gradp_sq, G, mask=interior))
    forms.append(_Form("energy inequality, W1 form",
                       "d/dt int pbar^2 phi + d1 int W1|grad pbar|^(2-a) <= C G, d1 = 2^(a-1)",
                       dlhs + constants.d1 * s.gradpbar_W1, G, mask=interior))
    forms.append(_Form("energy inequality, Bernoulli form",
                       "d/dt int pbar^2 phi <= -d2 (int pbar^2 phi)^((2-a)/2) + C G, d2 = d1 c_P^(a-2)",
                       dlhs + constants.d2 * y ** ((2 - a) / 2), G, mask=interior))
    after1 = t >= T
    after_t0 = t >= t0
    tail = tail_mask(t, window)
    # L2 estimates
    forms.append(_Form("L2 bound (i)", "int pbar^2 phi <= y(0) + C M^(2/(2-a))", y, Mq, explicit=y0))
    forms.append(_Form("L2 bound (ii)", "limsup int pbar^2 phi <= C A^(2/(2-a))",
                       _tail(t, y, window), tl.A_hat ** q2, kind="tail"))
    forms.append(_Form("L2 bound (iii)", "int pbar^2 phi <= C (B^(1/(1-a)) + G^(2/(2-a))), t > T",
                       y, tl.B_hat ** qB + G ** q2, mask=after1, T=T))
    # gradient estimates through H
    cG1 = exp_convolution(t, G1)
    wG1 = window_integral(t, G1, 1.0)
    wGG1 = window_integral(t, G + G1, 1.0)
    w12 = window_integral(t, G1 + G2, 1.0)
    forms.append(_Form("H gradient bound (i)",
                       "int H <= e^(-t/4) int H(0) + C (y(0) + M^(2/(2-a)) + int_0^t e^(-(t-s)/4) G1)",
                       H, y0 + Mq + cG1, explicit=np.exp(-t / 4) * H0))
    forms.append(_Form("H gradient bound (ii)", "limsup int H <= C (A^(2/(2-a)) + limsup G1)",
                       _tail(t, H, window), tl.A_hat ** q2 + tl.G1_hat, kind="tail"))
    half = window_integral(t, pt2, 0.5)
    y_lag = np.interp(t - 1.0, t, y)
    forms.append(_Form("H uniform Gronwall bound",
                       "int H(t) + 1/2 int_(t-1/2)^t int pbar_t^2 phi <= C (y(t-1) + int_(t-1)^t (G + G1)), t >= 1",
                       H + 0.5 * half, y_lag + wGG1, mask=after1, T=T))
    forms.append(_Form("H gradient bound, t >= 1 (i)",
                       "int H <= C (y(0) + M^(2/(2-a)) + int_(t-1)^t G1), t >= 1",
                       H, y0 + Mq + wG1, mask=after1, T=T))
    forms.append(_Form("H gradient bound, t >= 1 (ii)",
                       "limsup int H <= C (A^(2/(2-a)) + limsup int_(t-1)^t G1)",
                       _tail(t, H, window), tl.A_hat ** q2 + tl.G1_window_hat, kind="tail"))
    forms.append(_Form("H gradient bound, t >= 1 (iii)",
                       "int H <= C (B^(1/(1-a)) + G^(2/(2-a)) + int_(t-1)^t G1), t > T",
                       H, tl.B_hat ** qB + G ** q2 + wG1, mask=after1, T=T))
    # W1-weighted gradient
    forms.append(_Form("W1 gradient bound (i)",
                       "int W1|grad p|^(2-a) <= e^(-t/4) int H(0) + C (y(0) + M^(2/(2-a)) + int_0^t e^(-(t-s)/4) G1)",
                       J, y0 + Mq + cG1, explicit=np.exp(-t / 4) * H0))
    forms.append(_Form("W1 gradient bound (ii)",
                       "int W1|grad p|^(2-a) <= C (y(0) + M^(2/(2-a)) + int_(t-1)^t G1), t >= 1",
                       J, y0 + Mq + wG1, mask=after1, T=T))
    forms.append(_Form("W1 gradient bound (iii)",
                       "limsup int W1|grad p|^(2-a) <= C (A^(2/(2-a)) + limsup G1)",
                       _tail(t, J, window), tl.A_hat ** q2 + tl.G1_hat, kind="tail"))
    forms.append(_Form("W1 gradient bound (iv)",
                       "int W1|grad p|^(2-a) <= C (B^(1/(1-a)) + G^(2/(2-a)) + int_(t-1)^t G1), t > T",
                       J, tl.B_hat ** qB + G ** q2 + wG1, mask=after1, T=T))
    # time derivative
    dq, _ = _diff_lhs(t, pt2)
    forms.append(_Form("p_t differential inequality",
                       "d/dt int qbar^2 phi <= -(1-a) int K|grad q|^2 + int qbar^2 phi + C (G1 + G2)",
                       dq + (1 - a) * s.K_gradq_sq - pt2, G1 + G2,
                       mask=interior & after_t0, T=t0, zero_scale=max(np.max(pt2[after_t0]), 1e-300)))
    i0 = np.searchsorted(t, t0)
    G1_0 = cumulative(t, G1)[i0] / t0
    forms.append(_Form("p_t bound (i)",
                       "int H + int pbar_t^2 phi <= C (t0^-1 int [H(0) + pbar(0)^2 phi] + t0^-1 int_0^t0 G1 "
                       "+ M^(2/(2-a)) + int_0^t e^(-(t-s)/4) (G1 + G2)), t >= t0",
                       H + pt2, (H0 + y0) / t0 + G1_0 + Mq + exp_convolution(t, G1 + G2),
                       mask=after_t0, T=t0))
    forms.append(_Form("p_t bound (ii)",
                       "int pbar_t^2 phi <= C (y(0) + M^(2/(2-a)) + int_(t-1)^t (G1 + G2)), t >= 1",
                       pt2, y0 + Mq + w12, mask=after1, T=T))
    forms.append(_Form("p_t bound (iii)",
                       "limsup int pbar_t^2 phi <= C (A^(2/(2-a)) + limsup int_(t-1)^t (G1 + G2))",
                       _tail(t, pt2, window), tl.A_hat ** q2 + tl.G12_window_hat, kind="tail"))
    forms.append(_Form("p_t bound (iii), pointwise data",
                       "limsup int pbar_t^2 phi <= C (A^(2/(2-a)) + limsup (G1 + G2))",
                       _tail(t, pt2, window), tl.A_hat ** q2 + tl.G1_hat + tl.G2_hat, kind="tail"))
    forms.append(_Form("p_t bound (iv)",
                       "int pbar_t^2 phi <= C (B^(1/(1-a)) + G^(2/(2-a)) + int_(t-1)^t (G1 + G2)), t > T",
                       pt2, tl.B_hat ** qB + G ** q2 + w12, mask=after1, T=T))
    return forms, tl


def _evaluate(forms, times):
    out = {}
    for f in forms:
        r = _ratio(f)
        if f.kind != "tail" and r.get("arg") is not None:
            m = np.ones(times.size, bool) if f.mask is None else f.mask
            r["t_arg"] = float(times[np.flatnonzero(m)[r["arg"]]])
        else:
            r["t_arg"] = None
        r.pop("arg", None)
        r.setdefault("nonfinite", False)
        out[f.name] = (f, r)
    return out


def _stability(c_coarse, c_fine):
    if not (np.isfinite(c_coarse) and np.isfinite(c_fine)):
        return False, np.nan
    ratio = c_fine / c_coarse if c_coarse > 0 else (1.0 if c_fine == 0 else np.inf)
    return bool(c_fine <= REFINE_GROWTH * c_coarse + REFINE_FLOOR), float(ratio)


FAMILIES = ("energy", "l2", "gradient", "time_derivative", "monitor")


def family(name):
    """Estimate family of a single-solution verdict name."""
    if name.startswith(("energy", "L2 energy")):
        return "energy"
    if name.startswith("L2 bound"):
        return "l2"
    if name.startswith(("H ", "W1 ")):
        return "gradient"
    if name.startswith("p_t"):
        return "time_derivative"
    return "monitor"


def verify_single_solution(traj, series, constants, refined=None, window=0.25, t0=0.5, T=1.0,
                           families=None):
    """Check the energy, L2, gradient and time-derivative estimates on one run.

    ``refined`` is an optional ``(traj, series)`` computed with ``h`` and
    ``dt`` halved; with it every generic constant also gets a refinement
    verdict.
    """
    if series.meta.get("linear_test_mode"):
        raise ValueError("estimate verification needs a Forchheimer model, not linear_test_mode")
    section = Section("single solution")
    forms, tl = single_forms(series, constants, window, t0, T)
    res = _evaluate(forms, series.times)
    res_f = None
    if refined is not None:
        forms_f, _ = single_forms(refined[1], constants, window, t0, T)
        res_f = _evaluate(forms_f, refined[1].times)
    for name, (f, r) in res.items():
        finite = np.isfinite(r["C_hat"])
        refinement = None
        ok = finite
        if res_f is not None:
            cf = res_f[name][1]["C_hat"]
            stable, ratio = _stability(r["C_hat"], cf)
            refinement = {"C_hat_coarse": r["C_hat"], "C_hat_fine": cf, "ratio": ratio,
                          "stable": stable, "max_growth": REFINE_GROWTH}
            ok = ok and stable
        details = {"C_min": r["C_min"], "n_samples": r["n"], "t_at_sup": r["t_arg"],
                   "nonfinite_series": r["nonfinite"]}
        if f.T is not None:
            details["T"] = f.T
        section.add(Verdict(name, f.anchor, "PASS" if ok else "FAIL", C_hat=r["C_hat"],
                            refinement=refinement, details=details))
    # explicit-constant chain for homogeneous boundary data
    if series.meta.get("psi_zero"):
        _explicit_zero_data(section, series, constants, res)
    _poincare_monitor(section, series.pbar_L2phi_sq, series.gradpbar_W1, series.a,
                      constants.c_P, series.times, "pbar")
    section.add(Verdict("tail limits", "limsup surrogates: tail-window maxima", "PASS",
                        details=tl.to_dict()))
    if series.flags:
        section.add(Verdict("differencing stride", "p_t by central differences", "INCONCLUSIVE",
                            details={"flags": series.flags}))
    if families is not None:
        unknown = set(families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown estimate families {sorted(unknown)}; choose from {FAMILIES}")
        section.entries = [v for v in section.entries if family(v.name) in families]
    return section


def _explicit_zero_data(section, series, constants, res):
    """With Psi = 0 the energy identity gives ``y' + 2 int W1|grad p|^(2-a) <= B1``.

    Since ``d1 < 2`` and ``d2 <= 2 c_P^(a-2)`` under the monitored two-weight
    inequality, the W1 and Bernoulli forms hold with the explicit constant
    ``B1 / B* <= 1``; the energy equality itself makes ``y`` nonincreasing.
    """
    bound = series.meta["B1"] / series.meta["Bstar"]
    for name in ("energy inequality, W1 form", "energy inequality, Bernoulli form"):
        _, r = res[name]
        margin = bound - r["C_hat"]
        section.add(Verdict(name + ", explicit constant (zero boundary data)",
                            "C <= B1/B* <= 1 with d1 = 2^(a-1), d2 = d1 c_P^(a-2)",
                            "PASS" if margin >= 0 else "FAIL", C_hat=r["C_hat"], margin=margin,
                            first_violation_time=None if margin >= 0 else r["t_arg"],
                            details={"explicit_bound": bound}))
    y = series.pbar_L2phi_sq
    inc = np.diff(y) - 1e-12 * np.maximum(y[:-1], 1e-300)
    bad = np.flatnonzero(inc > 0)
    section.add(Verdict("L2 energy nonincreasing (zero boundary data)",
                        "d/dt int pbar^2 phi <= 0 when Psi = 0",
                        "PASS" if bad.size == 0 else "FAIL",
                        margin=float(-np.max(inc)) if inc.size else 0.0,
                        first_violation_time=float(series.times[bad[0] + 1]) if bad.size else None))


def _poincare_monitor(section, Y, J, a, cp, times, label):
    lhs = np.sqrt(Y)
    rhs = cp * J ** (1.0 / (2.0 - a))
    bad = lhs > rhs * (1 + 1e-12) + 1e-300
    ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0)
    section.add(Verdict(f"two-weight inequality on {label}",
                        "||u||_(L2_phi) <= c_P ||grad u||_(L^(2-a)_W1)",
                        "PASS" if not bad.any() else "FAIL",
                        margin=float(1.0 - np.max(ratio)) if ratio.size else 1.0,
                        first_violation_time=float(times[np.flatnonzero(bad)[0]]) if bad.any() else None,
                        details={"c_P": cp, "max_ratio_over_cP": float(np.max(ratio))}))


# ----------------------------------------------------------------- pairs


def _m1(ps):
    a = ps.a
    return (ps.meta["H0"] + ps.meta["P0"] + ps.M ** (2 / (2 - a))
            + np.maximum.accumulate(ps.G1))


def _m2(ps, t0):
    a = ps.a
    return ((ps.meta["H0"] + ps.meta["P0"]) / t0 + ps.M ** (2 / (2 - a))
            + np.maximum.accumulate(ps.G1 + ps.G2))


def _r_lhs(ps, kind, d):
    a = ps.a
    t = ps.times
    dl, interior = _diff_lhs(t, ps.Pbar_L2phi_sq)
    h = ps.h1 ** (-a / (2 - a))
    if kind == "r1":
        return dl + d * h * ps.gradPbar_W1 ** (2 / (2 - a)), interior
    return dl + d * h * ps.Pbar_L2phi_sq, interior


def _holds_without_forcing(ps, kind, d):
    L, interior = _r_lhs(ps, kind, d)
    scale = ZERO_FLOOR * max(ps.Pbar_L2phi_sq[0], 1e-300)
    return bool(np.all(L[interior] <= scale))


def envelope(ps, constants, C_r2=None):
    """Gronwall envelope for ``||Pbar||^2`` driven by ``M1``.

    The generic constants are the measured ones: ``h1 <= C_h1 M1``,
    ``h2 <= C_h2 M1`` and the forcing constant of the ``d4`` inequality.
    """
    a = ps.a
    t = ps.times
    M1 = _m1(ps)
    C_h1 = float(np.max(ps.h1 / M1))
    C_h2 = float(np.max(ps.h2 / M1))
    if C_r2 is None:
        C_r2 = _ratio(_Form("", "", _r_lhs(ps, "r2", constants.d4)[0], ps.D * np.sqrt(ps.h2),
                            mask=_r_lhs(ps, "r2", constants.d4)[1],
                            zero_scale=ps.Pbar_L2phi_sq[0]))["C_min"]
        C_r2 = C_r2 if np.isfinite(C_r2) else 0.0
    h = constants.d4 * (C_h1 * M1) ** (-a / (2 - a))
    f = C_r2 * np.sqrt(C_h2 * M1) * ps.D
    E = gronwall_linear_envelope(ps.Pbar_L2phi_sq[0], h, f, t).values
    slack = cumulative(t, differencing_slack(t, ps.Pbar_L2phi_sq))
    return E, slack, {"C_h1": C_h1, "C_h2": C_h2, "C_r2": C_r2}


def _envelope_dominates(ps, constants):
    E, slack, _ = envelope(ps, constants)
    Y = ps.Pbar_L2phi_sq
    return bool(np.all(Y <= E + slack + ZERO_FLOOR * max(Y[0], 1e-300) * 1e-6))


def calibrate_pair_constants(calibration_pairs, a, c_P, max_halvings=60, bisect_steps=20):
    """Calibrate ``d3`` and ``d4`` on pairs with identical boundary data.

    ``d3`` is seeded with ``(1 - a) / C_J`` where ``C_J`` is the measured
    constant of the Holder step ``(int W1|grad P|^(2-a))^(2/(2-a)) <= C_J
    h1^(a/(2-a)) int K_max |grad P|^2``; ``d4`` is seeded with ``d3 / c_P^2``
    (the two-weight inequality applied to ``Pbar``).  Both are shrunk by
    halving and then bisected up to the largest value that keeps the
    unforced differential inequality (and, for ``d4``, the Gronwall
    envelope) valid on every calibration pair.
    """
    if not calibration_pairs:
        raise ValueError("calibration needs at least one pair")
    C_J = 0.0
    for ps in calibration_pairs:
        K = ps.Kmax_gradPbar_sq
        num = ps.gradPbar_W1 ** (2 / (2 - a))
        den = ps.h1 ** (a / (2 - a)) * K
        m = den > 0
        if m.any():
            C_J = max(C_J, float(np.max(num[m] / den[m])))
    C_J = C_J if C_J > 0 else 1.0
    d3_seed = (1.0 - a) / C_J

    def ok3(d):
        return all(_holds_without_forcing(ps, "r1", d) for ps in calibration_pairs)

    def ok4(d):
        c = EstimateConstants(a, c_P, d3=None, d4=d)
        return all(_holds_without_forcing(ps, "r2", d) and _envelope_dominates(ps, c)
                   for ps in calibration_pairs)

    d3, n3 = _shrink(d3_seed, ok3, max_halvings, bisect_steps)
    d4_seed = d3 / c_P ** 2
    d4, n4 = _shrink(d4_seed, ok4, max_halvings, bisect_steps)
    info = {"C_J": C_J, "d3_seed": d3_seed, "d4_seed": d4_seed, "d3_halvings": n3,
            "d4_halvings": n4, "n_pairs": len(calibration_pairs)}
    return EstimateConstants(a, c_P, d3=d3, d4=d4, calibration=info)


def _shrink(seed, ok, max_halvings, bisect_steps):
    d = seed
    n = 0
    while not ok(d):
        n += 1
        if n > max_halvings:
            raise RuntimeError("calibration failed: constant shrank below any useful size")
        d *= 0.5
    if n == 0:
        return d, 0
    lo, hi = d, 2.0 * d
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo, n


def pair_forms(ps, constants, window=0.25, t0=0.5, unbounded=False):
    a = ps.a
    t = ps.times
    k0 = constants.kappa0
    q2 = 2 / (2 - a)
    Y = ps.Pbar_L2phi_sq
    JP2 = ps.gradPbar_W1 ** q2
    tl = tail_limits(ps, window)
    zs = max(Y[0], 1e-300)
    forms = []
    L1, interior = _r_lhs(ps, "r1", constants.d3)
    forceD = ps.D * np.sqrt(ps.h2)
    forms.append(_Form("pair inequality, d3 form",
                       "d/dt ||Pbar||^2 <= -d3 h1^(-a/(2-a)) ||grad Pbar||_W1^2 + C D h2^(1/2)",
                       L1, forceD, mask=interior, zero_scale=zs))
    L2, _ = _r_lhs(ps, "r2", constants.d4)
    forms.append(_Form("pair inequality, d4 form",
                       "d/dt ||Pbar||^2 <= -d4 h1^(-a/(2-a)) ||Pbar||^2 + C D h2^(1/2)",
                       L2, forceD, mask=interior, zero_scale=zs))
    M1 = _m1(ps)
    forms.append(_Form("continuous dependence, finite horizon",
                       "sup_[0,T] ||Pbar||^2 <= ||Pbar(0)||^2 + C M1(T)^(1/2) int_0^T D",
                       np.maximum.accumulate(Y), np.sqrt(M1) * cumulative(t, ps.D),
                       explicit=Y[0], zero_scale=zs))
    tailY = _tail(t, Y, window)
    base = tl.A_hat ** q2 + tl.G1_hat
    forms.append(_Form("continuous dependence, large time",
                       "limsup ||Pbar||^2 <= C (A~^(2/(2-a)) + G1~)^kappa0 D~",
                       tailY, base ** k0 * tl.D_hat, kind="tail", zero_scale=zs))
    forms.append(_Form("continuous dependence, R form", "limsup ||Pbar||^2 <= C limsup R",
                       tailY, _tail(t, ps.R, window), kind="tail", zero_scale=zs))
    after_t0 = t >= t0
    forms.append(_Form("gradient difference bound",
                       "||grad Pbar||_W1^2 <= C h1^(a/(2-a)) (||p1_t|| + ||p2_t||) ||Pbar|| + C R",
                       JP2, ps.h1 ** (a / (2 - a)) * ps.meta["pt_norm_sum"] * np.sqrt(Y) + ps.R,
                       mask=after_t0, zero_scale=max(JP2[0], zs)))
    M2 = _m2(ps, t0)
    h = constants.d4 * M1 ** (-a / (2 - a))
    env = gronwall_linear_envelope(Y[0], h, np.sqrt(M1) * ps.D, t).values
    forms.append(_Form("gradient continuous dependence",
                       "||grad Pbar||_W1^2 <= C M2^kappa0 (envelope(M1) + D^2)^(1/2), t >= t0",
                       JP2, M2 ** k0 * np.sqrt(env + ps.D ** 2), mask=after_t0,
                       zero_scale=max(JP2[0], zs)))
    base2 = base + tl.G2_hat
    forms.append(_Form("gradient continuous dependence, large time",
                       "limsup ||grad Pbar||_W1^2 <= C [(A~^(2/(2-a)) + G1~ + G2~)^(3 kappa0) D~]^(1/2) "
                       "+ C (A~^(2/(2-a)) + G1~)^kappa0 D~",
                       _tail(t, JP2, window), np.sqrt(base2 ** (3 * k0) * tl.D_hat) + base ** k0 * tl.D_hat,
                       kind="tail", zero_scale=max(JP2[0], zs)))
    conds = {}
    if unbounded:
        V = ps.V
        m = t >= 1.0
        inf_ok, integral = certify_infinite_integral(t[m], V[m] ** (-a / (2 - a)))
        va = V ** (a / (2 - a))
        dva = np.abs(np.gradient(va, t))
        tm = tail_mask(t, window)
        half = tm.sum() // 2
        dtail = dva[tm]
        deriv_ok = bool(np.max(dtail) <= 0.05 and np.max(dtail[half:]) <= np.max(dtail[:half]) + 1e-15)
        conds = {"int_V_pow": integral, "int_V_pow_infinite": inf_ok,
                 "tail_max_dV_pow": float(np.max(dtail)), "V_pow_derivative_vanishes": deriv_ok}
        forms.append(_Form("continuous dependence, unbounded data",
                           "limsup ||Pbar||^2 <= C limsup V^kappa0 D  given int V^(-a/(2-a)) = inf",
                           tailY, _tail(t, V ** k0 * ps.D, window), kind="tail", zero_scale=zs))
        forms.append(_Form("gradient continuous dependence, unbounded data",
                           "limsup ||grad Pbar||_W1^2 <= C limsup [V^(3 kappa0) D]^(1/2) + C limsup V^kappa0 D",
                           _tail(t, JP2, window),
                           _tail(t, np.sqrt(V ** (3 * k0) * ps.D), window) + _tail(t, V ** k0 * ps.D, window),
                           kind="tail", zero_scale=max(JP2[0], zs)))
    return forms, tl, conds


def verify_pair(trajA, trajB, series, constants, window=0.25, t0=0.5, unbounded=False,
                identical_tol=1e-12):
    """Continuous-dependence checks for a pair; ``series`` from :func:`pair_functionals`."""
    if constants.d3 is None or constants.d4 is None:
        raise ValueError("d3 and d4 must be calibrated before verifying pairs")
    ps = series
    section = Section("solution pair")
    t = ps.times
    Y = ps.Pbar_L2phi_sq
    no_forcing = bool(np.all(ps.D == 0.0))
    same_init = bool(Y[0] == 0.0)
    if no_forcing and same_init:
        norm = float(np.sqrt(np.max(Y)))
        section.add(Verdict("identical data give identical solutions", "||Pbar(t)|| = 0",
                            "PASS" if norm <= identical_tol else "FAIL", margin=identical_tol - norm,
                            details={"max_norm": norm}))
    if no_forcing:
        inc = Y - Y[0] * (1 + 1e-12)
        bad = np.flatnonzero(inc > 1e-300)
        section.add(Verdict("unforced pair decays", "||Pbar(t)||^2 <= ||Pbar(0)||^2 when D = 0",
                            "PASS" if bad.size == 0 else "FAIL",
                            margin=float(-np.max(inc)),
                            first_violation_time=float(t[bad[0]]) if bad.size else None))
    forms, tl, conds = pair_forms(ps, constants, window, t0, unbounded)
    res = _evaluate(forms, t)
    for name, (f, r) in res.items():
        ok = np.isfinite(r["C_hat"])
        details = {"C_min": r["C_min"], "n_samples": r["n"], "t_at_sup": r["t_arg"],
                   "nonfinite_series": r["nonfinite"]}
        status = "PASS" if ok else "FAIL"
        if "unbounded" in name:
            details.update(conds)
            if not (conds["int_V_pow_infinite"] and
                    (conds["V_pow_derivative_vanishes"] or "gradient" not in name)):
                status = "INCONCLUSIVE" if ok else "FAIL"
        section.add(Verdict(name, f.anchor, status, C_hat=r["C_hat"], details=details))
    E, slack, info = envelope(ps, constants)
    bad = ~(Y <= E + slack + 1e-12 * max(Y[0], 1e-300))
    section.add(Verdict("Gronwall envelope with M1",
                        "||Pbar||^2 <= e^(-d4 int M1^(-a/(2-a))) ||Pbar(0)||^2 + C int e^(...) M1^(1/2) D",
                        "PASS" if not bad.any() else "FAIL",
                        margin=float(np.min(E + slack - Y)),
                        first_violation_time=float(t[np.flatnonzero(bad)[0]]) if bad.any() else None,
                        details=dict(info, d3=constants.d3, d4=constants.d4)))
    _poincare_monitor(section, Y, ps.gradPbar_W1, ps.a, constants.c_P, t, "Pbar")
    section.add(Verdict("pair tail limits", "limsup surrogates: tail-window maxima", "PASS",
                        details=tl.to_dict()))
    return section
