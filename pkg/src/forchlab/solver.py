"""Finite-volume solver for ``phi p_t = div(K(x, |grad p|) grad p) + f``.

Cell-centered unknowns on a uniform grid, two-point fluxes with
face-harmonic-mean coefficients, Dirichlet data imposed at boundary face
centers, backward Euler in time, and a Picard lag on ``K``.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .constitutive import K_coeffs, NumericalError
from .expr import Expression, compile_expr
from .fields import Grid, MediumSpec, build_medium, cell_gradient, face_gradients


class StepError(RuntimeError):
    def __init__(self, message, t=None, history=None):
        super().__init__(message)
        self.t = t
        self.history = history or []


@dataclass
class BoundaryExtension:
    """Extension ``Psi(x, t)`` of the Dirichlet data with its derivatives.

    Callables take ``(x, y, t)``.  ``Psi_t``, ``Psi_tt`` and the spatial
    gradients may be omitted, in which case they are obtained by central
    differencing (``differenced`` reports which ones).
    """

    Psi: object
    Psi_t: object = None
    Psi_tt: object = None
    grad: tuple = None
    grad_t: tuple = None
    source: str = None
    fd_step: float = 1e-4

    @classmethod
    def from_expr(cls, text):
        e = compile_expr(text)
        return cls(e, e.diff("t"), e.diff("t").diff("t"),
                   (e.diff("x"), e.diff("y")),
                   (e.diff("x").diff("t"), e.diff("y").diff("t")), source=e.source)

    @classmethod
    def zero(cls):
        return cls.from_expr("0")

    @property
    def differenced(self):
        return [n for n in ("Psi_t", "Psi_tt", "grad", "grad_t") if getattr(self, n) is None]

    @property
    def is_zero(self):
        return isinstance(self.Psi, Expression) and self.Psi.sym == 0

    def _dt(self, f, x, y, t, order=1):
        d = self.fd_step
        if order == 1:
            return (f(x, y, t + d) - f(x, y, t - d)) / (2 * d)
        return (f(x, y, t + d) - 2 * f(x, y, t) + f(x, y, t - d)) / d ** 2

    def value(self, x, y, t):
        return self.Psi(x, y, t)

    def time_derivative(self, x, y, t):
        if self.Psi_t is not None:
            return self.Psi_t(x, y, t)
        return self._dt(self.Psi, x, y, t)

    def second_time_derivative(self, x, y, t):
        if self.Psi_tt is not None:
            return self.Psi_tt(x, y, t)
        return self._dt(self.Psi, x, y, t, order=2)

    def cells(self, grid, t):
        X, Y = grid.centers()
        return self.value(X, Y, t)

    def faces(self, grid, t):
        """Values on the faces normal to each axis (used as Dirichlet data on the ends)."""
        return [self.value(*grid.face_centers(k), t) for k in range(grid.dim)]

    def grad_cells(self, grid, t, time_derivative=False):
        """Analytic (or differenced) gradient at cell centers, shape ``(dim, *shape)``."""
        X, Y = grid.centers()
        fns = self.grad_t if time_derivative else self.grad
        if fns is not None:
            return np.stack([fns[k](X, Y, t) for k in range(grid.dim)])
        base = self.time_derivative if time_derivative else self.value
        h = 1e-6
        out = []
        for k in range(grid.dim):
            dx = (h, 0.0) if k == 0 else (0.0, h)
            out.append((base(X + dx[0], Y + dx[1], t) - base(X - dx[0], Y - dx[1], t)) / (2 * h))
        return np.stack(out)


@dataclass
class SolverConfig:
    dt: float = 0.01
    t_end: float = 1.0
    picard_tol: float = 1e-10
    picard_max: int = 200
    theta: float = 1.0
    stride: int = 1
    source: object = None       # callable (x, y, t) -> array, or None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.theta != 1.0:
            raise ValueError("only backward Euler (theta = 1) is implemented")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass
class PressureState:
    t: float
    p: np.ndarray
    pbar: np.ndarray


@dataclass
class Trajectory:
    medium: MediumSpec
    boundary: BoundaryExtension
    config: SolverConfig
    times: np.ndarray
    p: np.ndarray                # (n_out, *grid.shape)
    log: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def grid(self):
        return self.medium.grid

    @property
    def pbar(self):
        pb = getattr(self, "_pbar", None)
        if pb is None:
            pb = np.stack([self.p[i] - self.boundary.cells(self.grid, t)
                           for i, t in enumerate(self.times)])
            self._pbar = pb
        return pb

    @property
    def states(self):
        return [PressureState(float(t), self.p[i], self.pbar[i]) for i, t in enumerate(self.times)]

    def state(self, i):
        return PressureState(float(self.times[i]), self.p[i], self.pbar[i])

    def __len__(self):
        return self.times.size


class _Assembler:
    """Face geometry and sparsity pattern for one grid."""

    def __init__(self, medium):
        grid = medium.grid
        self.grid = grid
        self.medium = medium
        self.idx = np.arange(grid.n_cells).reshape(grid.shape)
        self.coeffs = medium.model.coeffs
        self.alphas = medium.model.alphas
        self.linear = medium.model.linear_test_mode
        self.vol = grid.cell_volume
        self.axes = []
        for k in range(grid.dim):
            n = grid.resolution[k]
            cl = _rng(self.coeffs, k + 1, 0, n - 1)
            cr = _rng(self.coeffs, k + 1, 1, n)
            same = np.all(cl == cr, axis=0)
            self.axes.append(dict(
                n=n, h=grid.h[k],
                il=_rng(self.idx, k, 0, n - 1).ravel(),
                ir=_rng(self.idx, k, 1, n).ravel(),
                ilo=_sl(self.idx, k, 0).ravel(),
                ihi=_sl(self.idx, k, n - 1).ravel(),
                cl=cl, cr=cr, same=same,
                clo=_sl(self.coeffs, k + 1, 0), chi=_sl(self.coeffs, k + 1, n - 1),
            ))

    def face_xi(self, p, bfaces):
        """Full gradient magnitude on every face, per axis."""
        grid = self.grid
        fg = face_gradients(p, grid, bfaces)
        if grid.dim == 1:
            return fg, [np.abs(g) for g in fg]
        cg = cell_gradient(p, grid, bfaces)
        xis = []
        for k, g in enumerate(fg):
            j = 1 - k
            ct = cg[j]
            n = grid.resolution[k]
            tshape = list(g.shape)
            gt = np.empty(tshape)
            inner = [slice(None)] * 2
            inner[k] = slice(1, n)
            gt[tuple(inner)] = 0.5 * (_rng(ct, k, 0, n - 1) + _rng(ct, k, 1, n))
            lo = [slice(None)] * 2
            lo[k] = 0
            hi = [slice(None)] * 2
            hi[k] = n
            gt[tuple(lo)] = _sl(ct, k, 0)
            gt[tuple(hi)] = _sl(ct, k, n - 1)
            xis.append(np.sqrt(g ** 2 + gt ** 2))
        return fg, xis

    def face_K(self, p, bfaces):
        """Per-axis ``(K_interior, K_low, K_high, normal_gradient)`` on faces."""
        fg, xis = self.face_xi(p, bfaces)
        out = []
        for k, (ax, g, xi) in enumerate(zip(self.axes, fg, xis)):
            n = ax["n"]
            xin = _rng(xi, k, 1, n)
            KL, _ = K_coeffs(ax["cl"], self.alphas, xin, linear=self.linear)
            if np.all(ax["same"]):
                Kf = KL
            else:
                KR, _ = K_coeffs(ax["cr"], self.alphas, xin, linear=self.linear)
                Kf = np.where(ax["same"], KL, 2 * KL * KR / (KL + KR))
            Klo, _ = K_coeffs(ax["clo"], self.alphas, _sl(xi, k, 0), linear=self.linear)
            Khi, _ = K_coeffs(ax["chi"], self.alphas, _sl(xi, k, n), linear=self.linear)
            out.append((Kf, Klo, Khi, g))
        return out

    def system(self, Kfaces, bfaces, mass_diag, rhs0):
        rows, cols, vals = [], [], []
        diag = mass_diag.ravel().copy()
        rhs = rhs0.ravel().copy()
        for k, (ax, (Kf, Klo, Khi, _)) in enumerate(zip(self.axes, Kfaces)):
            h = ax["h"]
            T = (Kf * self.vol / h ** 2).ravel()
            rows += [ax["il"], ax["ir"]]
            cols += [ax["ir"], ax["il"]]
            vals += [-T, -T]
            np.add.at(diag, ax["il"], T)
            np.add.at(diag, ax["ir"], T)
            Tlo = (2.0 * Klo * self.vol / h ** 2).ravel()
            Thi = (2.0 * Khi * self.vol / h ** 2).ravel()
            np.add.at(diag, ax["ilo"], Tlo)
            np.add.at(diag, ax["ihi"], Thi)
            blo = np.broadcast_to(_sl(bfaces[k], k, 0), Klo.shape).ravel()
            bhi = np.broadcast_to(_sl(bfaces[k], k, ax["n"]), Khi.shape).ravel()
            np.add.at(rhs, ax["ilo"], Tlo * blo)
            np.add.at(rhs, ax["ihi"], Thi * bhi)
        n = self.grid.n_cells
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diag)
        A = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n))
        return A, rhs

    def divergence_flux(self, Kfaces):
        """Discrete ``div(K grad p)`` per unit volume from face K and gradients."""
        grid = self.grid
        out = np.zeros(grid.shape)
        for k, (ax, (Kf, Klo, Khi, g)) in enumerate(zip(self.axes, Kfaces)):
            n = ax["n"]
            flux = np.empty(g.shape)          # K grad p . e_k on faces
            inner = [slice(None)] * grid.dim
            inner[k] = slice(1, n)
            flux[tuple(inner)] = Kf * _rng(g, k, 1, n)
            lo = [slice(None)] * grid.dim
            lo[k] = 0
            hi = [slice(None)] * grid.dim
            hi[k] = n
            flux[tuple(lo)] = Klo * _sl(g, k, 0)
            flux[tuple(hi)] = Khi * _sl(g, k, n)
            out += (_rng(flux, k, 1, n + 1) - _rng(flux, k, 0, n)) / ax["h"]
        return out


def _sl(arr, axis, i):
    idx = [slice(None)] * arr.ndim
    idx[axis] = i
    return arr[tuple(idx)]


def _rng(arr, axis, a, b):
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(a, b)
    return arr[tuple(idx)]


def _assembler(medium):
    asm = getattr(medium, "_assembler", None)
    if asm is None:
        asm = _Assembler(medium)
        medium._assembler = asm
    return asm


def step(state, dt, config, medium, boundary, guess=None):
    """One backward-Euler step with Picard iteration on ``K``.

    Returns ``(new_state, info)`` where ``info`` records the iteration count,
    the last relative update and the nonlinear residual.
    """
    asm = _assembler(medium)
    grid = medium.grid
    t_new = state.t + dt
    bfaces = boundary.faces(grid, t_new)
    mass = medium.porosity * grid.cell_volume / dt
    rhs0 = mass * state.p
    if config.source is not None:
        X, Y = grid.centers()
        rhs0 = rhs0 + config.source(X, Y, t_new) * grid.cell_volume
    it = state.p.copy() if guess is None else np.array(guess, dtype=float)
    history = []
    for k in range(1, config.picard_max + 1):
        Kf = asm.face_K(it, bfaces)
        A, b = asm.system(Kf, bfaces, mass, rhs0)
        try:
            new = spla.spsolve(A, b).reshape(grid.shape)
        except Exception as exc:  # pragma: no cover - singular systems are not expected
            raise NumericalError(f"linear solve failed at t={t_new:g}: {exc}") from exc
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"linear solve produced non-finite values at t={t_new:g}")
        delta = float(np.max(np.abs(new - it)))
        scale = max(float(np.max(np.abs(new))), 1e-300)
        history.append(delta / scale)
        it = new
        if delta <= config.picard_tol * scale:
            break
    else:
        raise StepError(f"Picard iteration did not converge in {config.picard_max} "
                        f"iterations at t={t_new:g}", t=t_new, history=history)
    Kf = asm.face_K(it, bfaces)
    A, b = asm.system(Kf, bfaces, mass, rhs0)
    res = float(np.max(np.abs(A @ it.ravel() - b)))
    res_scale = float(np.max(np.abs(A.diagonal())) * max(np.max(np.abs(it)), 1e-300))
    info = {"t": t_new, "iterations": k, "update": history[-1],
            "residual": res / res_scale if res_scale > 0 else 0.0}
    pbar = it - boundary.cells(grid, t_new)
    return PressureState(t_new, it, pbar), info


def simulate(medium, p0, boundary, config):
    """Run from ``t = 0`` to ``config.t_end`` and keep every ``stride``-th state."""
    grid = medium.grid
    p0 = np.broadcast_to(np.asarray(p0, float), grid.shape).copy()
    state = PressureState(0.0, p0, p0 - boundary.cells(grid, 0.0))
    times, ps, log = [0.0], [p0], []
    n = config.n_steps
    start = _time.perf_counter()
    prev = None
    for i in range(1, n + 1):
        # linear extrapolation of the last two states as the first Picard iterate
        guess = None if prev is None else 2.0 * state.p - prev
        try:
            new, info = step(state, config.dt, config, medium, boundary, guess)
        except StepError as exc:
            raise StepError(f"{exc} (step {i})", t=exc.t, history=exc.history) from None
        # exact time stamps avoid drift from repeated addition
        new.t = i * config.dt
        prev = state.p
        state = new
        log.append(info)
        if i % config.stride == 0 or i == n:
            times.append(new.t)
            ps.append(new.p)
    traj = Trajectory(medium, boundary, config, np.asarray(times), np.stack(ps), log,
                      wall_time=_time.perf_counter() - start)
    return traj


def initial_field(text, grid, boundary=None):
    """Evaluate an initial pressure expression; the name ``Psi`` denotes ``Psi(x, 0)``."""
    if isinstance(text, str) and "Psi" in text:
        if boundary is None:
            raise ValueError("initial expression references Psi but no boundary is given")
        rest = text.replace("Psi", "0")
        base = boundary.cells(grid, 0.0)
        X, Y = grid.centers()
        return base + compile_expr(rest)(X, Y, 0.0) if rest.strip() not in ("0", "") else base
    X, Y = grid.centers()
    return compile_expr(text)(X, Y, 0.0)


def velocity_field(state, medium, boundary):
    """Face-normal Darcy-Forchheimer velocity ``-K grad p`` per axis.

    Arrays have ``n + 1`` entries along their axis, boundary faces included.
    """
    asm = _assembler(medium)
    bfaces = boundary.faces(medium.grid, state.t)
    out = []
    for k, (Kf, Klo, Khi, g) in enumerate(asm.face_K(state.p, bfaces)):
        n = medium.grid.resolution[k]
        Kall = np.concatenate([Klo[None] if medium.grid.dim == 1 else np.expand_dims(Klo, k),
                               Kf,
                               Khi[None] if medium.grid.dim == 1 else np.expand_dims(Khi, k)],
                              axis=k)
        out.append(-Kall * g)
    return out


def flux_divergence(state, medium, boundary):
    """``div(K grad p)`` from the same face terms the step assembles."""
    asm = _assembler(medium)
    return asm.divergence_flux(asm.face_K(state.p, boundary.faces(medium.grid, state.t)))


# ---------------------------------------------------------------- manufactured solutions

_GL = (np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)]), np.array([5 / 9, 8 / 9, 5 / 9]))


def mms_source(medium, target):
    """Finite-volume consistent source making ``target`` solve the PDE exactly.

    ``f_i = phi_i * mean_cell(p*_t) - (1/V) sum_faces int_face K(|grad p*|) grad p* . n``
    with three-point Gauss rules on cells and faces.  Coefficients must be
    continuous across faces for the construction to be meaningful.
    """
    target = compile_expr(target)
    pt = target.diff("t")
    gx, gy = target.diff("x"), target.diff("y")
    grid = medium.grid
    model = medium.model
    coeffs = model.coeffs
    nodes, wts = _GL

    def kgrad(axis, x, y, t, c):
        ex, ey = gx(x, y, t), (gy(x, y, t) if grid.dim == 2 else 0.0)
        xi = np.sqrt(ex ** 2 + ey ** 2)
        K, _ = K_coeffs(c, model.alphas, xi, linear=model.linear_test_mode)
        return K * (ex if axis == 0 else ey)

    def source(X, Y, t):
        h = grid.h
        if grid.dim == 1:
            avg = sum(w * pt(X + 0.5 * h[0] * s, 0.0, t) for s, w in zip(nodes, wts)) / 2
            fr = kgrad(0, X + 0.5 * h[0], 0.0, t, coeffs)
            fl = kgrad(0, X - 0.5 * h[0], 0.0, t, coeffs)
            div = (fr - fl) / h[0]
        else:
            avg = 0.0
            for si, wi in zip(nodes, wts):
                for sj, wj in zip(nodes, wts):
                    avg = avg + wi * wj * pt(X + 0.5 * h[0] * si, Y + 0.5 * h[1] * sj, t)
            avg = avg / 4
            div = 0.0
            for s, w in zip(nodes, wts):
                yq = Y + 0.5 * h[1] * s
                xq = X + 0.5 * h[0] * s
                div = div + w / 2 * (kgrad(0, X + 0.5 * h[0], yq, t, coeffs)
                                     - kgrad(0, X - 0.5 * h[0], yq, t, coeffs)) / h[0]
                div = div + w / 2 * (kgrad(1, xq, Y + 0.5 * h[1], t, coeffs)
                                     - kgrad(1, xq, Y - 0.5 * h[1], t, coeffs)) / h[1]
        return medium.porosity * avg - div

    return source


@dataclass
class ConvergenceTable:
    rows: list
    orders: list
    kind: str
    monotone: bool

    def min_order(self):
        return float(np.min(self.orders)) if self.orders else np.nan

    def to_dict(self):
        return {"kind": self.kind, "rows": self.rows, "orders": self.orders,
                "monotone": self.monotone}


def mms_convergence(medium_desc, target, resolutions, dts, t_end, exact=None, source=True,
                    picard_tol=1e-12):
    """Observed convergence orders against an exact or manufactured solution.

    ``medium_desc`` is a :func:`build_medium` description without the
    resolution.  If ``exact`` is given (an expression), it is used as the
    reference and no source is added (heat-mode checks); otherwise
    ``target`` is manufactured with :func:`mms_source`.  A single resolution
    gives a temporal study, a single ``dt`` a spatial one; equal-length
    lists are refined together.
    """
    resolutions = list(resolutions)
    dts = list(dts)
    if len(resolutions) == 1:
        resolutions = resolutions * len(dts)
        kind = "time"
    elif len(dts) == 1:
        dts = dts * len(resolutions)
        kind = "space"
    else:
        if len(dts) != len(resolutions):
            raise ValueError("resolutions and dts must pair up")
        kind = "space-time"
    ref = compile_expr(exact if exact is not None else target)
    rows = []
    for res, dt in zip(resolutions, dts):
        medium = build_medium(dict(medium_desc, resolution=res))
        boundary = BoundaryExtension.from_expr(ref.source)
        src = mms_source(medium, ref) if (exact is None and source) else None
        cfg = SolverConfig(dt=dt, t_end=t_end, picard_tol=picard_tol, stride=10 ** 9, source=src)
        X, Y = medium.grid.centers()
        traj = simulate(medium, ref(X, Y, 0.0), boundary, cfg)
        err = float(np.max(np.abs(traj.p[-1] - ref(X, Y, traj.times[-1]))))
        rows.append({"resolution": res, "h": medium.grid.h[0], "dt": dt, "error": err,
                     "picard_max_iter": max((e["iterations"] for e in traj.log), default=0)})
    orders = []
    monotone = True
    for r0, r1 in zip(rows, rows[1:]):
        step_ratio = (r0["dt"] / r1["dt"]) if kind == "time" else (r0["h"] / r1["h"])
        if r1["error"] == 0.0 or r0["error"] == 0.0:
            orders.append(np.inf if r1["error"] == 0.0 else 0.0)
        else:
            orders.append(float(np.log(r0["error"] / r1["error"]) / np.log(step_ratio)))
        if r1["error"] > r0["error"]:
            monotone = False
    return ConvergenceTable(rows, orders, kind, monotone)
