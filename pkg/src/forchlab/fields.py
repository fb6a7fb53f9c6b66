"""Grids, heterogeneous media and the two-weight Poincare-Sobolev constant."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import linalg as spla

from .constitutive import ForchheimerModel, compute_weights
from .expr import compile_expr


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box in 1D or 2D."""

    dim: int
    resolution: tuple
    extents: tuple = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        res = self.resolution
        res = (int(res),) * self.dim if np.isscalar(res) else tuple(int(r) for r in res)
        if len(res) != self.dim:
            raise ValueError("resolution must give one count per axis")
        if min(res) < 4:
            raise ValueError("resolution must be >= 4 cells per axis")
        ext = self.extents
        if ext is None:
            ext = ((0.0, 1.0),) * self.dim
        ext = tuple((float(lo), float(hi)) for lo, hi in ext)
        if len(ext) != self.dim or any(hi <= lo for lo, hi in ext):
            raise ValueError("extents must be (lo, hi) pairs with lo < hi")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "extents", ext)

    @property
    def shape(self):
        return self.resolution

    @property
    def h(self):
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extents, self.resolution))

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def measure(self):
        return float(np.prod([hi - lo for lo, hi in self.extents]))

    @property
    def n_cells(self):
        return int(np.prod(self.resolution))

    def axis_centers(self, k):
        lo, _ = self.extents[k]
        return lo + (np.arange(self.resolution[k]) + 0.5) * self.h[k]

    def centers(self):
        """Cell-center coordinates ``(X, Y)``; ``Y`` is zeros in 1D."""
        if self.dim == 1:
            x = self.axis_centers(0)
            return x, np.zeros_like(x)
        X, Y = np.meshgrid(self.axis_centers(0), self.axis_centers(1), indexing="ij")
        return X, Y

    def face_centers(self, axis):
        """Coordinates of all faces normal to ``axis`` (n+1 along that axis)."""
        lo, _ = self.extents[axis]
        xf = lo + np.arange(self.resolution[axis] + 1) * self.h[axis]
        if self.dim == 1:
            return xf, np.zeros_like(xf)
        if axis == 0:
            return np.meshgrid(xf, self.axis_centers(1), indexing="ij")
        return np.meshgrid(self.axis_centers(0), xf, indexing="ij")

    def refined(self):
        return Grid(self.dim, tuple(2 * r for r in self.resolution), self.extents)

    def boundary_mask(self):
        """Cells touching the boundary."""
        m = np.zeros(self.shape, dtype=bool)
        for k in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[k] = 0
            m[tuple(idx)] = True
            idx[k] = -1
            m[tuple(idx)] = True
        return m

    def to_dict(self):
        return {"dim": self.dim, "resolution": list(self.resolution),
                "extents": [list(e) for e in self.extents]}


def _slab(arr, axis, index):
    idx = [slice(None)] * arr.ndim
    idx[axis] = index
    return arr[tuple(idx)]


def face_gradients(u, grid, boundary=0.0):
    """Face-normal differences of a cell field.

    ``boundary`` is either a scalar, or a list with, per axis, the values on
    all faces normal to that axis (only the two end slabs are used).  The
    boundary faces use the half-cell distance to the face center.
    """
    out = []
    for k in range(grid.dim):
        h = grid.h[k]
        n = grid.resolution[k]
        fshape = list(u.shape)
        fshape[k] = n + 1
        g = np.empty(fshape)
        inner = [slice(None)] * u.ndim
        inner[k] = slice(1, n)
        g[tuple(inner)] = np.diff(u, axis=k) / h
        if np.isscalar(boundary):
            blo = bhi = boundary
        else:
            bk = boundary[k]
            blo, bhi = _slab(bk, k, 0), _slab(bk, k, -1)
        lo = [slice(None)] * u.ndim
        lo[k] = 0
        hi = [slice(None)] * u.ndim
        hi[k] = n
        g[tuple(lo)] = (_slab(u, k, 0) - blo) / (0.5 * h)
        g[tuple(hi)] = (bhi - _slab(u, k, -1)) / (0.5 * h)
        out.append(g)
    return out


def cell_gradient(u, grid, boundary=0.0):
    """Per-cell gradient: mean of the two face differences on each axis."""
    fg = face_gradients(u, grid, boundary)
    comps = []
    for k, g in enumerate(fg):
        n = grid.resolution[k]
        a = [slice(None)] * g.ndim
        b = [slice(None)] * g.ndim
        a[k] = slice(0, n)
        b[k] = slice(1, n + 1)
        comps.append(0.5 * (g[tuple(a)] + g[tuple(b)]))
    return np.stack(comps)


def grad_norm(u, grid, boundary=0.0):
    return np.sqrt(np.sum(cell_gradient(u, grid, boundary) ** 2, axis=0))


@dataclass
class MediumSpec:
    grid: Grid
    porosity: np.ndarray
    model: ForchheimerModel
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = np.asarray(self.porosity, dtype=float)
        if phi.shape != tuple(self.grid.shape):
            raise ValueError(f"porosity shape {phi.shape} does not match grid {self.grid.shape}")
        if self.model.grid_shape != tuple(self.grid.shape):
            raise ValueError("model coefficient fields are not sampled on the grid")
        bad = ~np.isfinite(phi) | (phi <= 0) | (phi > 1)
        if np.any(bad):
            k = np.unravel_index(np.flatnonzero(bad)[0], phi.shape)
            raise ValueError(f"porosity must lie in (0, 1]; got {phi[k]!r} at cell {tuple(map(int, k))}")
        self.porosity = phi

    @property
    def weights(self):
        w = getattr(self, "_weights", None)
        if w is None:
            w = compute_weights(self.model, self.grid.cell_volume)
            self._weights = w
        return w

    def integral(self, f):
        return float(np.sum(f) * self.grid.cell_volume)


PRESETS = ("homogeneous", "layered", "random_layered", "checkerboard", "radial",
           "expression", "degenerate", "singular", "raw")


def _coeff_stack(values, shape):
    return np.stack([np.broadcast_to(np.asarray(v, float), shape) for v in values]).copy()


def build_medium(desc, rng=None):
    """Sample porosity and coefficient fields for a named preset.

    ``desc`` keys: ``preset``, ``dim``, ``resolution``, optional ``extents``,
    ``alphas``, ``coeffs`` (numbers or expressions), ``porosity`` and
    preset-specific parameters.
    """
    desc = dict(desc)
    preset = desc.get("preset", "homogeneous")
    if preset not in PRESETS:
        raise ValueError(f"unknown medium preset {preset!r}; choose from {PRESETS}")
    grid = Grid(int(desc.get("dim", 1)), desc.get("resolution", 64), desc.get("extents"))
    alphas = np.asarray(desc.get("alphas", [0.0, 1.0]), float)
    linear = bool(desc.get("linear_test_mode", False))
    coeffs = desc.get("coeffs", [1.0] * alphas.size)
    if len(coeffs) != alphas.size:
        raise ValueError("model.coeffs must give one coefficient per exponent")
    X, Y = grid.centers()
    shape = grid.shape
    por = desc.get("porosity", 0.5)
    rng = np.random.default_rng(desc.get("seed", 0)) if rng is None else rng

    if preset in ("homogeneous", "expression"):
        phi = compile_expr(por)(X, Y)
        c = _coeff_stack([compile_expr(v)(X, Y) for v in coeffs], shape)
    elif preset in ("layered", "random_layered"):
        axis = int(desc.get("axis", 0))
        if preset == "layered":
            layer_coeffs = np.asarray(desc.get("layer_coeffs", [coeffs, coeffs]), float)
            n_layers = layer_coeffs.shape[0]
            layer_phi = np.broadcast_to(np.asarray(desc.get("layer_porosity", por), float),
                                        (n_layers,))
        else:
            n_layers = int(desc.get("n_layers", 4))
            layer_coeffs = _random_coeffs(rng, n_layers, alphas.size)
            layer_phi = rng.uniform(0.2, 0.9, n_layers)
        if layer_coeffs.shape[1] != alphas.size:
            raise ValueError("each layer needs one coefficient per exponent")
        coord = (X, Y)[axis]
        lo, hi = grid.extents[axis]
        layer = np.minimum((n_layers * (coord - lo) / (hi - lo)).astype(int), n_layers - 1)
        phi = layer_phi[layer]
        c = np.stack([layer_coeffs[layer, i] for i in range(alphas.size)])
        desc["layer_coeffs"] = layer_coeffs.tolist()
        desc["layer_porosity"] = np.asarray(layer_phi).tolist()
    elif preset == "checkerboard":
        blocks = int(desc.get("blocks", 4))
        ca = np.asarray(desc.get("coeffs_a", coeffs), float)
        cb = np.asarray(desc.get("coeffs_b", [2 * v for v in ca]), float)
        pa = float(desc.get("porosity_a", por if np.isscalar(por) else 0.5))
        pb = float(desc.get("porosity_b", 0.5 * pa))
        parity = np.zeros(shape, dtype=int)
        for k, coord in enumerate((X, Y)[: grid.dim]):
            lo, hi = grid.extents[k]
            parity = parity + np.minimum((blocks * (coord - lo) / (hi - lo)).astype(int), blocks - 1)
        odd = (parity % 2).astype(bool)
        phi = np.where(odd, pb, pa)
        c = np.stack([np.where(odd, cb[i], ca[i]) for i in range(alphas.size)])
    elif preset == "radial":
        center = np.asarray(desc.get("center", [0.5] * grid.dim), float)
        width = float(desc.get("width", 0.25))
        contrast = float(desc.get("contrast", 4.0))
        r2 = (X - center[0]) ** 2 + ((Y - center[1]) ** 2 if grid.dim == 2 else 0.0)
        bump = np.exp(-r2 / width ** 2)
        base = np.asarray(coeffs, float)
        c = np.stack([b * (1.0 + contrast * bump) for b in base])
        phi = float(por) * (1.0 - 0.5 * bump)
    elif preset == "degenerate":
        phi_min = float(desc.get("phi_min", 1e-3))
        center = np.asarray(desc.get("center", [0.5] * grid.dim), float)
        width = float(desc.get("width", 0.2))
        r2 = (X - center[0]) ** 2 + ((Y - center[1]) ** 2 if grid.dim == 2 else 0.0)
        prof = 1.0 - np.exp(-r2 / width ** 2)
        prof = (prof - prof.min()) / (prof.max() - prof.min())
        phi = phi_min + (float(por) - phi_min) * prof
        c = _coeff_stack([compile_expr(v)(X, Y) for v in coeffs], shape)
    elif preset == "singular":
        # Ergun-type coefficients: a_0 ~ (1-phi)^2/phi^3, a_N ~ (1-phi)/phi^3
        lo_phi, hi_phi = desc.get("porosity_range", [0.03, 0.97])
        s = (X - grid.extents[0][0]) / (grid.extents[0][1] - grid.extents[0][0])
        if grid.dim == 2:
            s = 0.5 * (s + (Y - grid.extents[1][0]) / (grid.extents[1][1] - grid.extents[1][0]))
        phi = lo_phi + (hi_phi - lo_phi) * s
        k0 = float(desc.get("ergun_viscous", 150.0))
        k1 = float(desc.get("ergun_inertial", 1.75))
        c = np.zeros((alphas.size,) + tuple(shape))
        c[0] = k0 * (1 - phi) ** 2 / phi ** 3
        c[-1] = k1 * (1 - phi) / phi ** 3
    elif preset == "raw":
        phi = _load_array(desc["porosity"], shape)
        c = np.stack([_load_array(v, shape) for v in coeffs])
    else:  # pragma: no cover
        raise AssertionError(preset)

    phi = np.broadcast_to(np.asarray(phi, float), shape).copy()
    model = ForchheimerModel(alphas, np.asarray(c, float), linear_test_mode=linear)
    return MediumSpec(grid, phi, model, name=preset, params=desc)


def _random_coeffs(rng, n, nterms):
    c = np.empty((n, nterms))
    c[:, 0] = rng.uniform(0.5, 2.0, n)
    if nterms > 2:
        c[:, 1:-1] = rng.uniform(0.0, 2.0, (n, nterms - 2))
    c[:, -1] = rng.uniform(0.5, 4.0, n)
    return c


def _load_array(value, shape):
    if isinstance(value, str):
        value = np.load(value)
    arr = np.asarray(value, float)
    if arr.shape != tuple(shape) and arr.size == np.prod(shape):
        arr = arr.reshape(shape)
    return np.broadcast_to(arr, shape).copy()


def check_sdc(degree, n):
    """Strict degree condition ``deg(g) < 4/(n-2)``; returns ``(holds, margin)``.

    ``degree`` may be a model or the number ``alpha_N``.  For n = 2 the bound
    is infinite.
    """
    if isinstance(degree, ForchheimerModel):
        degree = degree.degree
    if n < 2:
        raise ValueError("the degree condition is stated for n >= 2")
    if n == 2:
        return True, np.inf
    bound = 4.0 / (n - 2)
    return bool(degree < bound), bound - degree


def sobolev_exponent(q, n):
    """``q* = nq/(n-q)`` for q < n, infinity otherwise."""
    if q >= n:
        return np.inf
    return n * q / (n - q)


@dataclass
class PoincareEstimate:
    q: float
    r: float
    cp_formula: float
    cp_empirical: float
    sobolev_c: float
    safety_factor: float = 1.1
    n_functions: int = 0
    history: list = field(default_factory=list)
    q_sweep: dict = field(default_factory=dict)

    @property
    def cp_used(self):
        return max(self.cp_empirical, self.safety_factor * self.cp_empirical)

    def to_dict(self):
        return {"q": self.q, "r": self.r, "cp_formula": self.cp_formula,
                "cp_empirical": self.cp_empirical, "cp_used": self.cp_used,
                "sobolev_c": self.sobolev_c, "safety_factor": self.safety_factor,
                "n_functions": self.n_functions, "q_sweep": self.q_sweep}


class EstimateError(RuntimeError):
    pass


def poincare_ratio(u, grid, phi, W1, a):
    """``||u||_{L^2_phi} / ||grad u||_{L^{2-a}_{W1}}`` for a zero-trace ``u``.

    Returns NaN for (numerically) constant-zero gradients.
    """
    dv = grid.cell_volume
    num = np.sqrt(np.sum(phi * u ** 2) * dv)
    g = grad_norm(u, grid)
    den = (np.sum(W1 * g ** (2.0 - a)) * dv) ** (1.0 / (2.0 - a))
    if not den > 0:
        return np.nan
    return num / den


def _sobolev_ratio(u, grid, q, r):
    dv = grid.cell_volume
    g = grad_norm(u, grid)
    den = (np.sum(g ** q) * dv) ** (1.0 / q)
    if not den > 0:
        return np.nan
    if np.isinf(r):
        return np.max(np.abs(u)) / den
    return (np.sum(np.abs(u) ** r) * dv) ** (1.0 / r) / den


def _stiffness(grid, w):
    """Two-point-flux matrix of ``-div(w grad u)`` with zero Dirichlet data."""
    from scipy import sparse
    n = grid.n_cells
    idx = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(grid.shape)
    area_over = [grid.cell_volume / h ** 2 for h in grid.h]
    for k in range(grid.dim):
        m = grid.resolution[k]
        wl = _slab_range(w, k, 0, m - 1)
        wr = _slab_range(w, k, 1, m)
        wf = 2.0 * wl * wr / (wl + wr)
        t = wf * area_over[k]
        il = _slab_range(idx, k, 0, m - 1).ravel()
        ir = _slab_range(idx, k, 1, m).ravel()
        rows += [il, ir]
        cols += [ir, il]
        vals += [-t.ravel(), -t.ravel()]
        dk = np.zeros(grid.shape)
        _add_range(dk, k, 0, m - 1, t)
        _add_range(dk, k, 1, m, t)
        tb = 2.0 * area_over[k]
        lo = [slice(None)] * grid.dim
        lo[k] = 0
        hi = [slice(None)] * grid.dim
        hi[k] = m - 1
        dk[tuple(lo)] += tb * w[tuple(lo)]
        dk[tuple(hi)] += tb * w[tuple(hi)]
        diag += dk
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))


def _slab_range(arr, axis, start, stop):
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(start, stop)
    return arr[tuple(idx)]


def _add_range(arr, axis, start, stop, val):
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(start, stop)
    arr[tuple(idx)] += val


def trial_functions(grid, phi, weights, rng, n_eig=4, n_random=24):
    """Zero-trace test family: generalized eigenvectors plus random smooth bumps."""
    from scipy import sparse
    funcs = []
    mass = sparse.diags(phi.ravel() * grid.cell_volume)
    for w in weights:
        A = _stiffness(grid, np.broadcast_to(w, grid.shape).astype(float))
        k = min(n_eig, grid.n_cells - 2)
        try:
            # fixed start vector keeps ARPACK deterministic
            _, vecs = spla.eigsh(A, k=k, M=mass, sigma=0.0, which="LM",
                                 v0=np.ones(grid.n_cells))
        except (spla.ArpackNoConvergence, RuntimeError):
            continue
        for j in range(vecs.shape[1]):
            funcs.append(vecs[:, j].reshape(grid.shape))
    X, Y = grid.centers()
    s = [(c - lo) / (hi - lo) for c, (lo, hi) in zip((X, Y)[: grid.dim], grid.extents)]
    cutoff = np.ones(grid.shape)
    for sk in s:
        cutoff = cutoff * np.sin(np.pi * sk)
    for _ in range(n_random):
        u = np.zeros(grid.shape)
        for _m in range(3):
            cen = rng.uniform(0.1, 0.9, grid.dim)
            wid = rng.uniform(0.05, 0.4)
            r2 = sum((sk - ck) ** 2 for sk, ck in zip(s, cen))
            u = u + rng.normal() * np.exp(-r2 / wid ** 2)
        funcs.append(u * cutoff)
    return funcs


def _refine_nonlinear(u, grid, phi, W1, a, iters=4, floor=1e-8):
    """Inverse iteration for the weighted (2-a)-Laplacian eigenproblem."""
    best, best_u = poincare_ratio(u, grid, phi, W1, a), u
    cur = u
    for _ in range(iters):
        g = grad_norm(cur, grid)
        scale = max(np.max(g), 1e-300)
        w = W1 * (g / scale + floor) ** (-a)
        A = _stiffness(grid, w)
        nxt = spla.spsolve(A.tocsc(), (phi * cur).ravel() * grid.cell_volume).reshape(grid.shape)
        r = poincare_ratio(nxt, grid, phi, W1, a)
        if not np.isfinite(r):
            break
        cur = nxt / np.max(np.abs(nxt))
        if r > best:
            best, best_u = r, cur
    return best, best_u


def estimate_cp_fields(grid, phi, W1, a, q=None, rng=None, safety_factor=1.1,
                       a0=None, n_random=24, refine=True, sweep=True):
    """Two-weight constant from raw fields (see :func:`estimate_cp`)."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = grid.dim
    q_lo, q_hi = 1.0, 2.0 - a
    if q is None:
        q = 0.5 * (q_lo + q_hi)
    if not q_lo < q < q_hi or q_hi - q < 1e-12:
        raise ValueError(f"q must lie in (1, 2-a) = (1, {q_hi:g})")
    weights = [W1, np.ones(grid.shape)]
    if a0 is not None:
        weights.insert(1, 1.0 / a0)
    funcs = trial_functions(grid, phi, weights, rng, n_random=n_random)
    history = []
    best = 0.0
    ratios = []
    for u in funcs:
        r = poincare_ratio(u, grid, phi, W1, a)
        if np.isfinite(r):
            ratios.append(r)
            best = max(best, r)
        history.append(best)
    if refine and funcs:
        order = np.argsort([-(x if np.isfinite(x) else -1) for x in
                            [poincare_ratio(u, grid, phi, W1, a) for u in funcs]])
        for j in order[:3]:
            r, u = _refine_nonlinear(funcs[j], grid, phi, W1, a)
            if np.isfinite(r):
                best = max(best, r)
                funcs.append(u)
            history.append(best)

    def formula(qq):
        r = sobolev_exponent(qq, n)
        c = max((x for x in (_sobolev_ratio(u, grid, qq, r) for u in funcs) if np.isfinite(x)),
                default=np.nan)
        e = qq / (2.0 - a - qq)
        with np.errstate(over="ignore", divide="ignore"):
            iw = np.sum(W1 ** (-e)) * grid.cell_volume
        if not np.isfinite(iw):
            raise EstimateError("weight integral of W1^(-q/(2-a-q)) diverges on this grid; "
                                "choose a less singular preset or a smaller q")
        wfac = iw ** ((2.0 - a - qq) / ((2.0 - a) * qq))
        if np.isinf(r):
            pfac = np.sqrt(np.sum(phi) * grid.cell_volume)
        else:
            pfac = (np.sum(phi ** (r / (r - 2.0))) * grid.cell_volume) ** ((r - 2.0) / (2.0 * r))
        return r, c, c * wfac * pfac

    r, c, cpf = formula(q)
    q_sweep = {}
    if sweep:
        for fr in (0.2, 0.4, 0.6, 0.8):
            qq = q_lo + fr * (q_hi - q_lo)
            q_sweep[f"{qq:.6g}"] = formula(qq)[2]
    return PoincareEstimate(q=float(q), r=float(r), cp_formula=float(cpf),
                            cp_empirical=float(best), sobolev_c=float(c),
                            safety_factor=safety_factor, n_functions=len(funcs),
                            history=history, q_sweep=q_sweep)


def estimate_cp(medium, q=None, rng=None, safety_factor=1.1, **kw):
    """Estimate the two-weight Poincare-Sobolev constant of ``medium``.

    ``cp_empirical`` is the largest ratio found over the test family;
    ``cp_formula`` is the Holder-chain bound built from the discrete Sobolev
    constant (also maximized over the family).
    """
    n = medium.grid.dim
    if n >= 2:
        ok, _ = check_sdc(medium.model, n)
        if not ok:
            raise EstimateError("degree condition fails; the two-weight inequality is not covered")
    w = medium.weights
    return estimate_cp_fields(medium.grid, medium.porosity, w.W1_field, w.a, q=q, rng=rng,
                              safety_factor=safety_factor, a0=medium.model.coeffs[0], **kw)
