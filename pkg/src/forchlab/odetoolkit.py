"""Differential-inequality lemmas checked on sampled scalar trajectories.

Every checker returns a :class:`~forchlab.report.Verdict`.  A violated
hypothesis yields ``INCONCLUSIVE`` rather than ``FAIL``.  Tolerances enter
only as additive slack on the asserted side, so loosening a tolerance can
never turn a PASS into a FAIL.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .report import Verdict

INF_H_THRESHOLD = 20.0


@dataclass
class ScalarTrajectory:
    times: np.ndarray
    values: np.ndarray
    derivative: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.values = np.asarray(self.values, float)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.values < -1e-12 * max(1.0, np.max(np.abs(self.values)))):
            raise ValueError("trajectory values must be non-negative")
        if self.derivative is not None:
            self.derivative = np.asarray(self.derivative, float)

    def dydt(self):
        if self.derivative is not None:
            return self.derivative
        return np.gradient(self.values, self.times)


@dataclass(frozen=True)
class PhiSpec:
    """Strictly increasing map of ``[0, inf)`` onto itself."""

    kind: str = "identity"
    c: float = 1.0
    gamma: float = 1.5
    C0: float = 1.0
    a: float = 0.5

    def __post_init__(self):
        if self.kind not in ("identity", "power", "mixed"):
            raise ValueError(f"unknown phi kind {self.kind!r}")
        if self.kind == "mixed" and not (1.0 < self.gamma < 2.0):
            raise ValueError("mixed phi needs 1 < gamma < 2")
        if self.c <= 0 or self.C0 <= 0:
            raise ValueError("phi parameters must be positive")

    @property
    def power(self):
        return 2.0 / (2.0 - self.a)

    def __call__(self, z):
        z = np.asarray(z, float)
        if self.kind == "identity":
            return z.copy()
        if self.kind == "power":
            return self.C0 * z ** self.power
        return self.c * (z + z ** self.gamma)

    def inverse(self, w, rtol=1e-14):
        w = np.asarray(w, float)
        if self.kind == "identity":
            return w.copy()
        if self.kind == "power":
            return (w / self.C0) ** (1.0 / self.power)
        return _mixed_inverse(w, self.c, self.gamma, rtol)


def _mixed_inverse(w, c, gamma, rtol):
    # c(z + z^gamma) >= c z gives the bracket [0, w/c]; Newton from the top
    # is monotone because the map is convex.
    w = np.asarray(w, float)
    hi = w / c
    lo = np.zeros_like(hi)
    z = hi.copy()
    for _ in range(200):
        f = c * (z + z ** gamma) - w
        if np.all(np.abs(f) <= rtol * np.maximum(w, 1e-300)):
            break
        hi = np.where(f > 0, z, hi)
        lo = np.where(f < 0, z, lo)
        fp = c * (1.0 + gamma * z ** (gamma - 1.0))
        zn = z - f / fp
        bad = ~((zn >= lo) & (zn <= hi))
        z = np.where(bad, 0.5 * (lo + hi), zn)
    return z


def cumulative(times, f):
    return integrate.cumulative_trapezoid(f, times, initial=0.0)


def gronwall_linear_envelope(y0, h, f, times):
    """``E(t) = y0 e^{-int_0^t h} + int_0^t e^{-int_s^t h} f(s) ds`` by trapezoidal recursion."""
    times = np.asarray(times, float)
    h = np.broadcast_to(np.asarray(h, float), times.shape)
    f = np.broadcast_to(np.asarray(f, float), times.shape)
    E = np.empty_like(times)
    E[0] = y0
    for n in range(times.size - 1):
        dt = times[n + 1] - times[n]
        decay = np.exp(-0.5 * dt * (h[n] + h[n + 1]))
        E[n + 1] = decay * E[n] + 0.5 * dt * (decay * f[n] + f[n + 1])
    return ScalarTrajectory(times, E)


def differencing_slack(times, y, factor=5.0):
    """Slack ``factor dt |y''| + dt^2 |y'''|`` from neighborhood maxima of
    repeated central differences; the cubic term covers inflection points."""
    d1 = np.gradient(y, times)
    d2 = np.gradient(d1, times)
    d3 = np.gradient(d2, times)
    dt = np.gradient(times)
    return factor * dt * _nbr_max(np.abs(d2)) + dt ** 2 * _nbr_max(np.abs(d3))


def _nbr_max(v):
    out = v.copy()
    out[1:] = np.maximum(out[1:], v[:-1])
    out[:-1] = np.maximum(out[:-1], v[1:])
    return out


def tail_mask(times, window=0.25):
    t0 = times[0] + (1.0 - window) * (times[-1] - times[0])
    return times >= t0


def certify_infinite_integral(times, h, threshold=INF_H_THRESHOLD):
    """``int h`` exceeds ``threshold`` and its increments do not shrink to zero on the tail."""
    H = cumulative(times, h)
    tail = tail_mask(times, 0.5)
    mid = np.searchsorted(times, times[tail][0])
    later = H[-1] - H[mid]
    earlier = H[mid] - H[max(0, 2 * mid - times.size + 1)]
    ok = bool(H[-1] > threshold and later >= 0.5 * max(earlier, 0.0) and np.all(np.diff(H) >= 0))
    return ok, float(H[-1])


def _hypothesis_ok(y, rhs, tol):
    """``y' <= rhs`` up to differencing slack; returns (ok, worst violation)."""
    dy = y.dydt()
    slack = differencing_slack(y.times, y.values) + tol
    excess = dy - rhs - slack
    interior = np.ones_like(excess, dtype=bool)
    interior[[0, -1]] = False
    worst = float(np.max(excess[interior])) if interior.any() else 0.0
    return worst <= 0.0, worst


def _first_violation(times, mask):
    idx = np.flatnonzero(mask)
    return float(times[idx[0]]) if idx.size else None


def check_lemma_a1(y, h, f, phi, M=None, tol=1e-8, window=0.25):
    """``y' <= -h phi^{-1}(y) + f`` implies ``y <= y(0) + phi(M)`` and a limsup bound."""
    t = y.times
    h = np.broadcast_to(np.asarray(h, float), t.shape)
    f = np.broadcast_to(np.asarray(f, float), t.shape)
    anchor = "y' <= -h phi^-1(y) + f  =>  y <= y(0) + phi(M);  limsup y <= phi(limsup f/h)"
    ok, worst = _hypothesis_ok(y, -h * phi.inverse(y.values) + f, tol)
    if M is None:
        M = np.maximum.accumulate(f / h)
    M = np.broadcast_to(np.asarray(M, float), t.shape)
    if not ok or np.any(np.diff(M) < 0) or np.any(M < f / h - tol):
        return Verdict("nonlinear Gronwall bound", anchor, "INCONCLUSIVE",
                       details={"hypothesis_violation": worst,
                                "M_increasing": bool(np.all(np.diff(M) >= 0))})
    bound_i = y.values[0] + phi(M)
    viol_i = y.values > bound_i + tol
    margin_i = float(np.min(bound_i + tol - y.values))
    inf_ok, Hint = certify_infinite_integral(t, h)
    details = {"margin_i": margin_i, "int_h": Hint, "int_h_infinite": inf_ok}
    status = "PASS" if not viol_i.any() else "FAIL"
    margin = margin_i
    if inf_ok:
        tm = tail_mask(t, window)
        lhs = float(np.max(y.values[tm]))
        rhs = float(phi(np.max((f / h)[tm])))
        details.update(tail_max_y=lhs, phi_tail_ratio=rhs)
        margin_ii = rhs + tol - lhs
        details["margin_ii"] = margin_ii
        margin = min(margin, margin_ii)
        if margin_ii < 0:
            status = "FAIL"
    return Verdict("nonlinear Gronwall bound", anchor, status, margin=margin,
                   first_violation_time=_first_violation(t, viol_i), details=details)


def lemma_a2_constant(c, gamma):
    return 3.0 * (32.0 * (1.0 + c)) ** (2.0 / (2.0 - gamma))


def negative_part_limsup(times, f, fprime=None, window=0.25):
    d = np.gradient(f, times) if fprime is None else np.asarray(fprime, float)
    return float(np.max(np.maximum(-d, 0.0)[tail_mask(times, window)]))


def check_lemma_a2(y, f, phi, tol=1e-8, fprime=None, window=0.25):
    """``y' <= -phi^{-1}(y) + f``, ``phi = c(z + z^gamma)`` implies
    ``y <= C(1 + beta^{gamma/(2-gamma)} + f^gamma)`` beyond some T, with the
    literal constant ``C = 3[32(1+c)]^{2/(2-gamma)}``."""
    if phi.kind != "mixed":
        raise ValueError("the mixed-power bound needs the mixed phi")
    t = y.times
    f = np.broadcast_to(np.asarray(f, float), t.shape)
    anchor = "y <= C(1 + beta^(gamma/(2-gamma)) + f^gamma), C = 3[32(1+c)]^(2/(2-gamma))"
    ok, worst = _hypothesis_ok(y, -phi.inverse(y.values) + f, tol)
    beta = negative_part_limsup(t, f, fprime, window)
    C = lemma_a2_constant(phi.c, phi.gamma)
    if not ok:
        return Verdict("mixed-power limsup bound", anchor, "INCONCLUSIVE",
                       details={"hypothesis_violation": worst, "beta": beta, "C": C})
    g = phi.gamma
    bound = C * (1.0 + beta ** (g / (2.0 - g)) + f ** g)
    good = y.values <= bound + tol
    T_idx = _earliest_suffix(good)
    tail_start = np.flatnonzero(tail_mask(t, window))[0]
    details = {"C": C, "beta": beta, "max_ratio": float(np.max(y.values / bound))}
    if T_idx is None or T_idx > tail_start:
        return Verdict("mixed-power limsup bound", anchor, "FAIL", C_hat=C, details=details,
                       first_violation_time=_first_violation(t, ~good))
    details["T"] = float(t[T_idx])
    return Verdict("mixed-power limsup bound", anchor, "PASS", C_hat=C,
                   margin=float(np.min((bound + tol - y.values)[T_idx:])), details=details)


def _earliest_suffix(good):
    """Smallest index from which every entry of ``good`` is True."""
    bad = np.flatnonzero(~good)
    if bad.size == 0:
        return 0
    k = bad[-1] + 1
    return int(k) if k < good.size else None


def check_lemma_a3(y, h, f, g, tol=1e-8, window=0.25, gprime=None, side_tol=0.05):
    """``limsup g y <= limsup g f / h`` given ``int h = inf`` and ``g'/(g h) -> 0``."""
    t = y.times
    h = np.broadcast_to(np.asarray(h, float), t.shape)
    f = np.broadcast_to(np.asarray(f, float), t.shape)
    g = np.broadcast_to(np.asarray(g, float), t.shape)
    anchor = "limsup(g y) <= limsup(g f / h)  given int h = inf and g'/(g h) -> 0"
    ok, worst = _hypothesis_ok(y, -h * y.values + f, tol)
    gp = np.gradient(g, t) if gprime is None else np.asarray(gprime, float)
    ratio = np.abs(gp / (g * h))
    tm = tail_mask(t, window)
    inf_ok, Hint = certify_infinite_integral(t, h)
    r_tail = ratio[tm]
    half = r_tail.size // 2
    side_ok = bool(np.max(r_tail) <= side_tol and
                   (half == 0 or np.max(r_tail[half:]) <= np.max(r_tail[:half]) + 1e-15))
    details = {"int_h": Hint, "int_h_infinite": inf_ok, "tail_sup_g_ratio": float(np.max(r_tail))}
    if not ok or not inf_ok or not side_ok:
        details["hypothesis_violation"] = worst
        return Verdict("weighted limsup bound", anchor, "INCONCLUSIVE", details=details)
    lhs = float(np.max((g * y.values)[tm]))
    rhs = float(np.max((g * f / h)[tm]))
    margin = rhs + tol - lhs
    details.update(tail_max_gy=lhs, tail_max_gf_over_h=rhs)
    return Verdict("weighted limsup bound", anchor, "PASS" if margin >= 0 else "FAIL", margin=margin,
                   details=details)


def check_lemma_a4(f, times, tol=1e-8, fprime=None, window=0.25):
    """``f(t1) <= f(t2) + (t2 - t1)(beta + 1)`` for all sampled ``t2 > t1 > T``.

    Checked in O(n): ``F = f + (beta + 1) t`` must dominate its running
    maximum on the suffix after T.
    """
    times = np.asarray(times, float)
    f = np.asarray(f, float)
    beta = negative_part_limsup(times, f, fprime, window)
    F = f + (beta + 1.0) * times
    # good[i]: no earlier-or-equal point within the suffix starting at i beats F
    # by more than tol; found by scanning suffix starts from the right
    n = F.size
    T_idx = None
    run_min = np.inf
    worst = 0.0
    for i in range(n - 1, -1, -1):
        # F[i] <= min_{j >= i} F[j] + tol for the suffix to stay valid
        if F[i] > run_min + tol:
            break
        worst = max(worst, F[i] - run_min) if np.isfinite(run_min) else worst
        run_min = min(run_min, F[i])
        T_idx = i
    anchor = "f(t1) <= f(t2) + (t2 - t1)(beta + 1) for t2 > t1 > T"
    details = {"beta": beta}
    tail_start = np.flatnonzero(tail_mask(times, window))[0]
    if T_idx is None or T_idx > tail_start:
        return Verdict("one-sided growth bound", anchor, "FAIL", details=details,
                       first_violation_time=float(times[tail_start]))
    details["T"] = float(times[T_idx])
    return Verdict("one-sided growth bound", anchor, "PASS", margin=float(tol - worst), details=details)


# ------------------------------------------------------------------ battery


def integrate_ode(rhs, y0, t_end, n=4001, t_start=0.0):
    times = np.linspace(t_start, t_end, n)
    sol = integrate.solve_ivp(rhs, (t_start, t_end), [y0], t_eval=times, rtol=1e-10, atol=1e-12,
                              method="LSODA")
    return ScalarTrajectory(times, np.maximum(sol.y[0], 0.0))


def default_battery():
    """The synthetic trajectories used by ``forchlab odecheck``."""
    out = []
    M = 2.0
    tr = integrate_ode(lambda t, y: -y + M, 5.0, 40.0)
    out.append(("a1-identity", check_lemma_a1(tr, 1.0, M, PhiSpec("identity"))))
    sq = PhiSpec("power", C0=1.0, a=1.0)        # phi(z) = z^2
    tr = integrate_ode(lambda t, y: -np.sqrt(max(y[0], 0.0)) + 1.0, 4.0, 60.0)
    out.append(("a1-square", check_lemma_a1(tr, 1.0, 1.0, sq)))
    tr = ScalarTrajectory(np.linspace(0, 10, 101), np.zeros(101))
    out.append(("a1-zero", check_lemma_a1(tr, 1.0, 0.0, PhiSpec("identity"))))
    mixed = PhiSpec("mixed", c=1.0, gamma=1.5)
    tr = integrate_ode(lambda t, y: -mixed.inverse(max(y[0], 0.0)) + 2.0 + np.sin(t), 10.0, 80.0,
                       n=8001)
    f = 2.0 + np.sin(tr.times)
    out.append(("a2-oscillating", check_lemma_a2(tr, f, mixed, fprime=np.cos(tr.times))))
    tz = ScalarTrajectory(np.linspace(0, 10, 101), np.zeros(101))
    out.append(("a2-zero", check_lemma_a2(tz, 0.0, mixed)))
    t = np.linspace(0, 60, 6001)
    g = 1.0 + 1.0 / (1.0 + t)
    tr = integrate_ode(lambda s, y: -y + 1.0, 3.0, 60.0, n=6001)
    out.append(("a3-decaying-weight", check_lemma_a3(tr, 1.0, 1.0, g,
                                                     gprime=-1.0 / (1.0 + t) ** 2)))
    tr = integrate_ode(lambda s, y: -y + 2.0, 0.0, 60.0, n=6001)
    out.append(("a3-unit-weight", check_lemma_a3(tr, 1.0, 2.0, np.ones_like(t))))
    tr = integrate_ode(lambda s, y: -y, 3.0, 60.0, n=6001)
    out.append(("a3-no-forcing", check_lemma_a3(tr, 1.0, 0.0, np.ones_like(t))))
    t = np.linspace(0.1, 50.0, 5000)
    out.append(("a4-inverse", check_lemma_a4(1.0 / t, t, fprime=-1.0 / t ** 2)))
    t = np.linspace(0.0, 60.0, 6001)
    out.append(("a4-constant", check_lemma_a4(np.full_like(t, 3.0), t, fprime=np.zeros_like(t))))
    out.append(("a4-oscillating", check_lemma_a4(2.0 + np.sin(t), t, fprime=np.cos(t))))
    return out
