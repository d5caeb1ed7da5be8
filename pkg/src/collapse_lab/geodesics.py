"""Exponential map, shooting, parallel transport and geodesic loops."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import LeftChartDomain, NoConvergence
from .manifold import christoffel_batch, coords_of
from .models import TWO_PI

RTOL = 1e-10
ATOL = 1e-12


@dataclass
class GeodesicPath:
    s: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    length: float

    def to_csv_rows(self):
        return np.column_stack([self.s, self.points, self.velocities])


@dataclass
class LoopRecord:
    base: np.ndarray
    initial_velocity: np.ndarray
    length: float
    holonomy: np.ndarray
    word: int = 0
    end_velocity: np.ndarray | None = None


class LoopList(list):
    """Loops found at a point; ``incomplete`` is set when completeness is not certified."""

    def __init__(self, items=(), incomplete=False):
        super().__init__(items)
        self.incomplete = incomplete


@dataclass
class LogResult:
    v: np.ndarray
    residual: float
    iterations: int
    at_cut_locus: bool = False
    deck_power: int = 0
    flags: list = field(default_factory=list)


def _norm(g, v):
    return float(np.sqrt(max(v @ g @ v, 0.0)))


def _metric(model, x):
    return model.metric(np.asarray(x, dtype=float)[None])[0]


def orthonormal_frame(g) -> np.ndarray:
    """Columns form a g-orthonormal basis (g = L L^T, frame = L^-T)."""
    L = np.linalg.cholesky(g)
    return np.linalg.inv(L).T


# ----------------------------------------------------------------------------
# integration


def _rhs_factory(model, d, m):
    """State: point, velocity and m transported vectors (flattened)."""

    def rhs(_s, y):
        Y = y.reshape(-1, 2 + m, d)
        X, V = Y[:, 0], Y[:, 1]
        G = christoffel_batch(model, X)
        out = np.empty_like(Y)
        out[:, 0] = V
        out[:, 1] = -np.einsum("nkij,ni,nj->nk", G, V, V)
        if m:
            out[:, 2:] = -np.einsum("nkij,ni,nwj->nwk", G, V, Y[:, 2:])
        return out.ravel()

    return rhs


def _integrate(model, X, V, W=None, t_end=1.0, rtol=RTOL, atol=ATOL, dense=False, events=True):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n, d = V.shape
    X = np.broadcast_to(X, (n, d))
    m = 0 if W is None else W.shape[-2]
    parts = [X[:, None], V[:, None]]
    if m:
        parts.append(np.broadcast_to(W, (n, m, d)))
    y0 = np.concatenate(parts, axis=1).ravel()
    ev = None
    if events and np.isfinite(model.domain_margin(X[:1]))[0]:
        def leave(_s, y):
            return float(np.min(model.domain_margin(y.reshape(n, 2 + m, d)[:, 0])))
        leave.terminal = True
        leave.direction = -1
        ev = [leave]
    sol = solve_ivp(_rhs_factory(model, d, m), (0.0, t_end), y0, method="DOP853",
                    rtol=rtol, atol=atol, dense_output=dense, events=ev)
    if ev is not None and sol.t_events[0].size:
        Y = sol.y_events[0][0].reshape(n, 2 + m, d)
        raise LeftChartDomain("geodesic left the chart domain", exit_point=Y[:, 0].copy())
    if sol.status != 0:
        raise LeftChartDomain(f"integration failed: {sol.message}")
    Y = sol.y[:, -1].reshape(n, 2 + m, d)
    return Y, sol


def exp_map(model, x, v, path: bool = False, n_samples: int = 65, rtol: float = RTOL):
    """exp_x(v); with path=True also return the sampled GeodesicPath."""
    x = coords_of(model, x)
    v = np.asarray(v, dtype=float)
    if np.all(v == 0):
        end = x.copy()
        if path:
            s = np.linspace(0, 1, n_samples)
            return end, GeodesicPath(s, np.tile(x, (n_samples, 1)), np.zeros((n_samples, model.dim)), 0.0)
        return end
    s = np.linspace(0.0, 1.0, n_samples)
    if model.flat:
        # flat charts are Cartesian: geodesics are straight lines
        end = x + v
        if not path:
            return end
        Z = np.stack([x + s[:, None] * v, np.tile(v, (n_samples, 1))], axis=1)
    else:
        Y, sol = _integrate(model, x, v, rtol=rtol, dense=path)
        end = Y[0, 0]
        if not path:
            return end
        Z = sol.sol(s).T.reshape(n_samples, 2, model.dim)
    length = _norm(_metric(model, x), v)
    return end, GeodesicPath(s, Z[:, 0], Z[:, 1], length)


def exp_batch(model, X, V, rtol: float = 1e-11, with_velocity: bool = False):
    """exp for many (x, v) pairs in one adaptive solve."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if not np.any(V):
        X = np.broadcast_to(np.atleast_2d(X), V.shape).copy()
        return (X, V.copy()) if with_velocity else X
    if model.flat:
        X = np.atleast_2d(np.asarray(X, dtype=float)) + V
        return (X, V.copy()) if with_velocity else X
    Y, _ = _integrate(model, X, V, rtol=rtol, atol=1e-13)
    if with_velocity:
        return Y[:, 0].copy(), Y[:, 1].copy()
    return Y[:, 0].copy()


def transport_along_geodesic(model, x, v, W, rtol: float = RTOL):
    """Integrate the geodesic from (x, v) and parallel-transport the rows of W.

    Returns (end point, end velocity, transported rows).
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Y, _ = _integrate(model, x, v, W=W, rtol=rtol, atol=1e-13)
    return Y[0, 0], Y[0, 1], Y[0, 2:]


def parallel_transport(model, path, w, rtol: float = RTOL):
    """Parallel transport of w along a GeodesicPath, an (x, v) pair or a sampled curve.

    A sampled curve is given as an (n, d) array of points and is interpolated by
    a cubic spline in its sample index.
    """
    w = np.asarray(w, dtype=float)
    if isinstance(path, GeodesicPath):
        return transport_along_geodesic(model, path.points[0], path.velocities[0], w, rtol)[2].reshape(w.shape)
    if isinstance(path, tuple):
        return transport_along_geodesic(model, path[0], path[1], w, rtol)[2].reshape(w.shape)
    from scipy.interpolate import CubicSpline

    P = np.asarray(path, dtype=float)
    s = np.linspace(0.0, 1.0, len(P))
    c = CubicSpline(s, P, axis=0)
    dc = c.derivative()
    W0 = np.atleast_2d(w)

    def rhs(t, y):
        Wt = y.reshape(W0.shape)
        G = christoffel_batch(model, c(t)[None])[0]
        return (-np.einsum("kij,i,wj->wk", G, dc(t), Wt)).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0), W0.ravel(), method="DOP853", rtol=rtol, atol=1e-13)
    if sol.status != 0:
        raise LeftChartDomain(sol.message)
    return sol.y[:, -1].reshape(w.shape)


# ----------------------------------------------------------------------------
# shooting


def _deck_target(model, y, k):
    return model.deck_apply(k, y) if k else np.asarray(y, dtype=float)


def log_map(model, x, y, v0=None, tol: float = 1e-8, max_iter: int = 50, full: bool = False,
            quotient: bool = False):
    """Initial velocity v with exp_x(v) = y, by damped Newton shooting.

    The Jacobian is a forward-difference matrix of the shooting map.  On flat
    quotients with ``quotient=True`` the target is the nearest deck image of y,
    with ties broken towards the lexicographically smaller lift.
    """
    x = coords_of(model, x)
    y = coords_of(model, y)
    if quotient and getattr(model, "flat", False) and model.has_deck:
        return _flat_quotient_log(model, x, y, full)
    if model.flat and not model.has_deck:
        v = y - x
        return LogResult(v, 0.0, 0) if full else v

    v = (y - x) if v0 is None else np.asarray(v0, dtype=float).copy()
    d = model.dim
    gy = _metric(model, y)
    best_v, best_r = v, np.inf
    for it in range(1, max_iter + 1):
        h = 1e-7 * max(1.0, float(np.linalg.norm(v)))
        Vs = np.vstack([v, v + h * np.eye(d)])
        try:
            ends = exp_batch(model, x, Vs)
        except LeftChartDomain:
            v = 0.5 * (v + best_v) if np.isfinite(best_r) else 0.5 * v
            continue
        F = ends[0] - y
        r = _norm(gy, F)
        if r < best_r:
            best_v, best_r = v.copy(), r
        scale = max(_norm(_metric(model, x), v), 1e-12)
        if r <= tol * scale:
            return LogResult(v, r, it) if full else v
        J = (ends[1:] - ends[0]).T / h
        dv = np.linalg.solve(J, -F)
        lam = 1.0
        while lam > 1e-3:
            cand = v + lam * dv
            try:
                e = exp_batch(model, x, cand[None])[0]
                if _norm(gy, e - y) < r:
                    break
            except LeftChartDomain:
                pass
            lam *= 0.5
        v = v + lam * dv
    raise NoConvergence(f"shooting did not converge (residual {best_r:.3e})", best=best_v, residual=best_r)


def _flat_quotient_log(model, x, y, full):
    d0 = float(np.linalg.norm(x - y))
    K = int(np.floor(d0 + abs(x[2] - y[2]))) + 1
    ks = np.arange(-K, K + 1)
    imgs = model.deck_apply(ks, y[None, :])
    dist = np.linalg.norm(imgs - x, axis=-1)
    m = dist.min()
    ties = np.flatnonzero(dist <= m * (1 + 1e-12) + 1e-15)
    lifts = imgs[ties]
    order = np.lexsort(lifts.T[::-1])
    j = ties[order[0]]
    v = imgs[j] - x
    res = LogResult(v, 0.0, 0, at_cut_locus=len(ties) > 1, deck_power=int(ks[j]))
    return res if full else v


def log_batch(model, x, Y, V0, tol: float = 1e-12, max_iter: int = 30, jacobian=None):
    """Shooting for many targets at once with a fixed approximate Jacobian.

    ``jacobian`` defaults to the identity, which is d(exp_x) at 0 in any chart.
    Convergence is linear with rate |J - d exp| and checked per target.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    V = np.array(V0, dtype=float, copy=True)
    Jinv = np.eye(model.dim) if jacobian is None else np.linalg.inv(jacobian)
    for _ in range(max_iter):
        F = exp_batch(model, x, V) - Y
        err = np.max(np.abs(F))
        if err <= tol * max(1.0, float(np.max(np.abs(V)))):
            return V
        V = V - F @ Jinv.T
    raise NoConvergence(f"batched shooting stalled at {err:.3e}", best=V, residual=err)


def shooting_jacobian(model, x, v, h: float = 1e-6) -> np.ndarray:
    d = model.dim
    ends = exp_batch(model, x, np.vstack([v, v + h * np.eye(d)]))
    return (ends[1:] - ends[0]).T / h


# ----------------------------------------------------------------------------
# loops


def loop_holonomy(model, x, v, k: int):
    """Holonomy (orthonormal-frame matrix) of the loop exp_x(tv) closing on deck image k."""
    g = _metric(model, x)
    E = orthonormal_frame(g)
    end, vend, T = transport_along_geodesic(model, x, v, E.T)
    Dinv = np.linalg.inv(model.deck_differential(k, x))
    back = Dinv @ T.T
    return np.linalg.solve(E, back), Dinv @ vend


def _loop_record(model, x, v, k):
    g = _metric(model, x)
    H, vend = loop_holonomy(model, x, v, k)
    return LoopRecord(np.asarray(x, dtype=float), v, _norm(g, v), H, int(k), vend)


def _flat_loops_exact(model, x, L_max):
    K = int(np.floor(L_max))
    out = []
    for k in range(-K, K + 1):
        if k == 0:
            continue
        v = model.deck_apply(k, x) - x
        ln = float(np.linalg.norm(v))
        if ln <= L_max:
            R = model.deck_differential(k, x)
            out.append(LoopRecord(x.copy(), v, ln, R.T, k, R.T @ v))
    return out


def _flat_loops_shooting(model, x, L_max):
    K = int(np.floor(L_max))
    out = []
    for k in range(-K, K + 1):
        if k == 0:
            continue
        target = model.deck_apply(k, x)
        v0 = np.array([0.0, 0.0, float(k)])
        v = log_map(model, x, target, v0=v0, tol=1e-12)
        ln = float(np.linalg.norm(v))
        if ln <= L_max:
            out.append(_loop_record(model, x, v, k))
    return out


def _cone_seeds(model, x, base_v, n: int = 12, spread: float = 0.05):
    g = _metric(model, x)
    E = orthonormal_frame(g)
    u = np.linalg.solve(E, base_v)
    nrm = np.linalg.norm(u)
    u_hat = u / nrm
    # orthonormal complement of u_hat
    Q, _ = np.linalg.qr(np.column_stack([u_hat, np.eye(len(u))]))
    perp = Q[:, 1:len(u)]
    seeds = [base_v]
    for j in range(n):
        a = TWO_PI * j / n
        c = np.zeros(perp.shape[1])
        c[0], c[1 % perp.shape[1]] = np.cos(a), np.sin(a)
        w = u_hat + spread * (perp @ c)
        seeds.append(E @ (nrm * w / np.linalg.norm(w)))
    return seeds


def _curved_loops(model, x, L_max, cone=12):
    g = _metric(model, x)
    gen = model.circle_generator(x)
    fiber = float(model.orbit_length(x))
    K = int(np.floor(L_max / fiber * 1.05)) + 1
    out = []
    for k in range(1, K + 1):
        target = model.deck_apply(k, x)
        found = []
        for s in _cone_seeds(model, x, k * gen, cone):
            try:
                v = log_map(model, x, target, v0=s, tol=1e-11)
            except NoConvergence:
                continue
            if not any(np.linalg.norm(v - f) < 1e-6 * (1 + np.linalg.norm(v)) for f in found):
                found.append(v)
        for v in found:
            if _norm(g, v) <= L_max:
                out.append(_loop_record(model, x, v, k))
                out.append(_loop_record(model, x, _reverse_initial(model, x, v, k), -k))
    out.sort(key=lambda rec: (rec.length, rec.word))
    return out


def _reverse_initial(model, x, v, k):
    """Initial velocity of the reversed loop: minus the pulled-back end velocity."""
    _, vend = exp_batch(model, x, v[None], with_velocity=True)
    Dinv = np.linalg.inv(model.deck_differential(k, x))
    return -(Dinv @ vend[0])


def geodesic_loops(model, x, L_max: float, strategy: str = "auto") -> LoopList:
    """Geodesic loops at x of length <= L_max, both orientations.

    strategy: "exact" (deck enumeration, flat quotients), "shooting" (numerical
    Newton shooting towards deck images), "auto".
    """
    x = coords_of(model, x)
    if not model.has_deck:
        return LoopList([], incomplete=not model.flat)
    if strategy == "auto":
        strategy = "exact" if model.flat and hasattr(model, "theta") else "shooting"
    if hasattr(model, "theta"):
        loops = _flat_loops_exact(model, x, L_max) if strategy == "exact" else _flat_loops_shooting(model, x, L_max)
        loops.sort(key=lambda rec: (round(rec.length, 9), rec.word))
        return LoopList(loops, incomplete=False)
    return LoopList(_curved_loops(model, x, L_max), incomplete=not model.flat)


def shortest_loop(model, x, L_max: float | None = None) -> LoopRecord | None:
    x = coords_of(model, x)
    if L_max is None:
        L_max = 1.2 * float(model.orbit_length(x)) if model.has_circle else 10.0
    loops = geodesic_loops(model, x, L_max)
    return min(loops, key=lambda r: r.length) if loops else None


# ----------------------------------------------------------------------------
# distance comparison


def _distance_sq_half(model, x, P, V0):
    V = log_batch(model, x, P, V0)
    g = _metric(model, x)
    return 0.5 * np.einsum("ni,ij,nj->n", V, g, V), V


def distance_hessian_defect(model, x, eps: float, n_samples: int = 6, seed: int = 0,
                            h: float | None = None) -> float:
    """max over sample points w of |nabla^2 rho - g| with rho = d(x, .)^2 / 2."""
    x = coords_of(model, x)
    d = model.dim
    rng = np.random.default_rng(seed)
    g0 = _metric(model, x)
    E = orthonormal_frame(g0)
    h = h if h is not None else 0.02 * max(eps, 1e-3)
    worst = 0.0
    for _ in range(n_samples):
        u = rng.normal(size=d)
        u *= eps * rng.uniform(0.3, 1.0) / np.linalg.norm(u)
        w = E @ u
        y = exp_batch(model, x, w[None])[0]
        offs = [np.zeros(d)]
        for i in range(d):
            for s in (1, -1):
                e = np.zeros(d)
                e[i] = s * h
                offs.append(e)
        for i in range(d):
            for j in range(i + 1, d):
                for si in (1, -1):
                    for sj in (1, -1):
                        e = np.zeros(d)
                        e[i], e[j] = si * h, sj * h
                        offs.append(e)
        offs = np.array(offs)
        P = y + offs
        rho, V = _distance_sq_half(model, x, P, np.tile(w, (len(P), 1)) + offs)
        r0 = rho[0]
        Hs = np.zeros((d, d))
        idx = 1
        diag_p, diag_m = {}, {}
        for i in range(d):
            diag_p[i], diag_m[i] = rho[idx], rho[idx + 1]
            Hs[i, i] = (rho[idx] - 2 * r0 + rho[idx + 1]) / h**2
            idx += 2
        for i in range(d):
            for j in range(i + 1, d):
                pp, pm, mp, mm = rho[idx:idx + 4]
                Hs[i, j] = Hs[j, i] = (pp - pm - mp + mm) / (4 * h**2)
                idx += 4
        grad = np.array([(diag_p[i] - diag_m[i]) / (2 * h) for i in range(d)])
        G = christoffel_batch(model, y[None])[0]
        hess = Hs - np.einsum("kij,k->ij", G, grad)
        gy = _metric(model, y)
        Ey = orthonormal_frame(gy)
        D = Ey.T @ (hess - gy) @ Ey
        worst = max(worst, float(np.linalg.norm(D, 2)))
    return worst
