"""Center-of-mass chart h, smoothed fibration f, fibers and fiber averaging."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.special import erf

from .errors import ChartExceeded, NoLifts, OpenFiber, QuadratureFailure
from .geodesics import exp_batch, log_batch, orthonormal_frame, shooting_jacobian
from .manifold import _dchristoffel, christoffel_batch, coords_of, sectional_curvature
from .models import TWO_PI
from .pseudogroup import LiftedBall, _power_lift, build_pseudo_group

QUAD_ORDER = 8
QUAD_TOL = 1e-3
WINDOW_SHARPNESS = 4.0


# ----------------------------------------------------------------------------
# cutoff profile and quadrature


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def chi_profile(t):
    """1 on [0, 1/3], 0 beyond 2/3, quintic smoothstep in between."""
    return 1.0 - smoothstep(3.0 * np.asarray(t, dtype=float) - 1.0)


def _sphere_rule(d: int, order: int):
    """Gauss-Legendre product rule on S^{d-1} in hyperspherical angles."""
    x, w = np.polynomial.legendre.leggauss(order)
    polar = [(0.5 * np.pi * (x + 1), 0.5 * np.pi * w)] * (d - 2)
    azim = (np.pi * (x + 1), np.pi * w)
    dirs, wts = [], []
    for combo in itertools.product(*[range(order)] * (d - 1)):
        angles = [polar[i][0][j] for i, j in enumerate(combo[:-1])]
        weight = np.prod([polar[i][1][j] for i, j in enumerate(combo[:-1])]) * azim[1][combo[-1]]
        phi = azim[0][combo[-1]]
        u = np.empty(d)
        s = 1.0
        for i, a in enumerate(angles):
            u[i] = s * np.cos(a)
            weight *= np.sin(a) ** (d - 2 - i)
            s *= np.sin(a)
        u[d - 2] = s * np.cos(phi)
        u[d - 1] = s * np.sin(phi)
        dirs.append(u)
        wts.append(weight)
    return np.array(dirs), np.array(wts)


def ball_rule(d: int, order: int = QUAD_ORDER):
    """Nodes and chi-weights on the unit-epsilon support ball of chi(|u|^2).

    The radial axis is split where chi leaves its plateau so that each panel is
    smooth; every axis uses Gauss-Legendre of the given order.
    """
    dirs, wd = _sphere_rule(d, order)
    x, w = np.polynomial.legendre.leggauss(order)
    radii, wr = [], []
    for lo, hi in ((0.0, 1 / math.sqrt(3)), (1 / math.sqrt(3), math.sqrt(2 / 3))):
        radii.append(lo + 0.5 * (hi - lo) * (x + 1))
        wr.append(0.5 * (hi - lo) * w)
    radii = np.concatenate(radii)
    wr = np.concatenate(wr) * radii ** (d - 1) * chi_profile(radii**2)
    nodes = (radii[:, None, None] * dirs[None]).reshape(-1, d)
    weights = (wr[:, None] * wd[None]).ravel()
    return nodes, weights


def chi_mass(d: int) -> float:
    """Exact integral of chi(|u|^2) over R^d."""
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    inner = (1 / math.sqrt(3)) ** d / d
    outer = quad(lambda r: chi_profile(r * r) * r ** (d - 1), 1 / math.sqrt(3), math.sqrt(2 / 3),
                 epsabs=1e-15, epsrel=1e-13)[0]
    return area * (inner + outer)


# ----------------------------------------------------------------------------
# tensor interpolant (Chebyshev in space, Fourier in the fiber coordinate)


class _ChebAxis:
    def __init__(self, lo, hi, n):
        self.lo, self.hi, self.n = float(lo), float(hi), n
        k = np.arange(n)
        self.unit = np.cos(np.pi * (k + 0.5) / n)
        self.nodes = self.lo + 0.5 * (self.hi - self.lo) * (self.unit + 1)

    def basis(self, t):
        u = (2 * np.asarray(t) - self.lo - self.hi) / (self.hi - self.lo)
        if np.any(np.abs(u) > 1 + 1e-9):
            raise ChartExceeded("query outside the interpolation box")
        return np.polynomial.chebyshev.chebvander(u, self.n - 1)


class _FourierAxis:
    def __init__(self, origin, period, n):
        if n % 2 == 0:
            raise ValueError("Fourier axis needs an odd node count")
        self.origin, self.period, self.n = float(origin), float(period), n
        self.nodes = self.origin + self.period * np.arange(n) / n

    def basis(self, t):
        a = TWO_PI * (np.asarray(t) - self.origin) / self.period
        cols = [np.ones_like(a)]
        for m in range(1, self.n // 2 + 1):
            cols += [np.cos(m * a), np.sin(m * a)]
        return np.stack(cols, axis=-1)


class TensorInterpolant:
    def __init__(self, axes, values):
        self.axes = axes
        C = np.asarray(values, dtype=float)
        for i, ax in enumerate(axes):
            inv = np.linalg.inv(ax.basis(ax.nodes))
            C = np.moveaxis(np.tensordot(inv, C, axes=([1], [i])), 0, i)
        self.coef = C

    def grid(self):
        mesh = np.meshgrid(*[ax.nodes for ax in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def __call__(self, P):
        P = np.atleast_2d(P)
        Bs = [ax.basis(P[:, i]) for i, ax in enumerate(self.axes)]
        C = self.coef
        out = np.tensordot(Bs[-1], C, axes=([1], [len(self.axes) - 1]))  # (n, a, b, c, o)
        for B in Bs[:-1]:
            out = np.einsum("na,na...->n...", B, out)
        return out

    def weighted_sum(self, P, w) -> np.ndarray:
        """sum_n w_n s(P_n) without evaluating s at every node."""
        P = np.atleast_2d(P)
        Bs = [ax.basis(P[:, i]) for i, ax in enumerate(self.axes)]
        acc = w[:, None] * Bs[0]
        for B in Bs[1:-1]:
            acc = (acc[:, :, None] * B[:, None, :]).reshape(len(P), -1)
        S = acc.T @ Bs[-1]
        return S.ravel() @ self.coef.reshape(S.size, -1)


# ----------------------------------------------------------------------------
# Gromov-Hausdorff chart


@dataclass
class GHChart:
    model: object
    base: np.ndarray
    kappa: float
    scale: float
    ball: LiftedBall | None
    lift_vector: np.ndarray
    step_word: int
    basis: np.ndarray
    window: int
    mode: str = "smooth"
    extent: float = 0.0
    surrogate: TensorInterpolant | None = None
    surrogate_error: float = 0.0
    _jac: dict = field(default_factory=dict, repr=False)

    @property
    def metric0(self):
        return self.model.metric(self.base[None])[0]

    @property
    def trivial(self) -> bool:
        return self.ball is None

    def project(self, W) -> np.ndarray:
        """Orthogonal projection onto H, in the orthonormal basis of H."""
        return np.asarray(W) @ self.metric0 @ self.basis

    def fiber_coordinate(self, W) -> np.ndarray:
        v = self.lift_vector
        return (np.asarray(W) @ self.metric0 @ v) / float(v @ self.metric0 @ v)

    # lifts ---------------------------------------------------------------
    def _fiber_advance(self) -> float:
        return float((self.model.deck_apply(self.step_word, self.base) - self.base)[-1])

    def _flat_min_lift(self, P):
        model, x = self.model, self.base
        adv = abs(float((model.deck_apply(1, x) - x)[-1]))
        span = float(np.max(np.abs(P - x))) if len(P) else 0.0
        M = int(math.ceil(2 * span / adv)) + 2
        best = P - x
        bn = np.linalg.norm(best, axis=-1)
        for k in range(-M, M + 1):
            if k == 0:
                continue
            cand = model.deck_apply(k, P) - x
            cn = np.linalg.norm(cand, axis=-1)
            better = cn < bn
            best[better] = cand[better]
            bn = np.minimum(bn, cn)
        return best

    def candidate_lifts(self, P) -> np.ndarray:
        """Lifts of each point along the fundamental loop direction, shape (n, 2K+3, d)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        model, x = self.model, self.base
        idx = np.arange(-(self.window + 1), self.window + 2)
        if self.trivial:
            return (P - x)[:, None, :]
        if model.flat:
            W0 = self._flat_min_lift(P)
            out = np.empty((len(P), len(idx), model.dim))
            for j, i in enumerate(idx):
                out[:, j] = model.deck_apply(i * self.step_word, x + W0) - x
            return out
        return self._curved_lifts(P, idx)

    def _jacobian(self, word):
        if word not in self._jac:
            self._jac[word] = shooting_jacobian(self.model, self.base, _power_lift(self.ball, word))
        return self._jac[word]

    def _curved_lifts(self, P, idx, chunk: int = 4096):
        model, x = self.model, self.base
        adv = self._fiber_advance()
        i0 = np.rint(-(P[:, -1] - x[-1]) / adv).astype(int)
        out = np.empty((len(P), len(idx), model.dim))
        for j, i in enumerate(idx):
            shift = i0 + i
            for word in np.unique(shift):
                sel = np.flatnonzero(shift == word)
                Z = model.deck_apply(int(word) * self.step_word, P[sel])
                J = self._jacobian(int(word) * self.step_word)
                for s in range(0, len(sel), chunk):
                    part = sel[s:s + chunk]
                    Zp = Z[s:s + chunk]
                    out[part, j] = log_batch(model, x, Zp, Zp - x, tol=1e-12, jacobian=J)
        return out

    def window_weights(self, lifts) -> np.ndarray:
        s = self.fiber_coordinate(lifts)
        if self.mode == "hard":
            norms = np.sqrt(np.einsum("nmi,ij,nmj->nm", lifts, self.metric0, lifts))
            centre = np.argmin(norms, axis=1)
            pos = np.arange(lifts.shape[1])[None, :]
            return (np.abs(pos - centre[:, None]) <= self.window).astype(float)
        half = self.window + 0.5
        c = WINDOW_SHARPNESS
        return 0.5 * (erf(c * (half - s)) + erf(c * (half + s)))

    def h_exact(self, P) -> np.ndarray:
        lifts = self.candidate_lifts(P)
        w = self.window_weights(lifts) if lifts.shape[1] > 1 else np.ones(lifts.shape[:2])
        proj = self.project(lifts)
        return np.einsum("nm,nmk->nk", w, proj) / np.sum(w, axis=1)[:, None]

    def h(self, P) -> np.ndarray:
        """Center-of-mass chart value in H coordinates, for points of shape (d,) or (n, d)."""
        P = np.asarray(P, dtype=float)
        single = P.ndim == 1
        P2 = np.atleast_2d(P)
        if self.surrogate is not None:
            out = self.surrogate(P2)
        else:
            out = self.h_exact(P2)
        return out[0] if single else out

    def check_lift(self, P):
        """NoLifts when a point has no lift inside B^(0, scale/2)."""
        lifts = self.candidate_lifts(np.atleast_2d(P))
        norms = np.sqrt(np.einsum("nmi,ij,nmj->nm", lifts, self.metric0, lifts)).min(axis=1)
        if np.any(norms > 0.5 * self.scale):
            raise NoLifts("point has no lift in the lifted ball of radius kappa r / 2")


def _hyperplane_basis(g, v):
    d = len(v)
    E = orthonormal_frame(g)
    u = np.linalg.solve(E, v)
    u /= np.linalg.norm(u)
    Q, _ = np.linalg.qr(np.column_stack([u, np.eye(d)]))
    B = E @ Q[:, 1:d]
    # a fixed orientation: align with the coordinate axes as far as possible
    for j in range(B.shape[1]):
        k = int(np.argmax(np.abs(B[:, j])))
        if B[k, j] < 0:
            B[:, j] *= -1
    return B


def gh_chart(model, x, kappa: float = 0.05, mode: str = "smooth", direction=None,
             extent: float | None = None, cheb_nodes: int = 8, fourier_nodes: int = 9,
             ball: LiftedBall | None = None) -> GHChart:
    """Center-of-mass chart at x on the scale kappa r(x).

    h(y) averages the H-projections of the lifts of y along the fundamental loop.
    On curved models h is tabulated once on a Chebyshev x Fourier grid of the
    chart box of half-width ``extent`` (plus the smoothing radius) and
    interpolated; the tabulation error is measured against direct shooting.
    """
    x = coords_of(model, x)
    r = float(model.radius(x))
    scale = kappa * r
    g = model.metric(x[None])[0]
    if not model.has_deck:
        v = np.zeros(model.dim)
        v[-1] = 1.0
        if direction is not None:
            v = np.asarray(direction, dtype=float)
        v = v / math.sqrt(v @ g @ v)
        return GHChart(model, x, kappa, scale, None, v, 0, _hyperplane_basis(g, v), 0, mode,
                       extent or 0.1 * scale)
    if ball is None:
        ball = build_pseudo_group(model, x, max(scale, 1.05 * float(model.orbit_length(x)) if model.has_circle else scale),
                                  check_scale=False)
    fund = ball.fundamental()
    v = fund.lift_vector if fund.word_power > 0 else _power_lift(ball, -fund.word_power)
    step = abs(fund.word_power)
    L = math.sqrt(v @ g @ v)
    K = int(math.floor(0.5 * scale / L))
    extent = 0.1 * scale if extent is None else float(extent)
    chart = GHChart(model, x, kappa, scale, ball, v, step, _hyperplane_basis(g, v), K, mode, extent)
    if not model.flat:
        _attach_surrogate(chart, cheb_nodes, fourier_nodes)
    return chart


def _attach_surrogate(chart: GHChart, n_cheb: int, n_fourier: int, n_check: int = 8, seed: int = 0):
    model, x = chart.model, chart.base
    eps = 0.1 * chart.scale
    a = chart.extent + 1.25 * eps * math.sqrt(2 / 3) * math.sqrt(float(np.max(np.linalg.eigvalsh(np.linalg.inv(chart.metric0))))) + 0.25
    axes = [_ChebAxis(x[i] - a, x[i] + a, n_cheb) for i in range(model.dim - 1)]
    adv = chart._fiber_advance()
    axes.append(_FourierAxis(x[-1], abs(adv), n_fourier))
    probe = TensorInterpolant(axes, np.zeros([n_cheb] * (model.dim - 1) + [n_fourier, 1]))
    G = probe.grid()
    vals = chart.h_exact(G)
    shape = [n_cheb] * (model.dim - 1) + [n_fourier, vals.shape[1]]
    chart.surrogate = TensorInterpolant(axes, vals.reshape(shape))
    rng = np.random.default_rng(seed)
    lo = np.array([ax.lo for ax in axes[:-1]])
    hi = np.array([ax.hi for ax in axes[:-1]])
    Q = np.column_stack([rng.uniform(lo, hi, size=(n_check, model.dim - 1)),
                         rng.uniform(x[-1], x[-1] + abs(adv), size=n_check)])
    chart.surrogate_error = float(np.max(np.abs(chart.surrogate(Q) - chart.h_exact(Q))))


# ----------------------------------------------------------------------------
# smoothed fibration


def _exp_taylor(model, y, V):
    """Third-order geodesic expansion exp_y(v), error O(|v|^4 |d^2 Gamma|)."""
    G, dG = _dchristoffel(model, y)
    d = len(y)
    VV = (V[:, :, None] * V[:, None, :]).reshape(len(V), d * d)
    quad_term = VV @ G.reshape(d, d * d).T
    # d_m Gamma^k_ij v^m v^i v^j, then Gamma^k_ij Gamma^i_ab v^a v^b v^j
    n = len(V)
    cubic = np.einsum("nmk,nm->nk", (VV @ dG.transpose(2, 3, 0, 1).reshape(d * d, d * d)).reshape(n, d, d), V)
    cross = np.einsum("nkj,nj->nk", (quad_term @ G.transpose(1, 0, 2).reshape(d, d * d)).reshape(n, d, d), V)
    return y + V - 0.5 * quad_term - cubic / 6.0 + cross / 3.0


@dataclass
class FibrationChart:
    gh: GHChart
    epsilon: float
    nodes: np.ndarray
    weights: np.ndarray
    quadrature_error: float

    @property
    def model(self):
        return self.gh.model

    def _sample_points(self, y):
        model = self.model
        E = orthonormal_frame(model.metric(y[None])[0])
        V = (self.epsilon * self.nodes) @ E.T
        if model.flat:
            return y + V
        return _exp_taylor(model, y, V)

    def f(self, Y) -> np.ndarray:
        """f(y) = chi-weighted mean of h over the epsilon-ball of T_yM."""
        Y = np.asarray(Y, dtype=float)
        single = Y.ndim == 1
        Y2 = np.atleast_2d(Y)
        if self.gh.trivial:
            out = self.gh.project(Y2 - self.gh.base)
            return out[0] if single else out
        out = np.empty((len(Y2), self.model.dim - 1))
        sur = self.gh.surrogate
        for i, y in enumerate(Y2):
            P = self._sample_points(y)
            if sur is not None:
                out[i] = sur.weighted_sum(P, self.weights) / self.weights.sum()
            else:
                out[i] = self.weights @ self.gh.h(P) / self.weights.sum()
        return out[0] if single else out

    def step(self) -> float:
        return 0.02 * self.epsilon

    def df(self, y, h: float | None = None) -> np.ndarray:
        """Central-difference differential, shape (d-1, d)."""
        y = np.asarray(y, dtype=float)
        h = self.step() if h is None else h
        d = self.model.dim
        P = np.concatenate([y + h * np.eye(d), y - h * np.eye(d)])
        F = self.f(P)
        return ((F[:d] - F[d:]) / (2 * h)).T

    def df_forward(self, y, f0=None, h: float | None = None) -> np.ndarray:
        """Forward-difference differential, reusing f(y) when given."""
        y = np.asarray(y, dtype=float)
        h = self.step() if h is None else h
        d = self.model.dim
        f0 = self.f(y) if f0 is None else f0
        return ((self.f(y + h * np.eye(d)) - f0) / h).T

    def hessian(self, y, h: float | None = None) -> np.ndarray:
        """Covariant Hessian nabla^2 f, shape (d-1, d, d)."""
        y = np.asarray(y, dtype=float)
        h = 2.5 * self.step() if h is None else h
        d = self.model.dim
        offs = [np.zeros(d)]
        for i in range(d):
            for s in (1, -1):
                offs.append(s * h * np.eye(d)[i])
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        for i, j in pairs:
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                offs.append(h * (si * np.eye(d)[i] + sj * np.eye(d)[j]))
        F = self.f(y + np.array(offs))
        f0 = F[0]
        Hs = np.zeros((F.shape[1], d, d))
        grad = np.zeros((F.shape[1], d))
        for i in range(d):
            fp, fm = F[1 + 2 * i], F[2 + 2 * i]
            Hs[:, i, i] = (fp - 2 * f0 + fm) / h**2
            grad[:, i] = (fp - fm) / (2 * h)
        base = 1 + 2 * d
        for n, (i, j) in enumerate(pairs):
            pp, pm, mp, mm = F[base + 4 * n: base + 4 * n + 4]
            Hs[:, i, j] = Hs[:, j, i] = (pp - pm - mp + mm) / (4 * h**2)
        G = christoffel_batch(self.model, y[None])[0]
        return Hs - np.einsum("kij,ak->aij", G, grad)


def smooth_fibration(chart: GHChart, epsilon: float | None = None, order: int = QUAD_ORDER) -> FibrationChart:
    """Convolution-smoothed map f on the scale epsilon = 0.1 kappa r(x)."""
    d = chart.model.dim
    eps = 0.1 * chart.scale if epsilon is None else float(epsilon)
    nodes, weights = ball_rule(d, order)
    mass_err = abs(weights.sum() / chi_mass(d) - 1.0)
    fc = FibrationChart(chart, eps, nodes, weights, mass_err)
    if not chart.trivial:
        # compare against a lower-order rule at the base point
        lo_nodes, lo_weights = ball_rule(d, order - 2)
        hi = fc.f(chart.base)
        low = FibrationChart(chart, eps, lo_nodes, lo_weights, 0.0).f(chart.base)
        fc.quadrature_error = max(mass_err, float(np.linalg.norm(hi - low)) / eps)
    if fc.quadrature_error > QUAD_TOL:
        raise QuadratureFailure(f"quadrature error estimate {fc.quadrature_error:.2e} > {QUAD_TOL}")
    return fc


# ----------------------------------------------------------------------------
# diagnostics


def _unit_generator(model, y):
    g = model.metric(y[None])[0]
    v = model.circle_generator(y)
    return v / math.sqrt(v @ g @ v)


def kernel_direction(fchart: FibrationChart, y, J=None) -> np.ndarray:
    """Unit (for g) spanning vector of ker df at y, oriented along the circle action."""
    model = fchart.model
    y = np.asarray(y, dtype=float)
    J = fchart.df(y) if J is None else J
    g = model.metric(y[None])[0]
    E = orthonormal_frame(g)
    _, _, Vt = np.linalg.svd(J @ E)
    n = E @ Vt[-1]
    if model.has_circle and (n @ g @ model.circle_generator(y)) < 0:
        n = -n
    return n / math.sqrt(n @ g @ n)


@dataclass
class SubmersionReport:
    base_r: float
    points: np.ndarray
    singular_values: np.ndarray
    vertical_norm: np.ndarray
    kernel_angle: np.ndarray
    hessian_norm: np.ndarray
    log_distortion: float

    def to_json(self) -> dict:
        return {
            "base_r": self.base_r,
            "singular_values": self.singular_values.tolist(),
            "vertical_norm": self.vertical_norm.tolist(),
            "kernel_angle": self.kernel_angle.tolist(),
            "hessian_norm": self.hessian_norm.tolist(),
            "log_distortion": self.log_distortion,
        }


def submersion_diagnostics(fchart: FibrationChart, sample_points, hessian: bool = True) -> SubmersionReport:
    """Per point: horizontal singular values of df, |df(V)| on the unit orbit
    direction, kernel angle to the orbit, and |nabla^2 f| (orthonormal frames)."""
    model = fchart.model
    P = np.atleast_2d(np.asarray(sample_points, dtype=float))
    svals, vert, angle, hess = [], [], [], []
    for y in P:
        g = model.metric(y[None])[0]
        E = orthonormal_frame(g)
        J = fchart.df(y)
        s = np.linalg.svd(J @ E, compute_uv=False)
        svals.append(s)
        if model.has_circle:
            u = _unit_generator(model, y)
            vert.append(float(np.linalg.norm(J @ u)))
            n = kernel_direction(fchart, y, J)
            c = abs(float(n @ g @ u))
            angle.append(float(np.arccos(min(1.0, c))))
        else:
            vert.append(float("nan"))
            angle.append(float("nan"))
        if hessian:
            Hc = fchart.hessian(y)
            Ho = np.einsum("aij,ip,jq->apq", Hc, E, E)
            hess.append(float(np.sqrt(np.sum(Ho**2))))
        else:
            hess.append(float("nan"))
    svals = np.array(svals)
    return SubmersionReport(float(model.radius(fchart.gh.base)), P, svals, np.array(vert), np.array(angle),
                            np.array(hess), float(np.max(np.abs(np.log(svals)))))


# ----------------------------------------------------------------------------
# fibers


@dataclass
class FiberRecord:
    base_value: np.ndarray
    points: np.ndarray
    length: float
    closure_gap: float
    curvature_max: float
    level_error: float
    word: int

    def to_csv_rows(self):
        return self.points


def _pinv_g(J, g):
    gi = np.linalg.inv(g)
    return gi @ J.T @ np.linalg.inv(J @ gi @ J.T)


def _correct(fchart, y, b, J, tol, max_iter=8):
    """Newton projection onto f = b with a frozen differential; returns (y, |f - b|, f(y))."""
    g = fchart.model.metric(y[None])[0]
    Jp = _pinv_g(J, g)
    for _ in range(max_iter):
        fy = fchart.f(y)
        res = fy - b
        if np.linalg.norm(res) <= tol:
            break
        y = y - Jp @ res
    else:
        fy = fchart.f(y)
    return y, float(np.linalg.norm(fy - b)), fy


def _g_dist(model, a, b):
    m = 0.5 * (a + b)
    g = model.metric(m[None])[0]
    d = b - a
    return math.sqrt(max(d @ g @ d, 0.0))


def fiber_extract(fchart: FibrationChart, b, expected_length: float | None = None, seed_point=None) -> FiberRecord:
    """Trace the level set f = b by predictor-corrector continuation until it closes."""
    model, x = fchart.model, fchart.gh.base
    b = np.asarray(b, dtype=float)
    if expected_length is None:
        expected_length = float(model.orbit_length(x))
    if seed_point is None:
        w = fchart.gh.basis @ b
        seed_point = x + w if model.flat else exp_batch(model, x, w[None])[0]
    tol = 1e-8 * fchart.epsilon
    y0, _, fy = _correct(fchart, np.asarray(seed_point, dtype=float), b, fchart.df(seed_point), tol)
    h = 1e-2 * expected_length
    words = [k * fchart.gh.step_word for k in (-2, -1, 1, 2)]
    targets = [model.deck_apply(k, y0) for k in words]
    pts = [y0]
    prev_n = None
    travelled = 0.0
    y = y0
    closed = None
    while travelled < 2.0 * expected_length:
        J = fchart.df_forward(y, fy)
        n = kernel_direction(fchart, y, J)
        if prev_n is not None and n @ model.metric(y[None])[0] @ prev_n < 0:
            n = -n
        gaps = [_g_dist(model, y, t) for t in targets]
        j = int(np.argmin(gaps))
        last = travelled > 0.5 * expected_length and gaps[j] <= 1.5 * h
        y_new, _, fy = _correct(fchart, y + (gaps[j] if last else h) * n, b, J, tol)
        travelled += _g_dist(model, y, y_new)
        pts.append(y_new)
        if last:
            closed = (words[j], _g_dist(model, y_new, targets[j]))
            break
        prev_n = n
        y = y_new
    if closed is None:
        raise OpenFiber(f"level set did not close within {2 * expected_length:.4g}")
    P = np.array(pts)
    length, kmax = _arc_length(model, P)
    level = float(np.max(np.linalg.norm(fchart.f(P[:: max(1, len(P) // 12)]) - b, axis=1)))
    return FiberRecord(b, P, length, closed[1], kmax, level, closed[0])


def _arc_length(model, P):
    """Length of the spline through P and the max geodesic curvature along it."""
    seg = np.array([_g_dist(model, P[i], P[i + 1]) for i in range(len(P) - 1)])
    s = np.concatenate([[0.0], np.cumsum(seg)])
    c = CubicSpline(s, P, axis=0)
    dc, ddc = c.derivative(), c.derivative(2)
    x, w = np.polynomial.legendre.leggauss(4)
    total = 0.0
    for a, bnd in zip(s[:-1], s[1:]):
        t = 0.5 * (bnd - a) * (x + 1) + a
        X, D = c(t), dc(t)
        g = model.metric(X)
        total += 0.5 * (bnd - a) * np.sum(w * np.sqrt(np.einsum("ni,nij,nj->n", D, g, D)))
    t = s[1:-1]
    X, D, DD = c(t), dc(t), ddc(t)
    G = christoffel_batch(model, X)
    acc = DD + np.einsum("nkij,ni,nj->nk", G, D, D)
    g = model.metric(X)
    speed2 = np.einsum("ni,nij,nj->n", D, g, D)
    tang = np.einsum("ni,nij,nj->n", acc, g, D) / speed2
    perp = acc - tang[:, None] * D
    kg = np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", perp, g, perp), 0.0)) / speed2
    return float(total), float(np.max(kg)) if len(kg) else 0.0


# ----------------------------------------------------------------------------
# averaging and O'Neill


def fiber_average_metric(model, fchart, p, n_nodes: int = 32) -> np.ndarray:
    """(1/l) int_0^l phi_t^* g dt along the circle action through p (trapezoid rule).

    The circle action of the model is the fiber flow; its differential is taken
    by central differences.
    """
    p = coords_of(model, p)
    if not model.has_circle:
        raise ValueError("model has no circle action")
    d = model.dim
    h = 1e-6 * max(1.0, float(np.linalg.norm(p)))
    acc = np.zeros((d, d))
    for t in np.arange(n_nodes) / n_nodes:
        q = model.circle_action(p, t)
        D = np.empty((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            D[:, i] = (model.circle_action(p + e, t) - model.circle_action(p - e, t)) / (2 * h)
        acc += D.T @ model.metric(q[None])[0] @ D
    return acc / n_nodes


def _horizontal_field(fchart, y, U):
    """Horizontal part of the constant chart vector U at y, w.r.t. ker df."""
    g = fchart.model.metric(y[None])[0]
    n = kernel_direction(fchart, y)
    return U - (U @ g @ n) * n, n


@dataclass
class ONeillSample:
    total_sectional: float
    bracket_vertical: float
    base_sectional: float
    vertical_gradient: float


def oneill_base_curvature(model, fchart: FibrationChart, p, Y=None, Z=None, h: float | None = None) -> ONeillSample:
    """Base sectional curvature Sect(Y, Z) + 3/4 g([Y, Z], V)^2 for horizontal Y, Z at p.

    Y and Z are extended as horizontal projections of constant chart vectors;
    the vertical part of their bracket is tensorial, so the extension does not
    matter.  Also returns |nabla V| for the unit vertical field.
    """
    p = coords_of(model, p)
    d = model.dim
    g = model.metric(p[None])[0]
    n0 = kernel_direction(fchart, p)
    if Y is None or Z is None:
        E = orthonormal_frame(g)
        u = np.linalg.solve(E, n0)
        Q, _ = np.linalg.qr(np.column_stack([u, np.eye(d)]))
        hor = E @ Q[:, 1:d]
        Y, Z = hor[:, 0], hor[:, 1]
    Y = np.asarray(Y, float) - (np.asarray(Y, float) @ g @ n0) * n0
    Z = np.asarray(Z, float) - (np.asarray(Z, float) @ g @ n0) * n0
    Y /= math.sqrt(Y @ g @ Y)
    Z = Z - (Z @ g @ Y) * Y
    Z /= math.sqrt(Z @ g @ Z)
    h = 0.1 * fchart.epsilon if h is None else h

    def field_at(q, U):
        return _horizontal_field(fchart, q, U)[0]

    dZ_dY = (field_at(p + h * Y, Z) - field_at(p - h * Y, Z)) / (2 * h)
    dY_dZ = (field_at(p + h * Z, Y) - field_at(p - h * Z, Y)) / (2 * h)
    bracket = dZ_dY - dY_dZ
    A = float(bracket @ g @ n0)
    sect = sectional_curvature(model, p, Y, Z)
    # covariant derivative of the unit vertical field in an orthonormal frame
    E = orthonormal_frame(g)
    G = christoffel_batch(model, p[None])[0]
    cols = []
    for i in range(d):
        e = E[:, i]
        dn = (kernel_direction(fchart, p + h * e) - kernel_direction(fchart, p - h * e)) / (2 * h)
        cols.append(dn + np.einsum("kij,i,j->k", G, e, n0))
    nabla = np.linalg.solve(E, np.array(cols).T)
    return ONeillSample(sect, A, sect + 0.75 * A * A, float(np.linalg.norm(nabla)))


def transition_consistency(chart_a: FibrationChart, chart_b: FibrationChart, points) -> tuple[np.ndarray, np.ndarray, float]:
    """Affine least-squares transition phi with f_a ~ phi o f_b on shared points; returns (A, c, max residual)."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    Fa = chart_a.f(P)
    Fb = chart_b.f(P)
    X = np.column_stack([Fb, np.ones(len(P))])
    coef, *_ = np.linalg.lstsq(X, Fa, rcond=None)
    res = X @ coef - Fa
    return coef[:-1].T, coef[-1], float(np.max(np.linalg.norm(res, axis=1)))


def gh_defect(chart: GHChart, distance, n_pairs: int = 1000, seed: int = 0, local_radius: float = 2.0):
    """max |d(y, z) - |h(y) - h(z)|| over sampled pairs in the chart.

    Half of the pairs are local (z = y + u with u from a fixed distribution) and
    half are spread over the horizontal ball of radius chart.extent; every point
    also gets a uniformly random fiber offset.
    """
    model, x = chart.model, chart.base
    rng = np.random.default_rng(seed)
    d = model.dim
    B = chart.basis
    L = math.sqrt(chart.lift_vector @ chart.metric0 @ chart.lift_vector)
    vhat = chart.lift_vector / L

    def random_points(n, radius):
        c = rng.normal(size=(n, d - 1))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        c *= radius * rng.uniform(size=(n, 1)) ** (1 / (d - 1))
        s = rng.uniform(-0.5, 0.5, size=(n, 1)) * L
        return x + c @ B.T + s * vhat

    n_loc = n_pairs // 2
    Ya = random_points(n_pairs, chart.extent)
    U = rng.normal(size=(n_loc, d))
    U *= local_radius * rng.uniform(size=(n_loc, 1)) / np.linalg.norm(U, axis=1, keepdims=True)
    Za = np.concatenate([Ya[:n_loc] + U, random_points(n_pairs - n_loc, chart.extent)])
    Hy, Hz = chart.h(Ya), chart.h(Za)
    dist = np.array([distance(a, b) for a, b in zip(Ya, Za)])
    return float(np.max(np.abs(dist - np.linalg.norm(Hy - Hz, axis=1))))
