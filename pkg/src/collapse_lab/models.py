"""Model manifolds: flat screw quotients, (multi-)Taub-NUT, Schwarzschild, Euclidean.

Every model exposes one chart with vectorized ``metric(X)`` and, when
available, analytic ``metric_grad(X)`` with layout ``[..., k, i, j] = d_k g_ij``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .errors import ConfigError, KMaxTooSmall, SingularPoint, WindowTooSmall

TWO_PI = 2.0 * np.pi

# Period of the fiber coordinate psi in the monopole chart.  Near a nut,
# r = rho^2/2 turns V(dr^2 + r^2 dS2) + V^-1 (dpsi + A)^2 into
# drho^2 + rho^2/4 dS2 + rho^2 (dpsi + cos/2 dphi)^2, which is rho^2 times the
# round unit S^3 only if chi = 2 psi has the Hopf period 4 pi.
FIBER_PERIOD = TWO_PI

SINGULAR_TOL = 1e-9
STRING_TUBE = 1e-3
ENUM_LIMIT = 4_000_000


# ----------------------------------------------------------------------------
# screw angles and the flat quotient formulas


class ScrewAngle:
    """Rotation angle theta, optionally tagged with the exact ratio theta/2pi."""

    def __init__(self, value: float | None = None, ratio: Fraction | None = None):
        if ratio is not None:
            ratio = Fraction(ratio)
            self.ratio = ratio
            self.value = float(TWO_PI * ratio) if value is None else float(value)
        else:
            if value is None:
                raise ValueError("need value or ratio")
            self.ratio = None
            self.value = float(value)

    @classmethod
    def rational(cls, p: int, q: int) -> "ScrewAngle":
        return cls(ratio=Fraction(p, q))

    @property
    def turns(self):
        """theta / 2pi, exact when tagged."""
        return self.ratio if self.ratio is not None else self.value / TWO_PI

    def dist_to_int(self, k) -> np.ndarray:
        """Distance from k*theta/2pi to the nearest integer, in [0, 1/2]."""
        k = np.asarray(k)
        if self.ratio is None:
            x = np.asarray(k, dtype=float) * (self.value / TWO_PI)
            f = x - np.floor(x)
            return np.minimum(f, 1.0 - f)
        p, q = self.ratio.numerator, self.ratio.denominator
        p %= q
        if q < 2**31 and (k.size == 0 or np.abs(k).max() < 2**31):
            m = (k.astype(np.int64) * p) % q
            m = np.minimum(m, q - m)
            return m.astype(float) / q
        flat = [min((int(kk) * p) % q, q - (int(kk) * p) % q) for kk in k.ravel()]
        return np.array([float(Fraction(m, q)) for m in flat]).reshape(k.shape)

    def rotation_angle(self, k) -> np.ndarray:
        """k*theta reduced to [0, 2pi), exact multiples of 2pi map to 0."""
        k = np.asarray(k)
        if self.ratio is None:
            return np.mod(k * self.value, TWO_PI)
        p, q = self.ratio.numerator, self.ratio.denominator
        if q < 2**31 and (k.size == 0 or np.abs(k).max() < 2**31):
            m = (k.astype(np.int64) * (p % q)) % q
            return TWO_PI * m.astype(float) / q
        flat = [float(Fraction((int(kk) * p) % q, q)) for kk in k.ravel()]
        return TWO_PI * np.array(flat).reshape(k.shape)

    def __repr__(self):
        if self.ratio is not None and self.ratio.denominator < 10**6:
            return f"ScrewAngle(2pi*{self.ratio})"
        return f"ScrewAngle({self.value!r})"


def as_angle(theta) -> ScrewAngle:
    return theta if isinstance(theta, ScrewAngle) else ScrewAngle(theta)


def liouville_angle(n_terms: int = 6) -> ScrewAngle:
    """theta/2pi = sum_{n<=n_terms} 10^-n!, kept as an exact rational."""
    ratio = sum(Fraction(1, 10 ** math.factorial(n)) for n in range(1, n_terms + 1))
    return ScrewAngle(ratio=ratio)


def screw_apply(theta, k, p) -> np.ndarray:
    """Rotate p by k*theta about the z-axis, then translate by k along z."""
    ang = as_angle(theta)
    p = np.asarray(p, dtype=float)
    k = np.asarray(k)
    a = ang.rotation_angle(k)
    c, s = np.cos(a), np.sin(a)
    out = np.empty(np.broadcast_shapes(p.shape, np.shape(a) + (3,)))
    out[..., 0] = c * p[..., 0] - s * p[..., 1]
    out[..., 1] = s * p[..., 0] + c * p[..., 1]
    out[..., 2] = p[..., 2] + k
    return out


def loop_length(theta, k, t) -> np.ndarray:
    """Length of the loop rho^k at distance t from the axis."""
    ang = as_angle(theta)
    k = np.asarray(k)
    s = np.sin(np.pi * ang.dist_to_int(k))
    t = np.asarray(t, dtype=float)
    return np.sqrt(k.astype(float) ** 2 + 4.0 * t**2 * s**2)


def _enum_min(ang: ScrewAngle, t: float, k_max: int) -> tuple[float, int]:
    best, best_k = np.inf, 0
    chunk = 1 << 20
    for start in range(1, k_max + 1, chunk):
        ks = np.arange(start, min(k_max, start + chunk - 1) + 1, dtype=np.int64)
        ls = loop_length(ang, ks, t)
        i = int(np.argmin(ls))
        if ls[i] < best:
            best, best_k = float(ls[i]), int(ks[i])
    return best, best_k


def shortest_loop(theta, t, k_max: int | None = None) -> tuple[float, int]:
    """(length, k) of the shortest deck loop at distance t from the axis."""
    ang = as_angle(theta)
    if k_max is None:
        m = float(np.min(loop_length(ang, np.arange(1, 65), t)))
        k_max = int(math.ceil(2.0 * m))
        if k_max > ENUM_LIMIT:
            return shortest_loop_convergents(ang, t)
    best, best_k = _enum_min(ang, t, int(k_max))
    if k_max < best:
        raise KMaxTooSmall(f"k_max={k_max} below current minimum {best:.6g}")
    return best, best_k


def shortest_loop_convergents(theta, t) -> tuple[float, int]:
    """Shortest loop via convergent denominators of theta/2pi.

    A minimizer k of l_k has ||k x|| smaller than ||j x|| for all j < k, so it
    is a best approximation of the second kind, i.e. a convergent denominator.
    """
    from .asymptotics import continued_fraction_of

    ang = as_angle(theta)
    x = Fraction(ang.turns)
    cf = continued_fraction_of(x, depth=None)
    cands = sorted({1, *[q for q in cf.denominators if q >= 1]})
    best, best_k = np.inf, 0
    for q in cands:
        if q > best:
            break
        lq = math.sqrt(float(q) ** 2 + 4.0 * t**2 * math.sin(math.pi * _dist_to_int_exact(x, q)) ** 2)
        if lq < best:
            best, best_k = lq, q
    return best, best_k


def _dist_to_int_exact(x: Fraction, k: int) -> float:
    m = (k * x.numerator) % x.denominator
    return float(Fraction(min(m, x.denominator - m), x.denominator))


def flat_inj(theta, t, k_max: int | None = None) -> float:
    """Injectivity radius of the screw quotient at distance t from the axis."""
    return 0.5 * shortest_loop(theta, t, k_max)[0]


# ----------------------------------------------------------------------------
# Taub-NUT radial profile


def taub_nut_potential(r):
    return 1.0 + 0.5 / np.asarray(r, dtype=float)


def radial_distance(r):
    """d(nut, point) as a function of the base radius r (closed form)."""
    r = np.asarray(r, dtype=float)
    return np.sqrt(r * (r + 0.5)) + 0.5 * np.arcsinh(np.sqrt(2.0 * r))


@dataclass
class TaubNutProfile:
    t: np.ndarray
    H: np.ndarray
    dH: np.ndarray
    order: int = 3

    def __post_init__(self):
        self._spline = CubicHermiteSpline(self.t, self.H, self.dH)

    def __call__(self, t):
        return self._spline(t)

    def derivative(self, t):
        return self._spline(t, 1)

    def radius(self, t):
        """r = H(t), polished by Newton on the closed-form distance."""
        t = np.asarray(t, dtype=float)
        if np.any(t > self.t[-1]):
            raise ValueError("t beyond profile range")
        h = np.maximum(self._spline(t), 1e-300)
        for _ in range(3):
            h = h - (radial_distance(h) - t) / np.sqrt(taub_nut_potential(h))
            h = np.maximum(h, 1e-300)
        return h

    def to_csv_rows(self):
        return np.column_stack([self.t, self.H, self.dH])


def taub_nut_profile(t_max: float = 1e3, tol: float = 1e-10) -> TaubNutProfile:
    """Solve H' = V(H)^-1/2 with H(0) = 0 on a dense grid."""
    t0 = 1e-3
    h0 = t0**2 / 2 - t0**4 / 6

    def rhs(_t, y):
        h = y[0]
        return [np.sqrt(2.0 * h / (2.0 * h + 1.0))]

    grid = np.unique(np.concatenate([
        np.linspace(t0, min(10.0, t_max), 2001),
        np.geomspace(min(10.0, t_max), t_max, 2001),
    ]))
    sol = solve_ivp(rhs, (t0, t_max), [h0], method="DOP853", t_eval=grid,
                    rtol=tol, atol=tol * 1e-2)
    t = np.concatenate([[0.0], sol.t])
    H = np.concatenate([[0.0], sol.y[0]])
    dH = np.concatenate([[0.0], np.sqrt(2.0 * H[1:] / (2.0 * H[1:] + 1.0))])
    return TaubNutProfile(t, H, dH)


# ----------------------------------------------------------------------------
# models


def _norm3(X):
    return np.sqrt(np.sum(np.asarray(X)[..., :3] ** 2, axis=-1))


class ModelMetric:
    name = "model"
    dim = 3
    chart_id = "cartesian"
    has_deck = False
    has_circle = False
    flat = False

    def metric(self, X):
        raise NotImplementedError

    def metric_grad(self, X):
        return None

    def check_point(self, X):
        pass

    def in_domain(self, X) -> bool:
        return bool(np.all(self.domain_margin(X) > 0))

    def domain_margin(self, X):
        """Positive inside the chart's working domain."""
        return np.full(np.shape(X)[:-1], np.inf)

    def deck_differential(self, k, X):
        """Linear part of the deck transformation k at X (identity by default)."""
        return np.eye(self.dim)

    def radius(self, X):
        return _norm3(X)

    def base_point(self):
        return np.zeros(self.dim)

    def describe(self) -> dict:
        return {"type": self.name}

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"


class Euclidean(ModelMetric):
    name = "euclidean"
    flat = True

    def __init__(self, dim: int = 3):
        self.dim = dim

    def metric(self, X):
        X = np.asarray(X, dtype=float)
        return np.broadcast_to(np.eye(self.dim), X.shape[:-1] + (self.dim, self.dim)).copy()

    def metric_grad(self, X):
        X = np.asarray(X, dtype=float)
        return np.zeros(X.shape[:-1] + (self.dim,) * 3)


class EuclideanCircle(Euclidean):
    """Trivial product R^3 x S^1, fiber coordinate last with period ``length``."""

    name = "euclidean_circle"
    has_deck = True
    has_circle = True

    def __init__(self, length: float = TWO_PI):
        super().__init__(4)
        self.length = float(length)

    def deck_apply(self, k, X):
        X = np.array(X, dtype=float)
        X[..., 3] += np.asarray(k) * self.length
        return X

    def circle_action(self, X, phase):
        return self.deck_apply(phase, X)

    def circle_generator(self, X):
        v = np.zeros(np.shape(X))
        v[..., 3] = self.length
        return v

    def orbit_length(self, X):
        return self.length * np.ones(np.shape(X)[:-1])

    def describe(self):
        return {"type": self.name, "length": self.length}


class FlatScrewQuotient(Euclidean):
    """R^3 modulo the screw motion; the chart is the covering R^3."""

    name = "flat_screw"
    has_deck = True

    def __init__(self, theta):
        super().__init__(3)
        self.theta = as_angle(theta)
        r = self.theta.ratio
        self.q = r.denominator if (r is not None and r.denominator <= 10**6) else None
        self.has_circle = self.q is not None

    def deck_apply(self, k, X):
        return screw_apply(self.theta, k, X)

    def deck_differential(self, k, X=None):
        a = float(self.theta.rotation_angle(np.asarray(k)))
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def radius(self, X):
        X = np.asarray(X, dtype=float)
        return np.hypot(X[..., 0], X[..., 1])

    def circle_action(self, X, phase):
        X = np.array(X, dtype=float)
        X[..., 2] += np.asarray(phase) * self.q
        return X

    def circle_generator(self, X):
        v = np.zeros(np.shape(X))
        v[..., 2] = self.q
        return v

    def orbit_length(self, X):
        return float(self.q) * np.ones(np.shape(X)[:-1])

    def describe(self):
        d = {"type": self.name, "theta": self.theta.value}
        r = self.theta.ratio
        if r is not None and r.denominator < 10**6:
            d["theta_rational"] = [r.numerator, r.denominator]
        return d


def deck_distance(model: FlatScrewQuotient, x, y, k_window: int | None = None) -> float:
    """Quotient distance: min over |k| <= k_window of |rho^k(y) - x|."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if k_window is None:
        d0 = float(np.linalg.norm(x - y))
        k_window = int(math.floor(d0 + abs(x[2] - y[2]))) + 1
    ks = np.arange(-k_window, k_window + 1)
    imgs = screw_apply(model.theta, ks, y[None, :])
    d = np.linalg.norm(imgs - x, axis=-1)
    i = int(np.argmin(d))
    if k_window > 0 and abs(int(ks[i])) == k_window:
        raise WindowTooSmall(f"minimum attained at boundary k={ks[i]}")
    return float(d[i])


def _unit_monopole(U):
    """Potential 1/(2s) and connection A (Dirac string along -z) with derivatives."""
    s = np.sqrt(np.sum(U**2, axis=-1))
    D = s * (s + U[..., 2])
    V = 0.5 / s
    dV = -U / (2.0 * s[..., None] ** 3)
    A = np.zeros(U.shape)
    A[..., 0] = U[..., 1] / (2.0 * D)
    A[..., 1] = -U[..., 0] / (2.0 * D)
    dD = U * ((s + U[..., 2]) / s + 1.0)[..., None]
    dD[..., 2] += s
    # dA[..., k, i] = d_k A_i
    dA = np.zeros(U.shape[:-1] + (3, 3))
    dA[..., :, 0] = -U[..., 1, None] * dD / (2.0 * D[..., None] ** 2)
    dA[..., 1, 0] += 1.0 / (2.0 * D)
    dA[..., :, 1] = U[..., 0, None] * dD / (2.0 * D[..., None] ** 2)
    dA[..., 0, 1] -= 1.0 / (2.0 * D)
    return V, dV, A, dA


class MultiTaubNut(ModelMetric):
    """Gibbons-Hawking metric V g_R3 + V^-1 (dpsi + A)^2 in the chart (x, y, z, psi)."""

    name = "multi_taub_nut"
    dim = 4
    chart_id = "monopole"
    has_deck = True
    has_circle = True

    def __init__(self, nuts):
        self.nuts = np.atleast_2d(np.asarray(nuts, dtype=float))
        if self.nuts.shape[-1] != 3:
            raise ValueError("nuts must be 3-vectors")
        self.center = self.nuts.mean(axis=0)

    def potential_and_connection(self, X):
        X = np.asarray(X, dtype=float)
        V = np.ones(X.shape[:-1])
        dV = np.zeros(X.shape[:-1] + (3,))
        A = np.zeros(X.shape[:-1] + (3,))
        dA = np.zeros(X.shape[:-1] + (3, 3))
        for p in self.nuts:
            v, dv, a, da = _unit_monopole(X[..., :3] - p)
            V += v
            dV += dv
            A += a
            dA += da
        return V, dV, A, dA

    def _string_gap(self, X):
        X = np.asarray(X, dtype=float)
        out = []
        for p in self.nuts:
            U = X[..., :3] - p
            s = np.sqrt(np.sum(U**2, axis=-1))
            rho = np.hypot(U[..., 0], U[..., 1])
            out.append(np.where(U[..., 2] < 0, rho, s))
        return np.min(np.stack(out), axis=0)

    def check_point(self, X):
        if np.any(self._string_gap(X) < SINGULAR_TOL):
            raise SingularPoint("point within 1e-9 of a nut or Dirac string")

    def domain_margin(self, X):
        return self._string_gap(X) - STRING_TUBE

    def _assemble(self, V, dV, A, dA):
        shp = V.shape
        eta = np.zeros(shp + (4,))
        eta[..., :3] = A
        eta[..., 3] = 1.0
        P = np.diag([1.0, 1.0, 1.0, 0.0])
        g = V[..., None, None] * P + (1.0 / V)[..., None, None] * eta[..., :, None] * eta[..., None, :]
        dg = np.zeros(shp + (4, 4, 4))
        deta = np.zeros(shp + (3, 4))
        deta[..., :3] = dA
        ee = eta[..., :, None] * eta[..., None, :]
        dg[..., :3, :, :] = (
            dV[..., :, None, None] * (P - ee / (V**2)[..., None, None])[..., None, :, :]
            + (1.0 / V)[..., None, None, None]
            * (deta[..., :, :, None] * eta[..., None, None, :] + eta[..., None, :, None] * deta[..., :, None, :])
        )
        return g, dg

    def metric(self, X):
        self.check_point(X)
        return self._assemble(*self.potential_and_connection(X))[0]

    def metric_grad(self, X):
        self.check_point(X)
        return self._assemble(*self.potential_and_connection(X))[1]

    def radius(self, X):
        return np.sqrt(np.sum((np.asarray(X, dtype=float)[..., :3] - self.center) ** 2, axis=-1))

    def base_point(self):
        return np.concatenate([self.nuts[0], [0.0]])

    def deck_apply(self, k, X):
        X = np.array(X, dtype=float)
        X[..., 3] += np.asarray(k) * FIBER_PERIOD
        return X

    def circle_action(self, X, phase):
        return self.deck_apply(phase, X)

    def circle_generator(self, X):
        v = np.zeros(np.shape(X))
        v[..., 3] = FIBER_PERIOD
        return v

    def orbit_length(self, X):
        V = self.potential_and_connection(X)[0]
        return FIBER_PERIOD / np.sqrt(V)

    def describe(self):
        return {"type": self.name, "nuts": self.nuts.tolist()}


class TaubNut(MultiTaubNut):
    """Single-nut Taub-NUT, V = 1 + 1/(2r), nut at the origin."""

    name = "taub_nut"

    def __init__(self):
        super().__init__([[0.0, 0.0, 0.0]])

    def distance_to_nut(self, X):
        return radial_distance(_norm3(X))

    def describe(self):
        return {"type": self.name}


class PerturbedTaubNut(TaubNut):
    """Taub-NUT plus delta cos(psi) r^-2 g_R3, which breaks the circle symmetry."""

    name = "perturbed_taub_nut"

    def __init__(self, delta: float = 0.1):
        super().__init__()
        self.delta = float(delta)

    def _bump(self, X):
        X = np.asarray(X, dtype=float)
        r2 = np.sum(X[..., :3] ** 2, axis=-1)
        c, s = np.cos(X[..., 3]), np.sin(X[..., 3])
        b = self.delta * c / r2
        db = np.zeros(X.shape)
        db[..., :3] = -2.0 * self.delta * c[..., None] * X[..., :3] / (r2**2)[..., None]
        db[..., 3] = -self.delta * s / r2
        return b, db

    def metric(self, X):
        g = super().metric(X)
        b, _ = self._bump(X)
        P = np.diag([1.0, 1.0, 1.0, 0.0])
        return g + b[..., None, None] * P

    def metric_grad(self, X):
        dg = super().metric_grad(X)
        _, db = self._bump(X)
        P = np.diag([1.0, 1.0, 1.0, 0.0])
        return dg + db[..., :, None, None] * P

    def describe(self):
        return {"type": self.name, "delta": self.delta}


class TaubNutRadial(ModelMetric):
    """Taub-NUT in the chart (t, vartheta, phi, chi) of the Bianchi-IX radial form."""

    name = "taub_nut"
    dim = 4
    chart_id = "radial"

    def __init__(self, profile: TaubNutProfile | None = None):
        self.profile = profile if profile is not None else taub_nut_profile()

    def check_point(self, X):
        X = np.asarray(X, dtype=float)
        if np.any(X[..., 0] < SINGULAR_TOL) or np.any(np.abs(np.sin(X[..., 1])) < SINGULAR_TOL):
            raise SingularPoint("nut or polar axis of the radial chart")

    def domain_margin(self, X):
        X = np.asarray(X, dtype=float)
        return np.minimum(X[..., 0], np.abs(np.sin(X[..., 1]))) - STRING_TUBE

    def _coeffs(self, t):
        H = self.profile.radius(t)
        V = taub_nut_potential(H)
        a = 2.0 * H * np.sqrt(V)
        c = 1.0 / np.sqrt(V)
        da = 2.0 - 1.0 / (2.0 * H * V)
        dc = 1.0 / (4.0 * H**2 * V**2)
        return a, c, da, dc

    def metric(self, X):
        self.check_point(X)
        X = np.asarray(X, dtype=float)
        a, c, _, _ = self._coeffs(X[..., 0])
        st, ct = np.sin(X[..., 1]), np.cos(X[..., 1])
        g = np.zeros(X.shape[:-1] + (4, 4))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = a**2 / 4
        g[..., 2, 2] = (a**2 * st**2 + c**2 * ct**2) / 4
        g[..., 2, 3] = g[..., 3, 2] = c**2 * ct / 4
        g[..., 3, 3] = c**2 / 4
        return g

    def metric_grad(self, X):
        self.check_point(X)
        X = np.asarray(X, dtype=float)
        a, c, da, dc = self._coeffs(X[..., 0])
        st, ct = np.sin(X[..., 1]), np.cos(X[..., 1])
        dg = np.zeros(X.shape[:-1] + (4, 4, 4))
        dg[..., 0, 1, 1] = a * da / 2
        dg[..., 0, 2, 2] = (a * da * st**2 + c * dc * ct**2) / 2
        dg[..., 0, 2, 3] = dg[..., 0, 3, 2] = c * dc * ct / 2
        dg[..., 0, 3, 3] = c * dc / 2
        dg[..., 1, 2, 2] = (a**2 - c**2) * st * ct / 2
        dg[..., 1, 2, 3] = dg[..., 1, 3, 2] = -(c**2) * st / 4
        return dg

    def radius(self, X):
        return self.profile.radius(np.asarray(X, dtype=float)[..., 0])

    @staticmethod
    def from_monopole(X):
        """Map (x, y, z, psi) to (t, vartheta, phi, chi)."""
        X = np.asarray(X, dtype=float)
        r = _norm3(X)
        out = np.empty(X.shape)
        out[..., 0] = radial_distance(r)
        out[..., 1] = np.arccos(np.clip(X[..., 2] / r, -1.0, 1.0))
        out[..., 2] = np.arctan2(X[..., 1], X[..., 0])
        out[..., 3] = 2.0 * X[..., 3] - out[..., 2]
        return out


class Schwarzschild(ModelMetric):
    """Riemannian Schwarzschild in isotropic coordinates (x, y, z, tau)."""

    name = "schwarzschild"
    dim = 4
    chart_id = "isotropic"

    def __init__(self, mass: float = 1.0):
        self.mass = float(mass)

    def check_point(self, X):
        rho = _norm3(X)
        if np.any(rho <= self.mass / 2 + SINGULAR_TOL):
            raise SingularPoint("inside or on the isotropic horizon")

    def domain_margin(self, X):
        return _norm3(X) - self.mass / 2 - STRING_TUBE

    def _parts(self, X):
        X = np.asarray(X, dtype=float)
        m = self.mass
        rho = _norm3(X)
        psi = 1.0 + m / (2.0 * rho)
        F = (2.0 * rho - m) / (2.0 * rho + m)
        dpsi = -m / (2.0 * rho**2)
        dF = 4.0 * m / (2.0 * rho + m) ** 2
        return X, rho, psi, F, dpsi, dF

    def metric(self, X):
        self.check_point(X)
        X, rho, psi, F, _, _ = self._parts(X)
        g = np.zeros(X.shape[:-1] + (4, 4))
        for i in range(3):
            g[..., i, i] = psi**4
        g[..., 3, 3] = F**2
        return g

    def metric_grad(self, X):
        self.check_point(X)
        X, rho, psi, F, dpsi, dF = self._parts(X)
        n = X[..., :3] / rho[..., None]
        dg = np.zeros(X.shape[:-1] + (4, 4, 4))
        for k in range(3):
            for i in range(3):
                dg[..., k, i, i] = 4.0 * psi**3 * dpsi * n[..., k]
            dg[..., k, 3, 3] = 2.0 * F * dF * n[..., k]
        return dg

    def base_point(self):
        return np.array([self.mass, 0.0, 0.0, 0.0])

    def describe(self):
        return {"type": self.name, "mass": self.mass}


# ----------------------------------------------------------------------------
# JSON descriptions


def model_from_config(desc, path: str = "model"):
    if not isinstance(desc, dict):
        raise ConfigError(path, "model description must be an object")
    kind = desc.get("type")
    if kind == "euclidean":
        return Euclidean(int(desc.get("dim", 3)))
    if kind == "flat_screw":
        if "theta_rational" in desc:
            pq = desc["theta_rational"]
            if not (isinstance(pq, list) and len(pq) == 2 and all(isinstance(v, int) for v in pq)) or pq[1] <= 0:
                raise ConfigError(f"{path}.theta_rational", "expected [p, q] with integer q > 0")
            return FlatScrewQuotient(ScrewAngle.rational(*pq))
        if "theta" in desc:
            th = desc["theta"]
            if not isinstance(th, (int, float)):
                raise ConfigError(f"{path}.theta", "expected a number")
            return FlatScrewQuotient(float(th))
        raise ConfigError(f"{path}.theta", "flat_screw needs theta or theta_rational")
    if kind == "taub_nut":
        return TaubNut()
    if kind == "perturbed_taub_nut":
        return PerturbedTaubNut(float(desc.get("delta", 0.1)))
    if kind == "multi_taub_nut":
        nuts = desc.get("nuts")
        if not isinstance(nuts, list) or not nuts:
            raise ConfigError(f"{path}.nuts", "expected a non-empty list of [x, y, z]")
        for i, p in enumerate(nuts):
            if not (isinstance(p, list) and len(p) == 3 and all(isinstance(c, (int, float)) for c in p)):
                raise ConfigError(f"{path}.nuts[{i}]", "expected [x, y, z]")
        return MultiTaubNut(nuts)
    if kind == "schwarzschild":
        m = desc.get("mass", 1.0)
        if not isinstance(m, (int, float)) or m <= 0:
            raise ConfigError(f"{path}.mass", "expected a positive number")
        return Schwarzschild(float(m))
    raise ConfigError(f"{path}.type", f"unknown model type {kind!r}")
