"""Volume growth, injectivity profiles, decay fits and Diophantine tools."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ChartExceeded, EmptyWindow, NonPositiveValue
from .geodesics import shortest_loop as _shortest_geodesic_loop
from .manifold import coords_of, curvature_norm
from .models import (
    FIBER_PERIOD,
    FlatScrewQuotient,
    MultiTaubNut,
    TaubNut,
    deck_distance,
    flat_inj,
    radial_distance,
    screw_apply,
)
from .parallel import block_map

INF_INJ = math.inf


@dataclass
class DecayFit:
    exponent: float
    log_constant: float
    residual: float
    window: tuple
    n_points: int

    def to_json(self) -> dict:
        return {
            "exponent": self.exponent,
            "log_constant": self.log_constant,
            "residual": self.residual,
            "window": list(self.window),
            "n_points": self.n_points,
        }


@dataclass
class VolumeEstimate:
    value: float
    std_error: float
    method: str
    samples: int
    seed: int | None


@dataclass
class ContinuedFraction:
    coefficients: list
    numerators: list = field(default_factory=list)
    denominators: list = field(default_factory=list)

    @property
    def convergents(self) -> list:
        return [Fraction(p, q) for p, q in zip(self.numerators, self.denominators)]


@dataclass
class InjSample:
    r: float
    inj: float
    infinite: bool = False
    incomplete: bool = False


# ----------------------------------------------------------------------------
# fitting


def default_window(ts) -> tuple:
    """Drop the smallest decade when the data span more than two decades."""
    ts = np.asarray(ts, dtype=float)
    lo, hi = ts.min(), ts.max()
    if hi / lo > 100.0:
        lo = 10.0 * lo
    return (lo, hi)


def decay_fit(pairs, window=None) -> DecayFit:
    """Least squares of log(value) against log(t) inside the window."""
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if window is None:
        window = default_window(arr[:, 0]) if len(arr) else (0.0, 0.0)
    lo, hi = window
    sel = arr[(arr[:, 0] >= lo * (1 - 1e-12)) & (arr[:, 0] <= hi * (1 + 1e-12))]
    if len(sel) < 5:
        raise EmptyWindow(f"{len(sel)} points in window {window}, need at least 5")
    if np.any(sel[:, 1] <= 0) or np.any(sel[:, 0] <= 0):
        raise NonPositiveValue("log-log fit needs positive t and values")
    lt, lv = np.log(sel[:, 0]), np.log(sel[:, 1])
    A = np.column_stack([lt, np.ones_like(lt)])
    coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - lv) ** 2)))
    return DecayFit(float(coef[0]), float(coef[1]), res, (float(lo), float(hi)), int(len(sel)))


# ----------------------------------------------------------------------------
# Diophantine tools


def continued_fraction_of(x, depth: int | None = 40) -> ContinuedFraction:
    """Continued fraction of x with exact integer convergents.

    Floats are expanded exactly (a double is a rational number), so only the
    first dozen or so coefficients of an irrational input are meaningful.
    ``depth=None`` expands an exact rational completely.
    """
    if depth is not None and depth > 40:
        raise ValueError("depth must be at most 40")
    r = Fraction(x)
    coeffs = []
    p_prev, p = 1, None
    q_prev, q = 0, None
    nums, dens = [], []
    pm2, pm1 = 0, 1
    qm2, qm1 = 1, 0
    while depth is None or len(coeffs) < depth:
        a = math.floor(r)
        coeffs.append(a)
        pn = a * pm1 + pm2
        qn = a * qm1 + qm2
        nums.append(pn)
        dens.append(qn)
        pm2, pm1 = pm1, pn
        qm2, qm1 = qm1, qn
        frac = r - a
        if frac == 0:
            break
        r = 1 / frac
    return ContinuedFraction(coeffs, nums, dens)


def pigeonhole_k(theta, t: float) -> int:
    """Smallest k in [1, sqrt t] with |e^{ik theta} - 1| <= 2 pi / sqrt t."""
    from .models import as_angle

    if t < 1:
        raise ValueError("t must be >= 1")
    ang = as_angle(theta)
    kmax = max(1, int(math.floor(math.sqrt(t))))
    ks = np.arange(1, kmax + 1)
    chord = 2.0 * np.sin(np.pi * ang.dist_to_int(ks))
    ok = np.flatnonzero(chord <= 2 * np.pi / math.sqrt(t) * (1 + 1e-12))
    if not ok.size:
        raise AssertionError("pigeonhole bound violated")
    return int(ks[ok[0]])


def plateau_sequence(theta, n_terms: int = 4, min_span: float = 1e3):
    """Radii t_m inside the longest injectivity plateau of a screw angle.

    For a convergent denominator q followed by a large partial quotient, the
    loop rho^q stays the shortest, with length close to q, between
    q / (2 sin(pi ||q' x||)) (previous convergent q' overtaken) and
    q / (2 sin(pi ||q x||)).  Returns geometrically spaced points there.
    """
    from .models import as_angle, _dist_to_int_exact

    ang = as_angle(theta)
    x = Fraction(ang.turns)
    cf = continued_fraction_of(x, depth=None)
    best = None
    dens = cf.denominators
    for i in range(1, len(dens)):
        q, qp = dens[i], dens[i - 1]
        dq = _dist_to_int_exact(x, q)
        if dq == 0:
            continue
        lo = q / (2 * math.sin(math.pi * _dist_to_int_exact(x, qp)))
        hi = q / (2 * math.sin(math.pi * dq))
        if hi / lo >= min_span and math.isfinite(hi) and hi < 1e300:
            span = math.log(hi / lo)
            if best is None or span > best[0]:
                best = (span, lo, hi, q)
    if best is None:
        raise ValueError("no plateau of the requested span")
    _, lo, hi, q = best
    ts = np.geomspace(lo * 10, hi / 10, n_terms)
    return ts, q


# ----------------------------------------------------------------------------
# injectivity


def inj_profile(model, base_curve, L_max: float | None = None) -> list[InjSample]:
    """Half the shortest geodesic loop at each point of base_curve."""
    out = []
    for p in base_curve:
        x = coords_of(model, p)
        r = float(model.radius(x))
        if not model.has_deck:
            out.append(InjSample(r, INF_INJ, infinite=True))
        elif isinstance(model, FlatScrewQuotient):
            out.append(InjSample(r, flat_inj(model.theta, r)))
        else:
            loop = _shortest_geodesic_loop(model, x, L_max)
            if loop is None:
                out.append(InjSample(r, INF_INJ, infinite=True, incomplete=True))
            else:
                out.append(InjSample(r, 0.5 * loop.length, incomplete=True))
    return out


# ----------------------------------------------------------------------------
# volumes


def _mc_blocks(samples: int, block: int = 50_000) -> list[int]:
    n = max(1, math.ceil(samples / block))
    sizes = [samples // n] * n
    for i in range(samples - sum(sizes)):
        sizes[i] += 1
    return sizes


def _reduce(parts, box_volume, samples, seed, method="monte_carlo"):
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    mean = s1 / samples
    var = max(s2 / samples - mean**2, 0.0)
    return VolumeEstimate(box_volume * mean, box_volume * math.sqrt(var / samples), method, samples, seed)


def _flat_ball_weights(model, x, t, pts):
    if isinstance(model, FlatScrewQuotient):
        K = int(math.ceil(t)) + 1
        d = np.full(len(pts), np.inf)
        for k in range(-K, K + 1):
            d = np.minimum(d, np.linalg.norm(screw_apply(model.theta, k, pts) - x, axis=-1))
    else:
        d = np.linalg.norm(pts - x, axis=-1)
    return (d <= t).astype(float)


def ball_volume(model, x, t: float, method: str = "monte_carlo", samples: int = 200_000,
                seed: int = 0, threads: int = 1) -> VolumeEstimate:
    """vol B(x, t) by Monte Carlo over a chart box.

    Flat models use the exact quotient distance on a fundamental slab of the
    covering; on Taub-NUT the ball about the nut is {d(nut, .) <= t}, where the
    distance is the closed-form radial one.
    """
    x = coords_of(model, x)
    sizes = _mc_blocks(samples)

    if isinstance(model, TaubNut):
        if np.linalg.norm(x[:3]) > 1e-12:
            raise ChartExceeded("Taub-NUT balls are only supported about the nut")
        R = _radius_for_distance(t)
        box = (2 * R) ** 3 * FIBER_PERIOD

        def block(i, rng):
            n = sizes[i]
            P = rng.uniform(-R, R, size=(n, 3))
            r = np.linalg.norm(P, axis=1)
            inside = radial_distance(r) <= t
            w = np.where(inside, 1.0 + 0.5 / np.maximum(r, 1e-300), 0.0)
            return float(np.sum(w)), float(np.sum(w * w))

        return _reduce(block_map(block, seed, len(sizes), threads), box, samples, seed)

    if model.flat:
        d = model.dim
        if isinstance(model, FlatScrewQuotient):
            # fundamental slab z in [x_z - 1/2, x_z + 1/2) of the covering; screw
            # motions keep the distance to the axis, so the ball lies in the
            # annulus |radius - radius(x)| <= t, sampled uniformly in area
            R0 = float(np.hypot(x[0], x[1]))
            r_lo2, r_hi2 = max(0.0, R0 - t) ** 2, (R0 + t) ** 2
            box = math.pi * (r_hi2 - r_lo2)

            def sample(rng, n):
                rad = np.sqrt(rng.uniform(r_lo2, r_hi2, size=n))
                phi = rng.uniform(0.0, 2 * math.pi, size=n)
                z = rng.uniform(x[2] - 0.5, x[2] + 0.5, size=n)
                return np.column_stack([rad * np.cos(phi), rad * np.sin(phi), z])
        else:
            lo, hi = x - t, x + t
            box = float(np.prod(hi - lo))

            def sample(rng, n):
                return rng.uniform(lo, hi, size=(n, d))

        def block(i, rng):
            w = _flat_ball_weights(model, x, t, sample(rng, sizes[i]))
            return float(np.sum(w)), float(np.sum(w * w))

        return _reduce(block_map(block, seed, len(sizes), threads), box, samples, seed)
    raise ChartExceeded(f"no ball membership oracle for {model.name}")


def _radius_for_distance(t: float) -> float:
    lo, hi = 0.0, max(1.0, t)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if radial_distance(mid) < t:
            lo = mid
        else:
            hi = mid
    return hi


def weighted_curvature_integral(model, r_min: float, r_max: float, samples: int = 2000,
                                seed: int = 0, threads: int = 1) -> VolumeEstimate:
    """Monte Carlo estimate of the integral of |Rm|^2 r dvol over r_min <= r <= r_max.

    Points are drawn uniformly in r^3 (shell volume measure) and in direction;
    the fiber coordinate is integrated exactly by invariance on Gibbons-Hawking
    models and the flat/Euclidean integrand vanishes identically.
    """
    if model.flat:
        return VolumeEstimate(0.0, 0.0, "monte_carlo", samples, seed)
    if not isinstance(model, MultiTaubNut):
        raise ChartExceeded(f"no annulus sampler for {model.name}")
    sizes = _mc_blocks(samples, block=250)
    shell = 4.0 / 3.0 * np.pi * (r_max**3 - r_min**3) * FIBER_PERIOD

    def block(i, rng):
        n = sizes[i]
        u = rng.uniform(r_min**3, r_max**3, size=n)
        r = np.cbrt(u)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        if isinstance(model, TaubNut):
            # |Rm| is rotation invariant here: fold samples away from the Dirac string
            dirs[:, 2] = np.abs(dirs[:, 2])
        s1 = s2 = 0.0
        for rr, dd in zip(r, dirs):
            X = np.concatenate([rr * dd + model.center, [0.0]])
            V = float(model.potential_and_connection(X[None])[0][0])
            f = curvature_norm(model, X) ** 2 * float(model.radius(X)) * V
            s1 += f
            s2 += f * f
        return s1, s2

    return _reduce(block_map(block, seed, len(sizes), threads), shell, samples, seed)


def volume_growth_exponent(model, x, ts, samples: int = 200_000, seed: int = 0, threads: int = 1):
    vols = [ball_volume(model, x, t, samples=samples, seed=seed + i, threads=threads) for i, t in enumerate(ts)]
    fit = decay_fit([(t, v.value) for t, v in zip(ts, vols)], window=(min(ts), max(ts)))
    return fit, vols
