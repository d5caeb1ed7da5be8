"""Fundamental pseudo-group of short loops acting on a lifted ball in T_xM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .asymptotics import DecayFit, ball_volume, decay_fit
from .errors import LeftBall, LeftChartDomain, NoConvergence, ScaleTooLarge
from .geodesics import (
    LoopRecord,
    exp_batch,
    geodesic_loops,
    log_batch,
    log_map,
    loop_holonomy,
    orthonormal_frame,
    shooting_jacobian,
    shortest_loop,
    _loop_record,
    _reverse_initial,
)
from .manifold import coords_of, curvature_norm
from .models import FlatScrewQuotient, flat_inj
from .parallel import block_map

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class PseudoGroupElement:
    lift_vector: np.ndarray
    word_power: int
    loop: LoopRecord | None = None
    incomplete: bool = False

    @property
    def is_identity(self) -> bool:
        return self.word_power == 0

    def to_json(self, g) -> dict:
        return {
            "word_power": self.word_power,
            "lift_vector": self.lift_vector.tolist(),
            "length": float(np.sqrt(self.lift_vector @ g @ self.lift_vector)),
            "holonomy": None if self.loop is None else self.loop.holonomy.tolist(),
            "incomplete": self.incomplete,
        }


@dataclass(frozen=True)
class LiftedBall:
    """B^(0, radius) in T_xM with the elements of Gamma(x, radius)."""

    model: object
    center: np.ndarray
    radius: float
    elements: tuple
    curvature_bound: float
    incomplete: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def metric0(self) -> np.ndarray:
        return self.model.metric(self.center[None])[0]

    def norm(self, W) -> np.ndarray:
        """g_x norm, which is the lifted distance to 0."""
        W = np.asarray(W, dtype=float)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", W, self.metric0, W), 0.0))

    def lifted_metric(self, w) -> np.ndarray:
        """exp_x^* g at w, from the shooting Jacobian."""
        w = np.asarray(w, dtype=float)
        if self.model.flat:
            return self.metric0.copy()
        J = shooting_jacobian(self.model, self.center, w)
        y = exp_batch(self.model, self.center, w[None])[0]
        return J.T @ self.model.metric(y[None])[0] @ J

    def element(self, word: int) -> PseudoGroupElement | None:
        for e in self.elements:
            if e.word_power == word:
                return e
        return None

    @property
    def nontrivial(self) -> list:
        return [e for e in self.elements if not e.is_identity]

    def fundamental(self) -> PseudoGroupElement:
        """Shortest nontrivial element, positive word on ties."""
        g = self.metric0
        cands = self.nontrivial
        if not cands:
            raise LeftBall("no nontrivial element at this scale")
        return min(cands, key=lambda e: (round(float(e.lift_vector @ g @ e.lift_vector), 9), -e.word_power))

    def to_json(self) -> dict:
        g = self.metric0
        return {
            "center": self.center.tolist(),
            "radius": self.radius,
            "curvature_bound": self.curvature_bound,
            "incomplete": self.incomplete,
            "elements": [e.to_json(g) for e in self.elements],
        }


# ----------------------------------------------------------------------------
# construction


def _sample_ball(rng, n, radius, d):
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * radius * rng.uniform(size=(n, 1)) ** (1.0 / d)


def curvature_bound(model, x, radius: float, n_samples: int = 24, seed: int = 0) -> float:
    """Max of |Rm| at x and at exp_x of sampled vectors of the g_x-ball."""
    if model.flat:
        return 0.0
    x = coords_of(model, x)
    E = orthonormal_frame(model.metric(x[None])[0])
    W = _sample_ball(np.random.default_rng(seed), n_samples, radius, model.dim) @ E.T
    best = curvature_norm(model, x)
    for w in W:
        try:
            y = exp_batch(model, x, w[None])[0]
        except LeftChartDomain:
            continue
        best = max(best, curvature_norm(model, y))
    return float(best)


def _curved_elements(model, x, rho):
    fund = shortest_loop(model, x)
    if fund is None or fund.length > rho:
        return [], fund
    v1 = fund.initial_velocity if fund.word > 0 else _reverse_initial(model, x, fund.initial_velocity, fund.word)
    g = model.metric(x[None])[0]
    out = []
    k = 1
    v = v1
    while True:
        if k > 1:
            v = log_map(model, x, model.deck_apply(k, x), v0=v + v1, tol=1e-11)
        if np.sqrt(v @ g @ v) > rho:
            break
        out.append(_loop_record(model, x, v, k))
        out.append(_loop_record(model, x, _reverse_initial(model, x, v, k), -k))
        k += 1
    return out, fund


def build_pseudo_group(model, x, rho: float, check_scale: bool = True, n_curvature_samples: int = 24,
                       seed: int = 0, strategy: str = "exact") -> LiftedBall:
    """Elements of Gamma(x, rho): one per geodesic loop of length <= rho, plus the identity.

    Screw quotients are enumerated exactly, or by Newton shooting with
    strategy="shooting".  Curved models are populated from the fundamental loop
    and its iterates, and flagged incomplete.
    """
    x = coords_of(model, x)
    lam2 = curvature_bound(model, x, 2 * rho, n_curvature_samples, seed)
    if check_scale and math.sqrt(lam2) * rho >= math.pi / 4:
        raise ScaleTooLarge(f"Lambda*rho = {math.sqrt(lam2) * rho:.3f} >= pi/4")
    ident = PseudoGroupElement(np.zeros(model.dim), 0)
    if not model.has_deck:
        return LiftedBall(model, x, float(rho), (ident,), lam2, incomplete=not model.flat)
    if model.flat:
        loops = geodesic_loops(model, x, rho, strategy=strategy if hasattr(model, "theta") else "auto")
        if not hasattr(model, "theta"):
            loops = _generic_flat_loops(model, x, rho)
        incomplete = False
    else:
        loops, _ = _curved_elements(model, x, rho)
        incomplete = True
    elems = [ident] + [PseudoGroupElement(np.asarray(L.initial_velocity, float), L.word, L, incomplete) for L in loops]
    elems.sort(key=lambda e: (abs(e.word_power), -e.word_power))
    return LiftedBall(model, x, float(rho), tuple(elems), lam2, incomplete)


def _generic_flat_loops(model, x, rho):
    g = model.metric(x[None])[0]
    out = []
    k = 1
    while True:
        found = False
        for s in (k, -k):
            v = model.deck_apply(s, x) - x
            ln = float(np.sqrt(v @ g @ v))
            if ln <= rho:
                out.append(LoopRecord(x.copy(), v, ln, np.eye(model.dim), s, v))
                found = True
        if not found:
            return out
        k += 1


# ----------------------------------------------------------------------------
# action


def _power_lift(ball: LiftedBall, word: int) -> np.ndarray:
    """tau^word(0): the lift of x reached by the iterated fundamental loop."""
    if word == 0:
        return np.zeros(ball.model.dim)
    e = ball.element(word)
    if e is not None:
        return e.lift_vector
    if ball.model.flat:
        return ball.model.deck_apply(word, ball.center) - ball.center
    key = ("lift", word)
    if key not in ball._cache:
        step = 1 if word > 0 else -1
        prev = _power_lift(ball, word - step)
        unit = _power_lift(ball, step)
        ball._cache[key] = log_map(ball.model, ball.center, ball.model.deck_apply(word, ball.center),
                                   v0=prev + unit, tol=1e-11)
    return ball._cache[key]


def _transport_inverse(ball: LiftedBall, word: int) -> np.ndarray:
    """p_v^{-1} in chart components for the loop with the given word."""
    key = ("hol", word)
    if key not in ball._cache:
        model, x = ball.model, ball.center
        if word == 0:
            P = np.eye(model.dim)
        else:
            v = _power_lift(ball, word)
            H, _ = loop_holonomy(model, x, v, word)
            E = orthonormal_frame(ball.metric0)
            P = E @ np.linalg.inv(H) @ np.linalg.inv(E)
        ball._cache[key] = P
    return ball._cache[key]


def affine_prediction(ball: LiftedBall, elem, W) -> np.ndarray:
    """t_v o p_v^{-1}(w): translation composed with inverse holonomy transport."""
    word = elem if isinstance(elem, (int, np.integer)) else elem.word_power
    W = np.asarray(W, dtype=float)
    return _power_lift(ball, word) + W @ _transport_inverse(ball, word).T


def tau_apply(ball: LiftedBall, elem, W, check_ball: bool = True) -> np.ndarray:
    """tau(w) = the lift of exp_x(w) continued along elem, for w of shape (d,) or (n, d)."""
    word = elem if isinstance(elem, (int, np.integer)) else elem.word_power
    W = np.asarray(W, dtype=float)
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    model, x = ball.model, ball.center
    if check_ball and np.any(ball.norm(W2) > 2 * ball.radius * (1 + 1e-12)):
        raise LeftBall("w outside the doubled lifted ball")
    if word == 0:
        out = W2.copy()
    elif model.flat:
        out = model.deck_apply(word, x + W2) - x
    else:
        seed = affine_prediction(ball, word, W2)
        targets = model.deck_apply(word, exp_batch(model, x, W2))
        J = shooting_jacobian(model, x, _power_lift(ball, word))
        try:
            out = log_batch(model, x, targets, seed, tol=1e-12, jacobian=J)
        except NoConvergence:
            out = np.array([log_map(model, x, t, v0=s, tol=1e-11) for t, s in zip(targets, seed)])
    if check_ball and np.any(ball.norm(out) > 2 * ball.radius * (1 + 1e-9)):
        raise LeftBall("image outside the doubled lifted ball")
    return out[0] if single else out


# ----------------------------------------------------------------------------
# lifts and fundamental domains


def _one_lift(model, x, y):
    if model.flat and model.has_deck and hasattr(model, "theta"):
        return log_map(model, x, y, quotient=True)
    if model.flat:
        return y - x
    return log_map(model, x, y, v0=y - x, tol=1e-11)


def lift_count(ball: LiftedBall, y, rho: float | None = None, check: bool = True) -> int:
    """Number of lifts of y in B^(0, rho), from the orbit of one lift."""
    model, x = ball.model, ball.center
    rho = ball.radius if rho is None else float(rho)
    y = coords_of(model, y)
    w0 = _one_lift(model, x, y)
    dxy = float(ball.norm(w0))
    if dxy > rho:
        raise LeftBall("y is outside B(x, rho)")
    if ball.radius < rho + dxy - 1e-12:
        ball = build_pseudo_group(model, x, rho + dxy, check_scale=False)
    imgs = np.array([tau_apply(ball, e, w0, check_ball=False) for e in ball.elements])
    norms = ball.norm(imgs)
    inside = imgs[norms <= rho * (1 + 1e-12)]
    # merge numerically coincident images
    uniq = []
    for p in inside:
        if not any(np.linalg.norm(p - q) < 1e-8 * (1 + np.linalg.norm(p)) for q in uniq):
            uniq.append(p)
    count = len(uniq)
    if check and model.has_deck:
        fund = ball.nontrivial
        if fund:
            inj = 0.5 * float(ball.norm(ball.fundamental().lift_vector))
            bound = (rho - dxy) / inj - 1
            if count < bound:
                raise AssertionError(f"lift count {count} below the lower bound {bound:.3f}")
    return count


def sub_pseudo_group(ball: LiftedBall, elem) -> list:
    """Gamma_tau: the elements whose word is a multiple of elem's word."""
    k = elem.word_power
    return [e for e in ball.elements if k and e.word_power % k == 0]


def classify_fundamental(ball: LiftedBall, W, elements=None, tol: float = BOUNDARY_TOL) -> np.ndarray:
    """+1 inside F, 0 on its boundary (within tol), -1 outside; W has shape (n, d)."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    elements = ball.nontrivial if elements is None else [e for e in elements if not e.is_identity]
    base = ball.norm(W)
    margin = np.full(len(W), np.inf)
    for e in elements:
        margin = np.minimum(margin, ball.norm(tau_apply(ball, e, W, check_ball=False)) - base)
    out = np.where(margin > tol, 1, np.where(margin >= -tol, 0, -1))
    return out


def fundamental_domain_test(ball: LiftedBall, elem_subset, w) -> bool:
    """True iff w lies strictly inside F (or F_tau when elem_subset is a sub-pseudo-group)."""
    w = np.asarray(w, dtype=float)
    if ball.norm(w) > ball.radius:
        return False
    if not np.any(w):
        return True
    return bool(classify_fundamental(ball, w[None], elem_subset)[0] == 1)


def fundamental_domain_volume(ball: LiftedBall, rho: float, samples: int = 10**6, seed: int = 0,
                              threads: int = 1, block: int = 50_000):
    """Monte-Carlo volume of F(x, rho, ball.radius) on a flat model; returns (value, std error, boundary hits)."""
    if not ball.model.flat:
        raise NotImplementedError("fundamental-domain volume is implemented for flat models")
    d = ball.model.dim
    E = orthonormal_frame(ball.metric0)
    n_blocks = max(1, math.ceil(samples / block))
    sizes = [samples // n_blocks + (1 if i < samples % n_blocks else 0) for i in range(n_blocks)]

    def run(i, rng):
        W = _sample_ball(rng, sizes[i], rho, d) @ E.T
        lab = classify_fundamental(ball, W)
        return int(np.sum(lab == 1)), int(np.sum(lab == 0))

    parts = block_map(run, seed, n_blocks, threads)
    hits = sum(p[0] for p in parts)
    bnd = sum(p[1] for p in parts)
    n_eff = samples - bnd
    ball_vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * rho**d * math.sqrt(np.linalg.det(ball.metric0))
    frac = hits / n_eff
    return ball_vol * frac, ball_vol * math.sqrt(frac * (1 - frac) / n_eff), bnd


def slab_bounds(ball: LiftedBall, elem, W) -> np.ndarray:
    """Both slab inequalities of I_tau at each w; returns a boolean array."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    g = ball.metric0
    v = _power_lift(ball, elem.word_power)
    vinv = _power_lift(ball, -elem.word_power)
    lam2 = ball.curvature_bound
    nv2 = float(v @ g @ v)
    rhs = 0.5 * nv2 + 0.5 * lam2 * ball.radius**2 * nv2
    return (W @ g @ v <= rhs * (1 + 1e-12)) & (W @ g @ vinv <= rhs * (1 + 1e-12))


def covering_volume_check(model, x, rho: float, samples: int = 200_000, seed: int = 0, threads: int = 1):
    """(rho / 2 inj) vol B(x, rho/2) against vol B^(0, rho) on a flat quotient."""
    x = coords_of(model, x)
    inj = flat_inj(model.theta, float(model.radius(x)))
    est = ball_volume(model, x, rho / 2, samples=samples, seed=seed, threads=threads)
    factor = rho / (2 * inj)
    lhs = factor * est.value
    rhs = 4.0 / 3.0 * math.pi * rho**3
    return lhs, rhs, factor * est.std_error


def min_displacement(ball: LiftedBall, elem, W) -> np.ndarray:
    """|tau(w) - w| for each sample w."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return ball.norm(tau_apply(ball, elem, W, check_ball=False) - W)


# ----------------------------------------------------------------------------
# translation defects and holonomy


def translation_defect(ball: LiftedBall, elem, W) -> np.ndarray:
    """|tau_v(w) - (v + p_v^{-1} w)| in the g_x norm, w in B^(0, rho - |v|)."""
    W = np.asarray(W, dtype=float)
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    vnorm = float(ball.norm(_power_lift(ball, elem.word_power)))
    if np.any(ball.norm(W2) > ball.radius - vnorm + 1e-12):
        raise LeftBall("w outside B^(0, rho - |v|)")
    out = ball.norm(tau_apply(ball, elem, W2, check_ball=False) - affine_prediction(ball, elem, W2))
    return out[0] if single else out


def loop_iterate_translation_defect(ball: LiftedBall, k: int, W) -> np.ndarray:
    """|tau^k(w) - w - k v_x| with v_x the lift of the fundamental loop."""
    W = np.asarray(W, dtype=float)
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    if k == 0:
        out = np.zeros(len(W2))
    else:
        fund = ball.fundamental()
        word = k * fund.word_power
        img = tau_apply(ball, word, W2, check_ball=False)
        out = ball.norm(img - W2 - k * fund.lift_vector)
    return out[0] if single else out


def holonomy_defect(model, x) -> float:
    """Spectral norm of H - id for the shortest loop at x (orthonormal frame)."""
    loop = shortest_loop(model, coords_of(model, x))
    if loop is None:
        return 0.0
    return float(np.linalg.norm(loop.holonomy - np.eye(model.dim), 2))


def holonomy_decay(model, points, threads: int = 1) -> tuple[list, DecayFit]:
    from .parallel import ordered_map

    pts = [coords_of(model, p) for p in points]
    vals = ordered_map(lambda p: holonomy_defect(model, p), pts, threads)
    pairs = [(float(model.radius(p)), v) for p, v in zip(pts, vals)]
    return pairs, decay_fit(pairs, window=(min(p[0] for p in pairs), max(p[0] for p in pairs)))
