"""Metric, Christoffel symbols and curvature of a model at chart points."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedOrder


@dataclass(frozen=True)
class ChartPoint:
    chart_id: str
    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float))


@dataclass(frozen=True)
class TangentVec:
    base: ChartPoint
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", np.asarray(self.components, dtype=float))


@dataclass
class MetricTensor:
    components: np.ndarray

    def norm(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(v @ self.components @ v))

    def inner(self, u, v) -> float:
        return float(np.asarray(u) @ self.components @ np.asarray(v))


@dataclass
class CurvatureTensor:
    """R_{abcd} with R(X, Y)Z = nabla_X nabla_Y Z - ... and R_{abcd} = g_ae R^e_{bcd}."""

    components: np.ndarray
    point: ChartPoint | None = field(default=None)


def point(model, coords) -> ChartPoint:
    return ChartPoint(model.chart_id, coords)


def coords_of(model, p) -> np.ndarray:
    if isinstance(p, ChartPoint):
        if p.chart_id != model.chart_id:
            raise ValueError(f"point in chart {p.chart_id!r}, model uses {model.chart_id!r}")
        x = p.coords
    else:
        x = np.asarray(p, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"expected {model.dim} coordinates, got {x.shape[-1]}")
    return x


def fd_step(x) -> float:
    """Central-difference step: max(1e-5, 1e-4 |coords|)."""
    return max(1e-5, 1e-4 * float(np.linalg.norm(x)))


# ----------------------------------------------------------------------------
# vectorized kernels, X has shape (..., d)


def metric_grad_batch(model, X) -> np.ndarray:
    dg = model.metric_grad(X)
    if dg is not None:
        return dg
    X = np.asarray(X, dtype=float)
    d = model.dim
    out = np.empty(X.shape[:-1] + (d, d, d))
    for k in range(d):
        h = np.maximum(1e-5, 1e-4 * np.linalg.norm(X, axis=-1))[..., None]
        e = np.zeros(d)
        e[k] = 1.0
        out[..., k, :, :] = (model.metric(X + h * e) - model.metric(X - h * e)) / (2 * h[..., None])
    return out


def christoffel_from(g, dg) -> np.ndarray:
    """Gamma^k_ij from g_ij and dg[m, i, j] = d_m g_ij."""
    ginv = np.linalg.inv(g)
    T = np.swapaxes(dg, -3, -2) + np.moveaxis(np.swapaxes(dg, -3, -2), -1, -2) - dg
    # T[l, i, j] = d_i g_lj + d_j g_li - d_l g_ij
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, T)


def christoffel_batch(model, X) -> np.ndarray:
    return christoffel_from(model.metric(X), metric_grad_batch(model, X))


def geodesic_acceleration(model, X, V) -> np.ndarray:
    """-Gamma^k_ij v^i v^j, vectorized over leading axes."""
    G = christoffel_batch(model, X)
    return -np.einsum("...kij,...i,...j->...k", G, V, V)


def _dchristoffel(model, x) -> tuple[np.ndarray, np.ndarray]:
    d = model.dim
    h = fd_step(x)
    E = np.eye(d) * h
    pts = np.concatenate([x + E, x - E, x + 2 * E, x - 2 * E])
    G = christoffel_batch(model, pts)
    # fourth-order central stencil, dG[m, k, i, j] = d_m Gamma^k_ij
    dG = (8 * (G[:d] - G[d : 2 * d]) - (G[2 * d : 3 * d] - G[3 * d :])) / (12 * h)
    return christoffel_batch(model, x[None])[0], dG


def _riemann_components(model, x) -> tuple[np.ndarray, np.ndarray]:
    G, dG = _dchristoffel(model, x)
    # R^r_{s m n} = d_m G^r_{n s} - d_n G^r_{m s} + G^r_{m l} G^l_{n s} - G^r_{n l} G^l_{m s}
    t1 = np.einsum("mrns->rsmn", dG)
    t3 = np.einsum("rml,lns->rsmn", G, G)
    Rup = t1 - np.swapaxes(t1, 2, 3) + t3 - np.swapaxes(t3, 2, 3)
    g = model.metric(x[None])[0]
    return np.einsum("ar,rsmn->asmn", g, Rup), g


# ----------------------------------------------------------------------------
# public operations


def metric_at(model, p) -> MetricTensor:
    x = coords_of(model, p)
    model.check_point(x)
    return MetricTensor(model.metric(x[None])[0])


def christoffel_at(model, p) -> np.ndarray:
    x = coords_of(model, p)
    model.check_point(x)
    return christoffel_batch(model, x[None])[0]


def riemann_at(model, p) -> CurvatureTensor:
    x = coords_of(model, p)
    model.check_point(x)
    R, _ = _riemann_components(model, x)
    return CurvatureTensor(R, ChartPoint(model.chart_id, x))


def ricci_from(R: np.ndarray, g: np.ndarray) -> np.ndarray:
    ginv = np.linalg.inv(g)
    return np.einsum("ac,abcd->bd", ginv, R)


def tensor_norm(T: np.ndarray, g: np.ndarray) -> float:
    """Norm of a covariant tensor with all indices raised by g."""
    ginv = np.linalg.inv(g)
    U = T
    for ax in range(T.ndim):
        U = np.moveaxis(np.tensordot(ginv, U, axes=([1], [ax])), 0, ax)
    return float(np.sqrt(max(np.sum(U * T), 0.0)))


def curvature_norm(model, p) -> float:
    x = coords_of(model, p)
    model.check_point(x)
    R, g = _riemann_components(model, x)
    return tensor_norm(R, g)


def curvature_derivative_norm(model, p, k: int = 1) -> float:
    """|nabla Rm| from central differences of R_abcd plus connection terms."""
    if k != 1:
        raise UnsupportedOrder(f"order {k} not supported (only k = 1)")
    x = coords_of(model, p)
    model.check_point(x)
    d = model.dim
    h = fd_step(x)
    Rp = np.stack([_riemann_components(model, x + h * e)[0] for e in np.eye(d)])
    Rm = np.stack([_riemann_components(model, x - h * e)[0] for e in np.eye(d)])
    dR = (Rp - Rm) / (2 * h)
    R, g = _riemann_components(model, x)
    G = christoffel_batch(model, x[None])[0]
    nab = (
        dR
        - np.einsum("ema,ebcd->mabcd", G, R)
        - np.einsum("emb,aecd->mabcd", G, R)
        - np.einsum("emc,abed->mabcd", G, R)
        - np.einsum("emd,abce->mabcd", G, R)
    )
    return tensor_norm(nab, g)


def volume_density(model, p) -> float:
    return float(np.sqrt(np.linalg.det(metric_at(model, p).components)))


def sectional_curvature(model, p, u, w) -> float:
    """K(u, w) = <R(u, w)w, u> / (|u|^2 |w|^2 - <u, w>^2)."""
    x = coords_of(model, p)
    R, g = _riemann_components(model, x)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    num = np.einsum("abcd,a,b,c,d->", R, u, w, u, w)
    den = (u @ g @ u) * (w @ g @ w) - (u @ g @ w) ** 2
    return float(num / den)
