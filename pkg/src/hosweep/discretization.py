"""Reference-element bases, volume quadrature, Romberg face integration and
S_N angular quadrature.

Everything here lives on the unit reference square ``[0, 1]^2``.  Tensor
node index ``m = i + (p + 1) * j`` where ``i`` runs along ``xi_0`` and ``j``
along ``xi_1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

FOUR_PI = 4.0 * math.pi


class IntegrationError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# 1D building blocks

@lru_cache(maxsize=None)
def gauss_lobatto_points(order: int) -> np.ndarray:
    """``order + 1`` Gauss-Lobatto points on [0, 1], exactly symmetric."""
    if order < 1:
        raise ValueError("order must be >= 1")
    interior = legendre.Legendre.basis(order).deriv().roots().real
    x = np.concatenate(([-1.0], np.sort(interior), [1.0]))
    x = 0.5 * (x + 1.0)
    # t -> 1 - t maps the node set onto itself bit-for-bit
    x = 0.5 * (x + (1.0 - x[::-1]))
    x[0], x[-1] = 0.0, 1.0
    x.setflags(write=False)
    return x


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n``-point Gauss-Legendre rule on [0, 1]."""
    x, w = legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def lagrange_1d(nodes, x):
    """Values and derivatives of the Lagrange polynomials through *nodes*.

    Returns two arrays of shape ``(len(x), len(nodes))``.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    eye = np.eye(n, dtype=bool)
    denom = nodes[:, None] - nodes[None, :]
    denom[eye] = 1.0
    denom = np.prod(denom, axis=1)                      # (n,)
    diff = x[:, None] - nodes[None, :]                  # (nx, n)
    # factor k of basis i (k != i); ones on the diagonal
    fac = np.where(eye[None], 1.0, diff[:, None, :])    # (nx, i, k)
    vals = np.prod(fac, axis=2) / denom
    # derivative: drop one more factor j != i and sum over j
    drop = np.where(eye[None, None], 1.0, fac[:, :, None, :])   # (nx, i, j, k)
    drop = np.prod(drop, axis=3)
    drop[:, eye] = 0.0
    ders = drop.sum(axis=2) / denom
    return vals, ders


# ---------------------------------------------------------------------------
# Tensor-product Lagrange basis (used for both geometry and DG fields)

class TensorBasis:
    """Q_p Lagrange basis on the unit square with Gauss-Lobatto nodes."""

    def __init__(self, order: int):
        self.order = int(order)
        self.nodes_1d = gauss_lobatto_points(self.order)
        self.n1 = self.order + 1
        self.size = self.n1 ** 2
        i, j = np.meshgrid(np.arange(self.n1), np.arange(self.n1), indexing="xy")
        self.index = np.stack([i.ravel(), j.ravel()], axis=1)   # m -> (i, j)
        self.nodes = self.nodes_1d[self.index]                  # (size, 2)

    def eval(self, xi) -> np.ndarray:
        """Basis values, shape ``(npts, size)``."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        v0, _ = lagrange_1d(self.nodes_1d, xi[:, 0])
        v1, _ = lagrange_1d(self.nodes_1d, xi[:, 1])
        return v0[:, self.index[:, 0]] * v1[:, self.index[:, 1]]

    def eval_grad(self, xi) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(npts, size)`` and reference gradients ``(npts, size, 2)``."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        v0, d0 = lagrange_1d(self.nodes_1d, xi[:, 0])
        v1, d1 = lagrange_1d(self.nodes_1d, xi[:, 1])
        a, b = self.index[:, 0], self.index[:, 1]
        vals = v0[:, a] * v1[:, b]
        grad = np.stack([d0[:, a] * v1[:, b], v0[:, a] * d1[:, b]], axis=-1)
        return vals, grad

    def __repr__(self):
        return f"TensorBasis(order={self.order})"


@lru_cache(maxsize=None)
def tensor_basis(order: int) -> TensorBasis:
    return TensorBasis(order)


# ---------------------------------------------------------------------------
# Volume quadrature

@dataclass(frozen=True)
class VolumeQuadrature:
    points: np.ndarray      # (nq, 2)
    weights: np.ndarray     # (nq,)

    @property
    def size(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def volume_quadrature(n_per_axis: int) -> VolumeQuadrature:
    """Tensor Gauss-Legendre rule; exact for Q_{2n-1}."""
    x, w = gauss_legendre(n_per_axis)
    X0, X1 = np.meshgrid(x, x, indexing="xy")
    W0, W1 = np.meshgrid(w, w, indexing="xy")
    pts = np.stack([X0.ravel(), X1.ravel()], axis=1)
    wts = (W0 * W1).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return VolumeQuadrature(pts, wts)


@dataclass
class ReferenceBasis:
    """DG basis of order ``s`` tabulated on a volume quadrature rule.

    ``extra_points`` adds Gauss points per axis beyond the ``s + 1`` needed
    for Q_{2s+1} exactness; curved Jacobians and non-polynomial cross
    sections want a few.
    """
    order: int
    extra_points: int = 0
    basis: TensorBasis = field(init=False, repr=False)
    quadrature: VolumeQuadrature = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    gradients: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("DG order must be >= 1")
        self.basis = tensor_basis(self.order)
        self.quadrature = volume_quadrature(self.order + 1 + self.extra_points)
        self.values, self.gradients = self.basis.eval_grad(self.quadrature.points)

    @property
    def size(self) -> int:
        return self.basis.size

    @property
    def nodes(self) -> np.ndarray:
        return self.basis.nodes

    def eval(self, xi):
        return self.basis.eval(xi)

    def eval_grad(self, xi):
        return self.basis.eval_grad(xi)


# ---------------------------------------------------------------------------
# Angular quadrature

@dataclass(frozen=True)
class AngularQuadrature:
    """Discrete ordinates ``(w_d, Omega_d)``; directions are unit 3-vectors."""
    weights: np.ndarray        # (nd,)
    directions: np.ndarray     # (nd, 3)
    name: str = ""

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("angular weights must be positive")
        if len(self.weights) != len(self.directions):
            raise ValueError("weights and directions differ in length")

    def __len__(self):
        return len(self.weights)

    @property
    def mu(self) -> np.ndarray:
        return self.directions[:, 0]

    @property
    def eta(self) -> np.ndarray:
        return self.directions[:, 1]

    @property
    def streaming(self) -> np.ndarray:
        """In-plane streaming vectors ``(mu, eta)``, shape ``(nd, 2)``."""
        return self.directions[:, :2]


_LS_MU1 = {2: math.sqrt(3.0) / 3.0, 4: 0.3500212}


def level_symmetric(N: int, dim: int = 2) -> AngularQuadrature:
    """Level-symmetric S_2 or S_4 set.

    With ``dim=2`` only the upper hemisphere (``xi > 0``) is kept and the
    weights are doubled, so they still sum to 4 pi.
    """
    if N not in _LS_MU1:
        raise ValueError(f"unsupported level-symmetric order S_{N}; use 2 or 4")
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    mu1 = _LS_MU1[N]
    n_levels = N // 2
    if N == 2:
        levels = [mu1]
    else:
        levels = [math.sqrt(mu1 ** 2 + 2.0 * (i - 1) * (1.0 - 3.0 * mu1 ** 2) / (N - 2))
                  for i in range(1, n_levels + 1)]

    # octant points: index triples summing to n_levels + 2 (1-based levels)
    octant = []
    for i in range(1, n_levels + 1):
        for j in range(1, n_levels + 2 - i):
            k = n_levels + 2 - i - j
            octant.append((levels[i - 1], levels[j - 1], levels[k - 1]))

    dirs = []
    for sz in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sx in (1.0, -1.0):
                for mu, eta, xi in octant:
                    dirs.append((sx * mu, sy * eta, sz * xi))
    dirs = np.array(dirs)
    if dim == 2:
        dirs = dirs[dirs[:, 2] > 0]
    # all S_2 / S_4 level-symmetric weights are equal
    weights = np.full(len(dirs), FOUR_PI / len(dirs))
    return AngularQuadrature(weights, dirs, name=f"S{N}" + ("-2D" if dim == 2 else ""))


# ---------------------------------------------------------------------------
# Romberg integration

@dataclass
class RombergResult:
    value: np.ndarray | float
    converged: bool
    levels: int
    evaluations: int
    error_estimate: float = math.nan


def romberg(f, a: float = 0.0, b: float = 1.0, tol: float = 1e-10,
            max_levels: int = 16, min_levels: int = 2) -> RombergResult:
    """Romberg tableau on successive trapezoid halvings of ``[a, b]``.

    *f* maps a 1D array of abscissae to an array whose leading axis matches
    it; trailing axes are integrated componentwise.  Converged when two
    successive diagonal entries differ by less than *tol* in max norm.
    """
    ends = np.asarray(f(np.array([a, b])), dtype=float)
    _check_finite(ends)
    h = b - a
    prev = [0.5 * h * (ends[0] + ends[1])]
    n_eval = 2
    n_new = 1
    err = math.inf
    for k in range(1, max_levels + 1):
        h *= 0.5
        x = a + h * (2.0 * np.arange(n_new) + 1.0)
        fx = np.asarray(f(x), dtype=float)
        _check_finite(fx)
        n_eval += n_new
        row = [0.5 * prev[0] + h * fx.sum(axis=0)]
        for j in range(1, k + 1):
            row.append(row[j - 1] + (row[j - 1] - prev[j - 1]) / (4.0 ** j - 1.0))
        err = float(np.max(np.abs(row[k] - prev[k - 1])))
        if k >= min_levels and err < tol:
            return RombergResult(row[k], True, k, n_eval, err)
        prev = row
        n_new *= 2
    return RombergResult(prev[-1], False, max_levels, n_eval, err)


def romberg_face_integral(f, tol: float = 1e-10, max_levels: int = 16,
                          a: float = 0.0, b: float = 1.0,
                          local_levels: int = 5) -> RombergResult:
    """Integrate a piecewise-smooth integrand over ``[a, b]``.

    Runs a short Romberg tableau (``local_levels`` halvings) per interval.
    An interval is accepted when its own tableau converged, both halves
    converged, and the halves sum to the whole within *tol*; otherwise it
    is bisected, so a kink only costs refinement near itself.  The second
    test catches kinks whose trapezoid errors happen to extrapolate
    consistently.  Tableaux run at ``tol / 10`` because leaf errors add
    up near a kink.  ``max_levels`` bounds the bisection depth; hitting it
    flags the result as not converged.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")

    cache = {}

    def cached(x):
        # bisection reuses dyadic abscissae; evaluate each one once
        missing = [v for v in x.tolist() if v not in cache]
        if missing:
            fx = np.asarray(f(np.array(missing)), dtype=float)
            cache.update(zip(missing, fx))
        return np.stack([cache[v] for v in x.tolist()])

    def rom(lo, hi):
        return romberg(cached, lo, hi, tol * 0.1, max_levels=local_levels, min_levels=2)

    total = 0.0
    converged = True
    n_eval = 0
    worst = 0.0
    whole = rom(a, b)
    n_eval += whole.evaluations
    stack = [(a, b, whole, 0)]
    while stack:
        lo, hi, res, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = rom(lo, mid), rom(mid, hi)
        n_eval += left.evaluations + right.evaluations
        split = left.value + right.value
        gap = float(np.max(np.abs(split - res.value)))
        ok = res.converged and left.converged and right.converged and gap < tol
        if ok or depth >= max_levels:
            total = total + split
            converged &= ok
            worst = max(worst, gap)
            continue
        stack.append((mid, hi, right, depth + 1))
        stack.append((lo, mid, left, depth + 1))
    return RombergResult(total, converged, max_levels, len(cache), worst)


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError("integrand returned a non-finite value")
