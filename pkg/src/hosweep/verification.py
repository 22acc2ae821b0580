"""Manufactured-solution harness, L2 errors and observed convergence orders."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import CrossSections, Source
from .discretization import FOUR_PI, AngularQuadrature, TensorBasis, volume_quadrature
from .mesh import HighOrderMesh


class ConvergenceWarning(UserWarning):
    pass


def _spatial(x):
    x0, x1 = x[..., 0], x[..., 1]
    return 0.5 * (1.0 + x0 ** 2 + x1 ** 2) + np.cos(3.0 * x0 + 1.5 * x1)


def _spatial_grad(x):
    x0, x1 = x[..., 0], x[..., 1]
    s = np.sin(3.0 * x0 + 1.5 * x1)
    return np.stack([x0 - 3.0 * s, x1 - 1.5 * s], axis=-1)


def angular_factor(omega) -> float | np.ndarray:
    """``mu^2 + eta``; may be negative, which is fine for a manufactured flux."""
    omega = np.asarray(omega, dtype=float)
    return omega[..., 0] ** 2 + omega[..., 1]


@dataclass
class ManufacturedSolution:
    """``psi(x, Omega) = S(x) A(Omega)`` with
    ``S = (1 + x^2 + y^2)/2 + cos(3x + 3y/2)`` and ``A = mu^2 + eta``."""
    xsec: CrossSections
    quadrature: AngularQuadrature

    def __post_init__(self):
        q = self.quadrature
        self._moment = float(q.weights @ angular_factor(q.directions))

    def psi(self, x, omega):
        return _spatial(np.asarray(x, dtype=float)) * angular_factor(omega)

    def grad_psi(self, x, omega):
        return _spatial_grad(np.asarray(x, dtype=float)) * angular_factor(omega)

    def scalar_flux(self, x):
        """Exact discrete scalar flux ``sum_d w_d psi_d``."""
        return _spatial(np.asarray(x, dtype=float)) * self._moment

    def _sigmas(self, x, regions=None):
        if self.xsec.table is not None:
            if regions is None:
                raise ValueError("region table cross sections need element regions")
            st = np.array([self.xsec.table[r][0] for r in np.atleast_1d(regions)])
            ss = np.array([self.xsec.table[r][1] for r in np.atleast_1d(regions)])
            shape = x.shape[:-1]
            st = st.reshape(st.shape + (1,) * (len(shape) - st.ndim))
            ss = ss.reshape(ss.shape + (1,) * (len(shape) - ss.ndim))
            return np.broadcast_to(st, shape), np.broadcast_to(ss, shape)
        st = np.asarray(self.xsec.sigma_t(x), dtype=float)
        ss = np.zeros_like(st) if self.xsec.sigma_s is None else np.asarray(self.xsec.sigma_s(x))
        return st, ss

    def source(self, x, omega, regions=None):
        """``Omega . grad psi + sigma_t psi - sigma_s / (4 pi) sum_d w_d psi_d``."""
        x = np.asarray(x, dtype=float)
        omega = np.asarray(omega, dtype=float)
        st, ss = self._sigmas(x, regions)
        stream = self.grad_psi(x, omega) @ omega[:2]
        return stream + st * self.psi(x, omega) - ss / FOUR_PI * self.scalar_flux(x)

    def residual(self, x, omega, regions=None):
        """Pointwise residual of the continuous equation with ``q = source``.

        The scattering term is summed ordinate by ordinate here, independent
        of the closed-form moment used in :meth:`source`.
        """
        x = np.asarray(x, dtype=float)
        omega = np.asarray(omega, dtype=float)
        st, ss = self._sigmas(x, regions)
        q = self.quadrature
        scat = sum(w * self.psi(x, om) for w, om in zip(q.weights, q.directions))
        lhs = self.grad_psi(x, omega) @ omega[:2] + st * self.psi(x, omega) - ss / FOUR_PI * scat
        return lhs - self.source(x, omega, regions)


def mms_source(xsec: CrossSections, quadrature: AngularQuadrature):
    """Forcing and inflow data for the manufactured solution.

    Returns ``(source, solution)``: an assembly :class:`Source` and the
    :class:`ManufacturedSolution` it was derived from.  Region-table cross
    sections are supported only when constant over the table.
    """
    if xsec.table is not None:
        vals = set(xsec.table.values())
        if len(vals) != 1:
            raise ValueError("manufactured source needs spatially callable cross sections")
        st, ss = vals.pop()
        xsec = CrossSections.constant(st, ss)
    sol = ManufacturedSolution(xsec, quadrature)
    return Source(volumetric=sol.source, incident=sol.psi), sol


def l2_error(mesh: HighOrderMesh, order: int, phi, exact, n_points: int | None = None) -> float:
    """``sqrt(sum_e int (phi_h - phi*)^2 |J|)`` with ``2 order + 3`` points per axis.

    *phi* holds nodal values ``(ne, (order+1)^2)``; *exact* maps points
    ``(..., 2)`` to values.
    """
    n_points = n_points or 2 * order + 3
    quad = volume_quadrature(n_points)
    U = TensorBasis(order).eval(quad.points)
    X, _, det = mesh.geometry_at(quad.points)
    diff = np.asarray(phi) @ U.T - exact(X)
    return float(np.sqrt(np.sum(quad.weights * det * diff ** 2)))


def convergence_order(errors) -> float:
    """Least-squares slope of ``log E`` against ``log h`` over ``(h, E)`` pairs."""
    data = np.asarray(list(errors), dtype=float)
    if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] != 2:
        raise ValueError("need at least 3 (h, error) pairs")
    h, err = data[:, 0], data[:, 1]
    if np.any(h <= 0) or np.any(err <= 0):
        raise ValueError("mesh sizes and errors must be positive")
    idx = np.argsort(h)
    if np.any(np.diff(err[idx]) <= 0):
        warnings.warn("errors are not monotone in h", ConvergenceWarning, stacklevel=2)
    slope, _ = np.polyfit(np.log(h), np.log(err), 1)
    return float(slope)


def write_error_table(path, rows) -> None:
    """CSV with columns mesh, dofs, l2_error, order (order blank on the first row)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mesh", "dofs", "l2_error", "order"])
        for row in rows:
            tag, dofs, err, order = row
            w.writerow([tag, dofs, f"{err:.6e}", "" if order is None else f"{order:.4f}"])


def pairwise_orders(errors) -> list:
    """Order between consecutive ``(h, E)`` levels; first entry is None."""
    out = [None]
    for (h0, e0), (h1, e1) in zip(errors[:-1], errors[1:]):
        out.append(float(np.log(e0 / e1) / np.log(h0 / h1)))
    return out
