"""Per-ordinate DG transport operator blocks.

Row index = test function.  For ordinate ``d`` the assembled system reads

    (G + F_diag + M_t) psi + sum_u F_{e,u} psi_u = q + M_s phi / (4 pi)

with every coupling block ``F_{e,u}`` stored as the *negative* upwind
inflow mass (entries <= 0), so moving it to the right-hand side adds the
upwind contribution.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discretization import (AngularQuadrature, ReferenceBasis, gauss_legendre,
                             romberg_face_integral)
from .mesh import HighOrderMesh, face_to_reference

log = logging.getLogger(__name__)

EDGE_EPS = 1e-12


class AssemblyError(RuntimeError):
    pass


class RombergWarning(RuntimeWarning):
    pass


@dataclass
class CrossSections:
    """Region table ``{region: (sigma_t, sigma_s)}`` or callables of ``x``.

    Callables take points of shape ``(..., 2)`` and return arrays of shape
    ``x.shape[:-1]``.
    """
    table: dict | None = None
    sigma_t: Callable | None = None
    sigma_s: Callable | None = None

    def __post_init__(self):
        if self.table is None and self.sigma_t is None:
            raise ValueError("need a region table or sigma_t callable")
        if self.table is not None:
            for reg, (st, ss) in self.table.items():
                if not st >= ss >= 0:
                    raise ValueError(f"region {reg}: need sigma_t >= sigma_s >= 0, "
                                     f"got ({st}, {ss})")

    @classmethod
    def constant(cls, sigma_t: float, sigma_s: float = 0.0) -> "CrossSections":
        return cls(sigma_t=lambda x: np.full(x.shape[:-1], float(sigma_t)),
                   sigma_s=lambda x: np.full(x.shape[:-1], float(sigma_s)))

    def scaled(self, factor: float) -> "CrossSections":
        """Both cross sections multiplied by *factor*."""
        if self.table is not None:
            return CrossSections({k: (factor * a, factor * b) for k, (a, b) in self.table.items()})
        st, ss = self.sigma_t, self.sigma_s
        return CrossSections(sigma_t=lambda x: factor * st(x),
                             sigma_s=(lambda x: factor * ss(x)) if ss else None)

    def evaluate(self, regions: np.ndarray, X: np.ndarray):
        """``(sigma_t, sigma_s)`` at points ``X`` of shape ``(ne, nq, 2)``."""
        if self.table is not None:
            missing = set(np.unique(regions).tolist()) - set(self.table)
            if missing:
                raise AssemblyError(f"no cross sections for region(s) {sorted(missing)}")
            st = np.array([self.table[r][0] for r in regions])[:, None]
            ss = np.array([self.table[r][1] for r in regions])[:, None]
            shape = X.shape[:-1]
            return np.broadcast_to(st, shape).copy(), np.broadcast_to(ss, shape).copy()
        st = np.asarray(self.sigma_t(X), dtype=float)
        ss = np.zeros_like(st) if self.sigma_s is None else np.asarray(self.sigma_s(X), dtype=float)
        if np.any(ss < 0) or np.any(st < ss):
            raise AssemblyError("cross sections violate sigma_t >= sigma_s >= 0")
        return st, ss


@dataclass
class Source:
    """Volumetric source ``q(x, Omega)`` and incident flux ``psi_inc(x, Omega)``.

    Both take points ``(..., 2)`` and a direction 3-vector.
    """
    volumetric: Callable | None = None
    incident: Callable | None = None

    @classmethod
    def constant(cls, q: float = 0.0, psi_inc: float = 0.0) -> "Source":
        return cls(lambda x, om: np.full(x.shape[:-1], float(q)),
                   lambda x, om: np.full(x.shape[:-1], float(psi_inc)))


@dataclass
class TransportOperator:
    mesh: HighOrderMesh
    basis: ReferenceBasis
    quadrature: AngularQuadrature
    G: np.ndarray                  # (nd, ne, nu, nu)
    F_diag: np.ndarray             # (nd, ne, nu, nu)
    couplings: list                # per ordinate: {e: [(u, block), ...]} sorted by u
    Mt: np.ndarray                 # (ne, nu, nu)
    Ms: np.ndarray                 # (ne, nu, nu)
    q: np.ndarray                  # (nd, ne, nu), inflow included
    outflow: np.ndarray            # (nd, ne, nu): boundary integral of (Omega.n)^+ u_m
    boundary_outflow: np.ndarray   # (n_bfaces, nd, nu): same, per boundary face
    source_total: np.ndarray       # (nd,): integral of q_d over the domain
    inflow_total: np.ndarray       # (nd,): boundary integral of (Omega.n)^- psi_inc
    face_lengths: dict = field(default_factory=dict)   # interior face index -> length
    unconverged_faces: list = field(default_factory=list)

    @property
    def n_ordinates(self) -> int:
        return len(self.quadrature)

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    @property
    def n_basis(self) -> int:
        return self.basis.size

    def local_matrix(self, d: int, e: int) -> np.ndarray:
        return self.G[d, e] + self.F_diag[d, e] + self.Mt[e]

    def coupling(self, d: int, e: int, u: int) -> np.ndarray | None:
        for v, block in self.couplings[d].get(e, ()):
            if v == u:
                return block
        return None

    def global_matrix(self, d: int):
        """Sparse ``G + F + M_t`` for ordinate *d* (block CSR)."""
        import scipy.sparse as sp
        nu = self.n_basis
        ne = self.n_elements
        rows, cols, blocks = [], [], []
        for e in range(ne):
            rows.append(e)
            cols.append(e)
            blocks.append(self.local_matrix(d, e))
            for u, block in self.couplings[d].get(e, ()):
                rows.append(e)
                cols.append(u)
                blocks.append(block)
        order = np.lexsort((cols, rows))
        rows, cols = np.asarray(rows)[order], np.asarray(cols)[order]
        data = np.asarray(blocks)[order]
        indptr = np.searchsorted(rows, np.arange(ne + 1))
        return sp.bsr_matrix((data, cols, indptr), shape=(ne * nu, ne * nu)).tocsr()


# ---------------------------------------------------------------------------
# Volume terms

def assemble_volume(mesh: HighOrderMesh, basis: ReferenceBasis, xsec: CrossSections,
                    omegas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Streaming blocks ``G`` (one per ordinate) and mass blocks ``M_t, M_s``.

    *omegas* is an array of in-plane streaming vectors, shape ``(nd, 2)``.
    """
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))[:, :2]
    quad = basis.quadrature
    X, J, det = mesh.geometry_at(quad.points)
    bad = np.argwhere(det <= 0.0)
    if len(bad):
        e, qp = bad[0]
        raise AssemblyError(f"element {e}: singular or inverted Jacobian at "
                            f"quadrature point {qp} (det J = {det[e, qp]:.3e})")
    # |J| J^{-T} is the cofactor matrix
    cof = np.empty_like(J)
    cof[..., 0, 0] = J[..., 1, 1]
    cof[..., 0, 1] = -J[..., 1, 0]
    cof[..., 1, 0] = -J[..., 0, 1]
    cof[..., 1, 1] = J[..., 0, 0]
    gphys = np.einsum("eqij,qmj->eqmi", cof, basis.gradients)    # grad u_m * |J|
    w = quad.weights
    U = basis.values                                              # (nq, nu)
    stream = np.einsum("di,eqmi->deqm", omegas, gphys)
    G = -np.einsum("q,deqm,qn->demn", w, stream, U)

    st, ss = xsec.evaluate(mesh.regions, X)
    wdet = w[None, :] * det
    Mt = np.einsum("eq,qm,qn->emn", wdet * st, U, U)
    Ms = np.einsum("eq,qm,qn->emn", wdet * ss, U, U)
    return G, Mt, Ms


# ---------------------------------------------------------------------------
# Face terms

def face_nodes(order: int, face: int) -> np.ndarray:
    """Local DG node indices lying on *face* (Gauss-Lobatto nodes include
    the endpoints, so all other basis functions vanish there)."""
    n1 = order + 1
    k = np.arange(n1)
    return {0: k, 1: order + n1 * k, 2: order * n1 + k, 3: n1 * k}[face]


def _integrate_face(f, rule, tol, max_levels, n_gauss):
    if rule == "romberg":
        res = romberg_face_integral(f, tol=tol, max_levels=max_levels)
        return np.asarray(res.value), res.converged
    if rule == "gauss":
        x, w = gauss_legendre(n_gauss)
        return np.tensordot(w, f(x), axes=(0, 0)), True
    raise ValueError(f"unknown face rule {rule!r}")


def assemble_faces(mesh: HighOrderMesh, basis: ReferenceBasis, omegas, tol: float = 1e-10,
                   max_levels: int = 16, rule: str = "romberg"):
    """Upwind face blocks for every ordinate in *omegas* (``(nd, 2)``).

    Returns ``(F_diag, couplings, outflow, boundary_outflow, face_lengths,
    unconverged)``; ``outflow`` sums ``boundary_outflow`` per element.
    ``couplings[d][e]`` lists ``(u, F_{e,u})`` with ``F_{e,u}`` the negative
    inflow mass from upwind element ``u``; a block is kept only when its
    max entry exceeds ``1e-12`` times the face length.
    """
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))[:, :2]
    nd = len(omegas)
    s = basis.order
    nu = basis.size
    ne = mesh.n_elements
    ns = s + 1
    n_gauss = s + mesh.order + 2
    F_diag = np.zeros((nd, ne, nu, nu))
    outflow = np.zeros((nd, ne, nu))
    boundary_outflow = np.zeros((len(mesh.boundary_faces), nd, nu))
    couplings = [dict() for _ in range(nd)]
    face_lengths = {}
    unconverged = []

    for k, rec in enumerate(mesh.interior_faces):
        L, R = rec.elem_left, rec.elem_right
        iL = face_nodes(s, rec.local_face_left)
        iR = face_nodes(s, rec.local_face_right)

        def integrand(t, rec=rec, iL=iL, iR=iR):
            _, n, jac = mesh.face_frame(rec.elem_left, rec.local_face_left, t)
            uL = basis.eval(face_to_reference(rec.local_face_left, t))[:, iL]
            uR = basis.eval(face_to_reference(rec.local_face_right,
                                              rec.right_parameter(t)))[:, iR]
            on = n @ omegas.T                                   # (nt, nd)
            wp = np.maximum(on, 0.0) * jac[:, None]
            wm = np.maximum(-on, 0.0) * jac[:, None]
            LL = uL[:, :, None] * uL[:, None, :]
            RR = uR[:, :, None] * uR[:, None, :]
            LR = uL[:, :, None] * uR[:, None, :]
            out = np.empty((len(t), 4 * nd * ns * ns + 1))
            blocks = np.stack([
                wp[:, :, None, None] * LL[:, None],             # into F_L
                wm[:, :, None, None] * RR[:, None],             # into F_R
                -wm[:, :, None, None] * LR[:, None],            # F_{L,R}
                -wp[:, :, None, None] * LR.transpose(0, 2, 1)[:, None],   # F_{R,L}
            ], axis=1)
            out[:, :-1] = blocks.reshape(len(t), -1)
            out[:, -1] = jac
            return out

        vals, ok = _integrate_face(integrand, rule, tol, max_levels, n_gauss)
        if not ok:
            unconverged.append(k)
            warnings.warn(f"Romberg did not converge on interior face {k} "
                          f"(elements {L}/{R}); using best estimate", RombergWarning)
        length = float(vals[-1])
        face_lengths[k] = length
        blocks = vals[:-1].reshape(4, nd, ns, ns)
        thresh = EDGE_EPS * length
        for d in range(nd):
            F_diag[d, L][np.ix_(iL, iL)] += blocks[0, d]
            F_diag[d, R][np.ix_(iR, iR)] += blocks[1, d]
            if np.max(np.abs(blocks[2, d])) > thresh:
                full = np.zeros((nu, nu))
                full[np.ix_(iL, iR)] = blocks[2, d]
                couplings[d].setdefault(L, []).append((R, full))
            if np.max(np.abs(blocks[3, d])) > thresh:
                full = np.zeros((nu, nu))
                full[np.ix_(iR, iL)] = blocks[3, d]
                couplings[d].setdefault(R, []).append((L, full))

    for k, rec in enumerate(mesh.boundary_faces):
        e = rec.elem_left
        iL = face_nodes(s, rec.local_face_left)

        def integrand(t, rec=rec, iL=iL):
            _, n, jac = mesh.face_frame(rec.elem_left, rec.local_face_left, t)
            uL = basis.eval(face_to_reference(rec.local_face_left, t))[:, iL]
            wp = np.maximum(n @ omegas.T, 0.0) * jac[:, None]
            mass = wp[:, :, None, None] * (uL[:, :, None] * uL[:, None, :])[:, None]
            moment = wp[:, :, None] * uL[:, None, :]
            return np.concatenate([mass.reshape(len(t), -1), moment.reshape(len(t), -1)], axis=1)

        vals, ok = _integrate_face(integrand, rule, tol, max_levels, n_gauss)
        if not ok:
            unconverged.append(("boundary", k))
            warnings.warn(f"Romberg did not converge on boundary face {k} "
                          f"(element {e})", RombergWarning)
        mass = vals[:nd * ns * ns].reshape(nd, ns, ns)
        moment = vals[nd * ns * ns:].reshape(nd, ns)
        for d in range(nd):
            F_diag[d, e][np.ix_(iL, iL)] += mass[d]
            outflow[d, e, iL] += moment[d]
            boundary_outflow[k, d, iL] = moment[d]

    for per_d in couplings:
        for e in per_d:
            per_d[e].sort(key=lambda item: item[0])
    return F_diag, couplings, outflow, boundary_outflow, face_lengths, unconverged


# ---------------------------------------------------------------------------
# Sources

def assemble_source(mesh: HighOrderMesh, basis: ReferenceBasis, quadrature: AngularQuadrature,
                    source: Source, tol: float = 1e-10, max_levels: int = 16,
                    rule: str = "romberg"):
    """Source moments including inflow: ``q[d, e, m]``.

    The boundary term is the standard upwind inflow functional
    ``int (|Omega.n| - Omega.n)/2 u_m psi_inc ds`` over inflow portions.
    Returns ``(q, source_total, inflow_total)``.
    """
    nd = len(quadrature)
    ne, nu = mesh.n_elements, basis.size
    s = basis.order
    q = np.zeros((nd, ne, nu))
    source_total = np.zeros(nd)
    inflow_total = np.zeros(nd)
    quad = basis.quadrature
    X, _, det = mesh.geometry_at(quad.points)
    wdet = quad.weights[None, :] * det
    omegas3 = quadrature.directions

    if source.volumetric is not None:
        for d in range(nd):
            qd = np.asarray(source.volumetric(X, omegas3[d]), dtype=float)
            qd = np.broadcast_to(qd, X.shape[:-1])
            q[d] += np.einsum("eq,qm->em", wdet * qd, basis.values)
            source_total[d] = float(np.sum(wdet * qd))

    if source.incident is not None:
        n_gauss = s + mesh.order + 2
        omegas = quadrature.streaming
        for rec in mesh.boundary_faces:
            e = rec.elem_left
            iL = face_nodes(s, rec.local_face_left)

            def integrand(t, rec=rec, iL=iL):
                x, n, jac = mesh.face_frame(rec.elem_left, rec.local_face_left, t)
                uL = basis.eval(face_to_reference(rec.local_face_left, t))[:, iL]
                wm = np.maximum(-(n @ omegas.T), 0.0) * jac[:, None]       # (nt, nd)
                psi = np.stack([np.broadcast_to(source.incident(x, omegas3[d]), (len(t),))
                                for d in range(nd)], axis=1)
                flux = wm * psi
                return np.concatenate([(flux[:, :, None] * uL[:, None, :]).reshape(len(t), -1),
                                       flux], axis=1)

            vals, ok = _integrate_face(integrand, rule, tol, max_levels, n_gauss)
            if not ok:
                warnings.warn(f"Romberg did not converge on inflow face of element {e}",
                              RombergWarning)
            q[:, e, iL] += vals[:nd * len(iL)].reshape(nd, len(iL))
            inflow_total += vals[nd * len(iL):]
    return q, source_total, inflow_total


def assemble(mesh: HighOrderMesh, basis: ReferenceBasis, quadrature: AngularQuadrature,
             xsec: CrossSections, source: Source | None = None, tol: float = 1e-10,
             max_levels: int = 16, rule: str = "romberg") -> TransportOperator:
    """Assemble every block of the transport operator for all ordinates."""
    source = source or Source()
    omegas = quadrature.streaming
    G, Mt, Ms = assemble_volume(mesh, basis, xsec, omegas)
    F_diag, couplings, outflow, b_outflow, lengths, bad = assemble_faces(
        mesh, basis, omegas, tol=tol, max_levels=max_levels, rule=rule)
    q, src_total, inflow_total = assemble_source(
        mesh, basis, quadrature, source, tol=tol, max_levels=max_levels, rule=rule)
    log.debug("assembled %d elements x %d ordinates", mesh.n_elements, len(quadrature))
    return TransportOperator(mesh, basis, quadrature, G, F_diag, couplings, Mt, Ms, q,
                             outflow, b_outflow, src_total, inflow_total, lengths, bad)


def dump_sparsity(op: TransportOperator, d: int, weights: dict | None = None) -> str:
    """Text edge list ``"e e' weight"`` of ordinate *d*'s coupling pattern:
    one line per upwind element ``e`` feeding downwind ``e'``."""
    lines = []
    for e in sorted(op.couplings[d]):
        for u, block in op.couplings[d][e]:
            w = weights[(u, e)] if weights else float(np.max(np.abs(block)))
            lines.append(f"{u} {e} {w:.17g}")
    return "\n".join(lines) + ("\n" if lines else "")
