"""Source iteration with lagged element-by-element transport sweeps.

Each iteration solves, per ordinate,

    (G + F_<= + M_t) psi_new = q + M_s phi_old / 4pi - F_> psi_old

by visiting elements in sweep order: retained upwind neighbours are
already updated, lagged ones still hold the previous iterate.  The direct
oracle instead solves ``(G + F + M_t) psi_new = q + M_s phi_old / 4pi``
with a sparse LU, i.e. plain source iteration with exact inversions.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import TransportOperator
from .discretization import FOUR_PI
from .sweepgraph import SweepOrdering, build_graph, normalize_weighting, sweep_ordering

log = logging.getLogger(__name__)

COND_LIMIT = 1e14
MODES = ("sweep", "direct")


class SolverError(RuntimeError):
    pass


@dataclass
class SolveConfig:
    tolerance: float = 1e-14
    max_iterations: int = 1000
    weighting: str = "unity"
    mode: str = "sweep"
    exact_threshold: int = 10
    threads: int | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.weighting = normalize_weighting(self.weighting)


@dataclass
class SolverState:
    psi: np.ndarray                  # (nd, ne, nu)
    phi: np.ndarray                  # (ne, nu)
    iteration: int = 0
    history: list = field(default_factory=list)
    ordinate_history: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)


def worker_count(requested: int | None = None) -> int:
    """Threads for per-ordinate work, capped by ``HOSWEEP_THREADS``."""
    cap = os.environ.get("HOSWEEP_THREADS")
    n = requested if requested is not None else 1
    if cap:
        try:
            n = min(n, int(cap)) if requested is not None else int(cap)
        except ValueError:
            raise SolverError(f"HOSWEEP_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


class TransportSolver:
    """Sweep-based (or direct) source iteration over an assembled operator.

    Local ``(G_e + F_e + M_t,e)`` factorisations are cached per element and
    ordinate: memory ``N_elem * N_ord * N_u^2``.
    """

    def __init__(self, op: TransportOperator, config: SolveConfig | None = None,
                 orderings: list | None = None):
        self.op = op
        self.config = config or SolveConfig()
        self._lu = {}
        self._global_lu = {}
        self._orderings = orderings

    # -- orderings -----------------------------------------------------------

    @property
    def orderings(self) -> list[SweepOrdering]:
        if self._orderings is None:
            self._orderings = [
                sweep_ordering(build_graph(self.op, d, self.config.weighting),
                               self.config.exact_threshold)
                for d in range(self.op.n_ordinates)]
        return self._orderings

    # -- local and global solves ---------------------------------------------

    def _factor(self, d, e):
        key = (d, e)
        lu = self._lu.get(key)
        if lu is None:
            A = self.op.local_matrix(d, e)
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise SolverError(f"local matrix of element {e}, ordinate {d} is singular "
                                  f"or ill-conditioned (cond = {cond:.3e})")
            lu = sla.lu_factor(A, check_finite=False)
            self._lu[key] = lu
        return lu

    def local_solve(self, d: int, e: int, rhs) -> np.ndarray:
        """Solve ``(G_e + F_e + M_t,e) psi_e = rhs`` for one element."""
        return sla.lu_solve(self._factor(d, e), np.asarray(rhs, dtype=float),
                            check_finite=False)

    def scattering_source(self, phi) -> np.ndarray:
        return np.einsum("emn,en->em", self.op.Ms, phi) / FOUR_PI

    def sweep(self, d: int, phi, psi_d, ordering: SweepOrdering | None = None,
              scatter=None) -> np.ndarray:
        """One lagged transport sweep for ordinate *d*; returns the new
        ``(ne, nu)`` angular flux."""
        ordering = ordering or self.orderings[d]
        if scatter is None:
            scatter = self.scattering_source(phi)
        psi_new = np.array(psi_d, dtype=float, copy=True)
        q = self.op.q[d]
        couplings = self.op.couplings[d]
        for e in ordering.order:
            rhs = q[e] + scatter[e]
            for u, block in couplings.get(e, ()):
                # retained upwinds are already updated; lagged ones are old
                rhs = rhs - block @ psi_new[u]
            psi_new[e] = sla.lu_solve(self._factor(d, e), rhs, check_finite=False)
        return psi_new

    def direct_oracle(self, d: int, phi, scatter=None) -> np.ndarray:
        """Exact solve of ``(G + F + M_t) psi = q + M_s phi / 4pi``."""
        cached = self._global_lu.get(d)
        if cached is None:
            A = self.op.global_matrix(d).tocsc()
            try:
                cached = (A, spla.splu(A))
            except RuntimeError as exc:
                raise SolverError(f"global matrix for ordinate {d} is singular") from exc
            self._global_lu[d] = cached
        A, lu = cached
        if scatter is None:
            scatter = self.scattering_source(phi)
        rhs = (self.op.q[d] + scatter).ravel()
        x = lu.solve(rhs)
        # one refinement step keeps round-off below the 1e-14 stopping level
        x += lu.solve(rhs - A @ x)
        return x.reshape(self.op.n_elements, self.op.n_basis)

    def splitting(self, d: int):
        """Sparse ``(G + F_<= + M_t, F_>)`` for ordinate *d*: retained and
        lagged parts of the global operator under the sweep ordering."""
        op = self.op
        nu, ne = op.n_basis, op.n_elements
        lagged = set(self.orderings[d].lagged)
        A = op.global_matrix(d).tolil()
        B = sp.lil_matrix(A.shape)
        for e, ups in op.couplings[d].items():
            for u, block in ups:
                if (u, e) in lagged:
                    rows, cols = slice(e * nu, (e + 1) * nu), slice(u * nu, (u + 1) * nu)
                    B[rows, cols] = block
                    A[rows, cols] = 0.0
        return A.tocsr(), B.tocsr()

    # -- iteration -----------------------------------------------------------

    def scalar_flux(self, psi) -> np.ndarray:
        return np.einsum("d,den->en", self.op.quadrature.weights, psi)

    def source_iteration(self, psi0=None, callback=None) -> SolverState:
        """Iterate until ``max_d ||psi_new - psi_old||_inf < tolerance``."""
        cfg = self.config
        op = self.op
        nd, ne, nu = op.n_ordinates, op.n_elements, op.n_basis
        psi = np.zeros((nd, ne, nu)) if psi0 is None else np.array(psi0, dtype=float)
        state = SolverState(psi, self.scalar_flux(psi))
        if cfg.mode == "sweep":
            self.orderings  # build before timing-sensitive loop
        n_workers = worker_count(cfg.threads)
        pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
        try:
            for it in range(1, cfg.max_iterations + 1):
                scatter = self.scattering_source(state.phi)

                def one(d):
                    if cfg.mode == "sweep":
                        return self.sweep(d, state.phi, state.psi[d], scatter=scatter)
                    return self.direct_oracle(d, state.phi, scatter=scatter)

                results = list(pool.map(one, range(nd))) if pool else [one(d) for d in range(nd)]
                new = np.stack(results)
                per_d = np.max(np.abs(new - state.psi).reshape(nd, -1), axis=1)
                err = float(per_d.max())
                state.psi = new
                state.phi = self.scalar_flux(new)
                state.iteration = it
                state.history.append(err)
                state.ordinate_history.append(per_d)
                if callback is not None:
                    callback(state)
                if err < cfg.tolerance:
                    state.converged = True
                    break
        finally:
            if pool is not None:
                pool.shutdown()
        if not state.converged:
            log.warning("source iteration not converged after %d iterations (error %.3e)",
                        state.iteration, state.history[-1])
        return state

    # -- diagnostics ---------------------------------------------------------

    def balance_report(self, state: SolverState) -> dict:
        """Particle balance of a (converged) state.

        ``residual = volumetric_source - absorption - net_leakage`` with
        ``net_leakage = outflow - inflow``.
        """
        op = self.op
        w = op.quadrature.weights
        absorption = float(np.einsum("emn,en->", op.Mt - op.Ms, state.phi))
        volumetric = float(w @ op.source_total)
        inflow = float(w @ op.inflow_total)
        outflow = float(np.einsum("d,den,den->", w, op.outflow, state.psi))
        net = outflow - inflow
        return {
            "volumetric_source": volumetric,
            "inflow": inflow,
            "source_total": volumetric + inflow,
            "absorption": absorption,
            "outflow": outflow,
            "net_leakage": net,
            "residual": volumetric - absorption - net,
        }

    def boundary_leakage(self, state: SolverState) -> np.ndarray:
        """Angle-integrated outflow through each boundary face, in the
        order of ``mesh.boundary_faces``."""
        op = self.op
        w = op.quadrature.weights
        out = np.einsum("d,bdn,dbn->b", w, op.boundary_outflow,
                        state.psi[:, [r.elem_left for r in op.mesh.boundary_faces]])
        return out


def solve(op: TransportOperator, config: SolveConfig | None = None) -> tuple[TransportSolver, SolverState]:
    solver = TransportSolver(op, config)
    return solver, solver.source_iteration()
