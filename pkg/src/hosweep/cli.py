"""Command-line driver: ``hosweep {generate-mesh, straighten, graph-info, solve, mms}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import AssemblyError, CrossSections, Source, assemble
from .discretization import ReferenceBasis, level_symmetric, volume_quadrature
from .mesh import GeometryError, HighOrderMesh, MeshError
from .meshgen import (generate_annulus_in_square, generate_distorted, generate_uniform,
                      generate_vortex, straighten)
from .solver import SolveConfig, SolverError, TransportSolver
from .sweepgraph import WEIGHTINGS, WeightingError, build_graph, summarize, sweep_ordering, to_dot
from .verification import convergence_order, l2_error, mms_source, pairwise_orders

log = logging.getLogger("hosweep")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
SOURCES = ("constant", "triple-point", "mms")
ANGULAR_SETS = {"S2": 2, "S4": 4}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Run parameters shared by ``graph-info``, ``solve`` and ``mms``.

    ``cross_sections`` maps a region id (as a string) or ``"default"`` to
    ``[sigma_t, sigma_s]``.
    """
    order: int = 1
    angular_set: str = "S4"
    cross_sections: dict = field(default_factory=lambda: {"default": [1.0, 0.0]})
    source: str = "constant"
    source_value: float = 1.0
    inflow: float = 0.0
    weighting: str = "unity"
    tolerance: float = 1e-14
    max_iterations: int = 1000
    exact_threshold: int = 10
    compare_oracle: bool = False
    romberg_tol: float = 1e-10
    output_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.order, int) or isinstance(self.order, bool) or self.order < 1:
            raise ConfigError("order must be a positive integer")
        if self.angular_set not in ANGULAR_SETS:
            raise ConfigError(f"angular_set must be one of {sorted(ANGULAR_SETS)}")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        try:
            self.weighting = {w.lower(): w for w in WEIGHTINGS}[self.weighting.lower()]
        except (KeyError, AttributeError):
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}") from None
        if not isinstance(self.cross_sections, dict) or not self.cross_sections:
            raise ConfigError("cross_sections must be a non-empty mapping")
        for key, val in self.cross_sections.items():
            if key != "default" and not str(key).lstrip("-").isdigit():
                raise ConfigError(f"cross-section key {key!r} is not a region id")
            if (not isinstance(val, (list, tuple)) or len(val) != 2
                    or not all(isinstance(v, (int, float)) for v in val)):
                raise ConfigError(f"cross sections for {key!r} must be [sigma_t, sigma_s]")
            if not val[0] >= val[1] >= 0:
                raise ConfigError(f"region {key!r}: need sigma_t >= sigma_s >= 0")
        for name in ("tolerance", "romberg_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        data = dict(data)
        if "cross_sections" in data and isinstance(data["cross_sections"], dict):
            data["cross_sections"] = {str(k): list(v) for k, v in data["cross_sections"].items()}
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    # -- physics objects -------------------------------------------------------

    def xsec_for(self, mesh: HighOrderMesh) -> CrossSections:
        table = {}
        default = self.cross_sections.get("default")
        for reg in np.unique(mesh.regions).tolist():
            val = self.cross_sections.get(str(reg), default)
            if val is None:
                raise ConfigError(f"no cross sections for region {reg}")
            table[reg] = tuple(float(v) for v in val)
        return CrossSections(table)

    def quadrature(self):
        return level_symmetric(ANGULAR_SETS[self.angular_set])

    def source_for(self, xsec: CrossSections, quadrature):
        """``(Source, exact scalar flux or None)``."""
        if self.source == "constant":
            return Source.constant(self.source_value, self.inflow), None
        if self.source == "triple-point":
            return Source(lambda x, om: 1.0 + np.sin(2.0 * x[..., 0] + x[..., 1]) ** 2,
                          lambda x, om: np.full(x.shape[:-1], self.inflow)), None
        src, sol = mms_source(xsec, quadrature)
        return src, sol.scalar_flux

    def solve_config(self, mode="sweep") -> SolveConfig:
        return SolveConfig(tolerance=self.tolerance, max_iterations=self.max_iterations,
                           weighting=self.weighting, mode=mode,
                           exact_threshold=self.exact_threshold)


_FLAG_FIELDS = {
    "order": "order", "angular_set": "angular_set", "source": "source",
    "source_value": "source_value", "inflow": "inflow", "weighting": "weighting",
    "tolerance": "tolerance", "max_iterations": "max_iterations",
    "exact_threshold": "exact_threshold", "compare_oracle": "compare_oracle",
    "romberg_tol": "romberg_tol", "output_dir": "output_dir",
}


def _parse_xs(items) -> dict:
    out = {}
    for item in items:
        try:
            key, vals = item.split("=")
            st, ss = (float(v) for v in vals.split(","))
        except ValueError:
            raise ConfigError(f"--xs expects REGION=SIGMA_T,SIGMA_S, got {item!r}") from None
        out[key] = [st, ss]
    return out


def config_from_args(args) -> RunConfig:
    """Flags first, then ``--config`` on top."""
    data = {}
    for attr, key in _FLAG_FIELDS.items():
        val = getattr(args, attr, None)
        if val is not None:
            data[key] = val
    if getattr(args, "xs", None):
        data["cross_sections"] = _parse_xs(args.xs)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_data = json.load(fh)
        if not isinstance(file_data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_data) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        data.update(file_data)
    return RunConfig.from_dict(data)


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mesh_size(mesh: HighOrderMesh) -> float:
    quad = volume_quadrature(mesh.order + 2)
    _, _, det = mesh.geometry_at(quad.points)
    area = float(np.sum(quad.weights * det))
    return float(np.sqrt(area / mesh.n_elements))


# ---------------------------------------------------------------------------
# Subcommands

def cmd_generate_mesh(args) -> int:
    kind = args.kind
    if kind == "uniform":
        mesh = generate_uniform(args.nx, args.ny, args.order)
    elif kind == "distorted":
        mesh = generate_distorted(args.nx, args.ny, args.order, args.amplitude)
    elif kind == "vortex":
        mesh = generate_vortex(args.nx, args.ny, args.order, args.twist, args.radius)
    else:
        layers = tuple(int(v) for v in args.layers.split(","))
        if len(layers) != 3:
            raise ConfigError("--layers needs three comma-separated counts")
        mesh = generate_annulus_in_square(args.r1, args.r2, args.half_width, args.segments,
                                          layers, args.order, args.r_mid)
    mesh.save(args.output)
    print(f"wrote {args.output}: {mesh.n_elements} elements, order {mesh.order}, "
          f"regions {sorted(set(mesh.regions.tolist()))}")
    return EXIT_OK


def cmd_straighten(args) -> int:
    mesh = HighOrderMesh.load(args.mesh)
    linear, report = straighten(mesh, args.nref)
    linear.save(args.output)
    print(f"wrote {args.output}: {linear.n_elements} elements")
    if report.valid:
        print("all sub-elements valid")
    else:
        print(f"{len(report.invalid)} invalid sub-elements (det J <= 0 at a corner)")
        for sub, parent, det in report.invalid[:20]:
            print(f"  sub-element {sub} of element {parent}: min corner det {det:.3e}")
    return EXIT_OK


def cmd_graph_info(args) -> int:
    cfg = config_from_args(args)
    mesh = HighOrderMesh.load(args.mesh)
    quad = cfg.quadrature()
    xsec = cfg.xsec_for(mesh)
    src, _ = cfg.source_for(xsec, quad)
    op = assemble(mesh, ReferenceBasis(cfg.order), quad, xsec, src, tol=cfg.romberg_tol)
    weightings = WEIGHTINGS if args.all_weightings else (cfg.weighting,)
    out = _output_dir(cfg)
    rows = []
    for d in range(len(quad)):
        mu, eta = quad.directions[d, :2]
        for w in weightings:
            g = build_graph(op, d, w)
            ordering = sweep_ordering(g, cfg.exact_threshold)
            s = summarize(g, ordering)
            hist = ";".join(f"{k}:{v}" for k, v in s["scc_histogram"].items())
            rows.append([d, f"{mu:.6f}", f"{eta:.6f}", w, hist, s["simple_cycles"],
                         s["large_sccs"], sum(s["large_sizes"]), s["edges"],
                         s["edges_lagged"], f"{s['lagged_weight']:.6e}"])
            if args.dot:
                (out / f"graph_d{d}_{w.lower()}.dot").write_text(
                    to_dot(g, ordering, name=f"d{d}"))
    header = ["ordinate", "mu", "eta", "weighting", "scc_histogram", "simple_cycles",
              "large_sccs", "elements_in_large", "edges", "edges_lagged", "lagged_weight"]
    with open(out / "graph_info.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(" ".join(f"{h:>12s}" for h in ("ordinate", "weighting", "cycles", "large",
                                         "lagged", "W_L")))
    for r in rows:
        print(f"{r[0]:>12d} {r[3]:>12s} {r[5] + r[6]:>12d} {r[6]:>12d} {r[9]:>12d} {r[10]:>12s}")
    return EXIT_OK


def _write_history(path, state):
    nd = len(state.ordinate_history[0]) if state.ordinate_history else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "error"] + [f"error_d{d}" for d in range(nd)])
        for it, (err, per_d) in enumerate(zip(state.history, state.ordinate_history), 1):
            writer.writerow([it, f"{err:.6e}"] + [f"{v:.6e}" for v in per_d])


def cmd_solve(args) -> int:
    cfg = config_from_args(args)
    mesh = HighOrderMesh.load(args.mesh)
    quad = cfg.quadrature()
    xsec = cfg.xsec_for(mesh)
    src, _ = cfg.source_for(xsec, quad)
    op = assemble(mesh, ReferenceBasis(cfg.order), quad, xsec, src, tol=cfg.romberg_tol)
    out = _output_dir(cfg)
    solver = TransportSolver(op, cfg.solve_config("sweep"))
    state = solver.source_iteration()
    _write_history(out / "convergence.csv", state)
    report = solver.balance_report(state)
    report["iterations"] = state.iterations
    report["converged"] = state.converged
    report["lagged_edges"] = int(sum(o.n_lagged for o in solver.orderings))
    if cfg.compare_oracle:
        oracle = TransportSolver(op, cfg.solve_config("direct"))
        ostate = oracle.source_iteration()
        _write_history(out / "convergence_oracle.csv", ostate)
        report["oracle_iterations"] = ostate.iterations
        report["oracle_converged"] = ostate.converged
    with open(out / "balance.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    np.savez(out / "solution.npz", psi=state.psi, phi=state.phi,
             history=np.asarray(state.history), weights=quad.weights,
             directions=quad.directions)
    status = "converged" if state.converged else "NOT converged"
    print(f"{status} after {state.iterations} iterations "
          f"(error {state.history[-1]:.3e}); balance residual {report['residual']:.3e}")
    if cfg.compare_oracle:
        print(f"oracle: {ostate.iterations} iterations")
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


def cmd_mms(args) -> int:
    cfg = config_from_args(args)
    if cfg.source != "mms":
        cfg = dataclasses.replace(cfg, source="mms")
    quad = cfg.quadrature()
    out = _output_dir(cfg)
    rows, levels = [], []
    all_converged = True
    for path in args.meshes:
        mesh = HighOrderMesh.load(path)
        xsec = cfg.xsec_for(mesh)
        src, exact = cfg.source_for(xsec, quad)
        basis = ReferenceBasis(cfg.order)
        op = assemble(mesh, basis, quad, xsec, src, tol=cfg.romberg_tol)
        state = TransportSolver(op, cfg.solve_config("sweep")).source_iteration()
        all_converged &= state.converged
        err = l2_error(mesh, cfg.order, state.phi, exact)
        dofs = mesh.n_elements * basis.size
        levels.append((_mesh_size(mesh), err))
        rows.append([Path(path).stem, dofs, err])
    orders = pairwise_orders(levels) if len(levels) > 1 else [None] * len(levels)
    with open(out / "mms_errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mesh", "dofs", "l2_error", "order"])
        for (tag, dofs, err), order in zip(rows, orders):
            writer.writerow([tag, dofs, f"{err:.6e}", "" if order is None else f"{order:.4f}"])
    for (tag, dofs, err), order in zip(rows, orders):
        print(f"{tag:>20s} {dofs:>8d} {err:.6e} {'' if order is None else f'{order:.3f}'}")
    if len(levels) >= 3:
        print(f"observed order (least squares): {convergence_order(levels):.3f}")
    return EXIT_OK if all_converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# Parser

def _add_run_flags(p):
    p.add_argument("--config", help="JSON RunConfig; its keys override flags")
    p.add_argument("--order", type=int, help="DG order s")
    p.add_argument("--angular-set", dest="angular_set", choices=sorted(ANGULAR_SETS))
    p.add_argument("--xs", action="append", metavar="REGION=ST,SS",
                   help="cross sections per region id or 'default' (repeatable)")
    p.add_argument("--source", choices=SOURCES)
    p.add_argument("--source-value", dest="source_value", type=float)
    p.add_argument("--inflow", type=float)
    p.add_argument("--weighting", choices=[w.lower() for w in WEIGHTINGS],
                   type=str.lower)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--exact-threshold", dest="exact_threshold", type=int)
    p.add_argument("--romberg-tol", dest="romberg_tol", type=float)
    p.add_argument("--output-dir", "-o", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hosweep", description="High-order DG transport sweeps on curved meshes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-mesh", help="write a generated mesh as JSON")
    gen.add_argument("kind", choices=["uniform", "distorted", "vortex", "annulus"])
    gen.add_argument("--nx", type=int, default=4)
    gen.add_argument("--ny", type=int, default=4)
    gen.add_argument("--order", type=int, default=3)
    gen.add_argument("--amplitude", type=float, default=0.0)
    gen.add_argument("--twist", type=float, default=3.0)
    gen.add_argument("--radius", type=float, default=0.45)
    gen.add_argument("--r1", type=float, default=0.4)
    gen.add_argument("--r2", type=float, default=0.45)
    gen.add_argument("--r-mid", dest="r_mid", type=float, default=None)
    gen.add_argument("--half-width", dest="half_width", type=float, default=0.6)
    gen.add_argument("--segments", type=int, default=16)
    gen.add_argument("--layers", default="1,1,2")
    gen.add_argument("--output", "-o", default="mesh.json")
    gen.set_defaults(func=cmd_generate_mesh)

    st = sub.add_parser("straighten", help="project a mesh onto a refined linear mesh")
    st.add_argument("mesh")
    st.add_argument("--nref", type=int, default=2)
    st.add_argument("--output", "-o", default="straightened.json")
    st.set_defaults(func=cmd_straighten)

    gi = sub.add_parser("graph-info", help="per-ordinate cycle and lagged-edge summary")
    gi.add_argument("mesh")
    _add_run_flags(gi)
    gi.add_argument("--all-weightings", action="store_true",
                    help="report every weighting, not just the configured one")
    gi.add_argument("--dot", action="store_true", help="write one DOT file per ordinate")
    gi.set_defaults(func=cmd_graph_info)

    so = sub.add_parser("solve", help="lagged-sweep source iteration")
    so.add_argument("mesh")
    _add_run_flags(so)
    so.add_argument("--compare-oracle", dest="compare_oracle", action="store_true",
                    default=None, help="also run the direct-solve iteration")
    so.set_defaults(func=cmd_solve)

    mm = sub.add_parser("mms", help="manufactured-solution error table")
    mm.add_argument("meshes", nargs="+")
    _add_run_flags(mm)
    mm.set_defaults(func=cmd_mms)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError, GeometryError, AssemblyError, SolverError,
            WeightingError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
