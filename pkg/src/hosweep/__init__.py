"""High-order DG discrete-ordinates transport with graph-based sweep ordering."""
from .assembly import CrossSections, Source, TransportOperator, assemble
from .discretization import AngularQuadrature, ReferenceBasis, level_symmetric
from .mesh import FaceRecord, HighOrderMesh, MeshError
from .meshgen import generate_annulus_in_square, generate_distorted, generate_uniform, straighten
from .solver import SolveConfig, SolverState, TransportSolver
from .sweepgraph import build_graph, sweep_ordering, tarjan_scc

__version__ = "0.1.0"

__all__ = [
    "AngularQuadrature", "CrossSections", "FaceRecord", "HighOrderMesh", "MeshError",
    "ReferenceBasis", "SolveConfig", "SolverState", "Source", "TransportOperator",
    "TransportSolver", "assemble", "build_graph", "generate_annulus_in_square",
    "generate_distorted", "generate_uniform", "level_symmetric", "straighten",
    "sweep_ordering", "tarjan_scc",
]
