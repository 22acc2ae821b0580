"""High-order curved quadrilateral meshes.

An element of geometric order ``r`` is described by ``(r+1)^2`` control
points sampled at tensor Gauss-Lobatto nodes of the unit reference square.
Local faces are numbered

    0: xi_1 = 0, parameter t -> (t, 0)
    1: xi_0 = 1, parameter t -> (1, t)
    2: xi_1 = 1, parameter t -> (t, 1)
    3: xi_0 = 0, parameter t -> (0, t)

so every element with ``det J > 0`` has its faces' outward normals given by
the cofactor of ``J`` applied to the reference outward normal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discretization import tensor_basis

BOUNDARY = -1
N_FACES = 4

_REF_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


class MeshError(ValueError):
    pass


class GeometryError(ArithmeticError):
    pass


def face_to_reference(face: int, t) -> np.ndarray:
    """Reference coordinates of face parameter(s) *t*, shape ``(n, 2)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    z, o = np.zeros_like(t), np.ones_like(t)
    if face == 0:
        return np.stack([t, z], axis=1)
    if face == 1:
        return np.stack([o, t], axis=1)
    if face == 2:
        return np.stack([t, o], axis=1)
    if face == 3:
        return np.stack([z, t], axis=1)
    raise MeshError(f"local face {face} out of range 0..3")


def corner_local_indices(order: int) -> np.ndarray:
    """Local node indices of the reference corners (0,0), (1,0), (0,1), (1,1)."""
    n1 = order + 1
    return np.array([0, order, order * n1, n1 * n1 - 1])


# (start corner, end corner) of each face in parameter direction
_FACE_CORNERS = ((0, 1), (1, 3), (2, 3), (0, 2))


@dataclass(frozen=True)
class FaceRecord:
    """A mesh face seen from ``elem_left``.

    For interior faces ``orientation = -1`` means the right element runs the
    face parameter backwards: left parameter ``t`` meets right ``1 - t``.
    Boundary faces have ``elem_right == BOUNDARY`` and carry ``attr``.
    """
    elem_left: int
    local_face_left: int
    elem_right: int = BOUNDARY
    local_face_right: int = -1
    orientation: int = 1
    attr: int = 0

    @property
    def is_boundary(self) -> bool:
        return self.elem_right == BOUNDARY

    def right_parameter(self, t):
        t = np.asarray(t, dtype=float)
        return t if self.orientation > 0 else 1.0 - t


class HighOrderMesh:
    """Curved 2D quadrilateral mesh of geometric order ``r``.

    Parameters
    ----------
    order : int
        Geometric polynomial order ``r >= 1``.
    control_points : (n_points, 2) array
    elements : (n_elements, (r+1)^2) int array
        Global control-point indices of each element in tensor order.
    regions : (n_elements,) int array, optional
        Region attribute of each element (default 1).
    boundary_attrs : dict ``(elem, local_face) -> attr``, optional
        Attributes for boundary faces; unlisted boundary faces get 1.
    validate : bool
        Run :meth:`validate` (Jacobian positivity and face agreement).

    The mesh is treated as immutable once built.
    """

    def __init__(self, order, control_points, elements, regions=None,
                 boundary_attrs=None, validate=True):
        self.order = int(order)
        if self.order < 1:
            raise MeshError("mesh order must be >= 1")
        self.control_points = np.asarray(control_points, dtype=float).reshape(-1, 2)
        self.elements = np.asarray(elements, dtype=np.int64)
        n_v = (self.order + 1) ** 2
        if self.elements.ndim != 2 or self.elements.shape[1] != n_v:
            raise MeshError(
                f"each element must reference exactly {n_v} control points, "
                f"got array of shape {self.elements.shape}")
        bad = np.argwhere((self.elements < 0) | (self.elements >= len(self.control_points)))
        if len(bad):
            e, m = bad[0]
            raise MeshError(f"element {e} node {m}: control-point index "
                            f"{self.elements[e, m]} out of range")
        if regions is None:
            regions = np.ones(len(self.elements), dtype=np.int64)
        self.regions = np.asarray(regions, dtype=np.int64)
        if self.regions.shape != (len(self.elements),):
            raise MeshError("one region attribute per element required")

        self.geometry_basis = tensor_basis(self.order)
        self.coords = self.control_points[self.elements]          # (ne, nv, 2)
        for arr in (self.control_points, self.elements, self.regions, self.coords):
            arr.setflags(write=False)
        self._build_faces(boundary_attrs or {})
        if validate:
            self.validate()

    # -- topology ----------------------------------------------------------

    def _build_faces(self, boundary_attrs):
        corners = self.elements[:, corner_local_indices(self.order)]
        seen = {}
        interior = []
        for e in range(len(self.elements)):
            for f, (a, b) in enumerate(_FACE_CORNERS):
                key = frozenset((int(corners[e, a]), int(corners[e, b])))
                if len(key) < 2:
                    raise MeshError(f"element {e} face {f} is collapsed")
                if key in seen:
                    e0, f0 = seen.pop(key)
                    if e0 is None:
                        raise MeshError(f"face {sorted(key)} shared by more than two elements")
                    start0 = corners[e0, _FACE_CORNERS[f0][0]]
                    orient = 1 if corners[e, a] == start0 else -1
                    interior.append(FaceRecord(e0, f0, e, f, orient))
                    seen[key] = (None, None)
                else:
                    seen[key] = (e, f)
        boundary = []
        for key, (e, f) in seen.items():
            if e is None:
                continue
            boundary.append(FaceRecord(e, f, attr=int(boundary_attrs.get((e, f), 1))))
        boundary.sort(key=lambda r: (r.elem_left, r.local_face_left))
        extra = set(boundary_attrs) - {(r.elem_left, r.local_face_left) for r in boundary}
        if extra:
            e, f = sorted(extra)[0]
            raise MeshError(f"boundary entry (elem {e}, face {f}) is not a boundary face")
        self.interior_faces = interior
        self.boundary_faces = boundary

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def faces(self) -> list[FaceRecord]:
        return self.interior_faces + self.boundary_faces

    def neighbors(self, e: int) -> list[int]:
        out = []
        for rec in self.interior_faces:
            if rec.elem_left == e:
                out.append(rec.elem_right)
            elif rec.elem_right == e:
                out.append(rec.elem_left)
        return out

    # -- geometry ----------------------------------------------------------

    def _check_elem(self, e):
        if not 0 <= e < self.n_elements:
            raise MeshError(f"element id {e} out of range 0..{self.n_elements - 1}")

    def map_point(self, e: int, xi) -> np.ndarray:
        """Physical coordinates of reference point(s) *xi* in element *e*."""
        self._check_elem(e)
        xi = np.asarray(xi, dtype=float)
        vals = self.geometry_basis.eval(xi)
        x = vals @ self.coords[e]
        return x[0] if xi.ndim == 1 else x

    def jacobian(self, e: int, xi):
        """Jacobian ``J[i, j] = d x_i / d xi_j`` and its determinant."""
        self._check_elem(e)
        xi = np.asarray(xi, dtype=float)
        _, grad = self.geometry_basis.eval_grad(xi)
        J = np.einsum("mi,qmj->qij", self.coords[e], grad)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if xi.ndim == 1:
            return J[0], det[0]
        return J, det

    def geometry_at(self, xi):
        """Points ``(ne, nq, 2)``, Jacobians ``(ne, nq, 2, 2)`` and
        determinants ``(ne, nq)`` of every element at reference points *xi*."""
        vals, grad = self.geometry_basis.eval_grad(np.atleast_2d(xi))
        X = np.einsum("qm,emi->eqi", vals, self.coords)
        J = np.einsum("emi,qmj->eqij", self.coords, grad)
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        return X, J, det

    def element_diameter(self, e: int) -> float:
        pts = self.coords[e]
        return float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))

    def face_frame(self, e: int, face: int, t):
        """Points, unit outward normals and surface Jacobians of local face
        *face* of element *e* at parameters *t* (vectorised)."""
        xi = face_to_reference(face, t)
        vals, grad = self.geometry_basis.eval_grad(xi)
        x = vals @ self.coords[e]
        J = np.einsum("mi,qmj->qij", self.coords[e], grad)
        nr = _REF_NORMALS[face]
        # cofactor(J) @ n_ref: outward for det J > 0, length = |J^Gamma|
        raw = np.stack([J[:, 1, 1] * nr[0] - J[:, 1, 0] * nr[1],
                        -J[:, 0, 1] * nr[0] + J[:, 0, 0] * nr[1]], axis=1)
        length = np.linalg.norm(raw, axis=1)
        if np.any(length < 1e-14 * self.element_diameter(e)):
            raise GeometryError(f"degenerate tangent on element {e} face {face}")
        return x, raw / length[:, None], length

    def face_geometry(self, face: FaceRecord, t):
        """``(point, n_left, |J^Gamma|)`` for a face record at parameter *t*.

        The normal points out of ``face.elem_left``.
        """
        x, n, jac = self.face_frame(face.elem_left, face.local_face_left, t)
        if np.ndim(t) == 0:
            return x[0], n[0], jac[0]
        return x, n, jac

    # -- validation --------------------------------------------------------

    def jacobian_lattice(self):
        """det J of every element on the ``(r+2)^2`` uniform tensor lattice."""
        s = np.linspace(0.0, 1.0, self.order + 2)
        X0, X1 = np.meshgrid(s, s, indexing="xy")
        pts = np.stack([X0.ravel(), X1.ravel()], axis=1)
        return self.geometry_at(pts)[2]

    def invalid_elements(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.jacobian_lattice() <= 0.0, axis=1))

    def validate(self):
        """Raise :class:`MeshError` naming the first violated invariant."""
        bad = self.invalid_elements()
        if len(bad):
            dets = self.jacobian_lattice()[bad[0]]
            raise MeshError(f"element {bad[0]} is invalid: min det J = {dets.min():.3e}")
        ts = np.linspace(0.0, 1.0, 5)
        for k, rec in enumerate(self.interior_faces):
            xl = self.map_point(rec.elem_left, face_to_reference(rec.local_face_left, ts))
            xr = self.map_point(rec.elem_right, face_to_reference(
                rec.local_face_right, rec.right_parameter(ts)))
            scale = max(self.element_diameter(rec.elem_left), 1e-300)
            gap = np.max(np.linalg.norm(xl - xr, axis=1))
            if gap > 1e-12 * scale:
                raise MeshError(
                    f"interior face {k} (elements {rec.elem_left}/{rec.elem_right}, "
                    f"local faces {rec.local_face_left}/{rec.local_face_right}): "
                    f"traces disagree by {gap:.3e}")

    # -- I/O ---------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "dim": 2,
            "control_points": self.control_points.tolist(),
            "elements": [{"nodes": nodes.tolist(), "region": int(reg)}
                         for nodes, reg in zip(self.elements, self.regions)],
            "boundary": [{"elem": r.elem_left, "face": r.local_face_left, "attr": r.attr}
                         for r in self.boundary_faces],
        }

    @classmethod
    def from_dict(cls, data: dict, validate: bool = True) -> "HighOrderMesh":
        for key in ("order", "control_points", "elements"):
            if key not in data:
                raise MeshError(f"mesh file missing required key '{key}'")
        if data.get("dim", 2) != 2:
            raise MeshError(f"only dim=2 meshes are supported, got dim={data['dim']}")
        for i, el in enumerate(data["elements"]):
            if "nodes" not in el:
                raise MeshError(f"element {i} has no 'nodes'")
        n_v = (int(data["order"]) + 1) ** 2
        for i, el in enumerate(data["elements"]):
            if len(el["nodes"]) != n_v:
                raise MeshError(f"element {i} references {len(el['nodes'])} "
                                f"control points, expected {n_v}")
        elements = [el["nodes"] for el in data["elements"]]
        regions = [int(el.get("region", 1)) for el in data["elements"]]
        battrs = {}
        for b in data.get("boundary", []):
            battrs[(int(b["elem"]), int(b["face"]))] = int(b.get("attr", 1))
        pts = data["control_points"]
        if any(len(p) != 2 for p in pts):
            raise MeshError("control points must be 2D coordinates")
        return cls(data["order"], pts, np.array(elements, dtype=np.int64).reshape(len(elements), n_v),
                   regions, battrs, validate=validate)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, validate: bool = True) -> "HighOrderMesh":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise MeshError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, validate=validate)

    def __repr__(self):
        return (f"HighOrderMesh(order={self.order}, elements={self.n_elements}, "
                f"control_points={len(self.control_points)})")
