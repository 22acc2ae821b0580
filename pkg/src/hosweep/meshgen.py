"""Test-mesh factories and the straightening (linear refinement) procedure."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .discretization import gauss_lobatto_points
from .mesh import HighOrderMesh, MeshError, corner_local_indices


def _lattice(n_cells: int, order: int) -> np.ndarray:
    """Global 1D lattice coordinate (in cell units) with GLL spacing per cell."""
    gll = gauss_lobatto_points(order)
    pts = [c + gll[:-1] for c in range(n_cells)]
    return np.concatenate(pts + [np.array([float(n_cells)])])


def _structured_elements(nx, ny, order, periodic_y=False):
    """Connectivity of an ``nx`` x ``ny`` structured block of order-``order``
    cells on a global node lattice; element ``cx + nx * cy``."""
    n1 = order + 1
    npx = nx * order + 1
    npy = ny * order + (0 if periodic_y else 1)
    i, j = np.meshgrid(np.arange(n1), np.arange(n1), indexing="xy")
    i, j = i.ravel(), j.ravel()
    elements = np.empty((nx * ny, n1 * n1), dtype=np.int64)
    for cy in range(ny):
        for cx in range(nx):
            I = cx * order + i
            J = cy * order + j
            if periodic_y:
                J = J % npy
            elements[cx + nx * cy] = I + npx * J
    return elements, npx, npy


def _box_boundary_attrs(nx, ny):
    attrs = {}
    for cx in range(nx):
        attrs[(cx, 0)] = 1                       # bottom
        attrs[(cx + nx * (ny - 1), 2)] = 1       # top
    for cy in range(ny):
        attrs[(nx * cy, 3)] = 1                  # left
        attrs[(nx - 1 + nx * cy, 1)] = 1         # right
    return attrs


def generate_uniform(nx: int, ny: int, order: int,
                     domain=((0.0, 1.0), (0.0, 1.0))) -> HighOrderMesh:
    """Axis-aligned ``nx`` x ``ny`` grid of order-``order`` elements."""
    return generate_distorted(nx, ny, order, 0.0, domain)


def generate_distorted(nx: int, ny: int, order: int, amplitude: float,
                       domain=((0.0, 1.0), (0.0, 1.0))) -> HighOrderMesh:
    """Uniform grid whose geometric nodes are displaced by

        dx = a sin(pi ny Y) sin(pi X),   dy = a sin(pi nx X) sin(pi Y)

    with ``X, Y`` the coordinates normalised to [0, 1].  Grid vertices and
    the domain boundary stay fixed, while every interior edge bulges by up
    to ``a``, alternating in sign from cell to cell.
    """
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    if order < 1:
        raise MeshError("order must be >= 1")
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise MeshError("empty domain")
    elements, npx, npy = _structured_elements(nx, ny, order)
    X = _lattice(nx, order) / nx
    Y = _lattice(ny, order) / ny
    XX, YY = np.meshgrid(X, Y, indexing="xy")
    XX, YY = XX.ravel(), YY.ravel()
    if amplitude:
        # keep the fixed points exactly fixed
        sx = np.sin(np.pi * nx * XX)
        sy = np.sin(np.pi * ny * YY)
        dX = amplitude / (x1 - x0) * sy * np.sin(np.pi * XX)
        dY = amplitude / (y1 - y0) * sx * np.sin(np.pi * YY)
        on_vline = np.isclose(XX * nx, np.round(XX * nx), atol=1e-14, rtol=0)
        on_hline = np.isclose(YY * ny, np.round(YY * ny), atol=1e-14, rtol=0)
        dX[on_hline | (XX <= 0.0) | (XX >= 1.0)] = 0.0
        dY[on_vline | (YY <= 0.0) | (YY >= 1.0)] = 0.0
        XX, YY = XX + dX, YY + dY
    pts = np.stack([x0 + (x1 - x0) * XX, y0 + (y1 - y0) * YY], axis=1)
    mesh = HighOrderMesh(order, pts, elements, boundary_attrs=_box_boundary_attrs(nx, ny),
                         validate=False)
    bad = mesh.invalid_elements()
    if len(bad):
        raise MeshError(f"distortion amplitude {amplitude} too large: element "
                        f"{bad[0]} has non-positive det J")
    mesh.validate()
    return mesh


def generate_vortex(nx: int, ny: int, order: int, twist: float,
                    radius: float = 0.45) -> HighOrderMesh:
    """Unit-square grid rolled up around its centre, mimicking a vortex in a
    Lagrangian mesh.

    Each node at distance ``r`` from the centre is rotated by
    ``twist * (1 - r / radius)^2`` for ``r < radius``; nodes farther out,
    including the whole boundary when ``radius <= 0.5``, stay put.  Strong
    twists give dependency cycles longer than two, which is where the
    choice of edge weighting changes the lagged-edge count.
    """
    if not 0.0 < radius <= 0.5:
        raise MeshError("radius must lie in (0, 0.5]")
    base = generate_uniform(nx, ny, order)
    P = base.control_points - 0.5
    r = np.hypot(P[:, 0], P[:, 1])
    ang = twist * np.clip(1.0 - r / radius, 0.0, None) ** 2
    c, s = np.cos(ang), np.sin(ang)
    pts = base.control_points.copy()
    moved = ang > 0.0
    pts[moved] = np.stack([c * P[:, 0] - s * P[:, 1], s * P[:, 0] + c * P[:, 1]],
                          axis=1)[moved] + 0.5
    battrs = {(f.elem_left, f.local_face_left): f.attr for f in base.boundary_faces}
    mesh = HighOrderMesh(order, pts, base.elements, boundary_attrs=battrs, validate=False)
    bad = mesh.invalid_elements()
    if len(bad):
        raise MeshError(f"twist {twist} too large: element {bad[0]} has non-positive det J")
    mesh.validate()
    return mesh


def generate_annulus_in_square(r1: float, r2: float, half_width: float,
                               n_segments: int = 16, layers=(1, 1, 2),
                               order: int = 3, r_mid: float | None = None) -> HighOrderMesh:
    """Two nested annuli inside the square ``[-w, w]^2`` with the disk
    ``r < r1`` removed.

    Regions: 1 for ``r1 < r < r_mid``, 2 for ``r_mid < r < r2``, 3 for the
    rest of the square.  ``layers`` gives the radial element count of each
    region and ``r_mid`` defaults to the midpoint of ``r1`` and ``r2``.
    Boundary attributes: 1 on the inner circle, 2 on the square.

    Elements run ``xi_0`` outward and ``xi_1`` counter-clockwise; square
    corners sit on segment boundaries, so ``n_segments`` must be a multiple
    of 4.
    """
    if r_mid is None:
        r_mid = 0.5 * (r1 + r2)
    if not 0.0 < r1 < r_mid < r2 < half_width:
        raise MeshError("need 0 < r1 < r_mid < r2 < half_width")
    if n_segments < 4 or n_segments % 4:
        raise MeshError("n_segments must be a positive multiple of 4")
    if order < 2:
        raise MeshError("annulus meshes need order >= 2 to curve the circles")
    n1, n2, n3 = (int(n) for n in layers)
    if min(n1, n2, n3) < 1:
        raise MeshError("each region needs at least one radial layer")
    n_layers = n1 + n2 + n3

    # radial lattice: (kind, value) per global radial node
    rho = _lattice(n_layers, order)             # in layer units
    theta = math.pi / 4 + 2 * math.pi * _lattice(n_segments, order)[:-1] / n_segments
    n_theta = len(theta)

    pts = np.empty((len(rho) * n_theta, 2))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    square = half_width / np.maximum(np.abs(cos_t), np.abs(sin_t))
    for k, u in enumerate(rho):
        if u <= n1:
            r = r1 + (r_mid - r1) * u / n1
            xy = np.stack([r * cos_t, r * sin_t], axis=1)
        elif u <= n1 + n2:
            r = r_mid + (r2 - r_mid) * (u - n1) / n2
            xy = np.stack([r * cos_t, r * sin_t], axis=1)
        else:
            s = (u - n1 - n2) / n3
            rr = (1 - s) * r2 + s * square
            xy = np.stack([rr * cos_t, rr * sin_t], axis=1)
        pts[k * n_theta:(k + 1) * n_theta] = xy
    # exact zeros on the square sides
    pts[np.abs(pts) < 1e-15] = 0.0

    # structured block: xi_0 = radial (n_layers cells), xi_1 = angular (periodic)
    n_1 = order + 1
    i, j = np.meshgrid(np.arange(n_1), np.arange(n_1), indexing="xy")
    i, j = i.ravel(), j.ravel()
    elements = np.empty((n_layers * n_segments, n_1 * n_1), dtype=np.int64)
    regions = np.empty(n_layers * n_segments, dtype=np.int64)
    battrs = {}
    e = 0
    for layer in range(n_layers):
        region = 1 if layer < n1 else (2 if layer < n1 + n2 else 3)
        for seg in range(n_segments):
            K = layer * order + i
            T = (seg * order + j) % n_theta
            elements[e] = T + n_theta * K
            regions[e] = region
            if layer == 0:
                battrs[(e, 3)] = 1
            if layer == n_layers - 1:
                battrs[(e, 1)] = 2
            e += 1
    return HighOrderMesh(order, pts, elements, regions, battrs)


# ---------------------------------------------------------------------------
# Straightening

@dataclass
class StraightenReport:
    n_ref: int
    invalid: list = field(default_factory=list)   # (sub-element, parent element, min corner det)

    @property
    def valid(self) -> bool:
        return not self.invalid


def straighten(mesh: HighOrderMesh, n_ref: int):
    """Project *mesh* onto a bilinear mesh refined ``n_ref`` times per direction.

    Sub-element vertices are ``map_point`` samples on the uniform
    ``(n_ref+1)^2`` lattice of each parent.  Sub-elements with a
    non-positive corner Jacobian are listed in the report, not rejected.
    Returns ``(linear_mesh, report)``.
    """
    if n_ref < 1:
        raise ValueError("n_ref must be >= 1")
    s = np.linspace(0.0, 1.0, n_ref + 1)
    S0, S1 = np.meshgrid(s, s, indexing="xy")
    lattice = np.stack([S0.ravel(), S1.ravel()], axis=1)
    n_l = n_ref + 1

    raw_pts = np.concatenate([mesh.map_point(e, lattice) for e in range(mesh.n_elements)])
    span = float(np.ptp(raw_pts, axis=0).max()) or 1.0
    tree = cKDTree(raw_pts)
    pairs = tree.query_pairs(1e-10 * span, output_type="ndarray")
    # union-find over coincident samples
    parent = np.arange(len(raw_pts))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(len(raw_pts))])
    uniq, inverse = np.unique(roots, return_inverse=True)
    points = raw_pts[uniq]

    elements, regions, owners = [], [], []
    battrs = {}
    parent_bfaces = {(r.elem_left, r.local_face_left): r.attr for r in mesh.boundary_faces}
    for e in range(mesh.n_elements):
        base = e * n_l * n_l
        for b in range(n_ref):
            for a in range(n_ref):
                loc = [a + n_l * b, a + 1 + n_l * b, a + n_l * (b + 1), a + 1 + n_l * (b + 1)]
                sub = len(elements)
                elements.append(inverse[base + np.array(loc)])
                regions.append(mesh.regions[e])
                owners.append(e)
                for f, on_edge in ((0, b == 0), (1, a == n_ref - 1),
                                   (2, b == n_ref - 1), (3, a == 0)):
                    if on_edge and (e, f) in parent_bfaces:
                        battrs[(sub, f)] = parent_bfaces[(e, f)]
    elements = np.array(elements, dtype=np.int64)
    report = StraightenReport(n_ref)
    corner_pts = points[elements]                                  # (n, 4, 2)
    for k, (p0, p1, p2, p3) in enumerate(corner_pts):
        # corners (0,0),(1,0),(0,1),(1,1): det J = cross(d/dxi0, d/dxi1)
        dets = (_cross(p1 - p0, p2 - p0), _cross(p1 - p0, p3 - p1),
                _cross(p3 - p2, p2 - p0), _cross(p3 - p2, p3 - p1))
        if min(dets) <= 0.0:
            report.invalid.append((k, owners[k], float(min(dets))))
    out = HighOrderMesh(1, points, elements, np.array(regions), battrs, validate=False)
    out.parent_element = np.array(owners)
    return out, report


def _cross(u, v):
    return float(u[0] * v[1] - u[1] * v[0])


def edge_nodes(mesh: HighOrderMesh, e: int, face: int) -> np.ndarray:
    """Global control-point ids along local face *face* of element *e*."""
    r = mesh.order
    n1 = r + 1
    if face == 0:
        loc = np.arange(n1)
    elif face == 1:
        loc = r + n1 * np.arange(n1)
    elif face == 2:
        loc = r * n1 + np.arange(n1)
    else:
        loc = n1 * np.arange(n1)
    return mesh.elements[e, loc]


__all__ = ["generate_uniform", "generate_distorted", "generate_vortex", "generate_annulus_in_square",
           "straighten", "StraightenReport", "edge_nodes", "corner_local_indices"]
