"""Triangulations of the unit disk with an exactly parameterized boundary.

The mesh is built from concentric rings of points (alternate rings staggered
by half an angular step so no four points are exactly cocircular across
rings) plus the center, triangulated with Delaunay.  Boundary vertices sit at
the exact angles ``2*pi*j/N``; the arc parameter ``s`` of a boundary vertex
is that angle.  The computational domain is therefore the inscribed regular
N-gon: its perimeter is ``2*N*sin(pi/N)`` and its area ``(N/2)*sin(2*pi/N)``,
which tests pin down exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay


class MeshError(ValueError):
    """Raised when construction produces an invalid triangulation."""


@dataclass(frozen=True)
class Mesh:
    """Conforming P1 triangulation of the (polygonal) unit disk.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    boundary_vertices : (Nb,) int array, counterclockwise cycle starting at
        angle 0
    boundary_edges : (Nb, 2) int array, edge j runs from boundary vertex j to
        boundary vertex j+1 (mod Nb)
    edge_normals : (Nb, 2) float array, outward unit normal of each edge
    boundary_s : (Nb,) float array, arc parameter (vertex angle in [0, 2*pi))
        aligned with ``boundary_vertices``
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray
    boundary_edges: np.ndarray
    edge_normals: np.ndarray
    boundary_s: np.ndarray
    boundary_pos: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.boundary_pos is None:
            pos = np.full(len(self.vertices), -1, dtype=int)
            pos[self.boundary_vertices] = np.arange(len(self.boundary_vertices))
            object.__setattr__(self, "boundary_pos", pos)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)


def make_disk_mesh(n_boundary: int, refinement: int = 0) -> Mesh:
    """Triangulate the unit disk with ``n_boundary * 2**refinement`` boundary
    points at exact angles ``2*pi*j/N``.

    Parameters
    ----------
    n_boundary : int, >= 8
        Boundary point count before refinement.
    refinement : int, >= 0
        Each level doubles the boundary point count (and scales the interior
        grading with it).
    """
    if n_boundary < 8:
        raise MeshError(f"n_boundary must be >= 8, got {n_boundary}")
    if refinement < 0:
        raise MeshError(f"refinement must be >= 0, got {refinement}")
    n = int(n_boundary) << int(refinement)

    rings = max(1, round(n / (2.0 * math.pi)))
    points = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        if k == rings:
            count, offset = n, 0.0
        else:
            count = max(6, round(n * k / rings))
            offset = 0.5 * ((rings - k) % 2)
        theta = 2.0 * math.pi * (np.arange(count) + offset) / count
        radius = k / rings
        points.append(radius * np.column_stack([np.cos(theta), np.sin(theta)]))
    vertices = np.vstack(points)
    n_vert = len(vertices)
    boundary = np.arange(n_vert - n, n_vert)

    tri = Delaunay(vertices)
    triangles = np.array(tri.simplices, dtype=int)

    # orient counterclockwise
    p = vertices[triangles]
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = area2 < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    area2 = np.abs(area2)
    if np.any(area2 <= 1e-14):
        raise MeshError("degenerate triangle produced by Delaunay")
    if len(np.unique(triangles)) != n_vert:
        raise MeshError("triangulation dropped a vertex")

    edges = np.column_stack([boundary, np.roll(boundary, -1)])
    chord = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    chord /= np.linalg.norm(chord, axis=1)[:, None]
    normals = np.column_stack([chord[:, 1], -chord[:, 0]])

    s = 2.0 * math.pi * np.arange(n) / n

    mesh = Mesh(vertices=vertices, triangles=triangles,
                boundary_vertices=boundary, boundary_edges=edges,
                edge_normals=normals, boundary_s=s)
    _validate(mesh)
    return mesh


def _validate(mesh: Mesh) -> None:
    # Euler characteristic of a disk: V - E + T = 1
    tris = mesh.triangles
    all_edges = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    all_edges.sort(axis=1)
    n_edges = len(np.unique(all_edges, axis=0))
    euler = mesh.n_vertices - n_edges + mesh.n_triangles
    if euler != 1:
        raise MeshError(f"Euler characteristic {euler} != 1")

    # boundary edges of the triangulation = the declared boundary cycle
    order = np.lexsort(all_edges.T[::-1])
    se = all_edges[order]
    is_dup = np.zeros(len(se), dtype=bool)
    same = np.all(se[1:] == se[:-1], axis=1)
    is_dup[1:] |= same
    is_dup[:-1] |= same
    hull = {tuple(e) for e in se[~is_dup]}
    declared = {tuple(sorted(e)) for e in mesh.boundary_edges}
    if hull != declared:
        raise MeshError("triangulation boundary does not match the declared cycle")

    radii = np.linalg.norm(mesh.vertices[mesh.boundary_vertices], axis=1)
    if np.max(np.abs(radii - 1.0)) > 1e-12:
        raise MeshError("boundary vertex off the unit circle")

    if np.any(mesh.triangle_areas() <= 0.0):
        raise MeshError("non-positive triangle area after orientation")


def mesh_hash(mesh: Mesh) -> str:
    """Stable 16-hex-digit digest of vertex coordinates and connectivity."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mesh.vertices, dtype=np.float64).tobytes())
    digest.update(np.ascontiguousarray(mesh.triangles, dtype=np.int64).tobytes())
    digest.update(np.ascontiguousarray(mesh.boundary_vertices, dtype=np.int64).tobytes())
    return digest.hexdigest()[:16]


def mesh_text(mesh: Mesh) -> str:
    """Plain-text node/element listing (0-based indices, one record per
    line): nodes, elements, then boundary vertices with arc parameters."""
    lines = [f"# disk mesh {mesh_hash(mesh)}"]
    lines.append(f"nodes {mesh.n_vertices}")
    lines.extend(f"{float(v[0])!r} {float(v[1])!r}" for v in mesh.vertices)
    lines.append(f"elements {mesh.n_triangles}")
    lines.extend(f"{int(t[0])} {int(t[1])} {int(t[2])}"
                 for t in mesh.triangles)
    lines.append(f"boundary {mesh.n_boundary}")
    lines.extend(f"{int(v)} {float(s)!r}"
                 for v, s in zip(mesh.boundary_vertices, mesh.boundary_s))
    return "\n".join(lines) + "\n"


def dump_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(mesh_text(mesh))


__all__ = ["Mesh", "MeshError", "make_disk_mesh", "mesh_hash", "mesh_text",
           "dump_mesh"]
