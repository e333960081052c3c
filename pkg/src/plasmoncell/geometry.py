"""Interface-fitted quadrilateral meshes of the unit cell [0,1]^2.

The coarse mesh has 13 cells: a core square, four ring cells whose outer
face lies on the circle, and eight cells filling the space between the
circle and the boundary of the unit square.  Global refinement is done by
mapping a uniform ``2^k x 2^k`` grid through a transfinite (Coons) patch of
every coarse cell, with circular arcs parameterized by angle.  This places
every new interface vertex exactly where repeated radial projection of edge
midpoints would put it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CENTER = np.array([0.5, 0.5])

#: refuse to build meshes larger than this unless told otherwise
DEFAULT_MAX_CELLS = 4_000_000

# local faces of a ccw quad as (start, end) local vertex indices
LOCAL_FACES = ((0, 1), (1, 2), (2, 3), (3, 0))


class MeshError(ValueError):
    """Invalid mesh data."""


class MeshParseError(MeshError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class MeshResourceError(MemoryError):
    """The requested refinement exceeds the memory budget."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming quadrilateral mesh of the unit cell.

    Attributes
    ----------
    vertices : (N, 2) float array
    cells : (M, 4) int array, counterclockwise vertex indices
    interface_faces : (P, 2) int array of ``(cell, local_face)``
    periodic_pairs : (Q, 2) int array of ``(slave, master)`` where the
        slave lies on x=1 (or y=1) and the master on x=0 (or y=0)
    refinement_level : int
    radius : float, radius of the interface circle
    """

    vertices: np.ndarray
    cells: np.ndarray
    interface_faces: np.ndarray
    periodic_pairs: np.ndarray
    refinement_level: int = 0
    radius: float = 0.3
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "cells", "interface_faces", "periodic_pairs"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def structurally_equal(self, other: "Mesh") -> bool:
        return (
            self.refinement_level == other.refinement_level
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.interface_faces, other.interface_faces)
            and np.array_equal(self.periodic_pairs, other.periodic_pairs)
        )

    def face_vertices(self, faces: np.ndarray | None = None) -> np.ndarray:
        """Vertex index pairs of ``(cell, local_face)`` rows."""
        if faces is None:
            faces = self.interface_faces
        loc = np.asarray(LOCAL_FACES)[faces[:, 1]]
        cv = self.cells[faces[:, 0]]
        rows = np.arange(len(faces))
        return np.stack([cv[rows, loc[:, 0]], cv[rows, loc[:, 1]]], axis=1)

    def boundary_vertices(self) -> np.ndarray:
        """Indices of vertices on the boundary of the unit square."""
        v = self.vertices
        on = (
            (np.abs(v[:, 0]) < 1e-12)
            | (np.abs(v[:, 0] - 1) < 1e-12)
            | (np.abs(v[:, 1]) < 1e-12)
            | (np.abs(v[:, 1] - 1) < 1e-12)
        )
        return np.flatnonzero(on)

    def interface_cells(self) -> np.ndarray:
        """Boolean mask of cells owning at least one face on the interface.

        Both cells sharing an interface face count.
        """
        if "interface_cells" not in self._cache:
            fv = np.sort(self.face_vertices(), axis=1)
            keys = {tuple(r) for r in fv}
            mask = np.zeros(self.n_cells, dtype=bool)
            for lf, (a, b) in enumerate(LOCAL_FACES):
                pairs = np.sort(self.cells[:, [a, b]], axis=1)
                hit = np.fromiter((tuple(p) in keys for p in pairs), bool, len(pairs))
                mask |= hit
            self._cache["interface_cells"] = mask
        return self._cache["interface_cells"]


@dataclass(frozen=True)
class InterfaceFrame:
    """Geometric data of the interface faces, ordered as a closed ccw loop.

    ``tangent`` points counterclockwise about the circle center and
    ``normal`` points away from it.
    """

    faces: np.ndarray  # (P, 2) (cell, local face)
    endpoints: np.ndarray  # (P, 2) vertex ids, ordered along the tangent
    tangent: np.ndarray  # (P, 2)
    normal: np.ndarray  # (P, 2)
    length: np.ndarray  # (P,)
    quad_points: np.ndarray  # (P, 2, 2) two Gauss points per face
    quad_weights: np.ndarray  # (P, 2) arc-measure weights

    @property
    def total_length(self) -> float:
        return float(self.length.sum())


# ---------------------------------------------------------------------------
# coarse topology


def _coarse_layout(radius: float):
    a = radius / np.sqrt(2.0)  # circle points on the diagonals
    b = 0.5 * a  # half-width of the core square
    c = 0.5
    verts = np.array(
        [
            [c - b, c - b], [c + b, c - b], [c + b, c + b], [c - b, c + b],
            [c - a, c - a], [c + a, c - a], [c + a, c + a], [c - a, c + a],
            [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0],
            [c - a, 0.0], [c + a, 0.0],
            [1.0, c - a], [1.0, c + a],
            [c + a, 1.0], [c - a, 1.0],
            [0.0, c + a], [0.0, c - a],
        ]
    )
    cells = np.array(
        [
            [0, 1, 2, 3],
            [4, 5, 1, 0], [5, 6, 2, 1], [6, 7, 3, 2], [7, 4, 0, 3],
            [12, 13, 5, 4], [14, 15, 6, 5], [16, 17, 7, 6], [18, 19, 4, 7],
            [8, 12, 4, 19], [13, 9, 14, 5], [6, 15, 10, 16], [18, 7, 17, 11],
        ]
    )
    arcs = {frozenset(e) for e in [(4, 5), (5, 6), (6, 7), (7, 4)]}
    return verts, cells, arcs


def _edge_points(p, q, is_arc, radius, t):
    """Points on the coarse edge from ``p`` to ``q`` at parameters ``t``."""
    t = np.asarray(t, dtype=float)
    if not is_arc:
        return p[None, :] * (1 - t)[:, None] + q[None, :] * t[:, None]
    tp = np.arctan2(p[1] - CENTER[1], p[0] - CENTER[0])
    tq = np.arctan2(q[1] - CENTER[1], q[0] - CENTER[0])
    d = (tq - tp + np.pi) % (2 * np.pi) - np.pi
    th = tp + d * t
    return CENTER[None, :] + radius * np.stack([np.cos(th), np.sin(th)], axis=1)


def generate_reference_mesh(
    radius: float = 0.3, refinements: int = 0, max_cells: int = DEFAULT_MAX_CELLS
) -> Mesh:
    """Build the interface-fitted mesh with ``13 * 4**refinements`` cells."""
    if not 0.0 < radius < 0.5:
        raise ValueError(f"radius must lie in (0, 0.5), got {radius}")
    if refinements < 0 or int(refinements) != refinements:
        raise ValueError(f"refinements must be a non-negative integer, got {refinements}")
    refinements = int(refinements)
    n_cells = 13 * 4**refinements
    if n_cells > max_cells:
        raise MeshResourceError(
            f"refinement {refinements} gives {n_cells} cells, budget is {max_cells}"
        )

    cverts, ccells, arcs = _coarse_layout(radius)
    n = 2**refinements
    t = np.arange(1, n) / n

    # global numbering: coarse vertices, then edge interiors, then cell interiors
    points = [cverts]
    offset = len(cverts)
    edge_start = {}
    for cell in ccells:
        for a, b in LOCAL_FACES:
            key = (min(cell[a], cell[b]), max(cell[a], cell[b]))
            if key in edge_start:
                continue
            lo, hi = key
            pts = _edge_points(cverts[lo], cverts[hi], frozenset(key) in arcs, radius, t)
            edge_start[key] = offset
            points.append(pts)
            offset += n - 1

    grid = np.arange(n + 1) / n
    all_cells = []
    for cell in ccells:
        P = cverts[cell]

        def curve(a, b, s):
            key = frozenset((cell[a], cell[b]))
            return _edge_points(P[a], P[b], key in arcs, radius, s)

        ids = np.empty((n + 1, n + 1), dtype=np.int64)  # ids[i, j]: u=i/n, v=j/n
        ids[0, 0], ids[n, 0], ids[n, n], ids[0, n] = cell

        def fill_edge(a, b, sl):
            lo, hi = min(cell[a], cell[b]), max(cell[a], cell[b])
            run = edge_start[(lo, hi)] + np.arange(n - 1)
            ids[sl] = run if cell[a] == lo else run[::-1]

        fill_edge(0, 1, (slice(1, n), 0))
        fill_edge(1, 2, (n, slice(1, n)))
        fill_edge(3, 2, (slice(1, n), n))
        fill_edge(0, 3, (0, slice(1, n)))

        if n > 1:
            u = grid[1:n][:, None, None]
            v = grid[1:n][None, :, None]
            cb = curve(0, 1, grid[1:n])[:, None, :]
            ct = curve(3, 2, grid[1:n])[:, None, :]
            cl = curve(0, 3, grid[1:n])[None, :, :]
            cr = curve(1, 2, grid[1:n])[None, :, :]
            X = (
                (1 - v) * cb + v * ct + (1 - u) * cl + u * cr
                - ((1 - u) * (1 - v) * P[0] + u * (1 - v) * P[1] + u * v * P[2] + (1 - u) * v * P[3])
            )
            interior = X.reshape(-1, 2)
            ids[1:n, 1:n] = (offset + np.arange((n - 1) ** 2)).reshape(n - 1, n - 1)
            points.append(interior)
            offset += (n - 1) ** 2

        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i, j = i.ravel(), j.ravel()
        quads = np.stack([ids[i, j], ids[i + 1, j], ids[i + 1, j + 1], ids[i, j + 1]], axis=1)
        all_cells.append(quads)

    vertices = np.concatenate(points, axis=0)
    cells = np.concatenate(all_cells, axis=0)
    # remove the roundoff of boundary coordinates so periodic partners match bit for bit
    for d in range(2):
        vertices[np.abs(vertices[:, d]) < 1e-14, d] = 0.0
        vertices[np.abs(vertices[:, d] - 1) < 1e-14, d] = 1.0

    faces = _find_interface_faces(vertices, cells, radius)
    pairs = _periodic_pairs(vertices)
    mesh = Mesh(vertices, cells, faces, pairs, refinements, float(radius))
    validate_mesh(mesh)
    return mesh


def _on_circle(vertices, radius, tol=1e-12):
    return np.abs(np.linalg.norm(vertices - CENTER, axis=1) - radius) < tol


def _find_interface_faces(vertices, cells, radius):
    """Faces with both endpoints on the circle, taken from the inner cell."""
    on = _on_circle(vertices, radius)
    centroid_dist = np.linalg.norm(vertices[cells].mean(axis=1) - CENTER, axis=1)
    out = []
    for lf, (a, b) in enumerate(LOCAL_FACES):
        hit = on[cells[:, a]] & on[cells[:, b]] & (centroid_dist < radius)
        for c in np.flatnonzero(hit):
            out.append((c, lf))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def _periodic_pairs(vertices, tol=1e-12):
    pairs = []
    for d in range(2):
        other = 1 - d
        hi = np.flatnonzero(np.abs(vertices[:, d] - 1) < tol)
        lo = np.flatnonzero(np.abs(vertices[:, d]) < tol)
        hi = hi[np.argsort(vertices[hi, other], kind="stable")]
        lo = lo[np.argsort(vertices[lo, other], kind="stable")]
        if len(hi) != len(lo) or np.any(np.abs(vertices[hi, other] - vertices[lo, other]) > tol):
            raise MeshError("boundary vertices on opposite sides do not match")
        pairs.extend(zip(hi, lo))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def corner_jacobians(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Bilinear-map Jacobian determinants at the four corners of every cell.

    The determinant of a bilinear map is affine in each reference
    coordinate, so its minimum over the cell is attained at a corner.
    """
    P = vertices[cells]  # (M, 4, 2)
    out = np.empty((len(cells), 4))
    for k in range(4):
        e1 = P[:, (k + 1) % 4] - P[:, k]
        e2 = P[:, (k - 1) % 4] - P[:, k]
        out[:, k] = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    return out


def validate_mesh(mesh: Mesh) -> None:
    """Raise :class:`MeshError` if an invariant of :class:`Mesh` is violated."""
    v, c = mesh.vertices, mesh.cells
    if v.ndim != 2 or v.shape[1] != 2:
        raise MeshError("vertices must be an (N, 2) array")
    if c.ndim != 2 or c.shape[1] != 4:
        raise MeshError("cells must be an (M, 4) array")
    if len(c) and (c.min() < 0 or c.max() >= len(v)):
        raise MeshError("cell references a vertex that does not exist")
    if np.any([len(set(row)) != 4 for row in c]):
        raise MeshError("cell with repeated vertices")
    if not np.all(np.isfinite(v)):
        raise MeshError("non-finite vertex coordinates")
    if len(c) and corner_jacobians(v, c).min() <= 0:
        raise MeshError("cell with non-positive orientation")
    f = mesh.interface_faces
    if len(f):
        if f[:, 0].max() >= len(c) or f[:, 1].min() < 0 or f[:, 1].max() > 3:
            raise MeshError("interface face references an invalid cell or face")
        ends = mesh.face_vertices().ravel()
        if not np.all(_on_circle(v[ends], mesh.radius)):
            raise MeshError("interface face endpoint is not on the circle")
    _check_periodic(v, mesh.periodic_pairs)


def _check_periodic(v, pairs, tol=1e-12):
    if pairs.size == 0:
        return
    if pairs.min() < 0 or pairs.max() >= len(v):
        raise MeshError("periodic pair references a vertex that does not exist")
    for d in range(2):
        other = 1 - d
        hi_all = set(np.flatnonzero(np.abs(v[:, d] - 1) < tol).tolist())
        lo_all = set(np.flatnonzero(np.abs(v[:, d]) < tol).tolist())
        sel = [
            (s, m) for s, m in pairs.tolist()
            if abs(v[s, d] - 1) < tol and abs(v[m, d]) < tol and abs(v[s, other] - v[m, other]) < tol
        ]
        slaves = [s for s, _ in sel]
        masters = [m for _, m in sel]
        if (
            len(set(slaves)) != len(slaves)
            or len(set(masters)) != len(masters)
            or set(slaves) != hi_all
            or set(masters) != lo_all
        ):
            raise MeshError(f"periodic pairing in direction {d} is not a bijection")
    for s, m in pairs.tolist():
        dx = np.abs(v[s] - v[m])
        if not ((abs(dx[0] - 1) < tol and dx[1] < tol) or (abs(dx[1] - 1) < tol and dx[0] < tol)):
            raise MeshError(f"periodic pair ({s}, {m}) is not a unit translate")


# ---------------------------------------------------------------------------
# queries

_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def interface_faces(mesh: Mesh) -> InterfaceFrame:
    """Interface faces with tangents, normals and quadrature data."""
    if "frame" in mesh._cache:
        return mesh._cache["frame"]
    faces = mesh.interface_faces
    ends = mesh.face_vertices(faces)
    a, b = mesh.vertices[ends[:, 0]], mesh.vertices[ends[:, 1]]
    # orient every face counterclockwise about the center
    cross = (a[:, 0] - CENTER[0]) * (b[:, 1] - a[:, 1]) - (a[:, 1] - CENTER[1]) * (b[:, 0] - a[:, 0])
    flip = cross < 0
    ends = np.where(flip[:, None], ends[:, ::-1], ends)
    a, b = mesh.vertices[ends[:, 0]], mesh.vertices[ends[:, 1]]
    mid = 0.5 * (a + b) - CENTER
    order = np.argsort(np.arctan2(mid[:, 1], mid[:, 0]), kind="stable")
    faces, ends, a, b = faces[order], ends[order], a[order], b[order]
    d = b - a
    length = np.linalg.norm(d, axis=1)
    tangent = d / length[:, None]
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    qp = a[:, None, :] + _GAUSS2[None, :, None] * d[:, None, :]
    qw = 0.5 * length[:, None] * np.ones((1, 2))
    frame = InterfaceFrame(faces, ends, tangent, normal, length, qp, qw)
    mesh._cache["frame"] = frame
    return frame


def cell_diameter(mesh: Mesh, cell: int | np.ndarray | None = None):
    """Largest vertex-to-vertex distance of a cell (all cells if ``None``)."""
    idx = np.arange(mesh.n_cells) if cell is None else cell
    P = mesh.vertices[mesh.cells[idx]]
    d = np.linalg.norm(P[..., :, None, :] - P[..., None, :, :], axis=-1)
    return d.max(axis=(-1, -2))


# ---------------------------------------------------------------------------
# text format


def save_mesh(mesh: Mesh, path) -> None:
    path = Path(path)
    lines = ["unitcellmesh 1", f"# refinement {mesh.refinement_level}", f"# radius {mesh.radius!r}"]
    lines.append(f"vertices {mesh.n_vertices}")
    lines.extend(f"{x!r} {y!r}" for x, y in mesh.vertices.tolist())
    lines.append(f"cells {mesh.n_cells}")
    lines.extend(" ".join(map(str, row)) for row in mesh.cells.tolist())
    lines.append(f"interface {len(mesh.interface_faces)}")
    lines.extend(f"{c} {f}" for c, f in mesh.interface_faces.tolist())
    lines.append(f"periodic {len(mesh.periodic_pairs)}")
    lines.extend(f"{s} {m}" for s, m in mesh.periodic_pairs.tolist())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh(path) -> Mesh:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    meta = {}
    rows = []
    for lineno, raw in enumerate(text, start=1):
        stripped = raw.strip()
        if stripped.startswith("#"):
            parts = stripped[1:].split()
            if len(parts) == 2 and parts[0] in ("refinement", "radius"):
                meta[parts[0]] = parts[1]
            continue
        if stripped:
            rows.append((lineno, stripped.split("#", 1)[0].split()))
    if not rows or rows[0][1] != ["unitcellmesh", "1"]:
        raise MeshParseError("expected header 'unitcellmesh 1'", rows[0][0] if rows else 1)

    pos = 1
    sections = {}
    specs = [("vertices", 2, float), ("cells", 4, int), ("interface", 2, int), ("periodic", 2, int)]
    for name, width, conv in specs:
        if pos >= len(rows):
            raise MeshParseError(f"missing section '{name}'", rows[-1][0])
        lineno, tok = rows[pos]
        if len(tok) != 2 or tok[0] != name:
            raise MeshParseError(f"expected '{name} <count>'", lineno)
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshParseError(f"bad count {tok[1]!r}", lineno) from None
        pos += 1
        data = []
        for _ in range(count):
            if pos >= len(rows):
                raise MeshParseError(f"section '{name}' ended early", rows[-1][0])
            lineno, tok = rows[pos]
            if len(tok) != width:
                raise MeshParseError(f"expected {width} values in '{name}'", lineno)
            try:
                data.append([conv(t) for t in tok])
            except ValueError:
                raise MeshParseError(f"unparsable value in '{name}'", lineno) from None
            pos += 1
        sections[name] = (np.array(data, dtype=float if conv is float else np.int64).reshape(-1, width), lineno)
    if pos != len(rows):
        raise MeshParseError("trailing content", rows[pos][0])

    vertices = sections["vertices"][0]
    faces = sections["interface"][0]
    cells = sections["cells"][0]
    if "radius" in meta:
        radius = float(meta["radius"])
    elif len(faces):
        loc = np.asarray(LOCAL_FACES)[faces[:, 1] % 4]
        first = cells[faces[:, 0] % max(len(cells), 1), loc[:, 0]]
        radius = float(np.linalg.norm(vertices[first] - CENTER, axis=1).mean())
    else:
        radius = 0.3
    try:
        pairs_line = sections["periodic"][1]
        mesh = Mesh(
            vertices,
            cells,
            faces,
            sections["periodic"][0],
            int(meta.get("refinement", 0)),
            radius,
        )
        _check_periodic(vertices, mesh.periodic_pairs)
    except MeshError as exc:
        raise MeshParseError(str(exc), pairs_line) from None
    validate_mesh(mesh)
    return mesh
