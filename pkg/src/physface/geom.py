"""Regular hexahedral lattices, deformation-gradient operators and trilinear embedding.

Corner ``c`` of an element sits at lattice offset ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``
from the element's minimum corner. Displacements are stored as ``(n_vertices, 3)``
arrays throughout the package.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

LATTICE_MAGIC = "PHYSFACE-LATTICE"
LATTICE_VERSION = 1


@dataclass(frozen=True)
class HexMesh:
    vertices: np.ndarray  # (n, 3)
    elements: np.ndarray  # (m, 8) vertex indices
    h: float
    origin: np.ndarray  # lattice origin (3,)
    occupancy: np.ndarray  # bool (nx, ny, nz)
    cells: np.ndarray  # (m, 3) integer cell coordinates
    cell_to_element: np.ndarray  # int (nx, ny, nz), -1 where empty

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def dims(self):
        return self.occupancy.shape

    def element_centers(self):
        return self.origin + (self.cells + 0.5) * self.h

    def rest_volume(self):
        return self.h**3

    def diameter(self):
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def vertex_cell_index(self):
        """Integer lattice coordinate of every vertex."""
        return np.rint((self.vertices - self.origin) / self.h).astype(np.int64)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def build_hex_lattice(domain, h, origin=None):
    """Build a regular hex lattice.

    ``domain`` is either an axis-aligned box ``(lo, hi)`` or a boolean occupancy
    array of shape ``(nx, ny, nz)``; with an occupancy array ``origin`` gives the
    position of cell ``(0, 0, 0)``'s minimum corner (default zero).
    """
    h = float(h)
    if not h > 0:
        raise ValueError(f"element size must be positive, got {h}")
    if isinstance(domain, np.ndarray) and domain.ndim == 3:
        occ = domain.astype(bool)
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    else:
        lo, hi = (np.asarray(v, dtype=float) for v in domain)
        extent = (hi - lo) / h
        dims = np.ceil(extent - 1e-9).astype(int)
        if np.any(dims <= 0):
            raise ValueError("empty domain")
        occ = np.ones(tuple(dims), dtype=bool)
        origin = lo if origin is None else np.asarray(origin, dtype=float)
    if not occ.any():
        raise ValueError("empty domain")

    nx, ny, nz = occ.shape
    cells = np.argwhere(occ)
    # order elements x-fastest so that numbering is predictable
    order = np.lexsort((cells[:, 0], cells[:, 1], cells[:, 2]))
    cells = cells[order]

    corner_cells = cells[:, None, :] + CORNER_OFFSETS[None, :, :]
    flat = (corner_cells[..., 2] * (ny + 1) + corner_cells[..., 1]) * (nx + 1) + corner_cells[..., 0]
    used, elements = np.unique(flat.ravel(), return_inverse=True)
    elements = elements.reshape(-1, 8).astype(np.int64)
    ix = used % (nx + 1)
    iy = (used // (nx + 1)) % (ny + 1)
    iz = used // ((nx + 1) * (ny + 1))
    vertices = origin + h * np.stack([ix, iy, iz], axis=1).astype(float)

    c2e = -np.ones(occ.shape, dtype=np.int64)
    c2e[cells[:, 0], cells[:, 1], cells[:, 2]] = np.arange(len(cells))
    _freeze(vertices, elements, cells, c2e)
    occ = occ.copy()
    origin = np.array(origin, dtype=float)
    _freeze(occ, origin)
    return HexMesh(vertices, elements, h, origin, occ, cells, c2e)


def shape_gradients(h):
    """Trilinear shape-function gradients at the element center, shape (8, 3)."""
    if not h > 0:
        raise ValueError("degenerate element: non-positive size")
    signs = 2.0 * CORNER_OFFSETS - 1.0
    return signs / (4.0 * h)


def element_gradient_matrix(h):
    """9x24 map from the 8 corner positions (corner-major, xyz) to row-major ``vec(F)``."""
    D = shape_gradients(h)
    G = np.zeros((9, 24))
    for c in range(8):
        for i in range(3):
            for j in range(3):
                G[3 * i + j, 3 * c + i] = D[c, j]
    return G


def deformation_gradient_operator(mesh):
    """Per-element 9x24 gradient maps, shape ``(m, 9, 24)``.

    On a regular lattice every element shares the same map; the stacked array
    is returned so callers can index it per element.
    """
    G = element_gradient_matrix(mesh.h)
    return np.broadcast_to(G, (mesh.n_elements, 9, 24))


def scalar_gradient_operator(mesh):
    """Sparse ``(3m, n)`` operator with ``(Gs @ u)[3e + j, i] = F_e[i, j]``."""
    D = shape_gradients(mesh.h)
    m = mesh.n_elements
    rows = (3 * np.arange(m)[:, None, None] + np.arange(3)[None, None, :]).repeat(8, axis=1)
    cols = np.broadcast_to(mesh.elements[:, :, None], (m, 8, 3))
    vals = np.broadcast_to(D[None, :, :], (m, 8, 3))
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * m, mesh.n_vertices))


def deformation_gradients(mesh, u, Gs=None):
    """Deformation gradients of all elements for positions ``u`` (n, 3)."""
    u = np.asarray(u, dtype=float)
    if Gs is None:
        Gs = scalar_gradient_operator(mesh)
    return (Gs @ u).reshape(-1, 3, 3).transpose(0, 2, 1)


@dataclass(frozen=True)
class Embedding:
    matrix: sp.csr_matrix  # (n_points, n_vertices)
    element: np.ndarray  # source element per point
    local: np.ndarray  # (n_points, 3) local coordinates in [0, 1]
    rest_points: np.ndarray

    @property
    def point_count(self):
        return self.matrix.shape[0]

    def rows(self):
        """Per-point list of ``(vertex, weight)`` pairs."""
        W = self.matrix
        return [list(zip(W.indices[W.indptr[i]:W.indptr[i + 1]].tolist(), W.data[W.indptr[i]:W.indptr[i + 1]].tolist())) for i in range(W.shape[0])]


def trilinear_weights(local):
    """Corner weights (n, 8) for local coordinates (n, 3) in [0, 1]^3."""
    local = np.asarray(local, dtype=float)
    w = np.ones((len(local), 8))
    for c in range(8):
        for d in range(3):
            w[:, c] *= local[:, d] if CORNER_OFFSETS[c, d] else 1.0 - local[:, d]
    return w


def locate_points(mesh, points, tol=1e-9, side=None):
    """Element index and local coordinates for each point, or -1 when outside.

    ``side`` (n, 3) optionally nudges the cell search for points lying on cell
    faces: the candidate cell is chosen at ``points + side`` while the weights
    still refer to the point itself.
    """
    pts = np.asarray(points, dtype=float)
    rel = (pts - mesh.origin) / mesh.h
    probe = rel if side is None else rel + np.asarray(side, dtype=float) / mesh.h
    base = np.floor(probe).astype(np.int64)
    dims = np.array(mesh.dims)
    elem = -np.ones(len(pts), dtype=np.int64)
    local = np.zeros((len(pts), 3))
    frac = rel - base
    # a point within tol of a cell face may also belong to the neighbouring cell
    alt = base + np.where(frac <= tol, -1, np.where(frac >= 1.0 - tol, 1, 0))
    for shift in CORNER_OFFSETS.astype(bool):
        cand = np.where(shift, alt, base)
        inside = np.all((cand >= 0) & (cand < dims), axis=1)
        todo = (elem < 0) & inside
        if not todo.any():
            continue
        idx = np.where(todo)[0]
        e = mesh.cell_to_element[cand[idx, 0], cand[idx, 1], cand[idx, 2]]
        xi = rel[idx] - cand[idx]
        ok = (e >= 0) & np.all((xi >= -tol) & (xi <= 1 + tol), axis=1)
        elem[idx[ok]] = e[ok]
        local[idx[ok]] = np.clip(xi[ok], 0.0, 1.0)
    return elem, local


def embed_points(mesh, points, tol=1e-9, side=None):
    """Trilinear embedding of ``points`` into ``mesh``.

    Points within ``tol * h`` outside an occupied cell are snapped onto it.
    See :func:`locate_points` for ``side``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    elem, local = locate_points(mesh, pts, tol, side)
    missing = np.where(elem < 0)[0]
    if len(missing):
        shown = ", ".join(str(i) for i in missing[:20])
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise ValueError(f"points outside all elements: {shown}{more}")
    w = trilinear_weights(local)
    cols = mesh.elements[elem]
    rows = np.repeat(np.arange(len(pts)), 8)
    W = sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(len(pts), mesh.n_vertices))
    W.eliminate_zeros()
    W.sort_indices()
    return Embedding(W, elem, local, pts.copy())


def apply_embedding(emb, u):
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != emb.matrix.shape[1]:
        raise ValueError(f"expected {emb.matrix.shape[1]} vertex positions, got array of shape {u.shape}")
    return emb.matrix @ u


# ---------------------------------------------------------------------------
# file formats


def write_obj(path, vertices, faces):
    """ASCII OBJ with 9 significant digits, 1-indexed faces."""
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=float):
            fh.write("v {:.9g} {:.9g} {:.9g}\n".format(*v))
        for f in np.asarray(faces, dtype=np.int64):
            fh.write("f " + " ".join(str(int(i) + 1) for i in f) + "\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64)


def write_lattice(path, mesh):
    nx, ny, nz = mesh.dims
    lines = [
        LATTICE_MAGIC,
        f"version {LATTICE_VERSION}",
        f"h {float(mesh.h)!r}",
        "origin " + " ".join(repr(float(x)) for x in mesh.origin),
        f"dims {nx} {ny} {nz}",
        "occupancy",
    ]
    for k in range(nz):
        for j in range(ny):
            lines.append("".join("1" if mesh.occupancy[i, j, k] else "0" for i in range(nx)))
    lines.append(f"vertices {mesh.n_vertices}")
    lines.extend(" ".join(repr(float(x)) for x in v) for v in mesh.vertices)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_lattice(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != LATTICE_MAGIC:
        raise ValueError(f"{path}: not a lattice file")
    version = int(lines[1].split()[1])
    if version != LATTICE_VERSION:
        raise ValueError(f"{path}: unsupported lattice version {version}")
    h = float(lines[2].split()[1])
    origin = np.array([float(x) for x in lines[3].split()[1:]])
    nx, ny, nz = (int(x) for x in lines[4].split()[1:])
    occ = np.zeros((nx, ny, nz), dtype=bool)
    row = 6
    for k in range(nz):
        for j in range(ny):
            occ[:, j, k] = [c == "1" for c in lines[row]]
            row += 1
    n = int(lines[row].split()[1])
    verts = np.array([[float(x) for x in ln.split()] for ln in lines[row + 1:row + 1 + n]])
    mesh = build_hex_lattice(occ, h, origin)
    if mesh.n_vertices != n or np.abs(mesh.vertices - verts).max(initial=0.0) > 1e-12 * max(1.0, h):
        raise ValueError(f"{path}: vertex block inconsistent with occupancy")
    return mesh
