"""Domain decomposition, point sampling and the rank topology.

Cartesian layout: rank ``r`` sits at row ``r_x = r // N_x`` and column
``r_y = r % N_x``, so ``r = r_x * N_x + r_y``. Columns run along the first
axis (x), rows along the second axis (y, or t for space-time runs). Neighbors:

    S = (r_x - 1, r_y)   E = (r_x, r_y + 1)   N = (r_x + 1, r_y)   W = (r_x, r_y - 1)

with None standing in for a missing neighbor (the PROC_NULL analogue).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import shapely
from scipy.stats import qmc
from shapely.geometry import LineString, Polygon
from shapely.ops import unary_union

from .errors import RejectedInput

SIDES = ("S", "E", "N", "W")
GEOM_TOL = 1e-9


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box, optionally with a polygon outline inside it."""

    bounds: tuple
    polygon: tuple | None = None
    dim_names: tuple = ("x", "y")

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        if any(hi <= lo for lo, hi in b):
            raise RejectedInput(f"box extents must be positive, got {b}")
        if self.polygon is not None:
            poly = Polygon(self.polygon)
            if not poly.is_valid:
                raise RejectedInput("domain polygon must be simple")

    @property
    def ndim(self):
        return len(self.bounds)

    def area(self):
        if self.polygon is not None:
            return Polygon(self.polygon).area
        return float(np.prod([hi - lo for lo, hi in self.bounds]))


@dataclass
class Interface:
    """Shared edge with one neighbor. ``points`` are identical on both sides."""

    edge_id: int
    neighbor: int
    points: np.ndarray
    side: str | None = None
    normal: tuple | None = None


@dataclass
class BoundaryEdge:
    """Piece of the subdomain boundary lying on the outer boundary."""

    edge_id: int
    start: tuple
    end: tuple
    side: str | None = None


@dataclass
class SubdomainSpec:
    id: int
    cell: tuple | None = None
    polygon: np.ndarray | None = None
    neighbors: dict | list = field(default_factory=dict)
    interfaces: list = field(default_factory=list)
    boundary_edges: list = field(default_factory=list)
    residual_points: np.ndarray | None = None
    data: dict = field(default_factory=dict)
    arch: object = None
    weights: object = None

    @property
    def live_neighbors(self):
        vals = self.neighbors.values() if isinstance(self.neighbors, dict) else self.neighbors
        return [n for n in vals if n is not None]

    def area(self):
        if self.polygon is not None:
            return Polygon(self.polygon).area
        return float(np.prod([hi - lo for lo, hi in self.cell]))

    def bbox(self):
        if self.polygon is not None:
            lo, hi = self.polygon.min(axis=0), self.polygon.max(axis=0)
            return tuple(zip(lo, hi))
        return self.cell

    def contains(self, points, tol=GEOM_TOL, strict=False):
        """Boolean mask of points inside the closed (or, with ``strict``, open) region."""
        pts = np.atleast_2d(points)
        if self.polygon is not None:
            poly = Polygon(self.polygon)
            if strict:
                inside = shapely.contains_xy(poly, pts[:, 0], pts[:, 1])
                dist = shapely.distance(poly.exterior, shapely.points(pts))
                return inside & (dist > tol)
            return shapely.distance(poly, shapely.points(pts)) <= tol
        mask = np.ones(len(pts), dtype=bool)
        for d, (lo, hi) in enumerate(self.cell):
            if strict:
                mask &= (pts[:, d] > lo + tol) & (pts[:, d] < hi - tol)
            else:
                mask &= (pts[:, d] >= lo - tol) & (pts[:, d] <= hi + tol)
        return mask


def rank_to_coords(r, n_x, n_y):
    if n_x < 1 or n_y < 1:
        raise RejectedInput("grid counts must be >= 1")
    if not 0 <= r < n_x * n_y:
        raise RejectedInput(f"rank {r} outside 0..{n_x * n_y - 1}")
    return r // n_x, r % n_x


def coords_to_rank(r_x, r_y, n_x):
    return r_x * n_x + r_y


def neighbor_table(r_x, r_y, n_x, n_y):
    """{S, E, N, W} -> neighbor rank, or None past the grid edge."""
    steps = {"S": (-1, 0), "E": (0, 1), "N": (1, 0), "W": (0, -1)}
    out = {}
    for side, (dx, dy) in steps.items():
        a, b = r_x + dx, r_y + dy
        out[side] = coords_to_rank(a, b, n_x) if 0 <= a < n_y and 0 <= b < n_x else None
    return out


def _equispaced(start, end, count):
    start, end = np.asarray(start, float), np.asarray(end, float)
    s = (np.arange(count) + 0.5) / count
    return start + s[:, None] * (end - start)


def _cell_edges(row, col, n_x, n_y):
    """Global ids of the S, E, N, W edges of cell (row, col).

    Vertical edges come first: id = row * (n_x + 1) + c for the line x_c,
    then horizontal ones: offset + r * n_x + col for the line y_r.
    """
    n_vert = n_y * (n_x + 1)
    return {"S": n_vert + row * n_x + col,
            "N": n_vert + (row + 1) * n_x + col,
            "W": row * (n_x + 1) + col,
            "E": row * (n_x + 1) + col + 1}


def _cell_corners(cell):
    (x0, x1), (y0, y1) = cell
    return {"S": ((x0, y0), (x1, y0)), "E": ((x1, y0), (x1, y1)),
            "N": ((x0, y1), (x1, y1)), "W": ((x0, y0), (x0, y1))}


def cartesian_decompose(domain: Domain, n_x, n_y, interface_points=20):
    """Tile the box into n_x * n_y cells. Returns (specs, etov).

    ``etov`` maps subdomain id -> global ids of its edges on the outer boundary.
    """
    if int(n_x) != n_x or int(n_y) != n_y or n_x < 1 or n_y < 1:
        raise RejectedInput(f"grid counts must be positive integers, got {n_x}x{n_y}")
    if domain.ndim != 2:
        raise RejectedInput("cartesian decomposition needs a 2-D box")
    if interface_points < 1:
        raise RejectedInput("need at least one interface point per edge")
    (x_lo, x_hi), (y_lo, y_hi) = domain.bounds
    xs = np.linspace(x_lo, x_hi, n_x + 1)
    ys = np.linspace(y_lo, y_hi, n_y + 1)
    specs, etov = [], {}
    for r in range(n_x * n_y):
        row, col = rank_to_coords(r, n_x, n_y)
        cell = ((float(xs[col]), float(xs[col + 1])), (float(ys[row]), float(ys[row + 1])))
        nbrs = neighbor_table(row, col, n_x, n_y)
        edges = _cell_edges(row, col, n_x, n_y)
        corners = _cell_corners(cell)
        spec = SubdomainSpec(id=r, cell=cell, neighbors=nbrs)
        etov[r] = []
        for side in SIDES:
            a, b = corners[side]
            if nbrs[side] is None:
                etov[r].append(edges[side])
                spec.boundary_edges.append(BoundaryEdge(edges[side], a, b, side))
            else:
                normal = (1.0, 0.0) if side in ("E", "W") else (0.0, 1.0)
                spec.interfaces.append(Interface(edges[side], nbrs[side],
                                                 _equispaced(a, b, interface_points), side, normal))
        specs.append(spec)
    return specs, etov


PARTITION_SCHEMA = {
    "type": "object",
    "required": ["subdomains", "interfaces"],
    "properties": {
        "dims": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        "subdomains": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["id", "polygon"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "polygon": {"type": "array", "minItems": 3,
                                "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                          "items": {"type": "number"}}},
                    "holes": {"type": "array"},
                },
            },
        },
        "interfaces": {
            "type": "array",
            "items": {
                "type": "object", "required": ["owners", "points"],
                "properties": {
                    "owners": {"type": "array", "items": {"type": "integer"}},
                    "points": {"type": "array", "minItems": 1,
                               "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                         "items": {"type": "number"}}},
                },
            },
        },
    },
}


def load_partition(path):
    with open(path) as fh:
        data = json.load(fh)
    return validate_partition(data)


def validate_partition(data):
    try:
        jsonschema.validate(data, PARTITION_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise RejectedInput(f"partition file invalid at '{where}': {exc.message}") from None
    ids = sorted(s["id"] for s in data["subdomains"])
    if ids != list(range(len(ids))):
        raise RejectedInput(f"subdomain ids must be 0..{len(ids) - 1}, got {ids}")
    for s in data["subdomains"]:
        if s.get("holes"):
            raise RejectedInput(f"subdomain {s['id']}: polygons with holes are not supported")
        poly = Polygon(s["polygon"])
        if not poly.is_valid or not poly.exterior.is_simple or poly.area <= 0:
            raise RejectedInput(f"subdomain {s['id']}: polygon is not simple")
    for k, itf in enumerate(data["interfaces"]):
        owners = itf["owners"]
        if len(owners) != 2 or len(set(owners)) != 2:
            raise RejectedInput(f"interface {k} must be shared by exactly 2 subdomains, got {owners}")
        if any(o not in ids for o in owners):
            raise RejectedInput(f"interface {k} references unknown subdomain in {owners}")
    return data


def _polygon_boundary_edges(q, verts, others):
    """Segments of polygon ``q`` not shared with any other polygon."""
    shared = unary_union([Polygon(v).exterior for v in others]).buffer(GEOM_TOL * 10) if others else None
    edges = []
    n = len(verts)
    for i in range(n):
        a, b = tuple(verts[i]), tuple(verts[(i + 1) % n])
        seg = LineString([a, b])
        if shared is not None and seg.difference(shared).length <= GEOM_TOL * 100:
            continue
        edges.append(BoundaryEdge(i, a, b))
    return edges


def polygon_decompose(partition):
    """Subdomain specs from a partition dict or file path (see ``PARTITION_SCHEMA``).

    Interface points are taken verbatim; neighbor lists follow from the interfaces.
    """
    if isinstance(partition, (str, Path)):
        partition = load_partition(partition)
    else:
        partition = validate_partition(partition)
    polys = {s["id"]: np.asarray(s["polygon"], dtype=float) for s in partition["subdomains"]}
    # drop a closing vertex if the ring was written closed
    for q, v in polys.items():
        if len(v) > 3 and np.allclose(v[0], v[-1]):
            polys[q] = v[:-1]
    specs = {q: SubdomainSpec(id=q, polygon=v, neighbors=[]) for q, v in polys.items()}
    for k, itf in enumerate(partition["interfaces"]):
        a, b = itf["owners"]
        pts = np.asarray(itf["points"], dtype=float)
        for owner in (a, b):
            poly = Polygon(polys[owner])
            if np.any(shapely.distance(poly.exterior, shapely.points(pts)) > 1e-6):
                raise RejectedInput(f"interface {k}: points do not lie on the boundary of subdomain {owner}")
        specs[a].interfaces.append(Interface(k, b, pts.copy()))
        specs[b].interfaces.append(Interface(k, a, pts.copy()))
        if b not in specs[a].neighbors:
            specs[a].neighbors.append(b)
        if a not in specs[b].neighbors:
            specs[b].neighbors.append(a)
    for q, v in polys.items():
        others = [w for p, w in polys.items() if p != q]
        specs[q].boundary_edges = _polygon_boundary_edges(q, v, others)
    return [specs[q] for q in sorted(specs)]


def polygon_etov(specs):
    return {s.id: [e.edge_id for e in s.boundary_edges] for s in specs}


@dataclass(frozen=True)
class PointCounts:
    residual: int = 1000
    boundary: int = 50        # per outer-boundary edge (Cartesian) or per subdomain (polygon)
    interior_data: int = 0    # interior observation points, for fields with interior data
    interface: int | None = None  # regenerate Cartesian interface sets with this many per edge


def _uniform_in_box(rng, box, count, strategy):
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    if strategy == "uniform":
        u = rng.random((count, len(box)))
    elif strategy == "latin-hypercube":
        u = qmc.LatinHypercube(d=len(box), seed=rng).random(count)
    else:
        raise RejectedInput(f"unknown sampling strategy {strategy!r}")
    return lo + u * (hi - lo)


def _interior(rng, spec, count, strategy):
    if count == 0:
        return np.zeros((0, 2))
    box = spec.bbox()
    out = []
    have = 0
    while have < count:
        cand = _uniform_in_box(rng, box, max(2 * (count - have), 16), strategy)
        cand = cand[spec.contains(cand, strict=True)]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:count]


def _on_boundary(rng, spec, count):
    """Random points along the subdomain's outer-boundary edges, tagged by edge."""
    tagged = []
    if spec.cell is not None:
        for edge in spec.boundary_edges:
            s = rng.random(count)
            a, b = np.asarray(edge.start), np.asarray(edge.end)
            tagged.append((edge, a + s[:, None] * (b - a)))
        return tagged
    lengths = np.array([np.hypot(*(np.subtract(e.end, e.start))) for e in spec.boundary_edges])
    if len(lengths) == 0 or count == 0:
        return tagged
    # spread the budget along the boundary in proportion to edge length
    s = np.sort(rng.random(count)) * lengths.sum()
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    which = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    for i, edge in enumerate(spec.boundary_edges):
        frac = (s[which == i] - cum[i]) / lengths[i]
        a, b = np.asarray(edge.start), np.asarray(edge.end)
        tagged.append((edge, a + frac[:, None] * (b - a)))
    return tagged


def sample_points(spec: SubdomainSpec, counts: PointCounts, seed, strategy="uniform", problem=None):
    """Fill residual points (strictly interior) and, given a problem, training data.

    Cartesian interface sets are regenerated equispaced when ``counts.interface``
    is set, so both owners of an edge still agree bitwise.
    """
    if counts.residual < 0 or counts.boundary < 0 or counts.interior_data < 0:
        raise RejectedInput("point counts must be >= 0")
    if spec.area() <= 0:
        raise RejectedInput(f"subdomain {spec.id} has zero area")
    rng = np.random.default_rng(seed)
    spec.residual_points = _interior(rng, spec, counts.residual, strategy)
    if counts.interface is not None and spec.cell is not None:
        corners = _cell_corners(spec.cell)
        for itf in spec.interfaces:
            a, b = corners[itf.side]
            itf.points = _equispaced(a, b, counts.interface)
    boundary = _on_boundary(rng, spec, counts.boundary)
    interior = _interior(rng, spec, counts.interior_data, strategy)
    if problem is not None:
        spec.data = problem.training_data(boundary, interior)
    return spec


def covering(specs, point, tol=GEOM_TOL):
    """Ids of the subdomains whose closed region contains ``point``."""
    p = np.asarray(point, dtype=float)[None, :]
    return [s.id for s in specs if s.contains(p, tol)[0]]
