"""Regenerate the bundled partition files under configs/partitions/.

heat_4.json      four non-convex regions of [0, 10] x [0, 6] meeting at (5, 3)
synthetic_10.json  ten jittered quadrilaterals on a 5 x 2 layout
"""

import json
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon

OUT = Path(__file__).resolve().parent.parent / "configs" / "partitions"


def polyline_points(vertices, count):
    """``count`` points equally spaced by arc length, endpoints excluded."""
    v = np.asarray(vertices, dtype=float)
    seg = np.hypot(*np.diff(v, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = (np.arange(count) + 0.5) / count * cum[-1]
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[k]) / seg[k]
    return (v[k] + t[:, None] * (v[k + 1] - v[k])).round(12).tolist()


def heat_4(points_per_interface=24):
    c = (5.0, 3.0)
    south, east = [(5.0, 0.0), (4.2, 1.5), c], [c, (7.0, 2.4), (10.0, 3.0)]
    north, west = [c, (5.8, 4.5), (5.0, 6.0)], [c, (2.5, 3.8), (0.0, 3.0)]
    polys = {
        0: [(0, 0), (5, 0), (4.2, 1.5), c, (2.5, 3.8), (0, 3)],
        1: [(5, 0), (10, 0), (10, 3), (7, 2.4), c, (4.2, 1.5)],
        2: [(0, 3), (2.5, 3.8), c, (5.8, 4.5), (5, 6), (0, 6)],
        3: [c, (7, 2.4), (10, 3), (10, 6), (5, 6), (5.8, 4.5)],
    }
    interfaces = [((0, 1), south), ((1, 3), east), ((2, 3), north), ((0, 2), west)]
    return _pack(polys, interfaces, points_per_interface)


def synthetic_10(points_per_interface=12, seed=3):
    rng = np.random.default_rng(seed)
    xs, ys = np.linspace(0, 10, 6), np.linspace(0, 4, 3)
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    grid[1:-1, 1:-1] += rng.uniform(-0.6, 0.6, size=grid[1:-1, 1:-1].shape)
    polys, interfaces = {}, []
    rid = lambda i, j: j * 5 + i  # noqa: E731
    for j in range(2):
        for i in range(5):
            polys[rid(i, j)] = [tuple(grid[i, j]), tuple(grid[i + 1, j]), tuple(grid[i + 1, j + 1]),
                                tuple(grid[i, j + 1])]
    for j in range(2):
        for i in range(4):
            interfaces.append(((rid(i, j), rid(i + 1, j)), [grid[i + 1, j], grid[i + 1, j + 1]]))
    for i in range(5):
        interfaces.append(((rid(i, 0), rid(i, 1)), [grid[i, 1], grid[i + 1, 1]]))
    return _pack(polys, interfaces, points_per_interface)


def _pack(polys, interfaces, count):
    for q, p in polys.items():
        assert Polygon(p).is_valid, q
    return {
        "dims": ["x", "y"],
        "subdomains": [{"id": q, "polygon": [list(map(float, v)) for v in p]} for q, p in sorted(polys.items())],
        "interfaces": [{"owners": list(o), "points": polyline_points(line, count)} for o, line in interfaces],
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, data in (("heat_4.json", heat_4()), ("synthetic_10.json", synthetic_10())):
        (OUT / name).write_text(json.dumps(data, indent=1))
        print("wrote", OUT / name)
