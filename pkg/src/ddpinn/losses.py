"""Per-subdomain loss assembly and global stitching.

Terms may be plain floats/arrays or tape Nodes. Received neighbor buffers are
always plain arrays, so no gradient crosses an interface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ProtocolError, RejectedInput
from .geometry import GEOM_TOL

METHODS = ("pinn", "cpinn", "xpinn")
# payload carried next to the solution values on each interface
SECOND_PAYLOAD = {"cpinn": "flux", "xpinn": "residual"}


@dataclass
class LossWeights:
    w_u: float = 20.0
    w_f: float = 1.0
    w_i: float = 20.0
    w_iflux: float = 20.0
    w_if: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise RejectedInput(f"loss weight {f.name} must be a finite value >= 0, got {v}")

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LossBreakdown:
    mse_u: float
    mse_f: float
    mse_u_avg: float
    mse_iface2: float
    total: float
    epoch: int = 0
    root: object = field(default=None, repr=False, compare=False)


def _len(x):
    return x.value.shape[0] if isinstance(x, ad.Node) else np.shape(x)[0]


def _msq(diff):
    return ad.mean(ad.square(diff)) if isinstance(diff, ad.Node) else float(np.mean(np.square(diff)))


def mse_data(predictions, targets):
    """Mean squared mismatch; an empty set contributes 0."""
    n = _len(predictions)
    if n != len(targets):
        raise RejectedInput(f"{n} predictions vs {len(targets)} targets")
    if n == 0:
        return 0.0
    return _msq(predictions - np.asarray(targets))


def mse_residual(residuals):
    if _len(residuals) == 0:
        return 0.0
    return _msq(residuals)


def _as_fields(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def split_buffer(buffer, lengths):
    """Cut a field-major flat buffer into per-field arrays."""
    buffer = np.asarray(buffer)
    if buffer.size != sum(lengths):
        raise ProtocolError(f"buffer of length {buffer.size}, expected {sum(lengths)}")
    return np.split(buffer, np.cumsum(lengths)[:-1])


def _edge_sum(local, received, epoch, kind, scale):
    total = 0.0
    for edge in sorted(local):
        if edge not in received or received[edge] is None:
            raise ProtocolError("missing neighbor buffer", epoch=epoch, edge=edge, kind=kind)
        loc = _as_fields(local[edge])
        lengths = [_len(x) for x in loc]
        rec = received[edge]
        rec = split_buffer(rec, lengths) if not isinstance(rec, (list, tuple)) else list(rec)
        if [len(r) for r in rec] != lengths:
            raise ProtocolError("payload length mismatch", epoch=epoch, edge=edge, kind=kind)
        for lv, rv in zip(loc, rec):
            total = total + _msq((lv - rv) * scale if scale != 1.0 else lv - rv)
    return total


def mse_u_avg(local, received, epoch=None):
    """Sum over edges of mean |u_q - (u_q + u_nb)/2|^2, i.e. mean |(u_q - u_nb)/2|^2.

    ``local`` maps edge id -> interface values (one array, or a list per field);
    ``received`` maps edge id -> the neighbor's values (flat field-major or list).
    """
    return _edge_sum(local, received, epoch, "solution", 0.5)


def mse_flux_continuity(local, received, epoch=None):
    return _edge_sum(local, received, epoch, "flux", 1.0)


def mse_residual_continuity(local, received, epoch=None):
    return _edge_sum(local, received, epoch, "residual", 1.0)


def _value(x):
    return float(x.value) if isinstance(x, ad.Node) else float(x)


def total_loss(method, mse_u, mse_f, mse_u_avg=0.0, mse_iface2=0.0, weights=None,
               payload_kind=None, epoch=0, has_interfaces=None):
    """Weighted sum of the present terms.

    Interface terms enter only when ``has_interfaces`` (default: when either
    term is nonzero or a Node), so a subdomain without neighbors reduces to the
    plain two-term loss exactly.
    """
    if method not in METHODS:
        raise RejectedInput(f"method must be one of {METHODS}, got {method!r}")
    w = weights or LossWeights()
    if payload_kind is not None and method != "pinn" and payload_kind != SECOND_PAYLOAD[method]:
        raise ProtocolError(f"{method} expects {SECOND_PAYLOAD[method]} payloads, got {payload_kind}",
                            epoch=epoch)
    if has_interfaces is None:
        has_interfaces = any(isinstance(t, ad.Node) or t != 0.0 for t in (mse_u_avg, mse_iface2))
    if method == "pinn" and has_interfaces:
        raise ProtocolError("plain PINN runs carry no interface terms", epoch=epoch)
    total = w.w_u * mse_u + w.w_f * mse_f
    if has_interfaces:
        w2 = w.w_iflux if method == "cpinn" else w.w_if
        total = total + w.w_i * mse_u_avg + w2 * mse_iface2
    return LossBreakdown(_value(mse_u), _value(mse_f), _value(mse_u_avg), _value(mse_iface2),
                         _value(total), epoch, total)


# ---------------------------------------------------------------- stitching


def stitch_weights(point, specs, tol=GEOM_TOL):
    """{subdomain id: weight} with weight 1/S for each of the S regions covering ``point``."""
    p = np.asarray(point, dtype=float)[None, :]
    ids = [s.id for s in specs if s.contains(p, tol)[0]]
    if not ids:
        raise RejectedInput(f"point {tuple(np.ravel(point))} lies outside every subdomain")
    return {q: 1.0 / len(ids) for q in ids}


def stitch(point, predictions, specs, tol=GEOM_TOL):
    """Global value at ``point``: the owner's prediction inside, the 1/S average on interfaces."""
    weights = stitch_weights(point, specs, tol)
    vals = [np.asarray(predictions[q], dtype=float) for q in weights]
    return sum(vals) / len(vals)


def stitch_field(points, predict, specs, tol=GEOM_TOL):
    """Vectorised stitching over many points.

    ``predict(q, pts)`` returns a dict of field arrays for subdomain ``q``.
    """
    pts = np.atleast_2d(points)
    masks = {s.id: s.contains(pts, tol) for s in specs}
    count = sum(m.astype(int) for m in masks.values())
    if np.any(count == 0):
        bad = pts[np.flatnonzero(count == 0)[0]]
        raise RejectedInput(f"point {tuple(bad)} lies outside every subdomain")
    out = {}
    for q, m in masks.items():
        if not m.any():
            continue
        pred = predict(q, pts[m])
        for name, vals in pred.items():
            acc = out.setdefault(name, np.zeros(len(pts)))
            acc[m] += np.asarray(vals) / count[m]
    return out


# ---------------------------------------------------------------- training log

LOG_COLUMNS = ("epoch", "mse_u", "mse_F", "mse_u_avg", "mse_iface2", "total",
               "compute_s", "comm_s", "barrier_s", "wall_s")


class LossLog:
    """Appends one CSV row per epoch."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(LOG_COLUMNS)

    def append(self, b: LossBreakdown, timings=None):
        t = timings
        row = [b.epoch, b.mse_u, b.mse_f, b.mse_u_avg, b.mse_iface2, b.total]
        row += [t.compute, t.comm, t.barrier, t.wall] if t is not None else [0.0] * 4
        self._w.writerow([repr(float(v)) if i else int(v) for i, v in enumerate(row)])

    def close(self):
        self._fh.close()


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in LOG_COLUMNS}
