"""Residual and flux operators for the bundled problems, plus closed-form oracles.

Jets are passed as ``FieldJets``: a dict from field name to ``Jet2`` whose
derivative slots follow the problem's tracked input dims (x, t) or (x, y).
The same operators accept plain arrays or tape Nodes.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Jet2
from .errors import RejectedInput

BURGERS_NU = 0.01 / math.pi

# learning rates used for each experiment family
DEFAULT_LR = {"burgers": 8e-4, "burgers_profile": 1e-4, "navier_stokes": 6e-4, "heat_inverse": 6e-3}


def _field(jets, name):
    try:
        return jets[name]
    except KeyError:
        raise RejectedInput(f"jets carry no field {name!r}") from None


def burgers_residual(jets, nu):
    """u_t + u u_x - nu u_xx with tracked dims (x, t)."""
    u = _field(jets, "u")
    return u.d(1) + u.value * u.d(0) - nu * u.dd(0)


def burgers_flux(jets, nu):
    """Conservative x-flux of viscous Burgers: u^2/2 - nu u_x."""
    u = _field(jets, "u")
    return 0.5 * (u.value * u.value) - nu * u.d(0)


def ns_residuals(jets, re):
    """(x-momentum, y-momentum, mass) residuals of steady incompressible NS."""
    u, v, p = (_field(jets, k) for k in ("u", "v", "p"))
    x_mom = u.value * u.d(0) + v.value * u.d(1) + p.d(0) - (u.dd(0) + u.dd(1)) / re
    y_mom = u.value * v.d(0) + v.value * v.d(1) + p.d(1) - (v.dd(0) + v.dd(1)) / re
    mass = u.d(0) + v.d(1)
    return x_mom, y_mom, mass


def ns_mass_flux(jets, normal):
    """Mass flux (u, v).n; needs no derivatives."""
    nx, ny = _unit(normal)
    u, v = _field(jets, "u"), _field(jets, "v")
    return u.value * nx + v.value * ny


def ns_fluxes(jets, re, normal):
    """Momentum and mass fluxes dotted with a unit normal.

    x-momentum: (u^2 + p - u_x/Re,  uv - u_y/Re)
    y-momentum: (uv - v_x/Re,       v^2 + p - v_y/Re)
    mass:       (u, v)
    """
    nx, ny = _unit(normal)
    u, v, p = (_field(jets, k) for k in ("u", "v", "p"))
    uv = u.value * v.value
    fx_x = u.value * u.value + p.value - u.d(0) / re
    fx_y = uv - u.d(1) / re
    fy_x = uv - v.d(0) / re
    fy_y = v.value * v.value + p.value - v.d(1) / re
    return fx_x * nx + fx_y * ny, fy_x * nx + fy_y * ny, ns_mass_flux(jets, normal)


def _unit(normal):
    nx, ny = (float(c) for c in normal)
    if abs(math.hypot(nx, ny) - 1.0) > 1e-12:
        raise RejectedInput(f"normal {normal} is not a unit vector")
    return nx, ny


def heat_exact(points):
    """T = 20 exp(-0.1 y), K = 20 + exp(0.1 y) sin(0.5 x)."""
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    return {"T": 20.0 * np.exp(-0.1 * y), "K": 20.0 + np.exp(0.1 * y) * np.sin(0.5 * x)}


def heat_exact_jets(points):
    """Closed-form jets of the exact T and K, tracked dims (x, y)."""
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    em, ep = np.exp(-0.1 * y), np.exp(0.1 * y)
    s, c = np.sin(0.5 * x), np.cos(0.5 * x)
    zero = np.zeros_like(x)
    T = Jet2(20.0 * em, [zero, -2.0 * em], [zero, 0.2 * em])
    K = Jet2(20.0 + ep * s, [0.5 * ep * c, 0.1 * ep * s], [-0.25 * ep * s, 0.01 * ep * s])
    return {"T": T, "K": K}


def _heat_operator(jets):
    T, K = _field(jets, "T"), _field(jets, "K")
    return K.d(0) * T.d(0) + K.value * T.dd(0) + K.d(1) * T.d(1) + K.value * T.dd(1)


def heat_forcing(points):
    """f(x, y) obtained by applying the conduction operator to the exact fields."""
    return _heat_operator(heat_exact_jets(points))


def heat_residual(jets, points):
    """d_x(K T_x) + d_y(K T_y) - f, expanded by the product rule."""
    return _heat_operator(jets) - heat_forcing(points)


# ---------------------------------------------------------------- oracles


def kovasznay_lambda(re):
    return re / 2.0 - math.sqrt(re * re / 4.0 + 4.0 * math.pi ** 2)


def kovasznay_exact(points, re):
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    lam = kovasznay_lambda(re)
    e = np.exp(lam * x)
    return {"u": 1.0 - e * np.cos(2 * np.pi * y),
            "v": lam / (2 * np.pi) * e * np.sin(2 * np.pi * y),
            "p": 0.5 * (1.0 - np.exp(2 * lam * x))}


def kovasznay_jets(points, re):
    """Exact steady NS solution (Kovasznay flow) with hand-derived derivatives."""
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    lam = kovasznay_lambda(re)
    w = 2 * np.pi
    e = np.exp(lam * x)
    cy, sy = np.cos(w * y), np.sin(w * y)
    u = Jet2(1.0 - e * cy, [-lam * e * cy, w * e * sy], [-lam ** 2 * e * cy, w ** 2 * e * cy])
    k = lam / w
    v = Jet2(k * e * sy, [k * lam * e * sy, k * w * e * cy], [k * lam ** 2 * e * sy, -k * w ** 2 * e * sy])
    e2 = np.exp(2 * lam * x)
    zero = np.zeros_like(x)
    p = Jet2(0.5 * (1.0 - e2), [-lam * e2, zero], [-2 * lam ** 2 * e2, zero])
    return {"u": u, "v": v, "p": p}


def burgers_reference(x, t, nu=BURGERS_NU, n_quad=4001, half_width=14.0, chunk=2048):
    """Viscous Burgers with u(x, 0) = -sin(pi x) via the Cole-Hopf integral.

        u = -int sin(pi(x-e)) F(x-e) G(e) de / int F(x-e) G(e) de
        F(y) = exp(-cos(pi y) / (2 pi nu)),  G(e) = exp(-e^2 / (4 nu t))

    evaluated with e = sqrt(4 nu t) z and the trapezoid rule on z in
    [-half_width, half_width], shifting exponents before exponentiating.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
    out = np.empty_like(x)
    z = np.linspace(-half_width, half_width, n_quad)
    at_zero = t <= 0.0
    out[at_zero] = -np.sin(np.pi * x[at_zero])
    idx = np.flatnonzero(~at_zero)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        scale = np.sqrt(4.0 * nu * t[sel])[:, None]
        y = x[sel][:, None] - scale * z[None, :]
        logw = -z[None, :] ** 2 - np.cos(np.pi * y) / (2.0 * np.pi * nu)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        out[sel] = -np.trapezoid(np.sin(np.pi * y) * w, z, axis=1) / np.trapezoid(w, z, axis=1)
    return out


# ---------------------------------------------------------------- problems


class Problem:
    """Bundles a PDE with its fields, jet requirements and training data rules.

    ``networks`` groups the fields by the network that outputs them. Orders are
    the highest input-derivative order a computation needs per network.
    """

    kind = ""
    dims = ("x", "y")
    networks: tuple = ()
    conservative = False

    @property
    def fields(self):
        return tuple(f for group in self.networks for f in group)

    def residual_jet_orders(self):
        raise NotImplementedError

    def interface_jet_orders(self, method):
        if method == "xpinn":
            return self.residual_jet_orders()
        if method == "cpinn":
            return self.flux_jet_orders()
        return [(0, None)] * len(self.networks)

    def flux_jet_orders(self):
        raise RejectedInput(f"{self.kind} has no conservative flux")

    def residuals(self, jets, points):
        raise NotImplementedError

    def fluxes(self, jets, normal):
        raise RejectedInput(f"{self.kind} has no conservative flux; use xpinn")

    def training_data(self, boundary, interior):
        raise NotImplementedError

    def exact(self, points):
        raise RejectedInput(f"no reference solution for {self.kind}")

    def default_lr(self):
        return DEFAULT_LR[self.kind]

    def constants(self):
        return {}


def _empty(dim=2):
    return np.zeros((0, dim)), np.zeros(0)


def _stack(chunks, dim=2):
    if not chunks:
        return _empty(dim)
    pts = np.concatenate([c[0] for c in chunks])
    vals = np.concatenate([c[1] for c in chunks])
    return pts, vals


class Burgers(Problem):
    """u_t + u u_x - nu u_xx = 0 on [-1, 1] x [0, T]; data on x = +-1 and t = 0."""

    kind = "burgers"
    dims = ("x", "t")
    networks = (("u",),)
    conservative = True

    def __init__(self, nu=BURGERS_NU):
        if not nu > 0:
            raise RejectedInput("viscosity must be positive")
        self.nu = float(nu)

    def constants(self):
        return {"nu": self.nu}

    def residual_jet_orders(self):
        return [(2, [0])]

    def flux_jet_orders(self):
        return [(1, None)]

    def residuals(self, jets, points):
        return [burgers_residual(jets, self.nu)]

    def fluxes(self, jets, normal):
        nx, nt = _unit(normal)
        if nt != 0.0:
            raise RejectedInput("Burgers flux continuity only applies across x-interfaces")
        return [burgers_flux(jets, self.nu) * nx]

    def training_data(self, boundary, interior):
        chunks = []
        for edge, pts in boundary:
            if edge.side in ("W", "E"):
                chunks.append((pts, np.zeros(len(pts))))
            elif edge.side == "S":
                chunks.append((pts, -np.sin(np.pi * pts[:, 0])))
            elif edge.side is None:
                raise RejectedInput("Burgers training data needs a Cartesian space-time decomposition")
        return {"u": _stack(chunks)}

    def exact(self, points):
        pts = np.atleast_2d(points)
        return {"u": burgers_reference(pts[:, 0], pts[:, 1], self.nu)}


class NavierStokes(Problem):
    """Steady incompressible NS; ``flow`` is 'cavity' (lid-driven) or 'kovasznay'."""

    kind = "navier_stokes"
    dims = ("x", "y")
    networks = (("u", "v", "p"),)
    conservative = True

    def __init__(self, re=100.0, flow="cavity"):
        if not re > 0:
            raise RejectedInput("Reynolds number must be positive")
        if flow not in ("cavity", "kovasznay"):
            raise RejectedInput(f"unknown flow {flow!r}")
        self.re = float(re)
        self.flow = flow

    def constants(self):
        return {"re": self.re, "flow": self.flow}

    def residual_jet_orders(self):
        return [(2, None)]

    def flux_jet_orders(self):
        return [(1, None)]

    def equation_orders(self, method):
        """Derivative order each interface payload equation needs: (x-mom, y-mom, mass)."""
        return (1, 1, 0) if method == "cpinn" else (2, 2, 1)

    def residuals(self, jets, points):
        return list(ns_residuals(jets, self.re))

    def fluxes(self, jets, normal):
        return list(ns_fluxes(jets, self.re, normal))

    def training_data(self, boundary, interior):
        u_chunks, v_chunks = [], []
        for edge, pts in boundary:
            if self.flow == "kovasznay":
                ex = kovasznay_exact(pts, self.re)
                u_chunks.append((pts, ex["u"]))
                v_chunks.append((pts, ex["v"]))
            else:
                lid = 1.0 if edge.side == "N" else 0.0
                u_chunks.append((pts, np.full(len(pts), lid)))
                v_chunks.append((pts, np.zeros(len(pts))))
        return {"u": _stack(u_chunks), "v": _stack(v_chunks)}

    def exact(self, points):
        if self.flow != "kovasznay":
            return super().exact(points)
        return kovasznay_exact(points, self.re)


class HeatInverse(Problem):
    """Steady conduction with unknown K: T observed inside and on the boundary, K on the boundary."""

    kind = "heat_inverse"
    dims = ("x", "y")
    networks = (("T",), ("K",))

    def residual_jet_orders(self):
        return [(2, None), (1, None)]

    def residuals(self, jets, points):
        return [heat_residual(jets, points)]

    def training_data(self, boundary, interior):
        b_pts = np.concatenate([p for _, p in boundary]) if boundary else np.zeros((0, 2))
        t_pts = np.concatenate([b_pts, interior]) if len(interior) else b_pts
        return {"T": (t_pts, heat_exact(t_pts)["T"]), "K": (b_pts, heat_exact(b_pts)["K"])}

    def exact(self, points):
        return heat_exact(points)


PROBLEMS = {"burgers": Burgers, "navier_stokes": NavierStokes, "heat_inverse": HeatInverse}


def make_problem(kind, **constants):
    try:
        cls = PROBLEMS[kind]
    except KeyError:
        raise RejectedInput(f"unknown problem kind {kind!r}") from None
    return cls(**constants)


def exact_fields(kind, points, **constants):
    """Reference values of every field the problem knows a solution for."""
    return make_problem(kind, **constants).exact(points)
