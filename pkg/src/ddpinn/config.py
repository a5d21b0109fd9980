"""YAML run configuration: parsing, defaults, validation and echo.

Layout (every key optional except ``problem`` and ``decomposition``)::

    problem:       {kind: burgers | navier_stokes | heat_inverse, <constants>}
    method:        pinn | cpinn | xpinn
    decomposition: {type: cartesian, nx, ny, domain: [[lo, hi], [lo, hi]], interface_points}
                 | {type: polygon, partition: <json file>}
    defaults:      per-subdomain settings (hidden, activation, scale, learning_rate,
                   weights: {w_u, w_f, w_i, w_iflux, w_if},
                   points: {residual, boundary, interior_data})
    overrides:     {<subdomain id>: partial per-subdomain settings}
    epochs, seed, sampling, precision (32 | 64), inner_steps, batch_size, reshuffle
    transport:     {mode: in-process | socket, timeout, rendezvous}
    output:        {dir, checkpoint_every, log_every, eval_resolution: [nx, ny]}

The echo written to the output directory adds a ``resolved`` list with the
effective settings of every subdomain; it is checked, not trusted, on reload.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import geometry
from .errors import ConfigError, RejectedInput
from .losses import LossWeights
from .network import ACTIVATIONS
from .pde import DEFAULT_LR, PROBLEMS, make_problem

PROBLEM_DEFAULTS = {
    "burgers": {"domain": [[-1.0, 1.0], [0.0, 1.0]], "hidden": [20] * 5,
                "points": {"residual": 1250, "boundary": 50, "interior_data": 0}},
    "navier_stokes": {"domain": [[0.0, 1.0], [0.0, 1.0]], "hidden": [80] * 5,
                      "points": {"residual": 200, "boundary": 50, "interior_data": 0}},
    "heat_inverse": {"domain": [[0.0, 1.0], [0.0, 1.0]], "hidden": [80] * 3,
                     "points": {"residual": 3000, "boundary": 100, "interior_data": 200}},
}
SETTING_KEYS = {"hidden", "activation", "scale", "learning_rate", "weights", "points"}
TOP_KEYS = {"problem", "method", "decomposition", "defaults", "overrides", "epochs", "seed",
            "sampling", "precision", "inner_steps", "batch_size", "reshuffle", "transport",
            "output", "resolved"}


@dataclass
class RunConfig:
    problem: dict
    method: str
    decomposition: dict
    defaults: dict
    overrides: dict = field(default_factory=dict)
    epochs: int = 1000
    seed: int = 0
    sampling: str = "uniform"
    precision: int = 64
    inner_steps: int = 1
    batch_size: int | None = None
    reshuffle: bool = False
    transport: dict = field(default_factory=lambda: {"mode": "in-process", "timeout": 60.0})
    output: dict = field(default_factory=dict)
    n_subdomains: int = 1
    base_dir: str = field(default=".", compare=False)

    @property
    def dtype(self):
        return "float64" if self.precision == 64 else "float32"

    def subdomain(self, q):
        """Effective settings for subdomain ``q`` (defaults merged with its override)."""
        s = copy.deepcopy(self.defaults)
        for k, v in self.overrides.get(q, {}).items():
            if isinstance(v, dict):
                s[k].update(v)
            else:
                s[k] = v
        return s

    def make_problem(self):
        kind = self.problem["kind"]
        return make_problem(kind, **{k: v for k, v in self.problem.items() if k != "kind"})

    def decompose(self):
        """(specs, etov) for the configured decomposition, before point sampling."""
        d = self.decomposition
        if d["type"] == "cartesian":
            dom = geometry.Domain(tuple(tuple(b) for b in d["domain"]))
            return geometry.cartesian_decompose(dom, d["nx"], d["ny"], d["interface_points"])
        specs = geometry.polygon_decompose(self._resolve(d["partition"]))
        return specs, geometry.polygon_etov(specs)

    def _resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def output_dir(self):
        return self._resolve(self.output["dir"])

    def to_dict(self, resolved=True):
        out = {"problem": dict(self.problem), "method": self.method,
               "decomposition": dict(self.decomposition), "defaults": copy.deepcopy(self.defaults),
               "overrides": {int(k): copy.deepcopy(v) for k, v in self.overrides.items()},
               "epochs": self.epochs, "seed": self.seed, "sampling": self.sampling,
               "precision": self.precision, "inner_steps": self.inner_steps,
               "batch_size": self.batch_size, "reshuffle": self.reshuffle,
               "transport": dict(self.transport), "output": dict(self.output)}
        if resolved:
            out["resolved"] = [self.subdomain(q) for q in range(self.n_subdomains)]
        return out

    def echo(self, path=None):
        """Write the fully resolved config as YAML; returns the text."""
        text = yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


# ---------------------------------------------------------------- validation helpers


def _fail(path, msg):
    raise ConfigError(path, msg)


def _mapping(value, path):
    if value is None:
        return {}
    if not isinstance(value, dict):
        _fail(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _int(value, path, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        _fail(path, f"must be >= {lo}, got {value}")
    return value


def _num(value, path, lo=None, strict=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    value = float(value)
    if lo is not None and (value <= lo if strict else value < lo):
        _fail(path, f"must be {'>' if strict else '>='} {lo}, got {value}")
    return value


def _unknown(d, allowed, path):
    extra = set(d) - set(allowed)
    if extra:
        _fail(f"{path}.{sorted(extra)[0]}" if path else sorted(extra)[0], "unknown key")


def _settings(raw, path, partial):
    raw = _mapping(raw, path)
    _unknown(raw, SETTING_KEYS, path)
    out = {}
    if "hidden" in raw:
        h = raw["hidden"]
        if not isinstance(h, list) or not h:
            _fail(f"{path}.hidden", "expected a non-empty list of layer widths")
        out["hidden"] = [_int(w, f"{path}.hidden[{i}]", 1) for i, w in enumerate(h)]
    if "activation" in raw:
        if raw["activation"] not in ACTIVATIONS:
            _fail(f"{path}.activation", f"must be one of {list(ACTIVATIONS)}")
        out["activation"] = raw["activation"]
    if "scale" in raw:
        out["scale"] = _int(raw["scale"], f"{path}.scale", 1)
    if "learning_rate" in raw:
        out["learning_rate"] = _num(raw["learning_rate"], f"{path}.learning_rate", 0.0, strict=True)
    if "weights" in raw:
        w = _mapping(raw["weights"], f"{path}.weights")
        names = LossWeights().to_dict()
        _unknown(w, names, f"{path}.weights")
        out["weights"] = {k: _num(v, f"{path}.weights.{k}", 0.0) for k, v in w.items()}
    if "points" in raw:
        p = _mapping(raw["points"], f"{path}.points")
        _unknown(p, ("residual", "boundary", "interior_data"), f"{path}.points")
        out["points"] = {k: _int(v, f"{path}.points.{k}", 0) for k, v in p.items()}
        if "residual" in out["points"] and out["points"]["residual"] < 1:
            _fail(f"{path}.points.residual", "need at least one residual point")
    if not partial:
        missing = SETTING_KEYS - set(out)
        if missing:
            _fail(f"{path}.{sorted(missing)[0]}", "missing")
    return out


def _defaults(raw, kind):
    base = PROBLEM_DEFAULTS[kind]
    given = _settings(raw, "defaults", partial=True)
    merged = {"hidden": list(base["hidden"]), "activation": "tanh", "scale": 10,
              "learning_rate": DEFAULT_LR[kind], "weights": LossWeights().to_dict(),
              "points": dict(base["points"])}
    for k, v in given.items():
        if isinstance(v, dict):
            merged[k].update(v)
        else:
            merged[k] = v
    return merged


def _decomposition(raw, kind, base_dir):
    d = _mapping(raw, "decomposition")
    typ = d.get("type", "cartesian")
    if typ == "cartesian":
        _unknown(d, ("type", "nx", "ny", "domain", "interface_points"), "decomposition")
        dom = d.get("domain", PROBLEM_DEFAULTS[kind]["domain"])
        if (not isinstance(dom, list) or len(dom) != 2
                or any(not isinstance(b, list) or len(b) != 2 for b in dom)):
            _fail("decomposition.domain", "expected [[lo, hi], [lo, hi]]")
        dom = [[_num(v, f"decomposition.domain[{i}][{j}]") for j, v in enumerate(b)]
               for i, b in enumerate(dom)]
        for i, (lo, hi) in enumerate(dom):
            if not hi > lo:
                _fail(f"decomposition.domain[{i}]", "extent must be positive")
        out = {"type": "cartesian", "nx": _int(d.get("nx", 1), "decomposition.nx", 1),
               "ny": _int(d.get("ny", 1), "decomposition.ny", 1), "domain": dom,
               "interface_points": _int(d.get("interface_points", 20), "decomposition.interface_points", 1)}
        return out, out["nx"] * out["ny"]
    if typ == "polygon":
        _unknown(d, ("type", "partition"), "decomposition")
        if "partition" not in d:
            _fail("decomposition.partition", "missing")
        path = Path(d["partition"])
        full = path if path.is_absolute() else Path(base_dir) / path
        try:
            data = geometry.load_partition(full)
        except FileNotFoundError:
            _fail("decomposition.partition", f"file not found: {full}")
        except RejectedInput as exc:
            _fail("decomposition.partition", str(exc))
        return {"type": "polygon", "partition": str(d["partition"])}, len(data["subdomains"])
    _fail("decomposition.type", f"must be cartesian or polygon, got {typ!r}")


def from_dict(raw, base_dir="."):
    raw = _mapping(raw, "")
    _unknown(raw, TOP_KEYS, "")
    prob = _mapping(raw.get("problem"), "problem")
    kind = prob.get("kind")
    if kind not in PROBLEMS:
        _fail("problem.kind", f"must be one of {sorted(PROBLEMS)}, got {kind!r}")
    try:
        problem = make_problem(kind, **{k: v for k, v in prob.items() if k != "kind"})
    except TypeError as exc:
        _fail("problem", str(exc))
    except RejectedInput as exc:
        _fail("problem", str(exc))
    prob = {"kind": kind, **problem.constants()}

    method = raw.get("method", "xpinn")
    if method not in ("pinn", "cpinn", "xpinn"):
        _fail("method", f"must be pinn, cpinn or xpinn, got {method!r}")
    if "decomposition" not in raw:
        _fail("decomposition", "missing")
    decomp, n_sd = _decomposition(raw["decomposition"], kind, base_dir)
    if method == "pinn" and n_sd != 1:
        _fail("method", f"plain PINN needs a single subdomain, decomposition has {n_sd}")
    if method == "cpinn":
        if decomp["type"] == "polygon":
            _fail("method", "cpinn needs Cartesian interfaces with a fixed normal; use xpinn")
        if problem.dims[1] == "t" and decomp["ny"] > 1:
            _fail("decomposition.ny", "cpinn decomposes space only; split along t requires xpinn")
        if not problem.conservative:
            _fail("method", f"{kind} has no conservative flux; use xpinn")

    defaults = _defaults(raw.get("defaults"), kind)
    overrides = {}
    for key, val in _mapping(raw.get("overrides"), "overrides").items():
        try:
            q = int(key)
        except (TypeError, ValueError):
            _fail(f"overrides.{key}", "subdomain ids are integers")
        if not 0 <= q < n_sd:
            _fail(f"overrides.{key}", f"no subdomain {q}; ids run 0..{n_sd - 1}")
        overrides[q] = _settings(val, f"overrides.{key}", partial=True)

    sampling = raw.get("sampling", "uniform")
    if sampling not in ("uniform", "latin-hypercube"):
        _fail("sampling", "must be uniform or latin-hypercube")
    precision = raw.get("precision", 64)
    if precision not in (32, 64):
        _fail("precision", "must be 32 or 64")
    batch = raw.get("batch_size")
    if batch is not None:
        batch = _int(batch, "batch_size", 1)

    tr = _mapping(raw.get("transport"), "transport")
    _unknown(tr, ("mode", "timeout", "rendezvous"), "transport")
    mode = tr.get("mode", "in-process")
    if mode not in ("in-process", "socket"):
        _fail("transport.mode", "must be in-process or socket")
    transport = {"mode": mode, "timeout": _num(tr.get("timeout", 60.0), "transport.timeout", 0.0, strict=True)}
    if "rendezvous" in tr:
        transport["rendezvous"] = str(tr["rendezvous"])

    out = _mapping(raw.get("output"), "output")
    _unknown(out, ("dir", "checkpoint_every", "log_every", "eval_resolution"), "output")
    res = out.get("eval_resolution", [101, 101])
    if not isinstance(res, list) or len(res) != 2:
        _fail("output.eval_resolution", "expected [nx, ny]")
    output = {"dir": str(out.get("dir", "runs/latest")),
              "checkpoint_every": _int(out.get("checkpoint_every", 0), "output.checkpoint_every", 0),
              "log_every": _int(out.get("log_every", 1), "output.log_every", 1),
              "eval_resolution": [_int(v, f"output.eval_resolution[{i}]", 2) for i, v in enumerate(res)]}

    cfg = RunConfig(problem=prob, method=method, decomposition=decomp, defaults=defaults,
                    overrides=overrides, epochs=_int(raw.get("epochs", 1000), "epochs", 0),
                    seed=_int(raw.get("seed", 0), "seed", 0), sampling=sampling, precision=precision,
                    inner_steps=_int(raw.get("inner_steps", 1), "inner_steps", 1), batch_size=batch,
                    reshuffle=bool(raw.get("reshuffle", False)), transport=transport, output=output,
                    n_subdomains=n_sd, base_dir=str(base_dir))
    if "resolved" in raw and raw["resolved"] != [cfg.subdomain(q) for q in range(n_sd)]:
        _fail("resolved", "does not match defaults merged with overrides")
    return cfg


def parse_config(path):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "file not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return from_dict(raw, base_dir=path.parent)
