"""Per-subdomain training loop, optimizer and run orchestration."""

from __future__ import annotations

import csv
import sys
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry, losses, network
from .errors import NonFiniteError, ProtocolError, RejectedInput
from .transport import FLUX, RESIDUAL, SOLUTION, Envelope, make_transport

SECOND_KIND = {"cpinn": FLUX, "xpinn": RESIDUAL}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr, dtype=np.float64, **kw):
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), 0, lr, **kw)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update; mutates ``state`` and returns the new parameters."""
    params = np.asarray(params)
    grad = np.asarray(grad)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise RejectedInput(f"length mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteError("gradient is not finite", int(bad[0]))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    return (params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)


@dataclass
class EpochTimings:
    epoch: int
    compute: float = 0.0
    comm: float = 0.0
    barrier: float = 0.0
    wall: float = 0.0


def _slice_jet(jet, sl):
    first = None if jet.first is None else [x[sl] for x in jet.first]
    second = None if jet.second is None else [None if x is None else x[sl] for x in jet.second]
    return ad.Jet2(jet.value[sl], first, second)


def _values(x):
    return np.asarray(x.value if isinstance(x, ad.Node) else x, dtype=np.float64)


@dataclass
class RunState:
    """Everything one worker owns."""

    spec: geometry.SubdomainSpec
    problem: object
    method: str
    archs: list
    params: list
    adam: list
    weights: losses.LossWeights
    epoch: int = 0
    history: list = field(default_factory=list)
    timings: list = field(default_factory=list)


class Worker:
    """Runs the epoch loop for one subdomain.

    Interface payloads per live edge are field-major: solution values of every
    field, then (cPINN) the normal flux of every conservation law or (XPINN) the
    residual of every equation.
    """

    def __init__(self, state: RunState, transport=None, inner_steps=1, batch_size=None,
                 reshuffle=False, seed=0, counter=None):
        self.s = state
        self.transport = transport
        self.inner_steps = inner_steps
        self.batch_size = batch_size
        self.reshuffle = reshuffle
        self.counter = counter
        self._rng = np.random.default_rng(seed)
        self.dtype = np.dtype(state.archs[0].dtype)
        spec = state.spec
        self.edges = sorted(spec.interfaces, key=lambda i: i.edge_id) if state.method != "pinn" else []
        self.live = [itf for itf in self.edges if itf.neighbor is not None]
        if self.live:
            self.iface_pts = np.concatenate([itf.points for itf in self.live]).astype(self.dtype)
            bounds = np.cumsum([0] + [len(itf.points) for itf in self.live])
            self.iface_slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.res_pts = np.asarray(spec.residual_points, dtype=self.dtype)
        if len(self.res_pts) < 1:
            raise RejectedInput(f"subdomain {spec.id} has no residual points")
        self._data = self._group_data()

    # -- set-up helpers
    def _group_data(self):
        """Per network: list of (points, [(output index, field, targets)]) sharing points."""
        groups = []
        for g, names in enumerate(self.s.problem.networks):
            entries = []
            for j, name in enumerate(names):
                if name not in self.s.spec.data:
                    continue
                pts, vals = self.s.spec.data[name]
                if len(pts) == 0:
                    continue
                pts = np.asarray(pts, dtype=self.dtype)
                for e in entries:
                    if e[0].shape == pts.shape and np.array_equal(e[0], pts):
                        e[1].append((j, name, np.asarray(vals, dtype=self.dtype)))
                        break
                else:
                    entries.append((pts, [(j, name, np.asarray(vals, dtype=self.dtype))]))
            groups.append(entries)
        return groups

    def _residual_batch(self, epoch):
        pts = self.res_pts
        if not self.batch_size or self.batch_size >= len(pts):
            return pts
        n_batches = -(-len(pts) // self.batch_size)
        if self.reshuffle:
            idx = self._rng.permutation(len(pts))[:self.batch_size]
            return pts[np.sort(idx)]
        b = epoch % n_batches
        return pts[b * self.batch_size:(b + 1) * self.batch_size]

    def _field_jets(self, tape, bound, points, orders, tag):
        jets = {}
        dims = list(range(len(self.s.problem.dims)))
        for g, names in enumerate(self.s.problem.networks):
            order, second = orders[g]
            out = ad.eval_jet(self.s.params[g], points, dims, order=order, tape=tape, bound=bound[g],
                              counter=self.counter, tag=tag, second_dims=second)
            jets.update(zip(names, out))
        return jets

    # -- one local pass
    def _forward(self, epoch):
        """Tape, bound params, data/residual terms and local interface payloads."""
        s = self.s
        tape = ad.Tape(self.dtype)
        bound = [ad.bind(tape, p) for p in s.params]
        mse_u = 0.0
        for g, entries in enumerate(self._data):
            for pts, targets in entries:
                out = ad.eval_jet(s.params[g], pts, [0, 1], order=0, tape=tape, bound=bound[g],
                                  counter=self.counter, tag="data")
                for j, _, vals in targets:
                    mse_u = mse_u + losses.mse_data(out[j].value, vals)
        pts = self._residual_batch(epoch)
        jets = self._field_jets(tape, bound, pts, s.problem.residual_jet_orders(), "residual")
        mse_f = 0.0
        for r in s.problem.residuals(jets, pts):
            mse_f = mse_f + losses.mse_residual(r)
        sol, second = {}, {}
        if self.live:
            ijets = self._field_jets(tape, bound, self.iface_pts,
                                     s.problem.interface_jet_orders(s.method), "interface")
            for itf, sl in zip(self.live, self.iface_slices):
                local = {k: _slice_jet(v, sl) for k, v in ijets.items()}
                sol[itf.edge_id] = [local[f].value for f in s.problem.fields]
                if s.method == "cpinn":
                    second[itf.edge_id] = s.problem.fluxes(local, itf.normal)
                else:
                    second[itf.edge_id] = s.problem.residuals(local, self.iface_pts[sl])
                self._count_payload(len(itf.points))
        return tape, bound, mse_u, mse_f, sol, second

    def _count_payload(self, n_pts):
        eq_orders = getattr(self.s.problem, "equation_orders", None)
        if self.counter is None or eq_orders is None:
            return
        nd = len(self.s.problem.dims)
        for eq, order in zip(("x_momentum", "y_momentum", "mass"), eq_orders(self.s.method)):
            self.counter.record(f"payload:{eq}", n_pts, 1 + (nd if order >= 1 else 0) + (nd if order >= 2 else 0))

    def _loss(self, epoch, mse_u, mse_f, sol, second, received):
        s = self.s
        if not self.live:
            return losses.total_loss(s.method, mse_u, mse_f, weights=s.weights, epoch=epoch,
                                     has_interfaces=False)
        rec_sol = {e: r[SOLUTION] for e, r in received.items()}
        rec_two = {e: r[SECOND_KIND[s.method]] for e, r in received.items()}
        avg = losses.mse_u_avg(sol, rec_sol, epoch)
        if s.method == "cpinn":
            two = losses.mse_flux_continuity(second, rec_two, epoch)
            kind = "flux"
        else:
            two = losses.mse_residual_continuity(second, rec_two, epoch)
            kind = "residual"
        return losses.total_loss(s.method, mse_u, mse_f, avg, two, s.weights, payload_kind=kind,
                                 epoch=epoch, has_interfaces=True)

    def _step(self, loss, bound):
        grad = ad.backward_params(loss.root, bound)
        pos = 0
        for g, (p, spec) in enumerate(zip(self.s.params, self.s.archs)):
            n = spec.param_count()
            flat = network.pack_params(p)
            try:
                new = adam_step(self.s.adam[g], flat, grad[pos:pos + n])
            except NonFiniteError as exc:
                raise NonFiniteError(f"subdomain {self.s.spec.id} network {g}: {exc}", exc.index) from None
            self.s.params[g] = network.unpack_params(new, spec)
            pos += n

    def _exchange(self, epoch, sol, second):
        tr = self.transport
        kind2 = SECOND_KIND[self.s.method]
        ops, recv = [], {}
        for itf in self.live:
            for kind, payload in ((SOLUTION, sol[itf.edge_id]), (kind2, second[itf.edge_id])):
                buf = np.concatenate([_values(x) for x in payload])
                env = Envelope(epoch, itf.edge_id, kind, self.s.spec.id, itf.neighbor, buf)
                ops.append(tr.isend(env, itf.neighbor))
        for itf in self.live:
            for kind in (SOLUTION, kind2):
                op = tr.irecv(epoch, itf.edge_id, kind, itf.neighbor)
                recv.setdefault(itf.edge_id, {})[kind] = op
                ops.append(op)
        tr.wait_all(ops)
        return {e: {k: op.buffer.astype(self.dtype) for k, op in d.items()} for e, d in recv.items()}

    def train_epoch(self):
        """Jets, payloads, exchange, loss, backward, one Adam step per network."""
        s = self.s
        epoch = s.epoch
        t_start = time.perf_counter()
        tape, bound, mse_u, mse_f, sol, second = self._forward(epoch)
        comm = 0.0
        received = {}
        if self.live:
            if self.transport is None:
                raise ProtocolError("live interfaces but no transport", epoch=epoch)
            t0 = time.perf_counter()
            received = self._exchange(epoch, sol, second)
            comm = time.perf_counter() - t0
        loss = self._loss(epoch, mse_u, mse_f, sol, second, received)
        if not np.isfinite(loss.total):
            raise NonFiniteError(f"subdomain {s.spec.id}: loss is not finite at epoch {epoch}", -1)
        self._step(loss, bound)
        for _ in range(self.inner_steps - 1):
            tape, bound, mse_u, mse_f, sol, second = self._forward(epoch)
            self._step(self._loss(epoch, mse_u, mse_f, sol, second, received), bound)
        loss.root = None
        barrier = self.transport.barrier() if self.transport is not None else 0.0
        wall = time.perf_counter() - t_start
        timings = EpochTimings(epoch, wall - comm - barrier, comm, barrier, wall)
        s.history.append(loss)
        s.timings.append(timings)
        s.epoch += 1
        return loss, timings

    def evaluate_local(self, pts):
        out = {}
        for g, names in enumerate(self.s.problem.networks):
            vals = network.forward(self.s.params[g], np.asarray(pts, dtype=self.dtype))
            out.update({n: vals[:, j].astype(np.float64) for j, n in enumerate(names)})
        return out


def train_epoch(worker: Worker):
    return worker.train_epoch()


# ---------------------------------------------------------------- building workers


def build_states(cfg):
    """Decompose, sample and initialise every subdomain; deterministic in ``cfg.seed``."""
    problem = cfg.make_problem()
    specs, etov = cfg.decompose()
    children = np.random.SeedSequence(cfg.seed).spawn(len(specs))
    states = []
    for spec, child in zip(specs, children):
        q = spec.id
        st = cfg.subdomain(q)
        seeds = [int(s.generate_state(1)[0]) for s in child.spawn(1 + len(problem.networks))]
        pts = st["points"]
        counts = geometry.PointCounts(pts["residual"], pts["boundary"], pts["interior_data"])
        geometry.sample_points(spec, counts, seeds[0], cfg.sampling, problem)
        spec.arch = st
        spec.weights = losses.LossWeights(**st["weights"])
        archs = []
        for g, names in enumerate(problem.networks):
            widths = (len(problem.dims), *st["hidden"], len(names))
            archs.append(network.ArchitectureSpec(widths, st["activation"], seeds[1 + g],
                                                  st["learning_rate"], st["scale"], cfg.dtype))
        params = [network.init(a) for a in archs]
        adam = [AdamState.zeros(a.param_count(), a.learning_rate, np.dtype(cfg.dtype)) for a in archs]
        states.append(RunState(spec, problem, cfg.method, archs, params, adam, spec.weights))
    return states, specs, etov


def make_workers(cfg, transports, counter=None, ranks=None):
    states, specs, etov = build_states(cfg)
    ranks = range(len(states)) if ranks is None else ranks
    workers = {}
    for q in ranks:
        workers[q] = Worker(states[q], transports[q] if transports is not None else None, cfg.inner_steps,
                            cfg.batch_size, cfg.reshuffle, seed=cfg.seed + q, counter=counter)
    return workers, specs, etov


# ---------------------------------------------------------------- evaluation


def eval_grid(cfg, specs, resolution=None):
    nx, ny = resolution or cfg.output["eval_resolution"]
    if cfg.decomposition["type"] == "cartesian":
        (x0, x1), (y0, y1) = cfg.decomposition["domain"]
    else:
        boxes = np.array([s.bbox() for s in specs])
        x0, x1 = boxes[:, 0, 0].min(), boxes[:, 0, 1].max()
        y0, y1 = boxes[:, 1, 0].min(), boxes[:, 1, 1].max()
    X, Y = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = np.zeros(len(pts), dtype=bool)
    for s in specs:
        inside |= s.contains(pts)
    return pts[inside]


def relative_l2(pred, ref):
    pred, ref = np.asarray(pred, float), np.asarray(ref, float)
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise RejectedInput("reference field is identically zero; relative error undefined")
    return float(np.linalg.norm(pred - ref) / norm)


def evaluate(workers, specs, problem, points):
    """Relative L2 error per field of the stitched prediction, plus point-wise absolute errors."""
    ref = problem.exact(points)
    pred = losses.stitch_field(points, lambda q, p: workers[q].evaluate_local(p), specs)
    errors = {k: relative_l2(pred[k], ref[k]) for k in ref}
    pointwise = {k: np.abs(pred[k] - ref[k]) for k in ref}
    return errors, pred, ref, pointwise


# ---------------------------------------------------------------- run


@dataclass
class RunResult:
    workers: dict
    specs: list
    etov: dict
    errors: dict = field(default_factory=dict)
    output_dir: Path | None = None
    failures: dict = field(default_factory=dict)
    loop_seconds: float = 0.0

    def trace(self, q, column="total"):
        return np.array([getattr(b, column) for b in self.workers[q].s.history])


def _loop(cfg, worker, log, out_dir, epochs):
    q = worker.s.spec.id
    every = cfg.output["checkpoint_every"]
    for _ in range(epochs):
        b, t = worker.train_epoch()
        if log is not None and b.epoch % cfg.output["log_every"] == 0:
            log.append(b, t)
        if out_dir is not None and every and worker.s.epoch % every == 0:
            _checkpoint(worker, out_dir)


def _checkpoint(worker, out_dir):
    s = worker.s
    for g, (p, a) in enumerate(zip(s.params, s.archs)):
        network.save_checkpoint(Path(out_dir) / "checkpoints" / f"rank{s.spec.id:03d}_net{g}_epoch{s.epoch:07d}.ckpt",
                                p, a, rank=s.spec.id, network=g, epoch=s.epoch,
                                fields=list(s.problem.networks[g]))


def run(cfg, write=True, counter=None, transport_mode=None, ranks=None, rank=None, jitter=0.0,
        epochs=None):
    """Train every subdomain (in-process) or this process's rank (socket mode).

    Writes ``config.yaml``, ``loss_rank<q>.csv``, checkpoints and, when a reference
    solution exists, a stitched field export with error columns.
    """
    mode = transport_mode or cfg.transport["mode"]
    epochs = cfg.epochs if epochs is None else epochs
    n = cfg.n_subdomains
    timeout = cfg.transport["timeout"]
    if mode == "in-process":
        transports = make_transport("in-process", n, cfg.method, timeout=timeout, jitter=jitter, seed=cfg.seed)
        ranks = list(range(n)) if ranks is None else ranks
    else:
        if rank is None:
            raise ProtocolError("socket mode needs this process's rank")
        tr = make_transport("socket", n, cfg.method, rank=rank, rendezvous=cfg.transport.get("rendezvous"),
                            timeout=timeout)
        transports = {rank: tr}
        ranks = [rank]
    workers, specs, etov = make_workers(cfg, transports, counter, ranks)
    out_dir = cfg.output_dir() if write else None
    logs = {}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if 0 in workers:
            cfg.echo(out_dir / "config.yaml")
        for q, w in workers.items():
            logs[q] = losses.LossLog(out_dir / f"loss_rank{q:03d}.csv")
            _checkpoint(w, out_dir)
    result = RunResult(workers, specs, etov, output_dir=out_dir)

    def target(q):
        try:
            _loop(cfg, workers[q], logs.get(q), out_dir, epochs)
        except BaseException as exc:  # noqa: BLE001 - reported per rank below
            result.failures[q] = f"rank {q}: {type(exc).__name__}: {exc}\n{traceback.format_exc()}"
            # unblock peers waiting at the barrier
            hub = getattr(workers[q].transport, "hub", None)
            if hub is not None:
                hub.barrier.abort()

    # in-process workers only yield at waits; long GIL slices avoid needless switching
    old_switch = sys.getswitchinterval()
    if len(ranks) > 1:
        sys.setswitchinterval(1.0)
    t_loop = time.perf_counter()
    try:
        if len(ranks) == 1:
            target(ranks[0])
        else:
            threads = [threading.Thread(target=target, args=(q,), name=f"rank{q}") for q in ranks]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        result.loop_seconds = time.perf_counter() - t_loop
        sys.setswitchinterval(old_switch)
        for log in logs.values():
            log.close()
        if mode == "socket":
            transports[rank].close()
    if result.failures:
        # report the root cause first: the earliest failure that is not a broken barrier
        first = sorted(result.failures.items(), key=lambda kv: "BrokenBarrier" in kv[1] or "Deadlock" in kv[1])
        raise RunFailed(dict(first))
    if out_dir is not None:
        if cfg.output["checkpoint_every"] == 0 or any(w.s.epoch % cfg.output["checkpoint_every"] for w in workers.values()):
            for w in workers.values():
                if w.s.epoch > 0:
                    _checkpoint(w, out_dir)
        if len(workers) == n:
            export_fields(cfg, result)
    return result


class RunFailed(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        super().__init__("\n".join(failures.values()))


def export_fields(cfg, result, path=None):
    """Stitched fields on the evaluation grid; error columns when a reference exists."""
    problem = cfg.make_problem()
    pts = eval_grid(cfg, result.specs)
    pred = losses.stitch_field(pts, lambda q, p: result.workers[q].evaluate_local(p), result.specs)
    try:
        ref = problem.exact(pts)
    except RejectedInput:
        ref = {}
    if ref:
        result.errors = {k: relative_l2(pred[k], ref[k]) for k in ref}
    path = Path(path) if path else result.output_dir / "fields.csv"
    names = list(problem.dims) + list(pred) + [f"{k}_abs_err" for k in ref]
    cols = [pts[:, 0], pts[:, 1]] + [pred[k] for k in pred] + [np.abs(pred[k] - ref[k]) for k in ref]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(np.column_stack(cols).tolist())
    return path
