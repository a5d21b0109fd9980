"""Command line entry point: ``ddpinn {train,eval,bench,decompose,export}``."""

from __future__ import annotations

import argparse
import copy
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics, network, plotting, solver
from .errors import ConfigError, ProtocolError, RejectedInput
from .transport import RENDEZVOUS_ENV

_CKPT = re.compile(r"rank(\d+)_net(\d+)_epoch(\d+)\.ckpt$")


def _load(args):
    cfg = cfgmod.parse_config(args.config)
    if getattr(args, "output", None):
        cfg.output["dir"] = str(Path(args.output).resolve())
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def _plots(cfg, result):
    out = result.output_dir
    logs = sorted(out.glob("loss_rank*.csv"))
    if logs:
        plotting.loss_curves(logs, out / "loss.png")
    fields = out / "fields.csv"
    if fields.exists():
        data = np.genfromtxt(fields, delimiter=",", names=True)
        names = data.dtype.names
        pts = np.column_stack([data[names[0]], data[names[1]]])
        outlines = plotting.subdomain_outlines(result.specs)
        pred = {n: data[n] for n in names[2:] if not n.endswith("_abs_err")}
        plotting.field_contours(pts, pred, out / "fields.png", names[:2], outlines)
        errs = {n: data[n] for n in names[2:] if n.endswith("_abs_err")}
        if errs:
            plotting.field_contours(pts, errs, out / "errors.png", names[:2], outlines)


def cmd_train(args):
    cfg = _load(args)
    if args.rank is not None:
        if args.world_size is not None and args.world_size != cfg.n_subdomains:
            raise ConfigError("transport", f"world size {args.world_size} != {cfg.n_subdomains} subdomains")
        cfg.transport["mode"] = "socket"
        rendezvous = args.rendezvous or os.environ.get(RENDEZVOUS_ENV) or cfg.transport.get("rendezvous")
        if rendezvous is None:
            raise ConfigError("transport.rendezvous", f"socket mode needs --rendezvous or ${RENDEZVOUS_ENV}")
        cfg.transport["rendezvous"] = rendezvous
        result = solver.run(cfg, rank=args.rank)
    else:
        result = solver.run(cfg)
        if not args.no_plots:
            _plots(cfg, result)
    summary = {"epochs": cfg.epochs, "output": str(result.output_dir),
               "final_total": {q: w.s.history[-1].total for q, w in result.workers.items() if w.s.history},
               "relative_l2": result.errors}
    print(json.dumps(summary, indent=2))
    return 0


def load_workers(cfg, ckpt_dir=None):
    """Rebuild every subdomain and load its latest checkpoint."""
    workers, specs, etov = solver.make_workers(cfg, None)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir else cfg.output_dir() / "checkpoints"
    latest = {}
    for p in ckpt_dir.glob("*.ckpt"):
        m = _CKPT.search(p.name)
        if m:
            q, g, e = map(int, m.groups())
            if e >= latest.get((q, g), (-1, None))[0]:
                latest[(q, g)] = (e, p)
    for q, w in workers.items():
        for g in range(len(w.s.params)):
            if (q, g) not in latest:
                raise RejectedInput(f"no checkpoint for rank {q} network {g} in {ckpt_dir}")
            params, arch, _ = network.load_checkpoint(latest[(q, g)][1])
            if arch.widths != w.s.archs[g].widths:
                raise RejectedInput(f"checkpoint for rank {q} network {g} has widths {arch.widths}")
            w.s.params[g] = params
            w.s.epoch = latest[(q, g)][0]
    return solver.RunResult(workers, specs, etov, output_dir=cfg.output_dir())


def cmd_eval(args):
    cfg = _load(args)
    result = load_workers(cfg, args.checkpoints)
    pts = solver.eval_grid(cfg, result.specs)
    errors, *_ = solver.evaluate(result.workers, result.specs, cfg.make_problem(), pts)
    print(json.dumps({"relative_l2": errors, "points": int(len(pts))}, indent=2))
    return 0


def cmd_export(args):
    cfg = _load(args)
    result = load_workers(cfg, args.checkpoints)
    result.output_dir.mkdir(parents=True, exist_ok=True)
    path = solver.export_fields(cfg, result)
    _plots(cfg, result)
    print(json.dumps({"fields": str(path), "relative_l2": result.errors}, indent=2))
    return 0


def cmd_decompose(args):
    cfg = _load(args)
    specs, etov = cfg.decompose()
    out = {"n_subdomains": len(specs), "etov": {str(k): v for k, v in etov.items()}, "subdomains": []}
    for s in specs:
        out["subdomains"].append({
            "id": s.id,
            "cell": s.cell, "polygon": None if s.polygon is None else np.asarray(s.polygon).tolist(),
            "neighbors": s.neighbors,
            "interfaces": [{"edge": i.edge_id, "neighbor": i.neighbor, "points": len(i.points)}
                           for i in s.interfaces],
            "boundary_edges": [e.edge_id for e in s.boundary_edges]})
    text = json.dumps(out, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0


def _bench_config(cfg, workers, mode):
    c = copy.deepcopy(cfg)
    d = c.decomposition
    if d["type"] != "cartesian":
        raise ConfigError("decomposition.type", "bench needs a Cartesian decomposition")
    (x0, x1), y = d["domain"]
    d["nx"], d["ny"] = workers, 1
    if mode == "weak":
        # constant load per worker: widen the domain with the worker count
        d["domain"] = [[x0, x0 + workers * (x1 - x0)], y]
    else:
        total = cfg.defaults["points"]["residual"]
        c.defaults["points"]["residual"] = max(1, total // workers)
    c.overrides = {}
    c.n_subdomains = workers
    if c.method == "pinn" and workers > 1:
        c.method = "xpinn"
    return c


def run_bench(cfg, worker_counts, repeats, mode, epochs):
    records = []
    for n in worker_counts:
        c = _bench_config(cfg, n, mode)
        times, comp, comm = [], [], []
        for rep in range(repeats):
            res = solver.run(c, write=False, epochs=epochs)
            times.append(res.loop_seconds)
            tim = [t for w in res.workers.values() for t in w.s.timings]
            comp.append(sum(t.compute for t in tim) / len(tim))
            comm.append(sum(t.comm for t in tim) / len(tim))
        pts = sum(len(w.s.spec.residual_points) for w in res.workers.values()) * epochs
        records.append(metrics.ScalingRecord(n, times, pts, c.method, "in-process", comp, comm))
    return metrics.scaling_table(records, mode)


def cmd_bench(args):
    cfg = _load(args)
    out = Path(args.output or cfg.output_dir() / "bench")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(cfg, args.workers, args.repeats, args.mode, args.epochs or 20)
    report = metrics.write_report(rows, out / f"{args.mode}_scaling.csv")
    plotting.scaling_plot(rows, out / f"{args.mode}_scaling.png")
    for r in rows:
        print(f"workers={r['workers']:3d}  median={r['median_s']:.4f}s  efficiency={r['efficiency']:.3f}")
    cores = os.cpu_count() or 1
    worst = min(r["efficiency"] for r in rows)
    if cores >= max(args.workers):
        verdict = "PASS" if worst >= args.threshold else "FAIL"
        print(f"{verdict}: min efficiency {worst:.3f} vs threshold {args.threshold}")
    else:
        print(f"threshold {args.threshold} not applied: {cores} core(s) < {max(args.workers)} workers")
    print(f"report: {report}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ddpinn", description="Domain-decomposed PINN training engine.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML run configuration")
        sp.add_argument("--output", help="override the output directory")

    t = sub.add_parser("train", help="train all subdomains (or one rank in socket mode)")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--rank", type=int, help="socket mode: this process's rank")
    t.add_argument("--world-size", type=int, help="socket mode: number of ranks")
    t.add_argument("--rendezvous", help=f"socket mode: host:port of rank 0 (or ${RENDEZVOUS_ENV})")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "relative L2 error of saved checkpoints"),
                            ("export", cmd_export, "stitched field CSV and figures from checkpoints")):
        e = sub.add_parser(name, help=help_)
        common(e)
        e.add_argument("--checkpoints", help="checkpoint directory (default: <output>/checkpoints)")
        e.set_defaults(func=fn)

    b = sub.add_parser("bench", help="weak or strong scaling report")
    common(b)
    b.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--mode", choices=("weak", "strong"), default="weak")
    b.add_argument("--epochs", type=int, help="timed epochs per run (default 20)")
    b.add_argument("--threshold", type=float, default=0.6)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("decompose", help="print the decomposition as JSON")
    common(d)
    d.set_defaults(func=cmd_decompose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except solver.RunFailed as exc:
        print(f"run failed:\n{exc}", file=sys.stderr)
        return 1
    except (RejectedInput, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
