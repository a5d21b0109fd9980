import threading
import time
from pathlib import Path

import numpy as np
import pytest

from ddpinn import config, losses, network, solver
from ddpinn.errors import NonFiniteError, RejectedInput
from ddpinn.transport import make_transport


def tiny(method="xpinn", nx=2, ny=2, epochs=5, out=None, **extra):
    raw = {"problem": {"kind": "burgers"}, "method": method,
           "decomposition": {"nx": nx, "ny": ny, "domain": [[-1, 1], [0, 1]], "interface_points": 6},
           "defaults": {"hidden": [6, 6], "points": {"residual": 40, "boundary": 10}},
           "epochs": epochs, "seed": 5,
           "output": {"dir": str(out or "unused"), "eval_resolution": [11, 6]}, **extra}
    return config.from_dict(raw)


def test_adam_zero_gradient():
    st = solver.AdamState.zeros(3, 0.1)
    p = np.array([1.0, -2.0, 0.5])
    new = solver.adam_step(st, p, np.zeros(3))
    assert np.array_equal(new, p) and st.t == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-9])
    st = solver.AdamState.zeros(3, 1e-2)
    new = solver.adam_step(st, np.zeros(3), g)
    np.testing.assert_allclose(new, -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_converges_on_square():
    st = solver.AdamState.zeros(1, 0.1)
    w, trace = np.array([3.0]), []
    for _ in range(100):
        w = solver.adam_step(st, w, 2 * w)
        trace.append(abs(w[0]))
    assert all(b < a for a, b in zip(trace[:20], trace[1:21]))
    assert trace[-1] < 0.5


def test_adam_rejects_bad_gradients():
    st = solver.AdamState.zeros(3, 0.1)
    with pytest.raises(NonFiniteError) as info:
        solver.adam_step(st, np.zeros(3), np.array([0.0, 0.0, np.inf]))
    assert info.value.index == 2 and st.t == 0
    with pytest.raises(RejectedInput):
        solver.adam_step(st, np.zeros(3), np.zeros(2))


def _epoch_all(workers):
    errs = []

    def go(w):
        try:
            w.train_epoch()
        except Exception as exc:  # noqa: BLE001
            errs.append(exc)
    ths = [threading.Thread(target=go, args=(w,)) for w in workers.values()]
    for t in ths:
        t.start()
    for t in ths:
        t.join()
    assert not errs, errs


@pytest.mark.parametrize("method", ["cpinn", "xpinn"])
def test_twin_networks_have_zero_interface_terms(method):
    cfg = tiny(method, nx=2, ny=1)
    workers, _, _ = solver.make_workers(cfg, make_transport("in-process", 2, method, timeout=10))
    workers[1].s.params = [network.unpack_params(network.pack_params(p), a)
                           for p, a in zip(workers[0].s.params, workers[0].s.archs)]
    _epoch_all(workers)
    for w in workers.values():
        b = w.s.history[0]
        assert b.mse_u_avg == 0.0 and b.mse_iface2 == 0.0


def test_distinct_networks_have_nonzero_interface_terms():
    cfg = tiny("cpinn", nx=2, ny=1)
    workers, _, _ = solver.make_workers(cfg, make_transport("in-process", 2, "cpinn", timeout=10))
    _epoch_all(workers)
    a, b = (w.s.history[0] for w in workers.values())
    assert a.mse_u_avg > 0 and a.mse_u_avg == b.mse_u_avg
    assert a.mse_iface2 == b.mse_iface2 > 0


def test_single_subdomain_methods_coincide():
    traces = {}
    for m in ("pinn", "cpinn", "xpinn"):
        res = solver.run(tiny(m, nx=1, ny=1, epochs=8), write=False)
        traces[m] = [(b.mse_u, b.mse_f, b.total) for b in res.workers[0].s.history]
        assert all(b.mse_u_avg == 0.0 and b.mse_iface2 == 0.0 for b in res.workers[0].s.history)
    assert traces["pinn"] == traces["cpinn"] == traces["xpinn"]


def test_history_and_loss_decrease():
    res = solver.run(tiny(epochs=40), write=False)
    for q in range(4):
        tr = res.trace(q)
        assert len(tr) == 40 and tr[-1] < tr[0]


def test_run_is_deterministic(tmp_path):
    a = solver.run(tiny(epochs=6, out=tmp_path / "a"))
    b = solver.run(tiny(epochs=6, out=tmp_path / "b"))
    for q in range(4):
        la = losses.read_log(tmp_path / "a" / f"loss_rank{q:03d}.csv")
        lb = losses.read_log(tmp_path / "b" / f"loss_rank{q:03d}.csv")
        for col in ("epoch", "mse_u", "mse_F", "mse_u_avg", "mse_iface2", "total"):
            assert np.array_equal(la[col], lb[col])
    assert a.errors == b.errors


def test_zero_epoch_artifacts(tmp_path):
    res = solver.run(tiny(epochs=0, out=tmp_path))
    for q in range(4):
        lines = (tmp_path / f"loss_rank{q:03d}.csv").read_text().splitlines()
        assert lines == [",".join(losses.LOG_COLUMNS)]
        for g in range(len(res.workers[q].s.params)):
            assert (tmp_path / "checkpoints" / f"rank{q:03d}_net{g}_epoch0000000.ckpt").exists()
    assert (tmp_path / "config.yaml").exists() and (tmp_path / "fields.csv").exists()


def test_checkpoint_interval(tmp_path):
    cfg = tiny(epochs=5, out=tmp_path)
    cfg.output["checkpoint_every"] = 2
    solver.run(cfg)
    names = sorted(p.name for p in (tmp_path / "checkpoints").glob("rank000_*"))
    assert names == [f"rank000_net0_epoch{e:07d}.ckpt" for e in (0, 2, 4, 5)]


def test_inner_steps_take_extra_updates():
    one = solver.run(tiny(epochs=3), write=False)
    two = solver.run(tiny(epochs=3, inner_steps=2), write=False)
    assert all(w.s.adam[0].t == 3 for w in one.workers.values())
    assert all(w.s.adam[0].t == 6 for w in two.workers.values())


def test_minibatch_cycles_deterministically():
    res = solver.run(tiny(epochs=4, batch_size=16), write=False)
    assert len(res.trace(0)) == 4


def test_timing_accounts_for_wall_time():
    cfg = tiny(nx=1, ny=1, epochs=1)
    workers, _, _ = solver.make_workers(cfg, make_transport("in-process", 1, timeout=10))
    w = workers[0]
    for _ in range(20):
        t0 = time.perf_counter()
        _, t = w.train_epoch()
        outside = time.perf_counter() - t0
        assert t.compute >= 0 and t.comm >= 0 and t.barrier >= 0
        assert abs(t.compute + t.comm + t.barrier - outside) <= 0.05 * outside


def test_evaluate_examples():
    assert solver.relative_l2([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert solver.relative_l2([0.0, 0.0], [3.0, -4.0]) == 1.0
    with pytest.raises(RejectedInput):
        solver.relative_l2([1.0], [0.0])
    res = solver.run(tiny(epochs=0), write=False)
    pts = solver.eval_grid(tiny(), res.specs, (9, 5))
    errors, pred, ref, pw = solver.evaluate(res.workers, res.specs, res.workers[0].s.problem, pts)
    assert set(errors) == {"u"} and errors["u"] > 0
    np.testing.assert_array_equal(pw["u"], np.abs(pred["u"] - ref["u"]))


def test_evaluate_without_reference():
    cfg = config.from_dict({"problem": {"kind": "navier_stokes"}, "decomposition": {"nx": 1, "ny": 1},
                            "defaults": {"hidden": [4], "points": {"residual": 10, "boundary": 4}}})
    res = solver.run(cfg, write=False, epochs=0)
    with pytest.raises(RejectedInput):
        solver.evaluate(res.workers, res.specs, cfg.make_problem(), np.array([[0.5, 0.5]]))


def test_worker_failure_is_rank_tagged(monkeypatch):
    cfg = tiny(epochs=3)
    cfg.transport["timeout"] = 5.0
    real = solver.Worker.train_epoch

    def flaky(self):
        if self.s.spec.id == 2 and self.s.epoch == 1:
            raise NonFiniteError("boom", 0)
        return real(self)
    monkeypatch.setattr(solver.Worker, "train_epoch", flaky)
    with pytest.raises(solver.RunFailed) as info:
        solver.run(cfg, write=False)
    assert str(info.value).startswith("rank 2: NonFiniteError")


def test_heat_inverse_two_networks_train():
    raw = {"problem": {"kind": "heat_inverse"},
           "decomposition": {"type": "polygon", "partition": "partitions/heat_4.json"},
           "defaults": {"hidden": [8, 8], "points": {"residual": 60, "boundary": 20, "interior_data": 20}},
           "overrides": {1: {"activation": "sin"}, 2: {"activation": "cos"}}, "epochs": 3}
    cfg = config.from_dict(raw, base_dir=Path(__file__).resolve().parent.parent / "configs")
    res = solver.run(cfg, write=False)
    assert all(len(w.s.params) == 2 and len(w.s.adam) == 2 for w in res.workers.values())
    assert res.workers[2].s.archs[0].activation == "cos"
    assert all(b.mse_iface2 > 0 for w in res.workers.values() for b in w.s.history)
