import socket
import threading
import time

import numpy as np
import pytest
from harness import grid_exchange
from oracles import count_interior_edges

from ddpinn import transport as tr
from ddpinn.errors import DeadlockError, NonFiniteError, ProtocolError


def _pair(method="xpinn", timeout=2.0, jitter=0.0):
    return tr.make_transport("in-process", 2, method, timeout=timeout, jitter=jitter)


def _env(epoch, edge, kind, sender, receiver, values):
    return tr.Envelope(epoch, edge, kind, sender, receiver, np.asarray(values, dtype=float))


def test_null_neighbor_ops_complete_immediately():
    a, _ = _pair()
    s = a.isend(_env(0, 0, tr.SOLUTION, 0, 1, [1.0]), None)
    r = a.irecv(0, 0, tr.SOLUTION, None)
    assert s.done and r.done and r.buffer.size == 0
    assert a.sent == {}
    a.wait_all([])
    a.wait_all([s, r])


def test_ping_pong_and_payload_is_copied():
    a, b = _pair()
    data = np.array([1.0, 2.0, 3.0])
    op = b.irecv(0, 7, tr.SOLUTION, 0)
    a.isend(_env(0, 7, tr.SOLUTION, 0, 1, data), 1)
    data[0] = 99.0
    b.wait_all([op])
    np.testing.assert_array_equal(op.buffer, [1.0, 2.0, 3.0])
    assert not op.buffer.flags.writeable


def test_out_of_order_and_early_epoch_held():
    a, b = _pair()
    a.isend(_env(1, 0, tr.SOLUTION, 0, 1, [1.0]), 1)
    a.isend(_env(0, 0, tr.RESIDUAL, 0, 1, [0.5]), 1)
    a.isend(_env(0, 0, tr.SOLUTION, 0, 1, [0.0]), 1)
    assert b.held_epochs() == [0, 1]
    ops = [b.irecv(0, 0, tr.SOLUTION, 0), b.irecv(0, 0, tr.RESIDUAL, 0)]
    b.wait_all(ops)
    assert [op.buffer[0] for op in ops] == [0.0, 0.5]
    assert b.held_epochs() == [1]
    late = b.irecv(1, 0, tr.SOLUTION, 0)
    b.wait_all([late])
    assert late.buffer[0] == 1.0 and b.held_epochs() == []


def test_duplicate_envelope_is_an_error():
    a, b = _pair()
    a.isend(_env(0, 2, tr.SOLUTION, 0, 1, [1.0]), 1)
    a.isend(_env(0, 2, tr.SOLUTION, 0, 1, [1.0]), 1)
    with pytest.raises(ProtocolError, match="duplicate"):
        b.wait_all([b.irecv(0, 2, tr.SOLUTION, 0)])


def test_duplicate_receive_post_rejected():
    _, b = _pair()
    b.irecv(0, 2, tr.SOLUTION, 0)
    with pytest.raises(ProtocolError):
        b.irecv(0, 2, tr.SOLUTION, 0)


def test_wrong_payload_kind_for_method():
    a, b = _pair("cpinn")
    with pytest.raises(ProtocolError):
        b.irecv(0, 0, tr.RESIDUAL, 0)
    a.isend(_env(0, 0, tr.RESIDUAL, 0, 1, [1.0]), 1)
    with pytest.raises(ProtocolError, match="kind"):
        b.wait_all([b.irecv(0, 0, tr.FLUX, 0)])


def test_unknown_rank_and_non_finite_payload():
    a, _ = _pair()
    with pytest.raises(ProtocolError):
        a.isend(_env(0, 0, tr.SOLUTION, 0, 5, [1.0]), 5)
    with pytest.raises(NonFiniteError) as info:
        a.isend(_env(0, 0, tr.SOLUTION, 0, 1, [1.0, np.nan]), 1)
    assert info.value.index == 1


def test_deadlock_reports_unmatched_keys():
    _, b = _pair(timeout=0.2)
    op = b.irecv(3, 4, tr.SOLUTION, 0)
    with pytest.raises(DeadlockError) as info:
        b.wait_all([op])
    assert info.value.unmatched == [(3, 4, tr.SOLUTION)]


def test_wait_blocks_until_delayed_delivery():
    a, b = _pair()
    op = b.irecv(0, 0, tr.SOLUTION, 0)
    threading.Timer(0.15, lambda: a.isend(_env(0, 0, tr.SOLUTION, 0, 1, [4.0]), 1)).start()
    t0 = time.perf_counter()
    b.wait_all([op])
    assert time.perf_counter() - t0 >= 0.1 and op.buffer[0] == 4.0


def test_barrier_releases_all_ranks():
    ts = tr.make_transport("in-process", 3, timeout=5.0)
    waits = []
    threads = [threading.Thread(target=lambda t=t: waits.append(t.barrier())) for t in ts]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(waits) == 3


def test_unknown_mode():
    with pytest.raises(ProtocolError):
        tr.make_transport("mpi", 2)
    with pytest.raises(ProtocolError):
        tr.make_transport("socket", 2, rank=0)


def test_four_by_three_exchange_conserves_envelopes():
    ts, bad, failures = grid_exchange(4, 3, epochs=2)
    assert not failures and not bad
    per_epoch = 2 * 2 * count_interior_edges(4, 3)
    assert per_epoch == 68
    for e in range(2):
        assert sum(t.sent.get(e, 0) for t in ts) == per_epoch
        assert sum(t.received.get(e, 0) for t in ts) == per_epoch


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_deadlock_free_square_grids_with_jitter(n):
    ts, bad, failures = grid_exchange(n, n, epochs=5, jitter=0.003, seed=n)
    assert not failures and not bad
    assert all(t.held_epochs() == [] for t in ts)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_socket_loopback_exchange():
    addr = f"127.0.0.1:{_free_port()}"
    out, errs = {}, []

    def rank(r):
        try:
            t = tr.make_transport("socket", 3, "cpinn", rank=r, rendezvous=addr, timeout=20.0)
            nb = [(r + 1) % 3, (r + 2) % 3]
            ops = [t.irecv(0, 10 + n, tr.FLUX, n) for n in nb]
            for n in nb:
                t.isend(_env(0, 10 + r, tr.FLUX, r, n, [r, 0.25]), n)
            t.wait_all(ops)
            out[r] = sorted(op.buffer[0] for op in ops)
            t.barrier()
            t.close()
        except Exception as exc:  # noqa: BLE001
            errs.append(exc)

    threads = [threading.Thread(target=rank, args=(r,)) for r in range(3)]
    for th in threads:
        th.start()
    for th in threads:
        th.join(30)
    assert not errs
    assert out == {0: [1.0, 2.0], 1: [0.0, 2.0], 2: [0.0, 1.0]}


def test_socket_single_rank_has_no_peers():
    t = tr.make_transport("socket", 1, rank=0, rendezvous=f"127.0.0.1:{_free_port()}", timeout=5.0)
    assert t.barrier() == 0.0
    assert t.isend(_env(0, 0, tr.SOLUTION, 0, 0, [1.0]), None).done
    t.close()


def test_wire_header_layout():
    frame = tr.HEADER.pack(5, 3, tr.RESIDUAL, 2, 4)
    assert len(frame) == 21
    assert frame[:8] == (5).to_bytes(8, "little") and frame[12] == 2
    with pytest.raises(ProtocolError):
        tr.parse_address("localhost")
