"""Threaded exchange driver shared by the transport tests."""

import threading

import numpy as np

from ddpinn import geometry, transport


def tagged_payload(epoch, edge, sender, n=3):
    return np.array([epoch, edge, sender] + [0.5] * (n - 3), dtype=float)


def grid_exchange(nx, ny, epochs, jitter=0.0, seed=0, timeout=30.0, method="xpinn"):
    """Every rank sends a solution and a second payload on each live edge per epoch.

    Returns (transports, contamination list, per-rank failures).
    """
    specs, _ = geometry.cartesian_decompose(geometry.Domain(((0.0, nx), (0.0, ny))), nx, ny, interface_points=3)
    second = transport.RESIDUAL if method == "xpinn" else transport.FLUX
    ts = transport.make_transport("in-process", nx * ny, method, timeout=timeout, jitter=jitter, seed=seed)
    bad, failures = [], {}

    def worker(q):
        t, spec = ts[q], specs[q]
        try:
            for e in range(epochs):
                recvs = []
                for itf in spec.interfaces:
                    for kind in (transport.SOLUTION, second):
                        recvs.append((itf, kind, t.irecv(e, itf.edge_id, kind, itf.neighbor)))
                for itf in spec.interfaces:
                    for kind in (transport.SOLUTION, second):
                        env = transport.Envelope(e, itf.edge_id, kind, q, itf.neighbor,
                                                 tagged_payload(e, itf.edge_id, q))
                        t.isend(env, itf.neighbor)
                t.wait_all([op for *_, op in recvs])
                for itf, kind, op in recvs:
                    if list(op.buffer[:3]) != [e, itf.edge_id, itf.neighbor]:
                        bad.append((q, e, itf.edge_id, kind))
                t.barrier()
        except Exception as exc:  # noqa: BLE001
            failures[q] = exc
            t.hub.barrier.abort()

    threads = [threading.Thread(target=worker, args=(q,)) for q in range(nx * ny)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    return ts, bad, failures
