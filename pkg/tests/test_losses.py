import itertools

import numpy as np
import pytest
from oracles import cole_hopf_jets

from ddpinn import autodiff as ad
from ddpinn import geometry, losses, pde
from ddpinn.errors import ProtocolError, RejectedInput
from ddpinn.solver import EpochTimings


def test_mse_data_examples():
    assert losses.mse_data(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert losses.mse_data(np.zeros(2), np.array([1.0, 3.0])) == 5.0
    assert losses.mse_data(np.zeros(0), np.zeros(0)) == 0.0
    with pytest.raises(RejectedInput):
        losses.mse_data(np.zeros(2), np.zeros(3))


def test_mse_residual_empty_and_value():
    assert losses.mse_residual(np.zeros(0)) == 0.0
    assert losses.mse_residual(np.array([3.0, 4.0])) == 12.5


def test_solution_average_terms():
    assert losses.mse_u_avg({0: np.array([1.0, -2.0])}, {0: np.array([1.0, -2.0])}) == 0.0
    assert losses.mse_u_avg({0: np.array([1.0])}, {0: np.array([3.0])}) == 1.0
    two = losses.mse_u_avg({0: np.array([1.0]), 5: np.array([0.0])},
                           {0: np.array([3.0]), 5: np.array([-2.0])})
    assert two == 2.0


def test_symmetric_mismatch_is_equal_on_both_sides():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert losses.mse_u_avg({1: a}, {1: b}) == losses.mse_u_avg({1: b}, {1: a})


def test_flux_and_residual_continuity_examples():
    assert losses.mse_flux_continuity({0: np.full(4, 0.7)}, {0: np.full(4, 0.7)}) == 0.0
    assert losses.mse_flux_continuity({0: np.array([1.5])}, {0: np.array([0.5])}) == 1.0
    assert losses.mse_residual_continuity({0: np.array([2.0])}, {0: np.array([0.0])}) == 4.0


def test_continuity_with_oracle_on_both_sides():
    pts = np.column_stack([np.full(20, 0.2), np.linspace(0.05, 0.95, 20)])
    flux = lambda: list(pde.ns_fluxes(pde.kovasznay_jets(pts, 20.0), 20.0, (1.0, 0.0)))  # noqa: E731
    assert losses.mse_flux_continuity({3: flux()}, {3: np.concatenate(flux())}) <= 1e-12
    res = lambda: pde.burgers_residual(cole_hopf_jets(pts, 0.05), 0.05)  # noqa: E731
    assert losses.mse_residual_continuity({3: res()}, {3: res()}) <= 1e-12


def test_multi_field_buffer_is_field_major():
    local = {2: [np.array([1.0, 1.0]), np.array([0.0])]}
    # neighbor u=(3,3), v=(2): average mismatch 1 on u and 1 on v
    assert losses.mse_u_avg(local, {2: np.array([3.0, 3.0, 2.0])}) == 2.0
    with pytest.raises(ProtocolError):
        losses.mse_u_avg(local, {2: np.array([3.0, 3.0])})


def test_missing_neighbor_buffer():
    with pytest.raises(ProtocolError) as info:
        losses.mse_u_avg({4: np.ones(2)}, {}, epoch=7)
    assert info.value.edge == 4 and info.value.epoch == 7


def test_total_loss_examples():
    zero = losses.LossWeights(0, 0, 0, 0, 0)
    assert losses.total_loss("xpinn", 1.0, 2.0, 3.0, 4.0, zero).total == 0.0
    w = losses.LossWeights(w_u=1, w_f=1, w_i=20, w_iflux=20, w_if=20)
    b = losses.total_loss("cpinn", 0.1, 0.2, 0.01, 0.02, w)
    assert b.total == pytest.approx(0.9, abs=1e-15)


def test_single_subdomain_reduces_to_two_terms():
    for method in losses.METHODS:
        b = losses.total_loss(method, 0.3, 0.7, has_interfaces=False)
        assert b.total == 20 * 0.3 + 1 * 0.7


def test_payload_kind_checked():
    with pytest.raises(ProtocolError):
        losses.total_loss("cpinn", 0.1, 0.2, 0.0, 0.0, payload_kind="residual")
    with pytest.raises(ProtocolError):
        losses.total_loss("pinn", 0.1, 0.2, 0.5, 0.0)
    with pytest.raises(RejectedInput):
        losses.total_loss("dpinn", 0.1, 0.2)


def test_negative_weight_rejected():
    with pytest.raises(RejectedInput):
        losses.LossWeights(w_u=-1.0)
    with pytest.raises(RejectedInput):
        losses.LossWeights(w_f=float("nan"))


def test_total_loss_on_tape_backpropagates():
    tape = ad.Tape()
    w = tape.leaf(np.array([1.0, 2.0]))
    b = losses.total_loss("xpinn", ad.mean(ad.square(w)), 0.0, ad.mean(w), 0.0)
    assert b.total == 20 * 2.5 + 20 * 1.5
    (g,) = tape.gradients(b.root, [w])
    np.testing.assert_allclose(g, 20 * np.array([1.0, 2.0]) + 20 * 0.5)


_GRID, _ = geometry.cartesian_decompose(geometry.Domain(((0.0, 2.0), (0.0, 1.0))), 2, 2)


def test_stitch_examples():
    preds = {0: 1.0, 1: 2.0, 2: 3.0, 3: 4.0}
    assert losses.stitch((0.25, 0.25), preds, _GRID) == 1.0
    assert losses.stitch((1.0, 0.25), {0: 1.0, 1: 3.0}, _GRID) == 2.0
    assert losses.stitch((1.0, 0.5), preds, _GRID) == 2.5
    with pytest.raises(RejectedInput):
        losses.stitch((3.0, 0.5), preds, _GRID)


def test_partition_of_unity_exact():
    xs = [0.0, 0.3, 1.0, 1.7, 2.0]
    ys = [0.0, 0.2, 0.5, 0.9, 1.0]
    for nx, ny in ((1, 1), (2, 2), (4, 3)):
        specs, _ = geometry.cartesian_decompose(geometry.Domain(((0.0, 2.0), (0.0, 1.0))), nx, ny)
        for p in itertools.product(xs, ys):
            w = losses.stitch_weights(p, specs)
            assert sum(w.values()) == 1.0
    w = losses.stitch_weights((1.0, 0.5), _GRID)
    assert w == {0: 0.25, 1: 0.25, 2: 0.25, 3: 0.25}


def test_stitch_field_matches_pointwise():
    pts = np.array([[0.25, 0.25], [1.0, 0.25], [1.0, 0.5], [1.5, 0.9]])
    out = losses.stitch_field(pts, lambda q, p: {"u": np.full(len(p), q + 1.0)}, _GRID)
    ref = [losses.stitch(p, {q: q + 1.0 for q in range(4)}, _GRID) for p in pts]
    np.testing.assert_array_equal(out["u"], ref)


def test_log_roundtrip(tmp_path):
    log = losses.LossLog(tmp_path / "loss.csv")
    for e in range(3):
        log.append(losses.LossBreakdown(0.1 * e, 0.2, 0.0, 0.0, 1.0 / 3 + e, e),
                   EpochTimings(e, 0.01, 0.002, 0.0, 0.012))
    log.close()
    data = losses.read_log(tmp_path / "loss.csv")
    assert list(data) == list(losses.LOG_COLUMNS)
    assert data["total"][0] == 1.0 / 3
    np.testing.assert_array_equal(data["epoch"], [0, 1, 2])
