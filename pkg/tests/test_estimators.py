"""Estimator tests: circle-sampling calculus, bias orders, dense oracles,
transport identities, the gradient front door, and the sweep report.

Numeric thresholds are frozen from probe runs on the same seeds; bias-order
slopes use amplitudes (0.05, 0.1, 0.2) where measured slopes were within
0.03 of the theoretical order.
"""

import numpy as np
import pytest

from holoep.data import one_hot
from holoep.estimators import (
    ConvergenceError,
    GradientEstimate,
    Mode,
    NudgeProtocol,
    asymmetry_transport,
    beta_sweep,
    cauchy_first_derivative,
    classic_ep,
    estimate_gradient,
    first_order_transport,
    ground_truth_dudbeta,
    holo_ep_continuous,
    holo_ep_npoint,
    rbp_delta,
    sweep_rows_to_csv,
)
from holoep.fixedpoint import SolverSettings, relax
from holoep.models import ModelKind, Network

TIGHT = SolverSettings(tolerance=1e-12, max_steps_free=6000,
                       max_steps_nudge=6000, damping=0.1)


def toy(kind="reciprocal", seed=9, alpha=0.8, batch=3):
    net = Network(ModelKind(kind), 6, (5, 4), 3)
    params = net.init_params(seed, alpha=alpha)
    rng = np.random.default_rng(seed + 100)
    x = rng.uniform(0, 1, size=(batch, 6))
    y = one_hot(rng.integers(0, 3, size=batch), 3)
    return net, params, x, y


@pytest.fixture(scope="module")
def solved():
    net, params, x, y = toy()
    free = relax(net, params, x, settings=TIGHT)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    return net, params, x, y, free, truth


# ---------------------------------------------------------------------------
# circle-sampling calculus


def test_cauchy_exact_on_low_degree_polynomials():
    # N samples determine the derivative exactly through degree N
    coef = np.array([1.0, 2.0, 3.0, -1.0, 0.5])  # degree 4

    def f(b):
        return sum(c * b ** k for k, c in enumerate(coef))

    for n in (4, 5, 8):
        pts = [0.3 * np.exp(2j * np.pi * k / n) for k in range(n)]
        est = cauchy_first_derivative([f(b) for b in pts], 0.3)
        assert abs(est - coef[1]) < 1e-13


def test_cauchy_aliasing_weight_is_amplitude_to_the_n():
    # the degree-(N+1) monomial aliases onto the derivative estimate with
    # weight exactly amplitude^N — the leading bias term
    for n, amp in ((2, 0.2), (4, 0.3)):
        pts = [amp * np.exp(2j * np.pi * k / n) for k in range(n)]
        est = cauchy_first_derivative([b ** (n + 1) for b in pts], amp)
        assert abs(est - amp ** n) < 1e-14


def test_cauchy_input_validation():
    with pytest.raises(ValueError):
        cauchy_first_derivative([1.0], 0.1)
    with pytest.raises(ValueError):
        cauchy_first_derivative([1.0, 2.0], 0.0)


# ---------------------------------------------------------------------------
# bias orders against the dense ground truth


@pytest.mark.parametrize("n_points,lo,hi", [(2, 1.75, 2.25), (3, 2.75, 3.25),
                                            (4, 3.75, 4.25)])
def test_npoint_bias_order_matches_point_count(solved, n_points, lo, hi):
    net, params, x, y, free, truth = solved
    amps = np.array([0.05, 0.1, 0.2])
    errs = []
    for a in amps:
        delta, _ = holo_ep_npoint(net, params, x, y, a, n_points,
                                  settings=TIGHT, free=free)
        errs.append(np.linalg.norm(delta - truth))
    slope = np.polyfit(np.log(amps), np.log(errs), 1)[0]
    assert lo < slope < hi


def test_classic_bias_is_first_order(solved):
    net, params, x, y, free, truth = solved
    amps = np.array([0.05, 0.1, 0.2])
    errs = []
    for a in amps:
        nudged = relax(net, params, x, beta=a, target=y, init=free.state,
                       settings=TIGHT)
        delta = classic_ep(free, nudged, a).reshape(truth.shape)
        errs.append(np.linalg.norm(delta - truth))
    slope = np.polyfit(np.log(amps), np.log(errs), 1)[0]
    assert 0.8 < slope < 1.2


def test_classic_rejects_zero_beta(solved):
    net, params, x, y, free, _ = solved
    with pytest.raises(ValueError):
        classic_ep(free, free, 0.0)


def test_continuous_error_shrinks_with_periods(solved):
    net, params, x, y, free, truth = solved

    def err(periods):
        proto = NudgeProtocol(amplitude=0.05, mode=Mode.CONTINUOUS,
                              n_points=4, periods=periods,
                              steps_per_point=150)
        delta, _ = holo_ep_continuous(net, params, x, y, proto,
                                      settings=TIGHT)
        return np.linalg.norm(delta - truth)

    # transient remainder decays ~1/updates; measured ratio 4.09
    assert err(1) / err(4) > 2.0


# ---------------------------------------------------------------------------
# dense oracles and transport identities


def test_ground_truth_matches_nudged_finite_difference(solved):
    net, params, x, y, free, truth = solved
    # h balances truncation against the 1e-12 solve tolerance; measured
    # relative gap 1.1e-7 at h = 1e-4
    h = 1e-4
    up = relax(net, params, x, beta=h, target=y, init=free.state,
               settings=TIGHT)
    dn = relax(net, params, x, beta=-h, target=y, init=free.state,
               settings=TIGHT)
    fd = (up.state.flat() - dn.state.flat()) / (2 * h)
    fd = fd.reshape(truth.shape)
    assert np.abs(fd - truth).max() / np.abs(truth).max() < 1e-5


def test_adjoint_equals_displacement_on_symmetric_jacobian():
    # a symmetric-coupling model makes the two error vectors identical
    net, params, x, y = toy("hopfield", seed=2, alpha=0.0)
    settings = SolverSettings(tolerance=1e-12, max_steps_free=8000,
                              max_steps_nudge=8000, damping=0.4)
    free = relax(net, params, x, settings=settings)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    adj = rbp_delta(net, params, free.state, y, x=x)
    assert np.abs(truth - adj).max() <= 1e-9


def test_asymmetry_transport_is_exact(solved):
    net, params, x, y, free, truth = solved
    adj = rbp_delta(net, params, free.state, y, x=x)
    for i in range(x.shape[0]):
        jac = net.jacobian_dense(params, [u[i] for u in free.state.layers],
                                 x=x[i])
        moved = asymmetry_transport(jac, adj[i])
        assert np.abs(moved - truth[i]).max() <= 1e-12
        # the gap it bridges is real: adjoint and displacement differ here
        assert np.abs(adj[i] - truth[i]).max() > 1e-6


def test_first_order_transport_remainder_is_quadratic():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(8, 8))
    sym = m @ m.T + 8 * np.eye(8)  # well-conditioned symmetric part
    skew0 = rng.normal(size=(8, 8))
    skew0 = (skew0 - skew0.T) / 2
    delta = rng.normal(size=8)

    def remainder(eps):
        jac = sym + eps * skew0
        exact = asymmetry_transport(jac, delta)
        approx = first_order_transport(sym, eps * skew0, delta)
        return np.linalg.norm(exact - approx)

    ratio = remainder(0.2) / remainder(0.1)
    assert 3.2 < ratio < 4.8


# ---------------------------------------------------------------------------
# gradient front door


def test_estimate_gradient_npoint_matches_direct_call(solved):
    net, params, x, y, free, _ = solved
    proto = NudgeProtocol(amplitude=0.1, mode=Mode.NPOINT, n_points=4)
    est = estimate_gradient(net, params, x, y, proto, settings=TIGHT,
                            free=free)
    _, direct = holo_ep_npoint(net, params, x, y, 0.1, 4, settings=TIGHT,
                               free=free)
    for name, g in est.tensors.items():
        assert np.array_equal(g, direct.tensors[name])


def test_gradient_tensors_are_real_with_small_imag_diag(solved):
    net, params, x, y, free, _ = solved
    proto = NudgeProtocol(amplitude=0.1, mode=Mode.NPOINT, n_points=4)
    est = estimate_gradient(net, params, x, y, proto, settings=TIGHT,
                            free=free)
    assert isinstance(est, GradientEstimate)
    assert all(not np.iscomplexobj(g) for g in est.tensors.values())
    assert 0 <= est.imag_diagnostic < 1e-6
    assert np.iscomplexobj(est.delta)


def test_intrinsically_real_modes_report_zero_imag(solved):
    net, params, x, y, free, _ = solved
    for mode in (Mode.GROUND_TRUTH, Mode.RBP):
        est = estimate_gradient(net, params, x, y,
                                NudgeProtocol(mode=mode), settings=TIGHT,
                                free=free)
        assert est.imag_diagnostic == 0.0


def test_path_average_agrees_at_small_amplitude(solved):
    net, params, x, y, free, _ = solved
    _, a = holo_ep_npoint(net, params, x, y, 0.05, 4, settings=TIGHT,
                          free=free)
    _, b = holo_ep_npoint(net, params, x, y, 0.05, 4, settings=TIGHT,
                          free=free, path_average=True)
    fa = np.concatenate([a.tensors[k].ravel() for k in sorted(a.tensors)])
    fb = np.concatenate([b.tensors[k].ravel() for k in sorted(b.tensors)])
    assert np.linalg.norm(fa - fb) / np.linalg.norm(fa) < 1e-6


def test_estimators_deterministic(solved):
    net, params, x, y, _, _ = solved
    proto = NudgeProtocol(amplitude=0.1, mode=Mode.NPOINT, n_points=2)
    a = estimate_gradient(net, params, x, y, proto, settings=TIGHT)
    b = estimate_gradient(net, params, x, y, proto, settings=TIGHT)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_nudged_nonconvergence_raises(solved):
    net, params, x, y, _, _ = solved
    strangled = SolverSettings(tolerance=1e-12, max_steps_free=6000,
                               max_steps_nudge=1, damping=0.1)
    with pytest.raises(ConvergenceError):
        holo_ep_npoint(net, params, x, y, 0.1, 4, settings=strangled)


def test_protocol_validation():
    with pytest.raises(ValueError):
        NudgeProtocol(amplitude=0.0, mode=Mode.CLASSIC)
    with pytest.raises(ValueError):
        NudgeProtocol(mode=Mode.NPOINT, n_points=1)
    with pytest.raises(ValueError):
        NudgeProtocol(mode=Mode.CONTINUOUS, steps_per_point=0)
    # amplitude is irrelevant to the exact modes
    NudgeProtocol(amplitude=0.0, mode=Mode.GROUND_TRUTH)


# ---------------------------------------------------------------------------
# sweep report


def test_beta_sweep_rows_and_ranking(solved):
    net, params, x, y, _, _ = solved
    rows = beta_sweep(net, params, x, y, amplitudes=[0.05, 0.5],
                      n_points_list=[1, 4], settings=TIGHT)
    # one row per (amplitude, n_points, layer in {-1, 0, 1})
    assert len(rows) == 2 * 2 * 3
    whole = {(r["amplitude"], r["n_points"]): r for r in rows
             if r["layer"] == -1}
    # 4-point circle stays accurate at a large amplitude; the one-sided
    # estimate visibly degrades there
    assert whole[(0.5, 4)]["cosine_vs_truth"] > 0.9999
    assert whole[(0.05, 4)]["cosine_vs_truth"] > 0.9999
    assert whole[(0.5, 1)]["cosine_vs_truth"] < whole[(0.5, 4)]["cosine_vs_truth"]
    assert whole[(0.5, 1)]["cosine_vs_truth"] < whole[(0.05, 1)]["cosine_vs_truth"]
    # real one-sided nudges carry no imaginary part
    assert whole[(0.5, 1)]["imag_diag"] == 0.0


def test_sweep_csv_is_deterministic(solved):
    net, params, x, y, _, _ = solved
    rows = beta_sweep(net, params, x, y, amplitudes=[0.1],
                      n_points_list=[2], settings=TIGHT)
    text = sweep_rows_to_csv(rows)
    again = sweep_rows_to_csv(
        beta_sweep(net, params, x, y, amplitudes=[0.1], n_points_list=[2],
                   settings=TIGHT))
    assert text == again
    header = text.splitlines()[0]
    assert header.replace(" ", "") == ("amplitude,n_points,layer,"
                                       "cosine_vs_rbp,cosine_vs_truth,"
                                       "imag_diag")
    assert len(text.splitlines()) == 1 + len(rows)
