"""Relaxation solver tests: convergence contract, determinism, warm starts,
nudged solves, path sweeps, and failure modes.
"""

import numpy as np
import pytest

from holoep.data import one_hot
from holoep.fixedpoint import (
    DivergenceError,
    SolverSettings,
    relax,
    relax_path,
    residual,
)
from holoep.models import ModelKind, Network

ALL_KINDS = ["reciprocal", "hopfield", "pcn", "direct_feedback"]

# the hopfield synchronous map oscillates undamped; all-kind loops use a
# damping that every kind tolerates
DAMPED = SolverSettings(tolerance=1e-11, max_steps_free=4000,
                        max_steps_nudge=4000, damping=0.4)


def toy(kind, seed, in_dim=6, dims=(5, 4), classes=3, alpha=0.6):
    net = Network(ModelKind(kind), in_dim, dims, classes)
    params = net.init_params(seed, alpha=alpha)
    rng = np.random.default_rng(seed + 100)
    x = rng.uniform(0, 1, size=(4, in_dim))
    y = one_hot(rng.integers(0, classes, size=4), classes)
    return net, params, x, y


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_relax_reaches_fixed_point(kind):
    net, params, x, _ = toy(kind, 1)
    res = relax(net, params, x, settings=DAMPED)
    assert res.converged
    # the returned state satisfies u = G(u) to the stated tolerance
    assert residual(net, params, res.state, x) <= 1e-10
    assert res.iterations <= DAMPED.max_steps_free


def test_relax_result_reports_true_residual():
    net, params, x, _ = toy("reciprocal", 2)
    res = relax(net, params, x, settings=DAMPED)
    assert res.residual == pytest.approx(
        residual(net, params, res.state, x), rel=1e-6, abs=1e-14)


def test_relax_deterministic():
    net, params, x, _ = toy("reciprocal", 3)
    a = relax(net, params, x, settings=DAMPED).state.flat()
    b = relax(net, params, x, settings=DAMPED).state.flat()
    assert np.array_equal(a, b)


def test_relax_single_sample_matches_batch_row():
    net, params, x, _ = toy("reciprocal", 4)
    batch = relax(net, params, x, settings=DAMPED).state.flat()
    single = relax(net, params, x[2], settings=DAMPED).state.flat()
    assert np.allclose(single, batch[2], atol=1e-9)


def test_warm_start_returns_same_fixed_point_faster():
    net, params, x, _ = toy("reciprocal", 5)
    cold = relax(net, params, x, settings=DAMPED)
    warm = relax(net, params, x, init=cold.state, settings=DAMPED)
    assert warm.converged
    assert warm.iterations <= cold.iterations
    assert np.allclose(warm.state.flat(), cold.state.flat(), atol=1e-9)


def test_nudged_fixed_point_moves_with_beta():
    net, params, x, y = toy("reciprocal", 6)
    free = relax(net, params, x, settings=DAMPED)
    nudged = relax(net, params, x, beta=0.2, target=y, init=free.state,
                   settings=DAMPED)
    assert nudged.converged
    gap = np.linalg.norm(nudged.state.flat() - free.state.flat())
    assert gap > 1e-4
    # the displacement scales roughly linearly in beta near zero
    half = relax(net, params, x, beta=0.1, target=y, init=free.state,
                 settings=DAMPED)
    gap_half = np.linalg.norm(half.state.flat() - free.state.flat())
    assert gap / gap_half == pytest.approx(2.0, rel=0.15)


def test_complex_beta_gives_complex_state():
    net, params, x, y = toy("reciprocal", 7)
    free = relax(net, params, x, settings=DAMPED)
    res = relax(net, params, x, beta=0.05j, target=y, init=free.state,
                settings=DAMPED)
    assert res.converged
    assert np.iscomplexobj(res.state.flat())
    assert np.max(np.abs(res.state.flat().imag)) > 1e-6


def test_relax_path_visits_each_beta():
    net, params, x, y = toy("reciprocal", 8)
    amps = [0.05 * np.exp(2j * np.pi * k / 4) for k in range(4)]
    results = relax_path(net, params, x, amps, target=y, settings=DAMPED)
    assert len(results) == 4
    for beta, res in zip(amps, results):
        assert res.converged
        r = residual(net, params, res.state, x, beta=beta, target=y)
        assert r <= 1e-10


def test_nonconvergence_reported_not_silent():
    # one update step cannot reach tolerance from zeros
    net, params, x, _ = toy("reciprocal", 9)
    tiny = SolverSettings(tolerance=1e-12, max_steps_free=1, damping=0.0)
    res = relax(net, params, x, settings=tiny)
    assert not res.converged
    assert res.iterations == 1


def test_divergence_raises_on_nonfinite_state():
    # a poisoned tensor (e.g. after a bad update) must fail loudly, not
    # return a garbage fixed point
    net, params, x, _ = toy("reciprocal", 10, alpha=0.0)
    w = params.w_fwd[0].copy()
    w[0, 0] = np.nan
    poisoned = params.with_tensors({"w_fwd.0": w})
    with pytest.raises(DivergenceError) as err:
        relax(net, poisoned, x, settings=SolverSettings(
            tolerance=1e-10, max_steps_free=500, damping=0.0))
    assert err.value.iteration is not None


def test_damping_rescues_oscillating_hopfield():
    # a hopfield with grown weights (as after training) flips sign each
    # synchronous step; averaging the update restores convergence
    net, params, x, _ = toy("hopfield", 11)
    grown = params.with_tensors({
        "w_fwd.0": params.w_fwd[0] * 1.5,
        "w_in": params.w_in * 1.5,
    })
    raw = relax(net, grown, x, settings=SolverSettings(
        tolerance=1e-11, max_steps_free=3000, damping=0.0))
    damped = relax(net, grown, x, settings=SolverSettings(
        tolerance=1e-11, max_steps_free=6000, damping=0.5))
    assert not raw.converged
    assert damped.converged
    assert residual(net, grown, damped.state, x) <= 1e-10


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(tolerance=-1e-8)
    with pytest.raises(ValueError):
        SolverSettings(max_steps_free=0)
    with pytest.raises(ValueError):
        SolverSettings(damping=1.0)
