"""Backend equivalence: the fused relaxation kernels must land on the same
fixed points as the reference numpy loop, and backend selection must obey
the environment contract.
"""

import numpy as np
import pytest

from holoep import backend, kernels
from holoep.backend import HAS_NUMBA, backend_name, use_backend
from holoep.data import one_hot
from holoep.fixedpoint import DivergenceError, SolverSettings, relax
from holoep.models import ModelKind, Network

FUSED_KINDS = ["reciprocal", "hopfield", "direct_feedback"]

SETTINGS = SolverSettings(tolerance=1e-11, max_steps_free=4000,
                          max_steps_nudge=4000, damping=0.4)

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")


def toy(kind, seed=1):
    net = Network(ModelKind(kind), 6, (5, 4), 3)
    params = net.init_params(seed, alpha=0.6)
    rng = np.random.default_rng(seed + 100)
    x = rng.uniform(0, 1, size=(4, 6))
    y = one_hot(rng.integers(0, 3, size=4), 3)
    return net, params, x, y


def max_layer_diff(a, b):
    return max(np.abs(ua - ub).max() for ua, ub in zip(a.layers, b.layers))


@needs_numba
@pytest.mark.parametrize("kind", FUSED_KINDS)
def test_backends_agree_free_phase(kind):
    net, params, x, _ = toy(kind)
    with use_backend("numpy"):
        ref = relax(net, params, x, settings=SETTINGS)
    with use_backend("numba"):
        fused = relax(net, params, x, settings=SETTINGS)
    assert ref.converged and fused.converged
    assert ref.iterations == fused.iterations
    # same math in a different loop body: agreement to a few ULP
    assert max_layer_diff(ref.state, fused.state) <= 1e-14


@needs_numba
@pytest.mark.parametrize("kind", FUSED_KINDS)
def test_backends_agree_nudged_phase(kind):
    net, params, x, y = toy(kind)
    with use_backend("numpy"):
        ref = relax(net, params, x, beta=0.1, target=y, settings=SETTINGS)
    with use_backend("numba"):
        fused = relax(net, params, x, beta=0.1, target=y, settings=SETTINGS)
    assert ref.converged and fused.converged
    assert max_layer_diff(ref.state, fused.state) <= 1e-14


@needs_numba
@pytest.mark.parametrize("kind", FUSED_KINDS)
def test_backends_agree_complex_nudge(kind):
    net, params, x, y = toy(kind)
    with use_backend("numpy"):
        ref = relax(net, params, x, beta=0.05j, target=y, settings=SETTINGS)
    with use_backend("numba"):
        fused = relax(net, params, x, beta=0.05j, target=y, settings=SETTINGS)
    assert np.iscomplexobj(fused.state.layers[0])
    assert max_layer_diff(ref.state, fused.state) <= 1e-14


@needs_numba
def test_backends_agree_warm_start():
    net, params, x, y = toy("reciprocal", 7)
    with use_backend("numpy"):
        free = relax(net, params, x, settings=SETTINGS)
        ref = relax(net, params, x, beta=0.2, target=y, init=free.state,
                    settings=SETTINGS)
    with use_backend("numba"):
        free_f = relax(net, params, x, settings=SETTINGS)
        fused = relax(net, params, x, beta=0.2, target=y, init=free_f.state,
                      settings=SETTINGS)
    assert max_layer_diff(ref.state, fused.state) <= 1e-14


@needs_numba
def test_fused_path_deterministic():
    net, params, x, _ = toy("reciprocal", 5)
    with use_backend("numba"):
        a = relax(net, params, x, settings=SETTINGS).state.flat()
        b = relax(net, params, x, settings=SETTINGS).state.flat()
    assert np.array_equal(a, b)


@needs_numba
def test_fused_path_single_sample():
    net, params, x, _ = toy("direct_feedback", 6)
    with use_backend("numba"):
        batch = relax(net, params, x, settings=SETTINGS)
        one = relax(net, params, x[2], settings=SETTINGS)
    assert one.state.layers[0].ndim == 1
    for u_one, u_batch in zip(one.state.layers, batch.state.layers):
        np.testing.assert_allclose(u_one, u_batch[2], atol=1e-11)


@needs_numba
def test_fused_path_detects_divergence():
    net, params, x, _ = toy("reciprocal", 8)
    poisoned = params.with_tensors(
        {"w_fwd.0": np.full_like(params.w_fwd[0], np.nan)})
    with use_backend("numba"):
        with pytest.raises(DivergenceError):
            relax(net, poisoned, x, settings=SETTINGS)


def test_pcn_always_uses_reference_loop():
    # the fused kernels do not cover the pcn update; the dispatch must fall
    # back silently and produce the reference answer under either setting
    net, params, x, _ = toy("pcn", 3)
    assert not kernels.supports(net)
    with use_backend("numpy"):
        ref = relax(net, params, x, settings=SETTINGS)
    if HAS_NUMBA:
        with use_backend("numba"):
            also = relax(net, params, x, settings=SETTINGS)
        assert np.array_equal(ref.state.flat(), also.state.flat())


@needs_numba
def test_supports_covers_mlp_family():
    for kind in FUSED_KINDS:
        assert kernels.supports(Network(ModelKind(kind), 4, (3, 3), 2))
    assert not kernels.supports(Network(ModelKind.PCN, 4, (3, 3), 2))
    assert not kernels.supports(object())


def test_backend_env_selection(monkeypatch):
    monkeypatch.setenv(backend.ENV_VAR, "numpy")
    assert backend_name() == "numpy"
    monkeypatch.setenv(backend.ENV_VAR, "auto")
    assert backend_name() == ("numba" if HAS_NUMBA else "numpy")
    monkeypatch.delenv(backend.ENV_VAR)
    assert backend_name() == ("numba" if HAS_NUMBA else "numpy")
    monkeypatch.setenv(backend.ENV_VAR, "cuda")
    with pytest.raises(ValueError):
        backend_name()


def test_use_backend_overrides_and_restores(monkeypatch):
    monkeypatch.setenv(backend.ENV_VAR, "numpy")
    assert backend_name() == "numpy"
    if HAS_NUMBA:
        with use_backend("numba"):
            assert backend_name() == "numba"
            with use_backend("numpy"):
                assert backend_name() == "numpy"
            assert backend_name() == "numba"
    assert backend_name() == "numpy"
    with pytest.raises(ValueError):
        use_backend("bogus")
