"""Model-layer tests: activations, init, dynamics derivatives, checkpoints.

Derivative checks use central finite differences as the oracle; init and
checkpoint checks assert the documented contracts directly.
"""

import numpy as np
import pytest

from holoep.models import (
    CheckpointError,
    JacobianSizeError,
    ModelKind,
    Network,
    NudgeSpec,
    d2sigma,
    dsigma,
    load_checkpoint,
    save_checkpoint,
    sigma,
    softmax,
)

ALL_KINDS = ["reciprocal", "hopfield", "pcn", "direct_feedback"]


def toy_net(kind, in_dim=6, dims=(5, 4), classes=3):
    return Network(ModelKind(kind), in_dim, dims, classes)


def toy_state(net, seed, spread=0.6):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-spread, spread, size=d) for d in net.layer_dims]


# ---------------------------------------------------------------------------
# activation


def test_sigma_fixed_values():
    # 1/(1+exp(-4x+2)) crosses 1/2 at x = 1/2 and equals 1/(1+e^2) at 0
    assert sigma(0.5) == pytest.approx(0.5, abs=1e-15)
    assert sigma(0.0) == pytest.approx(1.0 / (1.0 + np.e ** 2), rel=1e-14)
    assert dsigma(0.5) == pytest.approx(1.0, rel=1e-14)  # 4 * 0.5 * 0.5


def test_sigma_derivatives_match_finite_differences():
    xs = np.linspace(-3.0, 4.0, 29)
    h = 1e-6
    fd1 = (sigma(xs + h) - sigma(xs - h)) / (2 * h)
    fd2 = (dsigma(xs + h) - dsigma(xs - h)) / (2 * h)
    assert np.max(np.abs(fd1 - dsigma(xs))) < 1e-9
    assert np.max(np.abs(fd2 - d2sigma(xs))) < 1e-8


def test_sigma_complex_step_consistency():
    # holomorphic evaluation: complex-step derivative equals dsigma
    xs = np.linspace(-1.0, 2.0, 11)
    h = 1e-20
    cs = np.imag(sigma(xs + 1j * h)) / h
    assert np.max(np.abs(cs - dsigma(xs))) < 1e-12


def test_sigma_clamps_extreme_inputs():
    big = sigma(np.array([1e4, -1e4, 500.0]))
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0)
    assert big[1] == pytest.approx(0.0, abs=1e-15)


def test_softmax_rows_normalized_and_shift_invariant():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(5, 4)) * 30
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(softmax(z + 100.0), p)
    assert np.all(p > 0)


# ---------------------------------------------------------------------------
# construction and init


def test_network_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        Network(ModelKind.RECIPROCAL, 4, (), 3)
    with pytest.raises(ValueError):
        Network(ModelKind.RECIPROCAL, 0, (5,), 3)
    with pytest.raises(ValueError):
        Network(ModelKind.DIRECT_FEEDBACK, 4, (5,), 3)


def test_init_bounds_and_zero_biases():
    for kind in ALL_KINDS:
        net = toy_net(kind, in_dim=12, dims=(9, 7))
        params = net.init_params(3)
        assert np.max(np.abs(params.w_in)) <= 1.0 / np.sqrt(12)
        for k, w in enumerate(params.w_fwd):
            fan_in = net.layer_dims[k]
            assert np.max(np.abs(w)) <= 1.0 / np.sqrt(fan_in)
        for b in params.b:
            assert np.all(b == 0.0)
        assert np.all(params.b_ro == 0.0)


def test_init_seed_reproducible_and_distinct():
    net = toy_net("reciprocal")
    a = net.init_params(5).to_dict()
    b = net.init_params(5).to_dict()
    c = net.init_params(6).to_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_init_alpha_zero_ties_backward_to_forward_transpose():
    net = toy_net("reciprocal", dims=(8, 6, 4))
    params = net.init_params(2, alpha=0.0)
    for wf, wb in zip(params.w_fwd, params.w_bwd):
        assert np.array_equal(wb, wf.T)


def test_init_alpha_controls_measured_angle():
    # mean angle between w_bwd and w_fwd.T tracks alpha (radians);
    # big matrices keep the sample noise small
    from holoep.training import weight_angle

    net = Network(ModelKind.RECIPROCAL, 20, (128, 96), 5)
    for alpha_deg in (0.0, 45.0, 90.0):
        angles = []
        for seed in range(5):
            params = net.init_params(seed, alpha=np.deg2rad(alpha_deg))
            angles.extend(weight_angle(params))
        assert abs(np.mean(angles) - alpha_deg) < 5.0


def test_hopfield_has_no_independent_backward_weights():
    net = toy_net("hopfield")
    params = net.init_params(0)
    assert params.w_bwd is None
    tied = net.bwd_matrices(params)
    assert all(np.array_equal(b, w.T)
               for b, w in zip(tied, params.w_fwd))


# ---------------------------------------------------------------------------
# dynamics derivatives (finite-difference oracles)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jacobian_matches_finite_differences(kind):
    net = toy_net(kind)
    params = net.init_params(4, alpha=0.7)
    rng = np.random.default_rng(11)
    x = rng.uniform(0, 1, size=net.in_dim)
    layers = toy_state(net, 12)
    J = net.jacobian_dense(params, layers, x=x)
    flat = net.join(layers)
    h = 1e-6
    fd = np.zeros_like(J)
    for j in range(net.state_size):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        # vector field value = step(u) - u componentwise
        f_up = net.join(net.step(params, net.split(up), x)) - up
        f_dn = net.join(net.step(params, net.split(dn), x)) - dn
        fd[:, j] = (f_up - f_dn) / (2 * h)
    assert np.max(np.abs(J - fd)) < 1e-8


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jvp_vjp_agree_with_dense_jacobian(kind):
    net = toy_net(kind)
    params = net.init_params(9, alpha=0.3)
    rng = np.random.default_rng(21)
    x = rng.uniform(0, 1, size=net.in_dim)
    layers = toy_state(net, 22)
    J = net.jacobian_dense(params, layers, x=x)
    for trial in range(5):
        v = rng.normal(size=net.state_size)
        w = rng.normal(size=net.state_size)
        assert np.allclose(net.jvp_u(params, layers, v, x=x), J @ v,
                           atol=1e-10)
        assert np.allclose(net.vjp_u(params, layers, w, x=x), J.T @ w,
                           atol=1e-10)
        # adjoint identity <w, Jv> == <J^T w, v>
        lhs = float(w @ net.jvp_u(params, layers, v, x=x))
        rhs = float(net.vjp_u(params, layers, w, x=x) @ v)
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_hopfield_jacobian_symmetric():
    # gradient dynamics: the state Jacobian equals its own transpose
    net = toy_net("hopfield", in_dim=8, dims=(7, 5))
    params = net.init_params(6)
    rng = np.random.default_rng(30)
    x = rng.uniform(0, 1, size=8)
    layers = toy_state(net, 31)
    J = net.jacobian_dense(params, layers, x=x)
    assert np.max(np.abs(J - J.T)) < 1e-12


def test_jacobian_size_guard():
    net = Network(ModelKind.RECIPROCAL, 4, (64, 64), 3)
    params = net.init_params(0)
    layers = toy_state(net, 1)
    with pytest.raises(JacobianSizeError):
        net.jacobian_dense(params, layers, x=np.zeros(4), max_state=100)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_dfdbeta_matches_nudge_finite_difference(kind):
    net = toy_net(kind)
    params = net.init_params(14, alpha=0.5)
    rng = np.random.default_rng(40)
    x = rng.uniform(0, 1, size=net.in_dim)
    y = np.zeros(3)
    y[1] = 1.0
    layers = toy_state(net, 41)
    h = 1e-6
    up = net.join(net.step(params, layers, x, nudge=NudgeSpec(beta=h, target=y)))
    dn = net.join(net.step(params, layers, x, nudge=NudgeSpec(beta=-h, target=y)))
    fd = (up - dn) / (2 * h)
    analytic = net.dfdbeta(params, layers, y)
    assert np.max(np.abs(analytic - fd)) < 1e-7


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_presyn_grad_matches_parameter_finite_differences(kind):
    # d(delta . F(u)) / d(theta) at frozen u, checked entrywise on a few
    # random coordinates of every parameter tensor
    net = toy_net(kind)
    params = net.init_params(17, alpha=0.4)
    rng = np.random.default_rng(50)
    x = rng.uniform(0, 1, size=net.in_dim)
    layers = toy_state(net, 51)
    delta = rng.normal(size=net.state_size)
    grads = net.presyn_grad(params, layers, x, delta)
    base = params.to_dict()
    h = 1e-6
    for name in net.network_param_names():
        g = grads[name]
        t = base[name]
        flat_idx = rng.choice(t.size, size=min(4, t.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.shape)
            up = {k: np.array(v) for k, v in base.items()}
            dn = {k: np.array(v) for k, v in base.items()}
            up[name][idx] += h
            dn[name][idx] -= h
            f_up = net.join(net.step(params.with_tensors(up), layers, x))
            f_dn = net.join(net.step(params.with_tensors(dn), layers, x))
            fd = float(delta @ (f_up - f_dn)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9), (
                f"{name}{list(idx)}")


def test_readout_probs_are_softmax_of_readout_layer():
    net = toy_net("reciprocal")
    params = net.init_params(3)
    rng = np.random.default_rng(60)
    u_top = rng.normal(size=(4, net.layer_dims[-1]))
    p = net.readout_probs(params, u_top)
    z = sigma(u_top) @ params.w_ro.T + params.b_ro
    assert np.allclose(p, softmax(z))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    for kind in ALL_KINDS:
        net = toy_net(kind)
        params = net.init_params(8, alpha=0.25)
        path = tmp_path / f"{kind}.json"
        save_checkpoint(path, net, params, alpha=0.25, seed=8,
                        extra={"note": "t"})
        net2, params2, meta = load_checkpoint(path)
        assert net2.kind == net.kind
        assert net2.layer_dims == net.layer_dims
        assert meta["alpha"] == 0.25 and meta["seed"] == 8
        for (n1, t1), (n2, t2) in zip(params.named(), params2.named()):
            assert n1 == n2
            assert np.array_equal(t1, t2)


def test_checkpoint_rejects_malformed_documents(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_text('{"version": 999}')
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_rejects_tensor_shape_mismatch(tmp_path):
    net = toy_net("reciprocal")
    params = net.init_params(1)
    path = tmp_path / "ok.json"
    save_checkpoint(path, net, params)
    import json

    doc = json.loads(path.read_text())
    doc["tensors"][0]["data"] = doc["tensors"][0]["data"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
