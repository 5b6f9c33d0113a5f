"""Self-contained invariant suite behind the ``verify`` CLI subcommand.

Every check builds its own small fixture from fixed seeds, so the suite is
deterministic, needs no data files, and finishes in well under a minute.
Checks return measured numbers in their detail string so a failure is
immediately quantified.
"""

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Dataset, idx_parse, idx_serialize, one_hot, synth_teacher
from .estimators import (
    Mode,
    NudgeProtocol,
    asymmetry_transport,
    classic_ep,
    ground_truth_dudbeta,
    holo_ep_continuous,
    holo_ep_npoint,
    rbp_delta,
)
from .fixedpoint import SolverSettings, relax, residual
from .homeostasis import (
    HutchinsonConfig,
    homeo_grad,
    homeo_loss_exact,
    homeo_loss_hutchinson,
    matrix_hutchinson,
    symmetry_measure,
)
from .models import ModelKind, Network, dsigma, d2sigma, sigma
from .training import TrainConfig, readout_loss, train_epoch


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _toy(kind, seed, in_dim=6, dims=(5, 4), classes=3, alpha=0.0):
    net = Network(ModelKind(kind), in_dim, dims, classes)
    params = net.init_params(seed, alpha=alpha)
    rng = np.random.default_rng(seed + 1000)
    x = rng.uniform(0.0, 1.0, size=(3, in_dim))
    y = one_hot(rng.integers(0, classes, size=3), classes)
    return net, params, x, y


def check_activation_derivatives():
    xs = np.linspace(-2.0, 3.0, 21)
    h = 1e-6
    d_fd = (sigma(xs + h) - sigma(xs - h)) / (2 * h)
    dd_fd = (dsigma(xs + h) - dsigma(xs - h)) / (2 * h)
    # scale-normalized: d2sigma has a zero inside the range
    e1 = float(np.max(np.abs(d_fd - dsigma(xs))) / np.max(np.abs(dsigma(xs))))
    e2 = float(np.max(np.abs(dd_fd - d2sigma(xs))) / np.max(np.abs(d2sigma(xs))))
    mid = abs(float(sigma(0.5)) - 0.5)
    ok = e1 < 1e-8 and e2 < 1e-5 and mid < 1e-12
    return CheckResult("activation derivative identities", ok,
                       f"d rel {e1:.2e}, d2 rel {e2:.2e}, sigma(0.5) off {mid:.1e}")


def check_relaxation_contract():
    net, params, x, _ = _toy("reciprocal", seed=3)
    st = SolverSettings(tolerance=1e-11, max_steps_free=500, damping=0.0)
    res = relax(net, params, x, settings=st)
    r = residual(net, params, res.state, x)
    ok = res.converged and r <= 1e-10
    return CheckResult("relaxation reaches stated residual", ok,
                       f"converged={res.converged}, residual {r:.2e}")


def check_symmetric_exactness():
    net, params, x, y = _toy("hopfield", seed=2, in_dim=8, dims=(7, 5))
    st = SolverSettings(tolerance=1e-12, max_steps_free=2000, damping=0.4)
    free = relax(net, params, x, settings=st)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    adj = rbp_delta(net, params, free.state, y, x=x)
    cos = min(
        float(np.dot(truth[i], adj[i])
              / (np.linalg.norm(truth[i]) * np.linalg.norm(adj[i])))
        for i in range(truth.shape[0]))
    ok = cos >= 1.0 - 1e-9
    return CheckResult("symmetric dynamics: exact adjoint match", ok,
                       f"worst cosine 1-{1.0 - cos:.2e}")


def check_transport_identity():
    net, params, x, y = _toy("reciprocal", seed=9, alpha=0.8)
    st = SolverSettings(tolerance=1e-13, max_steps_free=4000, damping=0.1)
    free = relax(net, params, x, settings=st)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    adj = rbp_delta(net, params, free.state, y, x=x)
    worst = 0.0
    for i in range(x.shape[0]):
        J = net.jacobian_dense(params, [u[i] for u in free.state.layers],
                               x=x[i])
        lhs = asymmetry_transport(J, adj[i])
        worst = max(worst, float(np.linalg.norm(truth[i] - lhs)
                                 / np.linalg.norm(truth[i])))
    ok = worst < 1e-8
    return CheckResult("asymmetry transport identity", ok,
                       f"worst relative residual {worst:.2e}")


def check_npoint_bias_order():
    net, params, x, y = _toy("reciprocal", seed=9, alpha=0.8)
    st = SolverSettings(tolerance=1e-13, max_steps_free=4000,
                        max_steps_nudge=4000, damping=0.1)
    free = relax(net, params, x, settings=st)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    errs = []
    for amp in (0.2, 0.1):
        est, _ = holo_ep_npoint(net, params, x, y, amp, 2, settings=st,
                                free=free)
        errs.append(float(np.linalg.norm(est.real - truth)))
    ratio = errs[0] / errs[1]
    ok = 2.5 < ratio < 5.5
    return CheckResult("two-point estimate error is second order", ok,
                       f"err(0.2)/err(0.1) = {ratio:.2f} (expect ~4)")


def check_continuous_period_scaling():
    net, params, x, y = _toy("reciprocal", seed=9, alpha=0.8)
    st = SolverSettings(tolerance=1e-13, max_steps_free=4000,
                        max_steps_nudge=4000, damping=0.1)
    free = relax(net, params, x, settings=st)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    errs = []
    for periods in (1, 4):
        proto = NudgeProtocol(mode=Mode.CONTINUOUS, amplitude=0.05,
                              n_points=4, periods=periods,
                              steps_per_point=150)
        delta, _ = holo_ep_continuous(net, params, x, y, proto, settings=st)
        errs.append(float(np.linalg.norm(delta.real - truth)))
    ratio = errs[0] / errs[1]
    ok = ratio > 2.0
    return CheckResult("continuous sweep error decays with periods", ok,
                       f"err(1)/err(4) = {ratio:.2f} (expect ~4)")


def check_hutchinson():
    rng = np.random.default_rng(12)
    J = rng.normal(size=(40, 40)) / np.sqrt(40)
    exact = homeo_loss_exact(J)
    est = matrix_hutchinson(J, HutchinsonConfig(n_samples=1000, seed=5))
    z = abs(est.value - exact) / est.std_error
    ok = z < 3.0
    return CheckResult("stochastic homeostatic loss is unbiased", ok,
                       f"|z| = {z:.2f} over 1000 probes")


def check_homeo_gradient():
    net, params, x, _ = _toy("reciprocal", seed=4)
    st = SolverSettings(tolerance=1e-12, max_steps_free=3000, damping=0.1)
    free = relax(net, params, x[0], settings=st)
    layers = free.state.layers
    cfg = HutchinsonConfig(n_samples=25, seed=8)
    grads = homeo_grad(net, params, layers, cfg, lam=1.0, x=x[0]).tensors
    h = 1e-6
    worst = 0.0
    for name in ("w_fwd.0", "w_bwd.0"):
        g = grads[name]
        idx = np.unravel_index(int(np.argmax(np.abs(g))), g.shape)
        shift = np.zeros_like(g)
        shift[idx] = h
        tensors = params.to_dict()

        def loss_at(p):
            # frozen state, shared probe stream: isolates the analytic grad
            return homeo_loss_hutchinson(net, p, layers, cfg, x=x[0]).value

        fd = (loss_at(params.with_tensors({**tensors, name: tensors[name] + shift}))
              - loss_at(params.with_tensors({**tensors, name: tensors[name] - shift}))
              ) / (2 * h)
        rel = abs(fd - g[idx]) / (abs(fd) + 1e-12)
        worst = max(worst, float(rel))
    ok = worst < 1e-4
    return CheckResult("homeostatic gradient matches finite differences", ok,
                       f"worst rel err {worst:.2e}")


def check_homeo_descent():
    worst = None
    for kind in ("reciprocal", "direct_feedback"):
        net, params, x, _ = _toy(kind, seed=6, dims=(5, 4))
        st = SolverSettings(tolerance=1e-11, max_steps_free=3000, damping=0.1)
        cfg = HutchinsonConfig(n_samples=30, seed=3)

        def sym_of(p):
            free = relax(net, params=p, x=x, settings=st)
            vals = [symmetry_measure(
                net.jacobian_dense(p, [u[i] for u in free.state.layers],
                                   x=x[i]))
                    for i in range(x.shape[0])]
            return float(np.mean(vals))

        before = sym_of(params)
        for step in range(60):
            free = relax(net, params, x[0], settings=st)
            step_cfg = HutchinsonConfig(n_samples=cfg.n_samples,
                                        seed=cfg.seed + step)
            grads = homeo_grad(net, params, free.state.layers, step_cfg,
                               lam=1.0, x=x[0]).tensors
            tensors = params.to_dict()
            for name, g in grads.items():
                tensors[name] = tensors[name] - 0.05 * g
            params = params.with_tensors(tensors)
        after = sym_of(params)
        gain = after - before
        if worst is None or gain < worst[1]:
            worst = (kind, gain, before, after)
    kind, gain, before, after = worst
    ok = gain > 0.0
    return CheckResult("homeostatic descent raises symmetry", ok,
                       f"{kind}: {before:.4f} -> {after:.4f}")


def check_ep_gradient_fd():
    net, params, x, y = _toy("hopfield", seed=2, in_dim=8, dims=(7, 5))
    st = SolverSettings(tolerance=1e-12, max_steps_free=3000, damping=0.4)
    proto = NudgeProtocol(mode=Mode.GROUND_TRUTH)
    from .estimators import estimate_gradient

    est = estimate_gradient(net, params, x, y, proto, settings=st)
    name = "w_fwd.0"
    g = est.tensors[name]
    idx = np.unravel_index(int(np.argmax(np.abs(g))), g.shape)
    h = 1e-5
    shift = np.zeros_like(g)
    shift[idx] = h
    tensors = params.to_dict()

    def loss_at(p):
        free = relax(net, p, x, settings=st)
        loss, _ = readout_loss(p, free.state.layers, y)
        return loss

    plus = loss_at(params.with_tensors({**tensors, name: tensors[name] + shift}))
    minus = loss_at(params.with_tensors({**tensors, name: tensors[name] - shift}))
    fd = (plus - minus) / (2 * h)
    rel = abs(fd - g[idx]) / (abs(fd) + 1e-12)
    ok = rel < 1e-4
    return CheckResult("equilibrium gradient matches loss finite difference",
                       ok, f"rel err {rel:.2e} on {name}{list(idx)}")


def check_classic_vs_npoint_bias():
    net, params, x, y = _toy("reciprocal", seed=9, alpha=0.8)
    st = SolverSettings(tolerance=1e-13, max_steps_free=4000,
                        max_steps_nudge=4000, damping=0.1)
    free = relax(net, params, x, settings=st)
    truth = ground_truth_dudbeta(net, params, free.state, y, x=x)
    amp = 0.3
    nudged = relax(net, params, x, beta=amp, target=y, init=free.state,
                   settings=st)
    classic = classic_ep(free, nudged, amp)
    e_classic = float(np.linalg.norm(classic - truth))
    est, _ = holo_ep_npoint(net, params, x, y, amp, 4, settings=st, free=free)
    e_npoint = float(np.linalg.norm(est.real - truth))
    ok = e_npoint < 0.2 * e_classic
    return CheckResult("circle estimate beats one-sided at large nudge", ok,
                       f"classic {e_classic:.2e} vs 4-point {e_npoint:.2e}")


def check_idx_roundtrip():
    rng = np.random.default_rng(0)
    cases = [
        rng.integers(0, 255, size=17).astype(np.uint8),
        rng.integers(-9, 9, size=(3, 4)).astype(np.int32),
        rng.normal(size=(2, 3, 2)).astype(np.float64),
    ]
    ok = True
    for arr in cases:
        back = idx_parse(idx_serialize(arr))
        ok = ok and back.dtype == arr.dtype and np.array_equal(back, arr)
    return CheckResult("idx container round-trip", ok,
                       f"{len(cases)} dtypes bit-exact" if ok else "mismatch")


def check_config_roundtrip():
    cfg = RunConfig({"model.kind": "hopfield", "model.layer_dims": [9, 4],
                     "train.lr": 0.025, "protocol.mode": "npoint"})
    back = RunConfig.parse(cfg.to_text())
    ok = back.values == cfg.values
    try:
        RunConfig({"model.depth": 3})
        ok = False
        detail = "unknown key accepted"
    except Exception as err:
        named = "model.depth" in str(err)
        ok = ok and named
        detail = "lossless; unknown keys rejected by name" if named else str(err)
    return CheckResult("config round-trip and key validation", ok, detail)


def check_training_determinism():
    ds = synth_teacher(80, 8, 3, seed=21)
    net = Network(ModelKind.RECIPROCAL, 8, (6,), 3)
    st = SolverSettings(tolerance=1e-10, max_steps_free=2000,
                        max_steps_nudge=2000, damping=0.1)
    cfg = TrainConfig(batch_size=20, lr=0.05, momentum=0.9, epochs=1,
                      protocol=NudgeProtocol(mode=Mode.NPOINT, amplitude=0.1,
                                             n_points=2),
                      seed=5, probe_size=3, solver=st)
    rows = []
    for _ in range(2):
        params = net.init_params(11, alpha=0.5)
        _, _, row = train_epoch(net, params, ds, cfg, epoch=0)
        rows.append(row.to_dict())
    ok = rows[0] == rows[1]
    return CheckResult("one training epoch is bit-deterministic", ok,
                       "identical metric rows" if ok else f"{rows[0]} != {rows[1]}")


ALL_CHECKS = [
    check_activation_derivatives,
    check_relaxation_contract,
    check_symmetric_exactness,
    check_transport_identity,
    check_npoint_bias_order,
    check_continuous_period_scaling,
    check_classic_vs_npoint_bias,
    check_hutchinson,
    check_homeo_gradient,
    check_homeo_descent,
    check_ep_gradient_fd,
    check_idx_roundtrip,
    check_config_roundtrip,
    check_training_determinism,
]


def run_checks(checks=None):
    results = []
    for fn in checks or ALL_CHECKS:
        try:
            results.append(fn())
        except Exception as err:  # a crashed check is a failed check
            name = fn.__name__.replace("check_", "").replace("_", " ")
            results.append(CheckResult(name, False, f"raised {err!r}"))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        flag = "pass" if r.ok else "FAIL"
        lines.append(f"{flag}  {r.name:<{width}}  {r.detail}")
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
