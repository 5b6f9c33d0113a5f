"""Neuronal-error-vector and parameter-gradient estimators.

A converged network carries a loss signal in the derivative of its fixed
point with respect to the nudge value beta.  Every estimator here produces
either that derivative (or an approximation to it) as a flat "error vector"
over all state units, or the resulting parameter gradient obtained by
contracting the error vector with the presynaptic sensitivity dF/dtheta.

Estimators, from cheapest to most informative:

  classic      one-sided finite difference (u*_beta - u*_0) / beta; biased
               at first order in the nudge amplitude.
  npoint       samples the fixed point on a circle of radius |beta| in the
               complex nudge plane and extracts the first derivative by a
               discrete Cauchy integral; bias falls as |beta|^N.
  continuous   the same circle swept by the live dynamics without separate
               relaxations per point; the running averages converge to the
               npoint values with an O(1/steps) remainder.
  ground_truth the implicit-function derivative -J^{-1} dF/dbeta via a dense
               linear solve (exact in amplitude; still differs from the loss
               gradient when J is asymmetric).
  rbp          the adjoint vector -J^{-T} dL/du, i.e. what backpropagation
               through the equilibrium computes; contracting it gives the
               exact loss gradient for any Jacobian.

The last two are oracles: dense, desk-scale by design (state capped at 4096
units), used for training experiments and for calibrating the others.

All estimators accept a single input vector or a batch; gradients returned in
a GradientEstimate are batch means, while error vectors keep one row per
sample.  Gradients are projected to their real part; the largest imaginary
magnitude seen before projection is reported as a diagnostic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (DivergenceError, FixedPointResult, SolverSettings,
                         relax, relax_path)
from .models import ModelKind, NetworkState, NudgeSpec, sigma


class Mode(str, enum.Enum):
    CLASSIC = "classic"
    NPOINT = "npoint"
    CONTINUOUS = "continuous"
    GROUND_TRUTH = "ground_truth"
    RBP = "rbp"


#: Modes whose estimate depends on the nudge amplitude.
NUDGED_MODES = (Mode.CLASSIC, Mode.NPOINT, Mode.CONTINUOUS)


@dataclass
class NudgeProtocol:
    """How to perturb the network to read out the error signal.

    amplitude        |beta|, the teaching amplitude (> 0 for nudged modes;
                     ignored by ground_truth/rbp)
    mode             estimator selection
    n_points         points on the nudge circle (npoint/continuous, >= 2)
    periods          full sweeps of the circle (continuous)
    steps_per_point  dynamics updates while beta sits at each point
                     (continuous)
    path_average     npoint only: average the presynaptic term over the N
                     nudged fixed points instead of using the free one (both
                     are consistent; the free point is the default)
    """

    amplitude: float = 0.1
    mode: Mode = Mode.NPOINT
    n_points: int = 4
    periods: int = 1
    steps_per_point: int = 60
    path_average: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.mode in NUDGED_MODES and not self.amplitude > 0:
            raise ValueError(f"{self.mode.value} needs a positive amplitude")
        if self.mode in (Mode.NPOINT, Mode.CONTINUOUS) and self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if self.periods < 1 or self.steps_per_point < 1:
            raise ValueError("periods and steps_per_point must be >= 1")


@dataclass
class GradientEstimate:
    """Per-parameter real gradients plus diagnostics.

    tensors          {name: real array} over the model's network parameters,
                     batch-mean
    imag_diagnostic  max |Im| over all gradient entries before the real
                     projection (0 for intrinsically real estimators)
    delta            the error vector the gradient was contracted with, one
                     row per sample (complex for the holomorphic modes)
    free             the free-phase solve, when the estimator performed one
    extras           estimator-specific diagnostics
    """

    tensors: dict
    imag_diagnostic: float
    delta: np.ndarray | None = None
    free: FixedPointResult | None = None
    extras: dict = field(default_factory=dict)


class ConvergenceError(RuntimeError):
    """A required fixed-point solve did not reach tolerance."""


class IllConditionedError(RuntimeError):
    """A dense Jacobian solve could not be trusted."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


# ---------------------------------------------------------------------------
# small shared helpers


def _layers_of(state):
    if isinstance(state, FixedPointResult):
        return state.state.layers
    if isinstance(state, NetworkState):
        return state.layers
    return list(state)


def _require(result: FixedPointResult, what: str):
    if not result.converged:
        raise ConvergenceError(
            f"{what} did not converge (residual {result.residual:.3e} "
            f"after {result.iterations} updates)")
    return result


def _loss_grad_state(net, params, layers, target):
    """dL/du of the readout cross-entropy, flat over the state.

    Nonzero only on the top layer. This is the pure loss derivative: unlike
    ``Network.dfdbeta`` it never carries the Euler step factor of the pcn
    dynamics.
    """
    force = net.loss_force(params, layers[-1], target)
    pieces = [np.zeros_like(np.asarray(u, dtype=force.dtype))
              for u in layers[:-1]]
    pieces.append(force)
    return np.concatenate(pieces, axis=-1)


def _batch_mean(tensors, delta):
    if np.ndim(delta) == 2:
        n = delta.shape[0]
        return {k: v / n for k, v in tensors.items()}
    return tensors


def _project(tensors):
    """Real part of the tensors plus the worst |Im| seen."""
    worst = 0.0
    out = {}
    for name, arr in tensors.items():
        if np.iscomplexobj(arr):
            worst = max(worst, float(np.max(np.abs(arr.imag))) if arr.size else 0.0)
            out[name] = np.ascontiguousarray(arr.real)
        else:
            out[name] = arr
    return out, worst


def _assemble(net, params, x, layers, delta, free=None, extras=None, s=None):
    raw = net.presyn_grad(params, layers, x, delta, s=s)
    tensors, imag = _project(_batch_mean(raw, delta))
    return GradientEstimate(tensors=tensors, imag_diagnostic=imag,
                            delta=delta, free=free, extras=extras or {})


def _solve_checked(mat, rhs, what):
    """Dense solve with a residual check; raises IllConditionedError."""
    try:
        sol = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as err:
        raise IllConditionedError(f"{what}: singular matrix ({err})",
                                  condition=np.inf) from err
    scale = np.linalg.norm(rhs)
    defect = np.linalg.norm(mat @ sol - rhs) / (scale if scale > 0 else 1.0)
    if not np.isfinite(defect) or defect > 1e-6:
        cond = float(np.linalg.cond(mat))
        raise IllConditionedError(
            f"{what}: solve defect {defect:.3e}, condition estimate {cond:.3e}",
            condition=cond)
    return sol


# ---------------------------------------------------------------------------
# error-vector estimators


def cauchy_first_derivative(samples, amplitude):
    """First derivative at 0 from N samples on the circle of given radius.

    samples[k] is the function value at amplitude * exp(2i pi k / N); the
    estimate is sum_k samples[k] e^{-2i pi k / N} / (N * amplitude).  Exact
    for polynomials of degree <= N; the term of degree N+1 aliases onto the
    estimate with weight amplitude^N, which sets the leading bias.  N = 1
    would alias the constant term and is rejected.
    """
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 circle samples")
    if not amplitude > 0:
        raise ValueError("amplitude must be positive")
    acc = 0
    for k, val in enumerate(samples):
        acc = acc + np.asarray(val) * np.exp(-2j * np.pi * k / n)
    return acc / (n * amplitude)


def classic_ep(free: FixedPointResult, nudged: FixedPointResult, beta):
    """One-sided estimate (u*_beta - u*_0) / beta, flat over the state."""
    if beta == 0:
        raise ValueError("classic estimate needs a nonzero beta")
    _require(free, "free phase")
    _require(nudged, "nudged phase")
    return (nudged.state.flat() - free.state.flat()) / beta


def holo_ep_npoint(net, params, x, target, amplitude, n_points,
                   settings=None, path_average=False, free=None):
    """N-point circle estimate of d(u*)/d(beta) plus the assembled gradient.

    Relaxes the free phase (unless one is passed in), then warm-starts one
    nudged solve per circle point beta_k = amplitude * e^{2i pi k / N} and
    combines them by the discrete Cauchy integral. The gradient contracts
    dF/dtheta at the free fixed point with the estimate by default;
    path_average=True averages the presynaptic term over the N nudged points
    instead.

    Returns (delta, GradientEstimate); delta has one row per sample.
    """
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    settings = settings or SolverSettings()
    if free is None:
        free = relax(net, params, x, settings=settings)
    _require(free, "free phase")

    betas = [amplitude * np.exp(2j * np.pi * k / n_points)
             for k in range(n_points)]
    try:
        nudged = relax_path(net, params, x, betas, target=target,
                            init=free.state, settings=settings)
    except DivergenceError as err:
        raise DivergenceError(f"nudged solve diverged: {err}",
                              iteration=err.iteration) from err
    for k, res in enumerate(nudged):
        if not res.converged:
            raise ConvergenceError(
                f"nudged solve {k} (beta={betas[k]:.4g}) did not converge "
                f"(residual {res.residual:.3e})")

    delta = cauchy_first_derivative([r.state.flat() for r in nudged],
                                    amplitude)
    extras = {"nudged_iterations": [r.iterations for r in nudged]}

    if path_average:
        raw = None
        for res in nudged:
            g = net.presyn_grad(params, res.state.layers, x, delta)
            raw = g if raw is None else {k: raw[k] + g[k] for k in raw}
        raw = {k: v / n_points for k, v in raw.items()}
        tensors, imag = _project(_batch_mean(raw, delta))
        est = GradientEstimate(tensors=tensors, imag_diagnostic=imag,
                               delta=delta, free=free, extras=extras)
    else:
        est = _assemble(net, params, x, free.state.layers, delta, free=free,
                        extras=extras)
    return delta, est


def holo_ep_continuous(net, params, x, target, protocol: NudgeProtocol,
                       settings=None):
    """Sweep the nudge circle with the live dynamics; no separate free phase.

    beta is held at each of the N circle points for steps_per_point
    synchronous updates, cycling `periods` times, starting from the zero
    state.  Each update applies the solver's damping
    (u <- u + (1 - damping) (G(u) - u)); kinds whose raw synchronous map
    oscillates (hopfield) need a nonzero damping here just as in the solver.  Two running averages are kept over every update: the
    phase-weighted state (whose mean over full cycles is the N-point Cauchy
    estimate, up to an O(1/steps) transient remainder) and the presynaptic
    activations (whose mean approximates their free-phase values, since the
    average of a holomorphic function over the circle is its center value).
    The gradient contracts the averaged presynaptic term with the final
    delta.  For pcn and hopfield the presynaptic operator is not linear in
    any single activation average, so the path states are kept and the
    parameter gradients themselves are averaged exactly.

    Returns (delta, GradientEstimate).
    """
    if protocol.mode != Mode.CONTINUOUS:
        raise ValueError("protocol.mode must be continuous")
    settings = settings or SolverSettings()
    amp = protocol.amplitude
    n = protocol.n_points
    keep = 1.0 - settings.damping

    layers = net.zero_state(None if np.ndim(x) == 1 else np.shape(x)[0])
    layers = [u.astype(complex) for u in layers]
    acc = 0
    s_acc = None
    path_states = []
    store_states = getattr(net, "kind", None) in (ModelKind.PCN,
                                                  ModelKind.HOPFIELD)
    steps = 0
    for period in range(protocol.periods):
        for k in range(n):
            beta_k = amp * np.exp(2j * np.pi * k / n)
            phase = np.exp(-2j * np.pi * k / n)
            nudge = NudgeSpec(beta_k, target)
            for _ in range(protocol.steps_per_point):
                new = net.step(params, layers, x, nudge)
                layers = [u + keep * (g - u) for u, g in zip(layers, new)]
                if not all(np.all(np.isfinite(u)) for u in layers):
                    raise DivergenceError(
                        f"dynamics diverged at period {period}, point {k}",
                        iteration=steps)
                acc = acc + net.join(layers) * phase
                if store_states:
                    path_states.append([u.copy() for u in layers])
                else:
                    svals = [sigma(u) for u in layers]
                    if s_acc is None:
                        s_acc = svals
                    else:
                        s_acc = [a + b for a, b in zip(s_acc, svals)]
                steps += 1

    delta = acc / (steps * amp)
    extras = {"total_steps": steps,
              "final_state": NetworkState([np.asarray(u) for u in layers])}

    if store_states:
        raw = None
        for st in path_states:
            g = net.presyn_grad(params, st, x, delta)
            raw = g if raw is None else {k: raw[k] + g[k] for k in raw}
        raw = {k: v / len(path_states) for k, v in raw.items()}
        tensors, imag = _project(_batch_mean(raw, delta))
        est = GradientEstimate(tensors=tensors, imag_diagnostic=imag,
                               delta=delta, free=None, extras=extras)
    else:
        s_bar = [a / steps for a in s_acc]
        extras["presyn_average"] = s_bar
        est = _assemble(net, params, x, layers, delta, free=None,
                        extras=extras, s=s_bar)
    return delta, est


# ---------------------------------------------------------------------------
# dense oracles


def _per_sample(net, params, layers, target, x, solver):
    """Run a per-sample dense solve over a possibly batched state."""
    batched = layers[0].ndim == 2
    if not batched:
        return solver(layers, target, x)
    rows = []
    for i in range(layers[0].shape[0]):
        li = [u[i] for u in layers]
        ti = target[i] if np.ndim(target) == 2 else target
        xi = x[i] if (x is not None and np.ndim(x) == 2) else x
        rows.append(solver(li, ti, xi))
    return np.stack(rows)


def ground_truth_dudbeta(net, params, free_state, target, x=None,
                         max_state=4096):
    """Exact d(u*)/d(beta) at beta = 0 by implicit differentiation.

    Solves J_F xi = -dF/dbeta at the free fixed point, densely, per sample.
    Raises IllConditionedError when the solve cannot be trusted (defect above
    1e-6 triggers a condition estimate).
    """
    layers = _layers_of(free_state)

    def solve_one(li, ti, xi):
        jac = net.jacobian_dense(params, li, x=xi, max_state=max_state)
        rhs = net.dfdbeta(params, li, ti)
        return -_solve_checked(jac, rhs, "ground_truth_dudbeta")

    return _per_sample(net, params, layers, target, x, solve_one)


def rbp_delta(net, params, free_state, target, x=None, max_state=4096):
    """Adjoint error vector -J_F^{-T} dL/du at the free fixed point.

    This is the quantity backpropagation-through-equilibrium computes;
    contracting it with dF/dtheta gives the exact loss gradient regardless
    of Jacobian symmetry.
    """
    layers = _layers_of(free_state)

    def solve_one(li, ti, xi):
        jac = net.jacobian_dense(params, li, x=xi, max_state=max_state)
        rhs = _loss_grad_state(net, params, li, ti)
        return -_solve_checked(jac.T, rhs, "rbp_delta")

    return _per_sample(net, params, layers, target, x, solve_one)


def asymmetry_transport(jac, delta):
    """J^{-1} J^T delta: maps the adjoint vector onto d(u*)/d(beta).

    The two error vectors agree exactly when J is symmetric; this transport
    makes the asymmetry-induced gap explicit and testable.
    """
    return _solve_checked(jac, jac.T @ np.asarray(delta),
                          "asymmetry_transport")


def first_order_transport(sym, skew, delta):
    """First-order expansion of asymmetry_transport for J = S + A.

    (S+A)^{-1}(S+A)^T delta = delta - 2 S^{-1} A delta + O(|A|^2) when A is
    the skew part; useful for checking the quadratic remainder.
    """
    return np.asarray(delta) - 2.0 * _solve_checked(
        sym, skew @ np.asarray(delta), "first_order_transport")


# ---------------------------------------------------------------------------
# front door + sweep


def estimate_gradient(net, params, x, target, protocol: NudgeProtocol,
                      settings=None, free=None) -> GradientEstimate:
    """Run the protocol's estimator and return the batch-mean gradient.

    A precomputed free-phase result can be passed to avoid re-solving (it is
    ignored by the continuous mode, which never uses a separate free phase).
    """
    settings = settings or SolverSettings()
    mode = protocol.mode

    if mode == Mode.CONTINUOUS:
        _, est = holo_ep_continuous(net, params, x, target, protocol,
                                    settings)
        return est

    if mode == Mode.NPOINT:
        _, est = holo_ep_npoint(net, params, x, target, protocol.amplitude,
                                protocol.n_points, settings=settings,
                                path_average=protocol.path_average, free=free)
        return est

    if free is None:
        free = relax(net, params, x, settings=settings)
    _require(free, "free phase")

    if mode == Mode.CLASSIC:
        nudged = relax(net, params, x, beta=protocol.amplitude, target=target,
                       init=free.state, settings=settings)
        delta = classic_ep(free, nudged, protocol.amplitude)
        return _assemble(net, params, x, free.state.layers, delta, free=free,
                         extras={"nudged_iterations": nudged.iterations})

    if mode == Mode.GROUND_TRUTH:
        delta = ground_truth_dudbeta(net, params, free.state, target, x=x)
    elif mode == Mode.RBP:
        delta = rbp_delta(net, params, free.state, target, x=x)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown mode {mode!r}")
    return _assemble(net, params, x, free.state.layers, delta, free=free)


SWEEP_HEADER = ("amplitude, n_points, layer, cosine_vs_rbp, "
                "cosine_vs_truth, imag_diag")


def _cosine(u, v):
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.real(np.vdot(u, v)) / (nu * nv))


def beta_sweep(net, params, x, target, amplitudes, n_points_list,
               settings=None):
    """Cosine similarity of each estimator against the dense oracles.

    For every (amplitude, n_points) pair the error-vector estimate is
    compared, per sample, against rbp_delta and ground_truth_dudbeta; the
    batch-mean cosines are reported for the whole state (layer = -1) and for
    each layer slice.  n_points = 1 encodes the classic one-sided estimate
    at a real nudge; entries >= 2 are circle estimates.  Cosines use the real
    part of the estimate; the dropped imaginary magnitude is reported per
    slice in imag_diag.

    Returns a list of row dicts matching SWEEP_HEADER.
    """
    settings = settings or SolverSettings()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    free = relax(net, params, x, settings=settings)
    _require(free, "free phase")

    truth = ground_truth_dudbeta(net, params, free.state, target, x=x)
    adjoint = rbp_delta(net, params, free.state, target, x=x)

    rows = []
    for amp in amplitudes:
        for n_points in n_points_list:
            if n_points == 1:
                nudged = relax(net, params, x, beta=amp, target=target,
                               init=free.state, settings=settings)
                delta = classic_ep(free, nudged, amp).astype(complex)
            else:
                delta, _ = holo_ep_npoint(net, params, x, target, amp,
                                          n_points, settings=settings,
                                          free=free)
            re = delta.real
            for layer in range(-1, net.n_layers):
                if layer < 0:
                    sl = slice(None)
                else:
                    offs = net.offsets()
                    sl = slice(offs[layer], offs[layer + 1])
                cos_rbp = float(np.mean([
                    _cosine(re[i, sl], adjoint[i, sl])
                    for i in range(re.shape[0])]))
                cos_truth = float(np.mean([
                    _cosine(re[i, sl], truth[i, sl])
                    for i in range(re.shape[0])]))
                imag = float(np.max(np.abs(delta[:, sl].imag)))
                rows.append({
                    "amplitude": float(amp),
                    "n_points": int(n_points),
                    "layer": int(layer),
                    "cosine_vs_rbp": cos_rbp,
                    "cosine_vs_truth": cos_truth,
                    "imag_diag": imag,
                })
    return rows


def sweep_rows_to_csv(rows) -> str:
    """Render beta_sweep rows as a deterministic CSV string."""
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(
            f"{r['amplitude']:.6g}, {r['n_points']:d}, {r['layer']:d}, "
            f"{r['cosine_vs_rbp']:.10f}, {r['cosine_vs_truth']:.10f}, "
            f"{r['imag_diag']:.6e}")
    return "\n".join(lines) + "\n"
