"""Fixed-point solver for the discrete network dynamics.

The network defines a synchronous update map G; its vector field is
F(u) = G(u) - u and a fixed point is any state with F(u*) = 0.  The solver
iterates G with an optional damping factor and a scale-free stopping rule:
the per-sample relative residual ||G(u) - u|| / (1 + ||u||) must fall below
the tolerance.  The loop always evaluates the residual *before* applying an
update, and stops without applying the final defect, so the residual reported
in the result is the residual of the returned state.

Free solves start from the zero state by default; nudged solves are meant to
warm-start from the free fixed point (see ``relax_path``), which is why the
nudged step budget is much smaller than the free one.

Two execution paths produce identical iterates: a pure-numpy loop around
``Network.step`` (works for every model kind and for duck-typed toy models)
and the fused numba kernels of :mod:`holoep.kernels` for the dense layered
architectures.  The ``HOLOEP_BACKEND`` environment variable (or
``backend.use_backend``) selects between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend, kernels
from .models import NetworkState, NudgeSpec


@dataclass
class SolverSettings:
    """Stopping rule for the relaxation loop.

    tolerance        relative residual below which a state counts as a fixed
                     point
    max_steps_free   update budget for cold-started solves
    max_steps_nudge  update budget for warm-started nudged solves
    damping          0 applies the plain synchronous update; rho in (0, 1]
                     blends u <- (1 - rho) u + rho G(u) for ill-conditioned
                     models (stored here as the retained fraction of u)
    """

    tolerance: float = 1e-8
    max_steps_free: int = 150
    max_steps_nudge: int = 20
    damping: float = 0.0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_steps_free < 1 or self.max_steps_nudge < 1:
            raise ValueError("step budgets must be at least 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


class DivergenceError(RuntimeError):
    """The iteration produced a non-finite state."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class FixedPointResult:
    """Outcome of one relaxation.

    residual is the worst relative residual over the batch at the returned
    state; per_sample holds the individual residuals (a scalar for a single
    input).  converged = True guarantees residual <= tolerance.
    """

    state: NetworkState
    residual: float
    iterations: int
    converged: bool
    per_sample: np.ndarray | float | None = None


def _python_loop(net, params, x, nudge, layers, tol, max_steps, damping):
    """Reference relaxation loop; mirrors the fused kernels exactly."""
    keep = 1.0 - damping
    updates = 0
    status = 0
    per = 0.0
    for it in range(max_steps + 1):
        new = net.step(params, layers, x, nudge)
        dsq = 0.0
        usq = 0.0
        for old, nxt in zip(layers, new):
            d = nxt - old
            dsq = dsq + np.sum(np.abs(d) ** 2, axis=-1)
            usq = usq + np.sum(np.abs(old) ** 2, axis=-1)
        per = np.sqrt(dsq) / (1.0 + np.sqrt(usq))
        rmax = float(np.max(per))
        if not np.isfinite(rmax):
            status = 1
            break
        if rmax <= tol or it == max_steps:
            break
        layers = [old + keep * (nxt - old) for old, nxt in zip(layers, new)]
        updates += 1
    return layers, updates, per, status


def _resolve_init(net, init, batch):
    if init is None:
        return net.zero_state(batch)
    if isinstance(init, NetworkState):
        return [np.array(u) for u in init.layers]
    return [np.array(u) for u in init]


def relax(net, params, x, beta=0.0, target=None, init=None, settings=None,
          max_steps=None) -> FixedPointResult:
    """Iterate the update map to a fixed point.

    x may be a single input vector or a batch (leading axis); the state
    follows the same layout.  A nonzero beta requires a target (the nudge
    couples the readout error into the top layer).  init = None starts from
    the zero state.  The step budget defaults to max_steps_free, or to
    max_steps_nudge when an initial state is supplied together with a nonzero
    beta (the warm-started nudged phase).

    Raises DivergenceError when the iteration produces non-finite values;
    plain failure to reach the tolerance inside the budget returns a result
    with converged = False instead.
    """
    settings = settings or SolverSettings()
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if beta != 0 and target is None:
        raise ValueError("nonzero beta requires a target")
    use_nudge = target is not None and beta != 0

    if max_steps is None:
        warm = init is not None
        max_steps = (settings.max_steps_nudge if (warm and use_nudge)
                     else settings.max_steps_free)

    layers = _resolve_init(net, init, None if single else x.shape[0])

    if backend.backend_name() == "numba" and kernels.supports(net):
        out, updates, per, status = kernels.relax_mlp(
            net, params, x, beta, target if use_nudge else None, layers,
            settings.tolerance, max_steps, settings.damping)
        if single:
            out = [u[0] for u in out]
            per = float(per[0])
    else:
        nudge = NudgeSpec(beta, target) if use_nudge else None
        out, updates, per, status = _python_loop(
            net, params, x, nudge, layers, settings.tolerance, max_steps,
            settings.damping)
        per = float(per) if np.ndim(per) == 0 else np.asarray(per)

    if status != 0:
        raise DivergenceError(
            f"non-finite state after {updates} updates (beta={beta!r})",
            iteration=updates)
    rmax = float(np.max(per))
    return FixedPointResult(
        state=NetworkState([np.asarray(u) for u in out]),
        residual=rmax,
        iterations=updates,
        converged=rmax <= settings.tolerance,
        per_sample=per,
    )


def relax_path(net, params, x, beta_values, target=None, init=None,
               settings=None):
    """Solve a sequence of nudge values, warm-starting each from the last.

    The first entry (conventionally beta = 0) gets the cold-start budget;
    every later solve starts from the previous fixed point and gets the short
    nudged budget.  Divergence is re-raised with the failing index.
    """
    results = []
    prev = init
    for k, beta in enumerate(beta_values):
        try:
            res = relax(net, params, x, beta=beta, target=target, init=prev,
                        settings=settings)
        except DivergenceError as err:
            raise DivergenceError(
                f"divergence at path index {k} (beta={beta!r}): {err}",
                iteration=err.iteration) from err
        results.append(res)
        prev = res.state
    return results


def residual(net, params, state, x, beta=0.0, target=None) -> float:
    """Relative residual ||G(u) - u|| / (1 + ||u||) at the given state.

    Returns the worst value over the batch; zero iff the state is an exact
    fixed point.
    """
    layers = state.layers if isinstance(state, NetworkState) else list(state)
    nudge = NudgeSpec(beta, target) if (target is not None and beta != 0) else None
    new = net.step(params, layers, x, nudge)
    dsq = 0.0
    usq = 0.0
    for old, nxt in zip(layers, new):
        dsq = dsq + np.sum(np.abs(nxt - old) ** 2, axis=-1)
        usq = usq + np.sum(np.abs(old) ** 2, axis=-1)
    return float(np.max(np.sqrt(dsq) / (1.0 + np.sqrt(usq))))
