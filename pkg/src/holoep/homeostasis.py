"""Jacobian symmetry diagnostics and the homeostatic regularizer.

The error signal a nudge transports through the network only matches the
adjoint (backprop) signal when the fixed-point Jacobian is symmetric.  This
module quantifies how far a Jacobian is from symmetric and provides the
regularizer that pushes it there: the symmetric/skew decomposition, the
scalar symmetry measure ||S|| / (||S|| + ||A||), the exact skew energy
2 ||A||_F^2, its matrix-free Hutchinson estimate

    L_homeo = E_eps[ ||J eps||^2 - eps^T J^2 eps ],    eps ~ N(0, I),

and the parameter gradient of that estimate at a frozen fixed point.  The
same Gaussian draws serve the loss and its gradient, so a finite-difference
probe with the shared seed checks the analytic gradient sample-for-sample.
"""

from dataclasses import dataclass, field

import numpy as np

from .estimators import GradientEstimate, _layers_of

__all__ = [
    "SymmetryReport",
    "HutchinsonConfig",
    "HutchinsonEstimate",
    "decompose",
    "symmetry_measure",
    "symmetry_report",
    "homeo_loss_exact",
    "matrix_hutchinson",
    "homeo_loss_hutchinson",
    "homeo_grad",
    "homeo_grad_fd_full",
    "alignment_report",
]


# ---------------------------------------------------------------------------
# dense diagnostics


def _square(J):
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {J.shape}")
    return J


def decompose(J):
    """Split J into its symmetric and skew parts: S=(J+J^T)/2, A=(J-J^T)/2."""
    J = _square(J)
    return (J + J.T) / 2.0, (J - J.T) / 2.0


def homeo_loss_exact(J):
    """Tr(J^T J) - Tr(J^2), which equals 2 ||A||_F^2; zero iff J symmetric."""
    J = _square(J)
    return float(np.sum(J * J) - np.sum(J * J.T))


@dataclass
class SymmetryReport:
    """Scalar symmetry diagnostics of one Jacobian.

    frob_S / frob_A are the Frobenius norms of the symmetric and skew parts,
    symmetry_measure = frob_S / (frob_S + frob_A) (1 symmetric, 0 skew) and
    homeo_exact = 2 frob_A^2, the exact value of the homeostatic loss.
    """

    frob_S: float
    frob_A: float
    symmetry_measure: float
    homeo_exact: float


def symmetry_report(J) -> SymmetryReport:
    S, A = decompose(J)
    fs = float(np.linalg.norm(S))
    fa = float(np.linalg.norm(A))
    total = fs + fa
    measure = 1.0 if total == 0.0 else fs / total
    return SymmetryReport(frob_S=fs, frob_A=fa, symmetry_measure=measure,
                          homeo_exact=2.0 * fa * fa)


def symmetry_measure(J):
    """||S||_F / (||S||_F + ||A||_F); 1 for the zero matrix."""
    return symmetry_report(J).symmetry_measure


# ---------------------------------------------------------------------------
# Hutchinson estimation


@dataclass
class HutchinsonConfig:
    """Sampling plan for the stochastic loss/gradient: fully deterministic
    given the seed, so the loss and its gradient can share draws."""

    n_samples: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class HutchinsonEstimate:
    """Sample mean of the stochastic loss with its spread.

    value       mean of ||J eps||^2 - eps^T J^2 eps over the draws
    std_error   sample standard deviation / sqrt(n_samples) (0 for one draw)
    samples     the per-draw values, in draw order
    """

    value: float
    std_error: float
    samples: np.ndarray = field(repr=False)

    @property
    def n_samples(self):
        return len(self.samples)

    def __float__(self):
        return float(self.value)


def _hutchinson_samples(matvec, rmatvec, dim, cfg: HutchinsonConfig):
    rng = np.random.default_rng(cfg.seed)
    vals = np.empty(cfg.n_samples)
    for i in range(cfg.n_samples):
        eps = rng.standard_normal(dim)
        je = matvec(eps)
        jte = rmatvec(eps)
        # ||J eps||^2 - eps^T J^2 eps, the second term via (J^T eps) . (J eps)
        vals[i] = float(je @ je) - float(jte @ je)
    return vals


def _estimate_from(vals):
    se = 0.0
    if len(vals) > 1:
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    return HutchinsonEstimate(value=float(np.mean(vals)), std_error=se,
                              samples=vals)


def matrix_hutchinson(J, cfg: HutchinsonConfig) -> HutchinsonEstimate:
    """Hutchinson estimate of homeo_loss_exact for an explicit matrix."""
    J = _square(J)
    vals = _hutchinson_samples(lambda v: J @ v, lambda v: J.T @ v,
                               J.shape[0], cfg)
    return _estimate_from(vals)


def homeo_loss_hutchinson(net, params, free_state, cfg: HutchinsonConfig,
                          x=None) -> HutchinsonEstimate:
    """Matrix-free Hutchinson estimate of the homeostatic loss at a state.

    Uses the model's Jacobian-vector products, so it never materializes J;
    x is required by the kinds whose operator depends on the input (pcn,
    hopfield).  Deterministic given cfg.seed.
    """
    layers = _layers_of(free_state)
    vals = _hutchinson_samples(
        lambda v: net.jvp_u(params, layers, v, x=x),
        lambda v: net.vjp_u(params, layers, v, x=x),
        net.state_size, cfg)
    return _estimate_from(vals)


def homeo_grad(net, params, free_state, cfg: HutchinsonConfig, lam,
               x=None) -> GradientEstimate:
    """Parameter gradient of lam times the Hutchinson loss, u* frozen.

    Per draw, d/dtheta ||J eps||^2 = 2 d(a^T J b) with (a, b) = (J eps, eps)
    and d/dtheta eps^T J^2 eps = d(a^T J b) summed over (eps, J eps) and
    (J^T eps, eps); the draws are the same stream homeo_loss_hutchinson uses
    for this cfg, so finite differences of that loss with the shared seed
    check this gradient directly.  The fixed point is treated as a constant:
    nothing flows through u*(theta) (see homeo_grad_fd_full for the
    comparison utility).
    """
    layers = _layers_of(free_state)
    rng = np.random.default_rng(cfg.seed)
    raw = None
    vals = np.empty(cfg.n_samples)
    for i in range(cfg.n_samples):
        eps = rng.standard_normal(net.state_size)
        je = net.jvp_u(params, layers, eps, x=x)
        jte = net.vjp_u(params, layers, eps, x=x)
        vals[i] = float(je @ je) - float(jte @ je)
        g1 = net.grad_theta_bilinear(params, layers, je, eps, x=x)
        g2 = net.grad_theta_bilinear(params, layers, eps, je, x=x)
        g3 = net.grad_theta_bilinear(params, layers, jte, eps, x=x)
        contrib = {k: 2.0 * g1[k] - g2[k] - g3[k] for k in g1}
        raw = contrib if raw is None else {k: raw[k] + contrib[k] for k in raw}
    tensors = {k: (lam / cfg.n_samples) * v for k, v in raw.items()}
    return GradientEstimate(tensors=tensors, imag_diagnostic=0.0,
                            extras={"loss": _estimate_from(vals), "lam": lam})


def homeo_grad_fd_full(net, params, x, cfg: HutchinsonConfig, lam, settings,
                       step=1e-5, names=None):
    """Central finite differences of lam * Hutchinson loss with the fixed
    point re-solved at every probe: the *full* gradient including the motion
    of u*(theta), for comparison against the frozen-point homeo_grad.
    O(2 * n_entries) relaxations -- diagnostics on toy models only.
    Returns {name: array} over the probed parameter names.
    """
    from .fixedpoint import relax

    def loss_at(ps):
        res = relax(net, ps, x, settings=settings)
        return lam * homeo_loss_hutchinson(net, ps, res.state, cfg, x=x).value

    base = params.to_dict()
    out = {}
    for name in (names or net.network_param_names()):
        t = np.asarray(base[name], dtype=float)
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            up = {k: np.array(v, dtype=float) for k, v in base.items()}
            up[name][idx] += step
            down = {k: np.array(v, dtype=float) for k, v in base.items()}
            down[name][idx] -= step
            g[idx] = (loss_at(params.with_tensors(up))
                      - loss_at(params.with_tensors(down))) / (2.0 * step)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# alignment


def _batched_cosine(a, b):
    a2 = np.atleast_2d(a)
    b2 = np.atleast_2d(b)
    num = np.sum(a2 * b2, axis=-1)
    den = np.linalg.norm(a2, axis=-1) * np.linalg.norm(b2, axis=-1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.mean(cos))


def alignment_report(delta_hat, delta_rbp, layer_offsets):
    """Per-layer cosine similarity between two flat error vectors.

    layer_offsets are the cumulative unit offsets (Network.offsets());
    2-D inputs are batches and the per-sample cosines are averaged.
    Returns one cosine per layer, in layer order.
    """
    a = np.real(np.asarray(delta_hat))
    b = np.real(np.asarray(delta_rbp))
    out = []
    for l in range(len(layer_offsets) - 1):
        sl = slice(layer_offsets[l], layer_offsets[l + 1])
        out.append(_batched_cosine(a[..., sl], b[..., sl]))
    return out
