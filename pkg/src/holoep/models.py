"""Convergent network models and their first-order structure.

A model is a discrete update map G over a layered state u = (u_0, ..., u_{L-1});
its fixed-point residual field is F(u) := G(u) - u, so equilibria solve
F(u*) = 0 and the state Jacobian is J_F = J_G - I. Everything downstream
(implicit differentiation, nudge estimators, homeostasis) is phrased in terms
of F, its parameter sensitivity dF/dtheta, and J_F.

Four architectures share this interface:

* ``reciprocal``       layered MLP with independent forward/backward weights
* ``hopfield``         same wiring with the backward weights tied to the
                       transposed forward weights (symmetric Jacobian)
* ``direct_feedback``  feed-forward chain plus a single feedback matrix from
                       the top layer into the first hidden layer
* ``pcn``              predictive-coding network: explicit error neurons
                       eps_l = u_l - (w_fwd sigma(u_{l-1}) + b_l) and one Euler
                       step of du_l/dt = -eps_l + sigma'(u_l) * (w_bwd eps_{l+1})

The output nudge enters the top layer's update as ``beta * dL/du_top`` where L
is the cross-entropy of softmax(w_ro sigma(u_top) + b_ro) against the one-hot
target. With this convention dF/dbeta at the free point equals the loss
gradient dL/du exactly, which pins the signs of every estimator identity used
elsewhere. All maps extend analytically to complex state and complex beta.

State conventions: layer arrays have shape (d_l,) or batched (B, d_l); flat
vectors concatenate layers along the last axis. Weight matrices are stored
(out_dim, in_dim) and applied as ``s @ W.T``.
"""

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

SIGMA_CLAMP = 40.0

CHECKPOINT_VERSION = 1


class ModelKind(str, Enum):
    RECIPROCAL = "reciprocal"
    HOPFIELD = "hopfield"
    DIRECT_FEEDBACK = "direct_feedback"
    PCN = "pcn"


class JacobianSizeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def sigma(x):
    """Shifted sigmoid 1/(1 + exp(-4x + 2)), the network nonlinearity.

    Defined for real and complex arguments. The real part of the exponent is
    clamped to +/-40 before exponentiation so saturated units cannot overflow;
    the clamp sits far outside any operating region of the dynamics.
    """
    w = -4.0 * x + 2.0
    if np.iscomplexobj(w):
        w = np.clip(w.real, -SIGMA_CLAMP, SIGMA_CLAMP) + 1j * w.imag
    else:
        w = np.clip(w, -SIGMA_CLAMP, SIGMA_CLAMP)
    return 1.0 / (1.0 + np.exp(w))


def dsigma_from_s(s):
    """sigma'(x) expressed through s = sigma(x): 4 s (1 - s)."""
    return 4.0 * s * (1.0 - s)


def dsigma(x):
    return dsigma_from_s(sigma(x))


def d2sigma(x):
    """sigma''(x) = 16 s (1 - s)(1 - 2s)."""
    s = sigma(x)
    return 16.0 * s * (1.0 - s) * (1.0 - 2.0 * s)


def softmax(z):
    """Softmax along the last axis, analytic in z.

    Shifts by the maximum real part (softmax is invariant under constant
    shifts, complex ones included) and clamps the shifted exponent's real part
    at -40, mirroring the sigmoid clamp.
    """
    if np.iscomplexobj(z):
        w = z - np.max(z.real, axis=-1, keepdims=True)
        w = np.clip(w.real, -SIGMA_CLAMP, SIGMA_CLAMP) + 1j * w.imag
    else:
        w = z - np.max(z, axis=-1, keepdims=True)
        w = np.clip(w, -SIGMA_CLAMP, SIGMA_CLAMP)
    e = np.exp(w)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class NudgeSpec:
    """Output nudge: amplitude beta (real or complex) and a one-hot target.

    target has shape (n_classes,) or (B, n_classes) for batched states.
    """

    beta: complex
    target: np.ndarray


@dataclass
class NetworkState:
    """Layered state with flat-vector views for the estimator algebra."""

    layers: list

    @property
    def dims(self):
        return tuple(u.shape[-1] for u in self.layers)

    def flat(self):
        return np.concatenate(self.layers, axis=-1)

    @classmethod
    def from_flat(cls, dims, vec):
        out, off = [], 0
        for d in dims:
            out.append(vec[..., off : off + d])
            off += d
        if off != vec.shape[-1]:
            raise ValueError(f"flat vector length {vec.shape[-1]} != sum of dims {off}")
        return cls([np.array(u) for u in out])

    def copy(self):
        return NetworkState([u.copy() for u in self.layers])

    def max_imag(self) -> float:
        m = 0.0
        for u in self.layers:
            if np.iscomplexobj(u):
                m = max(m, float(np.max(np.abs(u.imag))) if u.size else 0.0)
        return m


@dataclass
class ModelParams:
    """Parameter tensors. Shapes, with layer dims (d_0, ..., d_{L-1}):

    w_in    (d_0, in_dim)
    w_fwd[k] (d_{k+1}, d_k)          k = 0..L-2
    w_bwd[k] (d_k, d_{k+1})          reciprocal / pcn only (hopfield ties to
                                     w_fwd[k].T, direct_feedback has none)
    w_fb    (d_0, d_{L-1})           direct_feedback only
    b[l]    (d_l,)
    w_ro    (n_classes, d_{L-1})     readout, not part of the recurrent state
    b_ro    (n_classes,)
    """

    w_in: np.ndarray
    w_fwd: list
    w_bwd: list | None
    w_fb: np.ndarray | None
    b: list
    w_ro: np.ndarray
    b_ro: np.ndarray

    def named(self):
        """Yield (name, tensor) in the fixed serialization order."""
        yield "w_in", self.w_in
        for k, w in enumerate(self.w_fwd):
            yield f"w_fwd.{k}", w
        if self.w_bwd is not None:
            for k, w in enumerate(self.w_bwd):
                yield f"w_bwd.{k}", w
        if self.w_fb is not None:
            yield "w_fb", self.w_fb
        for l, v in enumerate(self.b):
            yield f"b.{l}", v
        yield "w_ro", self.w_ro
        yield "b_ro", self.b_ro

    def to_dict(self):
        return dict(self.named())

    def with_tensors(self, tensors: dict) -> "ModelParams":
        """Rebuild, replacing tensors by name; missing names keep current values."""
        cur = self.to_dict()
        cur.update(tensors)
        return ModelParams(
            w_in=cur["w_in"],
            w_fwd=[cur[f"w_fwd.{k}"] for k in range(len(self.w_fwd))],
            w_bwd=None
            if self.w_bwd is None
            else [cur[f"w_bwd.{k}"] for k in range(len(self.w_bwd))],
            w_fb=None if self.w_fb is None else cur["w_fb"],
            b=[cur[f"b.{l}"] for l in range(len(self.b))],
            w_ro=cur["w_ro"],
            b_ro=cur["b_ro"],
        )

    def copy(self):
        return self.with_tensors({k: v.copy() for k, v in self.named()})


def _outer(a, b):
    """outer(a, b) for vectors; sum of per-sample outers for (B, n) inputs."""
    if a.ndim == 1:
        return np.outer(a, b)
    return np.einsum("bi,bj->ij", a, b)


def _sumv(a):
    return a.copy() if a.ndim == 1 else a.sum(axis=0)


@dataclass(frozen=True)
class Network:
    """Architecture record: kind plus dimensions. Parameters live separately
    so estimator and optimizer code can treat them as values."""

    kind: ModelKind
    in_dim: int
    layer_dims: tuple
    n_classes: int
    pcn_dt: float = 0.5

    def __post_init__(self):
        if len(self.layer_dims) < 1:
            raise ValueError("need at least one layer")
        if any(d < 1 for d in self.layer_dims) or self.in_dim < 1 or self.n_classes < 1:
            raise ValueError("dimensions must be positive")
        if self.kind == ModelKind.DIRECT_FEEDBACK and len(self.layer_dims) < 2:
            raise ValueError("direct_feedback needs at least two layers")

    # -- geometry ---------------------------------------------------------

    @property
    def n_layers(self):
        return len(self.layer_dims)

    @property
    def state_size(self):
        return int(sum(self.layer_dims))

    def offsets(self):
        offs = [0]
        for d in self.layer_dims:
            offs.append(offs[-1] + d)
        return offs

    def split(self, vec):
        """Views of a flat vector (..., state_size) as per-layer arrays."""
        offs = self.offsets()
        if vec.shape[-1] != self.state_size:
            raise ValueError(
                f"flat vector has {vec.shape[-1]} units, expected {self.state_size}"
            )
        return [vec[..., offs[l] : offs[l + 1]] for l in range(self.n_layers)]

    def join(self, layers):
        return np.concatenate(layers, axis=-1)

    def zero_state(self, batch=None):
        shape = lambda d: (d,) if batch is None else (batch, d)
        return [np.zeros(shape(d)) for d in self.layer_dims]

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int, alpha: float = 0.0) -> ModelParams:
        """Seeded init. Forward matrices (and w_in, w_ro, w_fb) draw entries
        uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases start at zero.

        Backward matrices draw an independent matrix with the *forward*
        fan-in scale (same entry distribution as w_fwd.T) and blend

            w_bwd = sin(alpha) * raw + cos(alpha) * w_fwd.T

        so alpha = 0 ties them exactly, alpha = pi/2 leaves them independent,
        and intermediate alpha lands the measured weight angle near alpha.
        """
        rng = np.random.default_rng(seed)
        dims = self.layer_dims
        L = self.n_layers

        def draw(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        w_in = draw((dims[0], self.in_dim), self.in_dim)
        w_fwd = [draw((dims[k + 1], dims[k]), dims[k]) for k in range(L - 1)]

        w_bwd = None
        if self.kind in (ModelKind.RECIPROCAL, ModelKind.PCN):
            w_bwd = []
            for k in range(L - 1):
                raw = draw((dims[k], dims[k + 1]), dims[k])
                w_bwd.append(np.sin(alpha) * raw + np.cos(alpha) * w_fwd[k].T)

        w_fb = None
        if self.kind == ModelKind.DIRECT_FEEDBACK:
            w_fb = draw((dims[0], dims[-1]), dims[-1])

        b = [np.zeros(d) for d in dims]
        w_ro = draw((self.n_classes, dims[-1]), dims[-1])
        b_ro = np.zeros(self.n_classes)
        return ModelParams(w_in, w_fwd, w_bwd, w_fb, b, w_ro, b_ro)

    def bwd_matrices(self, params: ModelParams):
        """Backward matrices actually used by the dynamics (ties resolved)."""
        if self.kind == ModelKind.HOPFIELD:
            return [w.T for w in params.w_fwd]
        return params.w_bwd

    # -- readout / nudge ---------------------------------------------------

    def readout_probs(self, params, u_top):
        logits = sigma(u_top) @ params.w_ro.T + params.b_ro
        return softmax(logits)

    def loss_force(self, params, u_top, target):
        """dL/du_top for the cross-entropy readout loss; the nudge adds
        beta times this to the top layer's update."""
        p = self.readout_probs(params, u_top)
        return dsigma(u_top) * ((p - target) @ params.w_ro)

    # -- dynamics ----------------------------------------------------------

    def pcn_errors(self, params, layers, s, x):
        eps = [layers[0] - (x @ params.w_in.T + params.b[0])]
        for l in range(1, self.n_layers):
            eps.append(layers[l] - (s[l - 1] @ params.w_fwd[l - 1].T + params.b[l]))
        return eps

    def _hop_drive(self, params, s, x):
        """Affine input drive to each layer of the hopfield dynamics.

        The hopfield update is the discrete gradient flow of a scalar energy
        (interaction terms -sigma(u_i) w_ij sigma(u_j), tied w_ij = w_ji,
        leak u^2/2), so the state enters the update as
        sigma'(u_l) * drive_l and the Jacobian of F = G - u is symmetric by
        the symmetry of second derivatives. drive_l collects the tied
        synaptic input plus bias (and w_in x for the first layer).
        """
        L = self.n_layers
        drive = []
        for l in range(L):
            if l == 0:
                acc = x @ params.w_in.T + params.b[0]
                if L > 1:
                    acc = acc + s[1] @ params.w_fwd[0]
            else:
                acc = s[l - 1] @ params.w_fwd[l - 1].T + params.b[l]
                if l < L - 1:
                    acc = acc + s[l + 1] @ params.w_fwd[l]
            drive.append(acc)
        return drive

    def step(self, params, layers, x, nudge: NudgeSpec | None = None):
        """One synchronous update G(u); returns new layer arrays.

        reciprocal / direct_feedback: u_l <- affine synaptic input (forward,
        backward or feedback weights as the architecture dictates).
        hopfield: u_l <- sigma'(u_l) * (tied affine drive), the gradient-flow
        step of the underlying energy.
        pcn: Euler step of the error-neuron dynamics.
        The top layer additionally receives beta times the readout loss force
        when a nudge is given.

        Real state, params and beta stay real; complex anything propagates.
        """
        L = self.n_layers
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x.shape[-1]} features, expected {self.in_dim}")
        if len(layers) != L:
            raise ValueError(f"state has {len(layers)} layers, expected {L}")
        s = [sigma(u) for u in layers]

        if self.kind == ModelKind.HOPFIELD:
            drive = self._hop_drive(params, s, x)
            new = []
            for l in range(L):
                acc = dsigma_from_s(s[l]) * drive[l]
                if l == L - 1 and nudge is not None:
                    acc = acc + nudge.beta * self.loss_force(
                        params, layers[L - 1], nudge.target)
                new.append(acc)
            return new

        if self.kind == ModelKind.PCN:
            eps = self.pcn_errors(params, layers, s, x)
            new = []
            for l in range(L):
                rhs = -eps[l]
                if l < L - 1:
                    rhs = rhs + dsigma_from_s(s[l]) * (eps[l + 1] @ params.w_bwd[l].T)
                if l == L - 1 and nudge is not None:
                    rhs = rhs + nudge.beta * self.loss_force(params, layers[L - 1], nudge.target)
                new.append(layers[l] + self.pcn_dt * rhs)
            return new

        bwd = self.bwd_matrices(params)
        new = []
        for l in range(L):
            if l == 0:
                acc = x @ params.w_in.T + params.b[0]
                if self.kind == ModelKind.DIRECT_FEEDBACK:
                    acc = acc + s[L - 1] @ params.w_fb.T
                elif L > 1:
                    acc = acc + s[1] @ bwd[0].T
            else:
                acc = s[l - 1] @ params.w_fwd[l - 1].T + params.b[l]
                if l < L - 1 and self.kind != ModelKind.DIRECT_FEEDBACK:
                    acc = acc + s[l + 1] @ bwd[l].T
            if l == L - 1 and nudge is not None:
                acc = acc + nudge.beta * self.loss_force(params, layers[L - 1], nudge.target)
            new.append(acc)
        return new

    # -- first-order structure at beta = 0 ---------------------------------

    def dfdbeta(self, params, layers, target):
        """dF/dbeta at the given state: the loss force on the top layer,
        zero elsewhere (times the Euler step for pcn). Returns a flat vector."""
        force = self.loss_force(params, layers[-1], target)
        if self.kind == ModelKind.PCN:
            force = self.pcn_dt * force
        pieces = [np.zeros_like(np.asarray(u, dtype=force.dtype)) for u in layers[:-1]]
        pieces.append(force)
        return np.concatenate(pieces, axis=-1)

    def jacobian_dense(self, params, layers, x=None, max_state: int = 4096):
        """Dense J_F at the given state with beta = 0.

        Refuses above max_state total units; use jvp_u/vjp_u beyond that.
        x is needed for pcn and hopfield, whose operators depend on the input.
        """
        n = self.state_size
        if n > max_state:
            raise JacobianSizeError(
                f"dense Jacobian of {n} units exceeds the {max_state}-unit guard"
            )
        L = self.n_layers
        offs = self.offsets()
        dtype = np.result_type(*[u.dtype for u in layers])
        J = np.zeros((n, n), dtype=dtype)
        blocks = lambda l: slice(offs[l], offs[l + 1])
        ds = [dsigma(u) for u in layers]

        if self.kind == ModelKind.PCN:
            if x is None:
                raise ValueError("pcn jacobian needs the input x")
            s = [sigma(u) for u in layers]
            eps = self.pcn_errors(params, layers, s, x)
            dt = self.pcn_dt
            for l in range(L):
                J[blocks(l), blocks(l)] += -dt * np.eye(self.layer_dims[l], dtype=dtype)
                if l >= 1:
                    J[blocks(l), blocks(l - 1)] = dt * params.w_fwd[l - 1] * ds[l - 1][None, :]
                if l < L - 1:
                    B, W = params.w_bwd[l], params.w_fwd[l]
                    J[blocks(l), blocks(l)] += dt * np.diag(d2sigma(layers[l]) * (eps[l + 1] @ B.T))
                    J[blocks(l), blocks(l)] += -dt * (ds[l][:, None] * (B @ (W * ds[l][None, :])))
                    J[blocks(l), blocks(l + 1)] = dt * ds[l][:, None] * B
            return J

        if self.kind == ModelKind.HOPFIELD:
            if x is None:
                raise ValueError("hopfield jacobian needs the input x")
            s = [sigma(u) for u in layers]
            drive = self._hop_drive(params, s, x)
            for l in range(L):
                J[blocks(l), blocks(l)] = np.diag(d2sigma(layers[l]) * drive[l]) - np.eye(
                    self.layer_dims[l], dtype=dtype)
                if l >= 1:
                    J[blocks(l), blocks(l - 1)] = (
                        ds[l][:, None] * params.w_fwd[l - 1] * ds[l - 1][None, :])
                if l < L - 1:
                    J[blocks(l), blocks(l + 1)] = (
                        ds[l][:, None] * params.w_fwd[l].T * ds[l + 1][None, :])
            return J

        bwd = self.bwd_matrices(params)
        for l in range(L):
            J[blocks(l), blocks(l)] = -np.eye(self.layer_dims[l], dtype=dtype)
            if l >= 1:
                J[blocks(l), blocks(l - 1)] = params.w_fwd[l - 1] * ds[l - 1][None, :]
            if l < L - 1 and self.kind != ModelKind.DIRECT_FEEDBACK:
                J[blocks(l), blocks(l + 1)] = bwd[l] * ds[l + 1][None, :]
        if self.kind == ModelKind.DIRECT_FEEDBACK:
            J[blocks(0), blocks(L - 1)] = params.w_fb * ds[L - 1][None, :]
        return J

    def jvp_u(self, params, layers, v, x=None):
        """J_F v, matrix-free. v is flat (..., state_size)."""
        L = self.n_layers
        vl = self.split(v)
        ds = [dsigma(u) for u in layers]

        if self.kind == ModelKind.PCN:
            if x is None:
                raise ValueError("pcn jvp needs the input x")
            s = [sigma(u) for u in layers]
            eps = self.pcn_errors(params, layers, s, x)
            dt = self.pcn_dt
            out = []
            for l in range(L):
                acc = -vl[l]
                if l >= 1:
                    acc = acc + (ds[l - 1] * vl[l - 1]) @ params.w_fwd[l - 1].T
                if l < L - 1:
                    B, W = params.w_bwd[l], params.w_fwd[l]
                    acc = acc + d2sigma(layers[l]) * (eps[l + 1] @ B.T) * vl[l]
                    acc = acc - ds[l] * (((ds[l] * vl[l]) @ W.T) @ B.T)
                    acc = acc + ds[l] * (vl[l + 1] @ B.T)
                out.append(dt * acc)
            return self.join(out)

        if self.kind == ModelKind.HOPFIELD:
            if x is None:
                raise ValueError("hopfield jvp needs the input x")
            s = [sigma(u) for u in layers]
            drive = self._hop_drive(params, s, x)
            out = []
            for l in range(L):
                acc = -vl[l] + d2sigma(layers[l]) * drive[l] * vl[l]
                if l >= 1:
                    acc = acc + ds[l] * ((ds[l - 1] * vl[l - 1]) @ params.w_fwd[l - 1].T)
                if l < L - 1:
                    acc = acc + ds[l] * ((ds[l + 1] * vl[l + 1]) @ params.w_fwd[l])
                out.append(acc)
            return self.join(out)

        bwd = self.bwd_matrices(params)
        out = []
        for l in range(L):
            acc = -vl[l]
            if l >= 1:
                acc = acc + (ds[l - 1] * vl[l - 1]) @ params.w_fwd[l - 1].T
            if l < L - 1 and self.kind != ModelKind.DIRECT_FEEDBACK:
                acc = acc + (ds[l + 1] * vl[l + 1]) @ bwd[l].T
            if l == 0 and self.kind == ModelKind.DIRECT_FEEDBACK:
                acc = acc + (ds[L - 1] * vl[L - 1]) @ params.w_fb.T
            out.append(acc)
        return self.join(out)

    def vjp_u(self, params, layers, w, x=None):
        """J_F^T w, matrix-free. w is flat (..., state_size)."""
        if self.kind == ModelKind.HOPFIELD:
            # the hopfield operator is a gradient field, so J_F is symmetric
            return self.jvp_u(params, layers, w, x=x)
        L = self.n_layers
        wl = self.split(w)
        ds = [dsigma(u) for u in layers]
        out = [None] * L

        def add(l, term):
            out[l] = term if out[l] is None else out[l] + term

        if self.kind == ModelKind.PCN:
            if x is None:
                raise ValueError("pcn vjp needs the input x")
            s = [sigma(u) for u in layers]
            eps = self.pcn_errors(params, layers, s, x)
            dt = self.pcn_dt
            for l in range(L):
                add(l, -wl[l])
                if l >= 1:
                    add(l - 1, ds[l - 1] * (wl[l] @ params.w_fwd[l - 1]))
                if l < L - 1:
                    B, W = params.w_bwd[l], params.w_fwd[l]
                    add(l, d2sigma(layers[l]) * (eps[l + 1] @ B.T) * wl[l])
                    add(l, -ds[l] * (((ds[l] * wl[l]) @ B) @ W))
                    add(l + 1, (ds[l] * wl[l]) @ B)
            return self.join([dt * o for o in out])

        bwd = self.bwd_matrices(params)
        for l in range(L):
            add(l, -wl[l])
            if l >= 1:
                add(l - 1, ds[l - 1] * (wl[l] @ params.w_fwd[l - 1]))
            if l < L - 1 and self.kind != ModelKind.DIRECT_FEEDBACK:
                add(l + 1, ds[l + 1] * (wl[l] @ bwd[l]))
            if l == 0 and self.kind == ModelKind.DIRECT_FEEDBACK:
                add(L - 1, ds[L - 1] * (wl[0] @ params.w_fb))
        return self.join(out)

    # -- parameter sensitivities -------------------------------------------

    def network_param_names(self):
        """Names of the parameters that shape F (readout excluded)."""
        names = ["w_in"]
        names += [f"w_fwd.{k}" for k in range(self.n_layers - 1)]
        if self.kind in (ModelKind.RECIPROCAL, ModelKind.PCN):
            names += [f"w_bwd.{k}" for k in range(self.n_layers - 1)]
        if self.kind == ModelKind.DIRECT_FEEDBACK:
            names.append("w_fb")
        names += [f"b.{l}" for l in range(self.n_layers)]
        return names

    def presyn_grad(self, params, layers, x, delta, s=None):
        """(dF/dtheta)^T delta at the given state with beta = 0.

        delta is flat, same leading shape as the layers. For batched inputs
        the per-sample contributions are summed; divide by the batch size for
        a mean. Returns {name: array} over network_param_names().

        s overrides the presynaptic activations (defaults to sigma of the
        layers). The weight blocks of dF/dtheta depend on the state only
        through these activations for the affine kinds, so averaging them
        along a nudge path and passing the average here yields the
        path-averaged contraction. Not supported for pcn or hopfield, whose
        dF/dtheta involves the state beyond sigma(u).
        """
        L = self.n_layers
        dl = self.split(delta)
        if s is None:
            s = [sigma(u) for u in layers]
        elif self.kind in (ModelKind.PCN, ModelKind.HOPFIELD):
            raise ValueError(
                f"activation override is not supported for {self.kind.value}")
        g = {}

        if self.kind == ModelKind.PCN:
            eps = self.pcn_errors(params, layers, s, x)
            ds = [dsigma_from_s(si) for si in s]
            dt = self.pcn_dt
            g["w_in"] = dt * _outer(dl[0], x)
            for k in range(L - 1):
                B = params.w_bwd[k]
                carry = (ds[k] * dl[k]) @ B  # B^T (sigma' * delta_k)
                g[f"w_fwd.{k}"] = dt * (_outer(dl[k + 1], s[k]) - _outer(carry, s[k]))
                g[f"w_bwd.{k}"] = dt * _outer(ds[k] * dl[k], eps[k + 1])
            for l in range(L):
                vec = _sumv(dl[l])
                if l >= 1:
                    vec = vec - _sumv((ds[l - 1] * dl[l - 1]) @ params.w_bwd[l - 1])
                g[f"b.{l}"] = dt * vec
            return g

        if self.kind == ModelKind.HOPFIELD:
            gs = [dsigma_from_s(si) for si in s]
            g["w_in"] = _outer(gs[0] * dl[0], x)
            for k in range(L - 1):
                g[f"w_fwd.{k}"] = _outer(gs[k + 1] * dl[k + 1], s[k]) + _outer(
                    s[k + 1], gs[k] * dl[k])
            for l in range(L):
                g[f"b.{l}"] = _sumv(gs[l] * dl[l])
            return g

        g["w_in"] = _outer(dl[0], x)
        for k in range(L - 1):
            g[f"w_fwd.{k}"] = _outer(dl[k + 1], s[k])
            if self.kind == ModelKind.RECIPROCAL:
                g[f"w_bwd.{k}"] = _outer(dl[k], s[k + 1])
        if self.kind == ModelKind.DIRECT_FEEDBACK:
            g["w_fb"] = _outer(dl[0], s[L - 1])
        for l in range(L):
            g[f"b.{l}"] = _sumv(dl[l])
        return g

    def grad_theta_bilinear(self, params, layers, a, b, x=None):
        """d/dtheta of a^T J_F(u, theta) b at frozen u, beta = 0.

        Used by the homeostatic regularizer. Returns {name: array} over
        network_param_names(); tensors J_F does not depend on come back zero
        (for the affine kinds: w_in always, biases too).
        """
        L = self.n_layers
        al, bl = self.split(a), self.split(b)
        ds = [dsigma(u) for u in layers]
        tensors = params.to_dict()
        g = {name: np.zeros_like(tensors[name]) for name in self.network_param_names()}

        if self.kind == ModelKind.PCN:
            if x is None:
                raise ValueError("pcn bilinear gradient needs the input x")
            s = [sigma(u) for u in layers]
            eps = self.pcn_errors(params, layers, s, x)
            dt = self.pcn_dt
            for l in range(L):
                if l >= 1:
                    g[f"w_fwd.{l-1}"] += dt * _outer(al[l], ds[l - 1] * bl[l - 1])
                if l < L - 1:
                    B, W = params.w_bwd[l], params.w_fwd[l]
                    c = al[l] * bl[l] * d2sigma(layers[l])
                    g[f"w_bwd.{l}"] += dt * _outer(c, eps[l + 1])
                    g[f"w_fwd.{l}"] += -dt * _outer(c @ B, s[l])
                    g[f"b.{l+1}"] += -dt * _sumv(c @ B)
                    p, q = ds[l] * al[l], ds[l] * bl[l]
                    g[f"w_bwd.{l}"] += -dt * _outer(p, q @ W.T)
                    g[f"w_fwd.{l}"] += -dt * _outer(p @ B, q)
                    g[f"w_bwd.{l}"] += dt * _outer(ds[l] * al[l], bl[l + 1])
            return g

        if self.kind == ModelKind.HOPFIELD:
            if x is None:
                raise ValueError("hopfield bilinear gradient needs the input x")
            s = [sigma(u) for u in layers]
            d2 = [d2sigma(u) for u in layers]
            g["w_in"] += _outer(al[0] * bl[0] * d2[0], x)
            for k in range(L - 1):
                g[f"w_fwd.{k}"] += _outer(ds[k + 1] * al[k + 1], ds[k] * bl[k])
                g[f"w_fwd.{k}"] += _outer(ds[k + 1] * bl[k + 1], ds[k] * al[k])
                g[f"w_fwd.{k}"] += _outer(al[k + 1] * bl[k + 1] * d2[k + 1], s[k])
                g[f"w_fwd.{k}"] += _outer(s[k + 1], al[k] * bl[k] * d2[k])
            for l in range(L):
                g[f"b.{l}"] += _sumv(al[l] * bl[l] * d2[l])
            return g

        for k in range(L - 1):
            g[f"w_fwd.{k}"] += _outer(al[k + 1], ds[k] * bl[k])
            if self.kind == ModelKind.RECIPROCAL:
                g[f"w_bwd.{k}"] += _outer(al[k], ds[k + 1] * bl[k + 1])
        if self.kind == ModelKind.DIRECT_FEEDBACK:
            g["w_fb"] += _outer(al[0], ds[L - 1] * bl[L - 1])
        return g


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net: Network, params: ModelParams, alpha=None, seed=None, extra=None):
    """Single JSON document. Field order is fixed: version, kind, in_dim,
    layer_dims, n_classes, pcn_dt, alpha, seed, extra, then tensors as
    {name, shape, data} with data a flat row-major list of doubles."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": net.kind.value,
        "in_dim": net.in_dim,
        "layer_dims": list(net.layer_dims),
        "n_classes": net.n_classes,
        "pcn_dt": net.pcn_dt,
        "alpha": alpha,
        "seed": seed,
        "extra": extra or {},
        "tensors": [
            {
                "name": name,
                "shape": list(t.shape),
                "data": np.asarray(t, dtype=np.float64).ravel(order="C").tolist(),
            }
            for name, t in params.named()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (net, params, meta). Raises CheckpointError on malformed docs."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        net = Network(
            kind=ModelKind(doc["kind"]),
            in_dim=int(doc["in_dim"]),
            layer_dims=tuple(int(d) for d in doc["layer_dims"]),
            n_classes=int(doc["n_classes"]),
            pcn_dt=float(doc.get("pcn_dt", 0.5)),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad architecture record: {e}") from e

    tensors = {}
    for entry in doc.get("tensors", []):
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(
                f"tensor {entry['name']}: {arr.size} values for shape {shape}"
            )
        tensors[entry["name"]] = arr.reshape(shape)

    ref = net.init_params(seed=0)
    expected = {name: t.shape for name, t in ref.named()}
    if set(tensors) != set(expected):
        missing = set(expected) - set(tensors)
        extra_names = set(tensors) - set(expected)
        raise CheckpointError(f"tensor set mismatch: missing {sorted(missing)}, unexpected {sorted(extra_names)}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"tensor {name}: shape {tensors[name].shape}, expected {shape}"
            )
    params = ref.with_tensors(tensors)
    meta = {"alpha": doc.get("alpha"), "seed": doc.get("seed"), "extra": doc.get("extra", {})}
    return net, params, meta
