"""Mini-batch training loop with fixed-point gradient estimators.

Each batch runs a free relaxation, asks the configured estimator for the
per-parameter gradient of the readout loss (classic two-phase, N-point
holomorphic, continuous sweep, or the ground-truth / adjoint oracles), adds
the homeostatic regularizer's gradient and the direct readout gradient, and
applies one SGD-with-momentum step.  Epoch metrics track what the analysis
cares about: validation error, the angle between forward and backward
weights, Jacobian symmetry at a probe point, per-layer alignment of the
estimated error vector with the adjoint one, and the worst imaginary
residue the holomorphic estimators leave behind.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .estimators import (ConvergenceError, Mode, NudgeProtocol,
                         estimate_gradient, rbp_delta)
from .fixedpoint import DivergenceError, SolverSettings, relax
from .homeostasis import (HutchinsonConfig, alignment_report, homeo_grad,
                          homeo_loss_exact, symmetry_measure)
from .models import save_checkpoint, sigma, softmax

__all__ = [
    "TrainConfig",
    "MetricRow",
    "readout_loss",
    "readout_grads",
    "sgd_step",
    "weight_angle",
    "evaluate",
    "train_epoch",
    "train",
]


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    The teaching amplitude |beta| lives inside `protocol` (its amplitude
    field) together with the estimator mode.  lambda_homeo = 0 disables the
    regularizer entirely; otherwise its gradient is averaged per sample with
    `hutchinson_samples` Gaussian draws each.  lr_scales optionally maps a
    parameter name to a multiplier on the learning rate for that tensor.
    probe_size bounds the samples used for the epoch-end Jacobian/alignment
    diagnostics, which are cubic in state size.
    """

    batch_size: int = 50
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    lambda_homeo: float = 0.0
    protocol: NudgeProtocol = field(default_factory=NudgeProtocol)
    seed: int = 0
    lr_scales: dict | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    hutchinson_samples: int = 5
    probe_size: int = 8
    checkpoint_interval: int = 0

    def __post_init__(self):
        # lr = 0 is allowed: a zero step is the documented way to collect
        # metrics without touching the parameters.
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class MetricRow:
    """One epoch's tracked quantities.

    weight_angle_deg has one entry per forward/backward layer pair (empty
    for kinds without independent backward weights); cosine_rbp has one
    entry per layer, the alignment of the estimator's error vector with the
    adjoint solution on the probe batch.
    """

    epoch: int
    train_loss: float
    val_error_pct: float
    weight_angle_deg: list
    symmetry_measure: float
    cosine_rbp: list
    homeo_loss: float
    imag_diag: float

    CSV_HEADER = ("epoch, train_loss, val_error_pct, weight_angle_deg, "
                  "symmetry_measure, cosine_rbp, homeo_loss, imag_diag")

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_error_pct": self.val_error_pct,
            "weight_angle_deg": list(self.weight_angle_deg),
            "symmetry_measure": self.symmetry_measure,
            "cosine_rbp": list(self.cosine_rbp),
            "homeo_loss": self.homeo_loss,
            "imag_diag": self.imag_diag,
        }

    def to_csv_row(self):
        angles = ";".join(f"{a:.6f}" for a in self.weight_angle_deg)
        cosines = ";".join(f"{c:.8f}" for c in self.cosine_rbp)
        return (f"{self.epoch:d}, {self.train_loss:.8f}, "
                f"{self.val_error_pct:.4f}, {angles}, "
                f"{self.symmetry_measure:.8f}, {cosines}, "
                f"{self.homeo_loss:.8e}, {self.imag_diag:.6e}")


# ---------------------------------------------------------------------------
# readout


def readout_loss(params, free_state, target):
    """Cross-entropy of the linear readout at the free fixed point.

    Returns (loss, output_error) with loss the batch mean and output_error
    = target - softmax(...), the vector the nudge couples into the top
    layer, one row per sample.
    """
    layers = getattr(free_state, "layers", free_state)
    logits = sigma(layers[-1]) @ params.w_ro.T + params.b_ro
    p = softmax(logits)
    eps = 1e-300
    ce = -np.sum(target * np.log(np.maximum(np.real(p), eps)), axis=-1)
    return float(np.mean(ce)), target - p


def readout_grads(params, free_state, target):
    """Batch-mean gradient of the readout loss wrt w_ro and b_ro."""
    layers = getattr(free_state, "layers", free_state)
    s_top = sigma(layers[-1])
    _, err = readout_loss(params, free_state, target)
    diff = -err  # softmax - target
    if diff.ndim == 1:
        return {"w_ro": np.outer(diff, s_top), "b_ro": diff}
    n = diff.shape[0]
    return {"w_ro": diff.T @ s_top / n, "b_ro": diff.mean(axis=0)}


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads, velocity, config: TrainConfig):
    """One SGD-with-momentum update over the tensors named in grads.

    v <- momentum v + g + weight_decay theta; theta <- theta - lr scale v.
    velocity maps the same names to running buffers (missing names start at
    zero); returns (params', velocity') without mutating the inputs.
    """
    tensors = params.to_dict()
    new_tensors = {k: np.array(v, dtype=float) for k, v in tensors.items()}
    new_velocity = dict(velocity)
    scales = config.lr_scales or {}
    for name, g in grads.items():
        theta = new_tensors[name]
        v = velocity.get(name)
        v = np.zeros_like(theta) if v is None else np.array(v, dtype=float)
        v = config.momentum * v + g + config.weight_decay * theta
        theta -= config.lr * scales.get(name, 1.0) * v
        new_velocity[name] = v
    return params.with_tensors(new_tensors), new_velocity


def weight_angle(params):
    """Angle in degrees between each backward matrix and the transposed
    forward one: arccos <w_bwd, w_fwd^T> / (|w_bwd| |w_fwd|). Empty for
    parameter sets without independent backward weights."""
    if params.w_bwd is None:
        return []
    out = []
    for wb, wf in zip(params.w_bwd, params.w_fwd):
        num = float(np.sum(wb * wf.T))
        den = float(np.linalg.norm(wb) * np.linalg.norm(wf))
        c = 0.0 if den == 0.0 else np.clip(num / den, -1.0, 1.0)
        out.append(float(np.degrees(np.arccos(c))))
    return out


# ---------------------------------------------------------------------------
# evaluation / training


def evaluate(net, params, dataset, settings=None, batch_size=200):
    """(val_error_pct, mean_loss) of the readout argmax at the free point."""
    settings = settings or SolverSettings()
    images, labels = dataset.images, dataset.labels
    wrong = 0
    loss_sum = 0.0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        free = relax(net, params, xb, settings=settings)
        probs = net.readout_probs(params, free.state.layers[-1])
        pred = np.argmax(np.real(probs), axis=-1)
        truth = np.argmax(yb, axis=-1)
        wrong += int(np.sum(pred != truth))
        loss, _ = readout_loss(params, free.state, yb)
        loss_sum += loss * xb.shape[0]
    return 100.0 * wrong / n, loss_sum / n


def _homeo_grad_batch(net, params, free_layers, x, config, base_seed):
    """Mean per-sample homeostatic gradient over the batch (frozen states)."""
    batched = free_layers[0].ndim == 2
    n = free_layers[0].shape[0] if batched else 1
    total = None
    for i in range(n):
        if batched:
            layers_i = [u[i] for u in free_layers]
            x_i = x[i]
        else:
            layers_i, x_i = free_layers, x
        cfg = HutchinsonConfig(n_samples=config.hutchinson_samples,
                               seed=base_seed + i)
        g = homeo_grad(net, params, layers_i, cfg, config.lambda_homeo,
                       x=x_i)
        total = (g.tensors if total is None
                 else {k: total[k] + g.tensors[k] for k in total})
    return {k: v / n for k, v in total.items()}


def _probe_metrics(net, params, images, labels, config):
    """Jacobian symmetry, homeo loss and estimator/adjoint alignment on a
    small probe batch (dense solves; kept to probe_size samples)."""
    xb = images[:config.probe_size]
    yb = labels[:config.probe_size]
    free = relax(net, params, xb, settings=config.solver)
    est = estimate_gradient(net, params, xb, yb, config.protocol,
                            settings=config.solver, free=free)
    adj = rbp_delta(net, params, free.state, yb, x=xb)
    cosines = alignment_report(est.delta, adj, net.offsets())

    x0 = xb[0]
    free0 = relax(net, params, x0, settings=config.solver)
    J = net.jacobian_dense(params, free0.state.layers, x=x0)
    return symmetry_measure(J), homeo_loss_exact(J), cosines


def train_epoch(net, params, dataset, config: TrainConfig, epoch=0,
                velocity=None, val_dataset=None):
    """One pass over the dataset; returns (params', velocity, MetricRow).

    Batches are reshuffled deterministically from (config.seed, epoch).  A
    diverging estimator aborts the epoch with the batch index attached.
    Validation metrics use val_dataset when given, else the training set.
    """
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
    order = rng.permutation(n)
    velocity = dict(velocity or {})
    loss_sum = 0.0
    imag_worst = 0.0

    for bi, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        xb, yb = images[idx], labels[idx]
        try:
            free = None
            if config.protocol.mode != Mode.CONTINUOUS:
                free = relax(net, params, xb, settings=config.solver)
            est = estimate_gradient(net, params, xb, yb, config.protocol,
                                    settings=config.solver, free=free)
        except DivergenceError as err:
            raise DivergenceError(
                f"epoch {epoch}, batch {bi}: {err}",
                iteration=err.iteration) from err
        except ConvergenceError as err:
            raise ConvergenceError(f"epoch {epoch}, batch {bi}: {err}") from err
        imag_worst = max(imag_worst, est.imag_diagnostic)

        loss_state = (free.state if free is not None
                      else est.extras["final_state"])
        # the continuous mode ends on a complex circle state; the readout
        # and regularizer work on its real part
        loss_layers = [np.real(u) for u in
                       getattr(loss_state, "layers", loss_state)]
        loss, _ = readout_loss(params, loss_layers, yb)
        loss_sum += loss * len(idx)

        grads = dict(est.tensors)
        grads.update(readout_grads(params, loss_layers, yb))
        if config.lambda_homeo != 0.0:
            hg = _homeo_grad_batch(
                net, params, loss_layers, xb, config,
                base_seed=config.seed * 100003 + epoch * 1009 + bi)
            grads = {k: grads.get(k, 0.0) + hg.get(k, 0.0)
                     for k in set(grads) | set(hg)}
        params, velocity = sgd_step(params, grads, velocity, config)

    val = val_dataset if val_dataset is not None else dataset
    val_error, _ = evaluate(net, params, val, settings=config.solver,
                            batch_size=max(config.batch_size, 100))
    sym, homeo, cosines = _probe_metrics(net, params, val.images, val.labels,
                                         config)
    row = MetricRow(epoch=epoch, train_loss=loss_sum / n,
                    val_error_pct=val_error,
                    weight_angle_deg=weight_angle(params),
                    symmetry_measure=sym, cosine_rbp=cosines,
                    homeo_loss=homeo, imag_diag=imag_worst)
    return params, velocity, row


def train(net, params, dataset, config: TrainConfig, val_dataset=None,
          out_dir=None, log=None):
    """Run config.epochs epochs; returns (params, [MetricRow]).

    With out_dir set, appends metrics to metrics.jsonl / metrics.csv there
    and saves a checkpoint every checkpoint_interval epochs (plus a final
    one).  `log` is an optional callable fed one formatted line per epoch.
    """
    rows = []
    velocity = {}
    jsonl_path = csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        jsonl_path = os.path.join(out_dir, "metrics.jsonl")
        csv_path = os.path.join(out_dir, "metrics.csv")
        if not os.path.exists(csv_path):
            with open(csv_path, "w") as fh:
                fh.write(MetricRow.CSV_HEADER + "\n")

    for epoch in range(config.epochs):
        params, velocity, row = train_epoch(
            net, params, dataset, config, epoch=epoch, velocity=velocity,
            val_dataset=val_dataset)
        rows.append(row)
        if jsonl_path is not None:
            with open(jsonl_path, "a") as fh:
                fh.write(json.dumps(row.to_dict()) + "\n")
            with open(csv_path, "a") as fh:
                fh.write(row.to_csv_row() + "\n")
        if log is not None:
            log(f"epoch {epoch:3d}  loss {row.train_loss:.4f}  "
                f"val {row.val_error_pct:5.2f}%  sym {row.symmetry_measure:.4f}")
        if (out_dir is not None and config.checkpoint_interval > 0
                and (epoch + 1) % config.checkpoint_interval == 0):
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{epoch}.json"),
                            net, params, seed=config.seed)

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.json"),
                        net, params, seed=config.seed)
    return params, rows
