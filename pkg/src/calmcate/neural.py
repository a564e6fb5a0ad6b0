"""Hand-rolled neural building blocks: residual tanh MLPs with explicit
forward/backward passes, Adam with decoupled weight decay, a central-difference
gradient checker, and a minibatch training loop with early stopping.

Everything runs in double precision on plain numpy arrays; parameters are
flat lists of arrays [W0, b0, W1, b1, ...] so optimizers and checkers stay
structure-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "linear")

BATCH_SIZE = 256
FULL_BATCH_MAX = 2000


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one multilayer perceptron.

    Hidden layers use the configured activation; the output layer is linear.
    When ``residual`` is set, any hidden layer whose input and output widths
    match adds an identity skip connection.
    """

    input_dim: int
    output_dim: int = 1
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    residual: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


def mlp_init(spec: MlpSpec, rng: np.random.Generator, final_zero: bool = False):
    """He-style initialization: W ~ N(0, 1/fan_in), biases zero.

    ``final_zero`` zeroes the output layer so the network starts as the
    constant zero function (used for discrepancy heads).
    """
    widths = spec.widths
    params = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        W = rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)
        if final_zero and i == len(widths) - 2:
            W = np.zeros((fan_in, fan_out))
        params.append(W)
        params.append(np.zeros(fan_out))
    return params


def _skip_flags(spec: MlpSpec):
    widths = spec.widths
    return [
        spec.residual and widths[i] == widths[i + 1]
        for i in range(len(spec.hidden))
    ]


def mlp_forward(spec: MlpSpec, params, X: np.ndarray):
    """Forward pass. Returns (output, cache) where the cache holds the layer
    inputs and hidden activations needed by :func:`mlp_backward`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    skips = _skip_flags(spec)
    h = X
    inputs = []
    acts = []
    for i in range(len(spec.hidden)):
        W, b = params[2 * i], params[2 * i + 1]
        inputs.append(h)
        pre = h @ W + b
        a = np.tanh(pre) if spec.activation == "tanh" else pre
        acts.append(a)
        h = a + inputs[i] if skips[i] else a
    W, b = params[-2], params[-1]
    inputs.append(h)
    out = h @ W + b
    return out, (inputs, acts)


def mlp_backward(spec: MlpSpec, params, cache, dout: np.ndarray):
    """Backward pass for ``sum(dout * output)``; returns (grads, dX).

    ``grads`` has the same list structure as ``params``.
    """
    inputs, acts = cache
    skips = _skip_flags(spec)
    grads = [None] * len(params)
    W_out = params[-2]
    grads[-2] = inputs[-1].T @ dout
    grads[-1] = dout.sum(axis=0)
    dh = dout @ W_out.T
    for i in reversed(range(len(spec.hidden))):
        W = params[2 * i]
        if spec.activation == "tanh":
            dpre = dh * (1.0 - acts[i] ** 2)
        else:
            dpre = dh
        grads[2 * i] = inputs[i].T @ dpre
        grads[2 * i + 1] = dpre.sum(axis=0)
        dh_prev = dpre @ W.T
        if skips[i]:
            dh_prev = dh_prev + dh
        dh = dh_prev
    return grads, dh


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    step: int
    m: list
    v: list

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay=0.0,
):
    """One Adam update with decoupled weight decay, in place.

    Parameters are first scaled by (1 - lr * wd), then moved by the
    bias-corrected Adam delta. ``weight_decay`` may be a scalar or a
    per-array sequence aligned with ``params``.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    wd_list = (
        weight_decay
        if isinstance(weight_decay, (list, tuple))
        else [weight_decay] * len(params)
    )
    for i, (p, g) in enumerate(zip(params, grads)):
        if wd_list[i]:
            p *= 1.0 - lr * wd_list[i]
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def grad_check(
    loss_fn,
    params,
    rng: np.random.Generator,
    n_probes: int = 30,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (value, grads)``. Random coordinates are probed;
    the relative error uses max(|analytic|, |numeric|, 1e-3) as denominator
    so near-zero coordinates do not produce spurious failures while sign or
    scale errors in real gradients still register.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-6, 1e-4]")
    _, grads = loss_fn(params)
    worst = 0.0
    for _ in range(n_probes):
        i = int(rng.integers(len(params)))
        if params[i].size == 0:
            continue
        flat = int(rng.integers(params[i].size))
        orig = params[i].flat[flat]
        params[i].flat[flat] = orig + h
        up, _ = loss_fn(params)
        params[i].flat[flat] = orig - h
        down, _ = loss_fn(params)
        params[i].flat[flat] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = grads[i].flat[flat]
        denom = max(abs(analytic), abs(numeric), 1e-3)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


class DivergenceError(RuntimeError):
    """Non-finite training loss; carries the epoch trace up to the failure."""

    def __init__(self, epoch: int, history: list):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch
        self.history = history


@dataclass
class TrainConfig:
    """Knobs for the minibatch loop."""

    epochs: int
    lr: float = 1e-3
    weight_decay: object = 0.0
    batch_size: int = BATCH_SIZE
    full_batch_max: int = FULL_BATCH_MAX
    patience: int = 30
    seed: int = 0


@dataclass
class TrainResult:
    params: list
    epochs_run: int
    best_val: float
    history: list = field(repr=False)


def train_loop(
    params,
    batch_loss,
    n_train: int,
    val_loss,
    cfg: TrainConfig,
) -> TrainResult:
    """Adam training with optional minibatching and early stopping.

    ``batch_loss(params, idx, epoch) -> (value, grads)`` evaluates the loss
    on the given row indices; ``val_loss(params) -> float`` scores the held
    out split after each epoch. Training is full-batch when ``n_train`` is
    at most ``full_batch_max``, otherwise shuffled minibatches. The best
    validation parameters are restored on exit.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(params)
    full_batch = n_train <= cfg.full_batch_max
    all_idx = np.arange(n_train)
    best_val = np.inf
    best_params = [p.copy() for p in params]
    since_best = 0
    history = []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run = epoch + 1
        if full_batch:
            value, grads = batch_loss(params, all_idx, epoch)
            adam_step(params, grads, state, lr=cfg.lr, weight_decay=cfg.weight_decay)
            train_value = value
        else:
            order = rng.permutation(n_train)
            total = 0.0
            n_batches = 0
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                value, grads = batch_loss(params, idx, epoch)
                adam_step(
                    params, grads, state, lr=cfg.lr, weight_decay=cfg.weight_decay
                )
                total += value
                n_batches += 1
            train_value = total / max(n_batches, 1)
        current_val = val_loss(params)
        history.append((epoch, float(train_value), float(current_val)))
        if not (np.isfinite(train_value) and np.isfinite(current_val)):
            raise DivergenceError(epoch, history)
        if current_val < best_val - 1e-12:
            best_val = current_val
            best_params = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    for p, bp in zip(params, best_params):
        p[...] = bp
    return TrainResult(
        params=params, epochs_run=epochs_run, best_val=float(best_val), history=history
    )
