"""SGD with momentum and a plateau schedule, Adam, and the batch-1 training loop."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from . import unet
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    velocity: list = None
    # plateau schedule
    window: int = 1000
    patience: int = 3
    threshold: float = 1e-4
    factor: float = 0.1
    min_lr: float = 1e-5
    best_window_mean: float = float("inf")
    bad_windows: int = 0


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = None
    v: list = None
    t: int = 0


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} does not match gradient shape {g.shape}")


def sgd_step(state, params, grads):
    """v <- momentum * v + g ; w <- w - lr * v, in place on ``params``."""
    _check_shapes(params, grads)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v += g
        p -= (state.lr * v).astype(p.dtype, copy=False)
    return params, state


def adam_step(state, params, grads):
    """Bias-corrected Adam update, in place on ``params``."""
    _check_shapes(params, grads)
    if state.m is None:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g, dtype=np.float64)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state


def plateau_update(state, recent_losses):
    """Close one window of losses and decay ``lr`` when progress has stalled.

    A window improves when its mean beats the best earlier window mean by the
    relative ``threshold``; the very first window has nothing to beat and
    counts as a stall. After ``patience`` consecutive stalls the rate is
    multiplied by ``factor``, floored at ``min_lr``.
    """
    mean = float(np.mean(recent_losses))
    best = state.best_window_mean
    if np.isfinite(best) and mean < best * (1.0 - state.threshold):
        state.bad_windows = 0
    else:
        state.bad_windows += 1
    state.best_window_mean = min(best, mean)
    if state.bad_windows >= state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.bad_windows = 0
    return state


@dataclass
class TrainLoopConfig:
    max_iterations: int = 110_000
    batch_size: int = 1
    loss_log_interval: int = 1
    eval_interval: int = 0
    checkpoint_interval: int = 0
    checkpoint_dir: str = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1 (one slice per update, no accumulation)")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)

    def append(self, iteration, loss, lr):
        self.rows.append((iteration, loss, lr))

    @property
    def losses(self):
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr"])
            for it, loss, lr in self.rows:
                w.writerow([it, repr(float(loss)), repr(float(lr))])


def loss_and_grads(params, image, label):
    """One forward/backward pass on a single 2D slice."""
    x = np.asarray(image, dtype=np.float32)[None, None]
    g = nd.one_hot(np.asarray(label)[None])
    probs, cache = unet.forward(params, x, keep_cache=True)
    loss, grad_logits = nd.cross_entropy_loss(probs, g)
    grads = unet.backward(params, cache, grad_logits)
    return loss, unet.grad_arrays(params, grads), probs


def train(params, dataset, optimizer, cfg, on_eval=None):
    """Run ``cfg.max_iterations`` single-sample updates on ``params`` in place.

    ``dataset`` is any sized, indexable collection whose items expose
    ``image`` and ``label`` 2D arrays. Samples are drawn in seeded shuffled
    epochs. Returns the parameters and the loss trace.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()
    order = np.empty(0, dtype=np.intp)
    pos = 0
    window = []
    arrays = params.arrays()
    for it in range(1, cfg.max_iterations + 1):
        if pos == len(order):
            order = rng.permutation(len(dataset))
            pos = 0
        sample = dataset[int(order[pos])]
        pos += 1
        loss, grads, _ = loss_and_grads(params, sample.image, sample.label)
        if isinstance(optimizer, SgdState):
            sgd_step(optimizer, arrays, grads)
            window.append(loss)
            if len(window) == optimizer.window:
                plateau_update(optimizer, window)
                window = []
        elif isinstance(optimizer, AdamState):
            adam_step(optimizer, arrays, grads)
        else:
            raise ConfigError(f"unknown optimizer state {type(optimizer).__name__}")
        params.bump()
        if it % cfg.loss_log_interval == 0:
            trace.append(it, loss, optimizer.lr)
        if cfg.checkpoint_interval and cfg.checkpoint_dir and it % cfg.checkpoint_interval == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            unet.save(params, Path(cfg.checkpoint_dir) / f"iter{it:07d}.unet")
        if on_eval is not None and cfg.eval_interval and it % cfg.eval_interval == 0:
            on_eval(it, params)
    return params, trace
