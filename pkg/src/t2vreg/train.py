"""MSE training with Adam."""

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError
from .tensor import Rng


def mse_loss(pred, target):
    """Mean squared error over batch and dims, with its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {list(pred.shape)} and target {list(target.shape)} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Adam:
    """Bias-corrected Adam over a dict of named parameters."""

    def __init__(self, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` (only names present in grads)."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            # same arithmetic as lr * (m / c1) / (sqrt(v / c2) + eps), minus temporaries
            tmp = np.multiply(g, 1 - b1)
            m *= b1
            m += tmp
            np.multiply(g, 1 - b2, out=tmp)
            tmp *= g
            v *= b2
            v += tmp
            np.divide(v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            num = np.divide(m, c1)
            num *= self.lr
            num /= tmp
            p -= num


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.002
    seed: int = 0
    early_stop_patience: int = 5
    grad_clip_norm: float = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    KEYS = {"epochs": "epochs", "batchSize": "batch_size", "lr": "lr", "seed": "seed",
            "earlyStopPatience": "early_stop_patience", "gradClipNorm": "grad_clip_norm"}

    @classmethod
    def from_json(cls, doc):
        return cls(**{cls.KEYS[k]: v for k, v in doc.items() if k in cls.KEYS})

    def to_json(self):
        return {k: getattr(self, attr) for k, attr in self.KEYS.items()}


@dataclass
class EpochReport:
    epoch: int
    trainMse: float
    valMse: float
    gradNorm: float
    wallMs: float

    def to_json(self, timing=True):
        doc = asdict(self)
        if not timing:
            del doc["wallMs"]
        return doc


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    n_batches = max(1, int(np.ceil(n / batch_size)))
    # near-equal batch sizes keep every batch >= 2 for batch norm
    return np.array_split(order, n_batches)


def train_epoch(model, x, y, optimizer, config, rng):
    """One pass over ``(x, y)`` in a seeded shuffled order.

    Returns ``(mean train loss, mean global grad norm)``.
    """
    losses, norms, weights = [], [], []
    params = model.params
    for idx in _batches(len(x), config.batch_size, rng):
        pred = model.forward(x[idx], train=True)
        loss, grad = mse_loss(pred, y[idx])
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss {loss}")
        model.backward(grad)
        grads = model.grads
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if config.grad_clip_norm is not None and norm > config.grad_clip_norm:
            scale = config.grad_clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
        optimizer.step(params, grads)
        losses.append(loss)
        norms.append(norm)
        weights.append(len(idx))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(losses, w) / w.sum()), float(np.dot(norms, w) / w.sum())


def evaluate_mse(model, x, y, batch_size=256):
    pred = model.predict(x, batch_size)
    return mse_loss(pred, y)[0]


def _snapshot(model):
    return ({k: v.copy() for k, v in model.params.items()},
            {k: v.copy() for k, v in model.buffers.items()})


def _restore(model, snap):
    params, buffers = snap
    for k, v in params.items():
        model.set_param(k, v)
    for k, v in buffers.items():
        model.set_buffer(k, v)


def fit(model, train, valid, config, log=None, log_timing=False):
    """Train ``model`` on ``train = (x, y)``, early-stopping on ``valid``.

    The parameters with the best validation MSE are restored at the end.
    ``log`` is an optional writable text stream receiving one JSON line per
    epoch; wall time is left out of it unless ``log_timing`` is set, so
    identical runs write identical logs.  Returns the list of
    :class:`EpochReport`.
    """
    rng = Rng(config.seed).spawn(7)
    optimizer = Adam(lr=config.lr)
    reports = []
    x, y = train
    model.layers[0].skip_input_grad = True
    try:
        _run_epochs(model, x, y, valid, config, optimizer, rng, reports, log, log_timing)
    finally:
        model.layers[0].skip_input_grad = False
    return reports


def _run_epochs(model, x, y, valid, config, optimizer, rng, reports, log, log_timing):
    best = (np.inf, None)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        train_mse, grad_norm = train_epoch(model, x, y, optimizer, config, rng)
        val_mse = evaluate_mse(model, *valid) if valid is not None else train_mse
        report = EpochReport(epoch, train_mse, float(val_mse), grad_norm,
                             round((time.perf_counter() - start) * 1000, 1))
        reports.append(report)
        if log is not None:
            log.write(json.dumps(report.to_json(log_timing)) + "\n")
            log.flush()
        if val_mse < best[0]:
            best = (val_mse, _snapshot(model))
            stale = 0
        else:
            stale += 1
            if config.early_stop_patience and stale >= config.early_stop_patience:
                break
    if best[1] is not None:
        _restore(model, best[1])
