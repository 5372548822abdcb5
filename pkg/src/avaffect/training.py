"""Losses, optimizer, early stopping, metrics, and the training loop.

Binary affect uses mean binary cross-entropy; continuous traits in [0, 1]
use mean squared error. Optimization is Adam with bias correction.
Training stops early when the validation loss rises for ``patience``
consecutive epochs, and the parameters reported are the snapshot from the
epoch with the best validation accuracy. Grid search is an exhaustive
sweep over the learning-rate grid with selection by validation accuracy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .exceptions import DimensionError, InputError

BCE_EPS32 = 1e-7
BCE_EPS64 = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 250
    patience: int = 5
    batch_size: int = 32
    lr_grid: tuple[float, ...] = (1e-3,)
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise InputError("patience, max_epochs and batch_size must be >= 1")
        if not self.lr_grid:
            raise InputError("lr_grid must not be empty")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InputError("val_fraction must lie in [0, 1)")


def compute_loss(pred: Tensor, target, task: str) -> Tensor:
    """Scalar loss: BCE for 'binary', MSE for 'traits'."""
    target_arr = np.asarray(target, dtype=pred.data.dtype)
    if target_arr.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target_arr.shape}")
    if np.any(target_arr < 0.0) or np.any(target_arr > 1.0):
        raise InputError("targets must lie in [0, 1]")
    t = ad.constant(target_arr)
    if task == "binary":
        eps = BCE_EPS64 if pred.data.dtype == np.float64 else BCE_EPS32
        p = ad.clip(pred, eps, 1.0 - eps)
        pos = ad.mul(t, ad.log(p))
        negp = ad.add(ad.neg(p), 1.0)
        neg_t = ad.add(ad.neg(t), 1.0)
        return ad.neg(ad.tmean(ad.add(pos, ad.mul(neg_t, ad.log(negp)))))
    if task == "traits":
        diff = ad.sub(pred, t)
        return ad.tmean(ad.mul(diff, diff))
    raise InputError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; mutates value, m, v in place."""
    if not np.all(np.isfinite(grad)):
        raise InputError("non-finite gradient passed to adam_step")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return value


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())


def early_stop_update(val_losses: Sequence[float], patience: int = 5) -> bool:
    """True iff the last ``patience`` epoch-over-epoch deltas are all positive."""
    if not len(val_losses):
        raise InputError("early_stop_update needs a non-empty history")
    if len(val_losses) <= patience:
        return False
    tail = list(val_losses)[-(patience + 1):]
    return all(b > a for a, b in zip(tail, tail[1:]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def classification_metrics(preds, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(accuracy, F1 of the positive class); ties at the threshold go positive."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.size == 0:
        raise InputError("classification_metrics needs at least one prediction")
    if preds.shape != labels.shape:
        raise DimensionError(f"lengths differ: {preds.shape} vs {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise InputError("labels must be 0 or 1")
    decisions = preds >= threshold
    positives = labels == 1
    accuracy = float(np.mean(decisions == positives))
    tp = float(np.sum(decisions & positives))
    fp = float(np.sum(decisions & ~positives))
    fn = float(np.sum(~decisions & positives))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return accuracy, f1


def mean_accuracy(preds, labels) -> np.ndarray:
    """Per-trait 1 - mean |y - y_hat| over samples; shape (T,)."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise DimensionError(f"expected matching (N, T) arrays, got {preds.shape} and {labels.shape}")
    for arr, what in ((preds, "predictions"), (labels, "labels")):
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise InputError(f"{what} must lie in [0, 1]")
    return 1.0 - np.abs(labels - preds).mean(axis=0)


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    accuracy: Optional[float] = None
    f1: Optional[float] = None
    trait_mean_accuracy: Optional[dict[str, float]] = None
    loss: Optional[float] = None

    @property
    def score(self) -> float:
        """Scalar model-selection score: accuracy, or mean over traits."""
        if self.task == "binary":
            return self.accuracy
        return float(np.mean(list(self.trait_mean_accuracy.values())))

    def to_dict(self) -> dict:
        out = {"task": self.task, "n_samples": self.n_samples}
        if self.task == "binary":
            out["accuracy"] = self.accuracy
            out["f1"] = self.f1
        else:
            out["mean_accuracy"] = dict(self.trait_mean_accuracy)
            out["mean_accuracy_avg"] = self.score
        if self.loss is not None:
            out["loss"] = self.loss
        return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_score: float
    seconds: float


@dataclass
class TrialResult:
    lr: float
    best_val_score: float
    best_epoch: int
    epochs_run: int
    history: list[EpochStats]
    snapshot: dict[str, np.ndarray]
    stopped_early: bool

    @property
    def avg_epoch_seconds(self) -> float:
        return float(np.mean([e.seconds for e in self.history])) if self.history else 0.0


@dataclass
class TrainOutcome:
    model_cfg: mdl.ModelConfig
    geometry: mdl.DataGeometry
    params: mdl.ModelParams
    best: TrialResult
    trials: list[TrialResult]
    test_report: Optional[MetricsReport] = None


def _batches(samples: list, batch_size: int, order: np.ndarray):
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def predict_dataset(samples: Sequence[mdl.SampleInputs], cfg: mdl.ModelConfig,
                    params: mdl.ModelParams, batch_size: int = 64) -> np.ndarray:
    """(N, n_outputs) float64 predictions, batched when segment counts agree."""
    samples = list(samples)
    preds = np.zeros((len(samples), cfg.n_outputs))
    uniform = len({s.n_segments for s in samples}) == 1
    with ad.no_grad():
        if uniform:
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                out = mdl.forward_batch(chunk, cfg, params).prediction.data
                preds[start : start + len(chunk)] = out.reshape(len(chunk), -1)
        else:
            for i, sample in enumerate(samples):
                preds[i] = mdl.forward(sample, cfg, params).prediction.data
    return preds


def evaluate(samples: Sequence[mdl.SampleInputs], cfg: mdl.ModelConfig,
             params: mdl.ModelParams, batch_size: int = 64) -> MetricsReport:
    samples = list(samples)
    if not samples:
        raise InputError("evaluate needs at least one sample")
    preds = predict_dataset(samples, cfg, params, batch_size)
    labels = np.stack([s.label for s in samples])
    with ad.no_grad():
        loss = compute_loss(ad.constant(preds.astype(np.float64)),
                            labels.astype(np.float64), cfg.task).item()
    if cfg.task == "binary":
        accuracy, f1 = classification_metrics(preds[:, 0], labels[:, 0].astype(int))
        return MetricsReport("binary", len(samples), accuracy=accuracy, f1=f1, loss=loss)
    per_trait = mean_accuracy(preds, labels)
    traits = dict(zip(mdl.TRAITS, (float(x) for x in per_trait)))
    return MetricsReport("traits", len(samples), trait_mean_accuracy=traits, loss=loss)


def split_validation(samples: list, val_fraction: float,
                     seed: int) -> tuple[list, list]:
    """Deterministic shuffle split; val_fraction == 0 validates on the train set."""
    if val_fraction == 0.0:
        return list(samples), list(samples)
    order = np.random.default_rng([seed, 0x7A1]).permutation(len(samples))
    n_val = max(1, int(round(len(samples) * val_fraction)))
    if n_val >= len(samples):
        raise InputError("validation split would consume every sample")
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def train_single(model_cfg: mdl.ModelConfig, geom: mdl.DataGeometry,
                 train_samples: list, val_samples: list, lr: float,
                 train_cfg: TrainConfig) -> TrialResult:
    params = mdl.init_model_params(model_cfg, geom, seed=train_cfg.seed)
    named = mdl.named_parameters(params)
    opt = Adam(named, lr)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 0x5EED])
    history: list[EpochStats] = []
    val_losses: list[float] = []
    best_score = -np.inf
    best_epoch = -1
    snapshot = {name: p.data.copy() for name, p in named.items()}
    stopped = False
    for epoch in range(train_cfg.max_epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_samples))
        total = 0.0
        for batch in _batches(train_samples, train_cfg.batch_size, order):
            opt.zero_grad()
            result = mdl.forward_batch(batch, model_cfg, params)
            targets = np.stack([s.label for s in batch])
            loss = compute_loss(result.prediction, targets, model_cfg.task)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        train_loss = total / len(train_samples)
        val_report = evaluate(val_samples, model_cfg, params)
        seconds = time.perf_counter() - start
        history.append(EpochStats(epoch, train_loss, val_report.loss, val_report.score, seconds))
        val_losses.append(val_report.loss)
        if val_report.score > best_score:
            best_score = val_report.score
            best_epoch = epoch
            snapshot = {name: p.data.copy() for name, p in named.items()}
        if early_stop_update(val_losses, train_cfg.patience):
            stopped = True
            break
    for name, p in named.items():
        p.data = snapshot[name].copy()
    return TrialResult(lr, float(best_score), best_epoch, len(history), history,
                       snapshot, stopped)


def grid_search(model_cfg: mdl.ModelConfig, geom: mdl.DataGeometry,
                samples: list, train_cfg: TrainConfig,
                test_samples: Optional[list] = None, jobs: int = 1) -> TrainOutcome:
    """Exhaustive sweep over the learning-rate grid; best validation score wins."""
    train, val = split_validation(samples, train_cfg.val_fraction, train_cfg.seed)
    if jobs > 1 and len(train_cfg.lr_grid) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(train_single, model_cfg, geom, train, val, lr, train_cfg)
                for lr in train_cfg.lr_grid
            ]
            trials = [f.result() for f in futures]
    else:
        trials = [
            train_single(model_cfg, geom, train, val, lr, train_cfg)
            for lr in train_cfg.lr_grid
        ]
    best_idx = int(np.argmax([t.best_val_score for t in trials]))
    best = trials[best_idx]
    params = mdl.init_model_params(model_cfg, geom, seed=train_cfg.seed)
    named = mdl.named_parameters(params)
    for name, p in named.items():
        p.data = best.snapshot[name].copy()
    test_report = None
    if test_samples:
        test_report = evaluate(test_samples, model_cfg, params)
    return TrainOutcome(model_cfg, geom, params, best, trials, test_report)
