"""Adam training with checkpoint / plateau / early-stopping callbacks.

Callback rules (evaluated after every epoch, in this order):

1. checkpoint: a strictly lower validation loss than the best so far is an
   improvement; the weights are snapshotted on every improvement;
2. plateau: after ``plateau_patience`` consecutive non-improving epochs the
   learning rate becomes ``max(lr * plateau_factor, lr_floor)`` and the
   plateau counter restarts;
3. early stop: after ``early_stop_patience`` consecutive non-improving epochs
   training stops. Plateau reductions do not reset this counter.

Training always ends with the best snapshot loaded back into the model.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import make_rng
from .data import AnnotatedSample, FoldPlan, augment_hflip, split_train_val, stack
from .losses import LossSpec, composite_loss
from .metrics import METRIC_NAMES, MetricsReport, aggregate_folds, evaluate_masks
from .network import Network, build_graph, count_params, init_params


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainingConfig:
    lr0: float = 0.001
    batch_size: int = 4
    dropout: float = 0.125
    max_epochs: int = 50
    loss: str = "djb"
    smoothing: float = 1.0
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    lr_floor: float = 1e-5
    seed: int = 0
    model: str = "slim"
    base_filters: int = 32
    input_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    threshold: float = 0.5
    hflip: bool = True
    val_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.lr_floor < self.lr0:
            raise ValueError("lr_floor must be below lr0")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.model not in ("slim", "std"):
            raise ValueError(f"unknown model {self.model!r} (expected slim or std)")
        self.loss_spec  # validates the loss name

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.smoothing)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-7) -> None:
    """One bias-corrected Adam update, in place on ``p.data`` and ``state``."""
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# callbacks


@dataclass
class CallbackState:
    lr: float
    best: float = float("inf")
    best_epoch: int = 0
    plateau_wait: int = 0
    stop_wait: int = 0


@dataclass
class CallbackDecision:
    lr: float
    stop: bool
    save: bool
    events: list[str]


def apply_callbacks(state: CallbackState, epoch: int, val_loss: float,
                    config: TrainingConfig) -> CallbackDecision:
    """Advance the callback state by one epoch (1-based ``epoch``)."""
    events = []
    save = val_loss < state.best
    if save:
        state.best = val_loss
        state.best_epoch = epoch
        state.plateau_wait = 0
        state.stop_wait = 0
        events.append("checkpoint_saved")
    else:
        state.plateau_wait += 1
        state.stop_wait += 1
        if state.plateau_wait >= config.plateau_patience:
            new_lr = max(state.lr * config.plateau_factor, config.lr_floor)
            if new_lr < state.lr:
                state.lr = new_lr
                events.append("lr_reduced")
            state.plateau_wait = 0
    stop = state.stop_wait >= config.early_stop_patience
    if stop:
        events.append("early_stopped")
    return CallbackDecision(state.lr, stop, save, events)


def simulate_callbacks(val_losses, config: TrainingConfig | None = None) -> list[CallbackDecision]:
    """Run the callback state machine over a fixed validation-loss trace."""
    config = config or TrainingConfig()
    state = CallbackState(config.lr0)
    out = []
    for epoch, loss in enumerate(val_losses, start=1):
        decision = apply_callbacks(state, epoch, loss, config)
        out.append(decision)
        if decision.stop:
            break
    return out


# ---------------------------------------------------------------------------
# epochs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    metrics: dict[str, float]
    events: list[str] = field(default_factory=list)


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", *METRIC_NAMES, "events")


def format_history_row(rec: EpochRecord) -> list[str]:
    return [
        str(rec.epoch), repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr),
        *(repr(rec.metrics[k]) for k in METRIC_NAMES), ";".join(rec.events),
    ]


def format_history(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for rec in records:
        writer.writerow(format_history_row(rec))
    return buf.getvalue()


def batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(net: Network, images, masks, config: TrainingConfig,
                adam: AdamState, lr: float, epoch: int) -> float:
    """One pass over shuffled batches; returns the mean batch loss."""
    spec = config.loss_spec
    order = make_rng(config.seed, "shuffle", epoch).permutation(len(images))
    params = net.params()
    losses = []
    for idx in batches(len(images), config.batch_size, order):
        net.zero_grad()
        y_p = net.forward(images[idx], "train")
        loss, grad = composite_loss(spec, y_p, masks[idx])
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss in epoch {epoch}")
        net.backward(grad)
        adam_step(params, adam, lr, config.beta1, config.beta2, config.adam_eps)
        losses.append(loss)
    return float(np.mean(losses))


def predict(net: Network, images, batch_size: int = 4) -> np.ndarray:
    """Inference-mode probabilities, shape (n, 1, h, w)."""
    out = [net.forward(images[idx], "infer") for idx in batches(len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 1) + images.shape[2:], net.dtype)


def eval_epoch(net: Network, images, masks, config: TrainingConfig, ids=None):
    """Validation loss (mean over fixed-order batches) and a metrics report."""
    spec = config.loss_spec
    losses, probs = [], []
    for idx in batches(len(images), config.batch_size):
        y_p = net.forward(images[idx], "infer")
        loss, _ = composite_loss(spec, y_p, masks[idx])
        losses.append(loss)
        probs.append(y_p)
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        raise NonFiniteError("non-finite validation loss")
    probs = np.concatenate(probs)
    ids = ids if ids is not None else [str(i) for i in range(len(images))]
    report = evaluate_masks(probs[:, 0], masks[:, 0], ids, config.threshold)
    return mean_loss, report


def run_epoch(net, images, masks, config, mode, adam=None, lr=None, epoch=1):
    """``mode="train"`` -> mean batch loss; ``mode="eval"`` -> (loss, report)."""
    if mode == "train":
        return train_epoch(net, images, masks, config, adam, lr, epoch)
    if mode == "eval":
        return eval_epoch(net, images, masks, config)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# full runs


def make_network(config: TrainingConfig, seed: int | None = None) -> Network:
    seed = config.seed if seed is None else seed
    graph = build_graph(config.model, config.base_filters, (1, config.input_size, config.input_size))
    net = Network(graph, config.dropout, make_rng(seed, "dropout"), np.dtype(config.dtype))
    init_params(net, make_rng(seed, "init"))
    return net


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    epoch_times: list[float]


def fit(net: Network, train_set, val_set, config: TrainingConfig,
        on_epoch=None, checkpoint_path=None) -> TrainResult:
    """Train ``net`` on ``train_set`` with callbacks driven by ``val_set``.

    ``on_epoch(record)`` is called after every epoch. When
    ``checkpoint_path`` is given the best weights are written there on every
    improvement. The best weights are loaded back before returning.
    """
    x_tr, y_tr = stack(train_set)
    x_va, y_va = stack(val_set)
    dtype = np.dtype(config.dtype)
    x_tr, y_tr, x_va, y_va = (a.astype(dtype) for a in (x_tr, y_tr, x_va, y_va))
    adam = AdamState.for_params(net.params())
    cb = CallbackState(config.lr0)
    history, times = [], []
    best_state = {k: v.copy() for k, v in net.state_dict().items()}
    for epoch in range(1, config.max_epochs + 1):
        lr = cb.lr
        t0 = time.perf_counter()
        train_loss = train_epoch(net, x_tr, y_tr, config, adam, lr, epoch)
        times.append(time.perf_counter() - t0)
        val_loss, report = eval_epoch(net, x_va, y_va, config)
        decision = apply_callbacks(cb, epoch, val_loss, config)
        if decision.save:
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
            if checkpoint_path is not None:
                checkpoint.save(checkpoint_path, best_state)
        record = EpochRecord(epoch, train_loss, val_loss, lr, report.mean, decision.events)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if decision.stop:
            break
    net.load_state_dict(best_state)
    return TrainResult(history, cb.best_epoch, cb.best, best_state, times)


def train_model(samples: list[AnnotatedSample], config: TrainingConfig,
                on_epoch=None, checkpoint_path=None, seed: int | None = None):
    """Split 9:1 by subject, optionally add flips, build a fresh model and fit it.

    Returns ``(net, result, (train_set, val_set))``.
    """
    seed = config.seed if seed is None else seed
    train_set, val_set = split_train_val(samples, config.val_fraction, seed)
    if config.hflip:
        train_set = augment_hflip(train_set)
    net = make_network(config, seed)
    result = fit(net, train_set, val_set, config, on_epoch, checkpoint_path)
    return net, result, (train_set, val_set)


def evaluate(net: Network, samples: list[AnnotatedSample], config: TrainingConfig,
             fold_id=None, pooled: bool = False) -> MetricsReport:
    images, masks = stack(samples)
    probs = predict(net, images.astype(net.dtype), config.batch_size)
    return evaluate_masks(probs[:, 0], masks[:, 0], [s.sample_id for s in samples],
                          config.threshold, fold_id, pooled)


@dataclass
class CVResult:
    reports: list[MetricsReport]
    summary: object
    histories: dict[int, list[EpochRecord]]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1, np.uint64)[0])


def cross_validate(samples: list[AnnotatedSample], plan: FoldPlan, config: TrainingConfig,
                   reseed: bool = True, folds=None) -> CVResult:
    """Train a fresh model per fold and score it on the held-out fold.

    Each fold's training part is split 9:1 by subject for the callbacks.
    With ``reseed`` every fold gets its own seed derived from
    ``(config.seed, fold)``; otherwise all folds use ``config.seed``.
    """
    reports, histories = [], {}
    for fold in (range(plan.k) if folds is None else folds):
        train_part, test_part = plan.split(samples, fold)
        if not test_part:
            continue
        seed = fold_seed(config.seed, fold) if reseed else config.seed
        try:
            net, result, _ = train_model(train_part, config, seed=seed)
            reports.append(evaluate(net, test_part, config, fold_id=fold))
        except Exception as exc:
            raise RuntimeError(f"fold {fold} failed: {exc}") from exc
        histories[fold] = result.history
    reports.sort(key=lambda r: r.fold_id)
    return CVResult(reports, aggregate_folds(reports), histories)


def write_sidecar(path, config: TrainingConfig, best_epoch: int, best_val_loss: float) -> None:
    """key = value text describing the checkpoint next to it."""
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    lines += [f"best_epoch = {best_epoch}", f"best_val_loss = {best_val_loss!r}",
              f"trainable_params = {count_params(build_graph(config.model, config.base_filters)).total_trainable}"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def config_summary(config: TrainingConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
