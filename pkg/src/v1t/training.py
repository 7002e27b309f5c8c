"""Training recipe: Poisson loss, AdamW with decoupled decay, L1
regularization, cross-mouse gradient accumulation, plateau learning-rate
schedule with early stopping, and seed ensembles.

One optimizer step consumes one aligned batch from every mouse: each
mouse's Poisson loss is backpropagated into the shared accumulator
before a single parameter update, so the core always sees gradient
signal from all animals at once.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .config import CoreConfig, TrainConfig
from .data import MouseRecord
from .exceptions import NumericalError
from .model import V1TModel
from .tensor import Tensor, make_rng

# L1 and weight decay act on connection weights only: biases, layernorm
# affines, positional embeddings, cls tokens, and sigmas are exempt.
_REGULARIZED_SUFFIXES = (".w", ".kernel")


def is_regularized(name: str) -> bool:
    return name.endswith(_REGULARIZED_SUFFIXES)


def l1_coefficient(name: str, cfg: TrainConfig) -> float:
    if not is_regularized(name):
        return 0.0
    return cfg.l1_readout if name.startswith("readout.") else cfg.l1_core


def poisson_loss(responses, predictions: Tensor, eps: float = 1e-8) -> Tensor:
    """Sum over trials and neurons of (o - r log o), with eps added to both.

    responses may be a numpy array or Tensor; predictions must be a
    strictly positive Tensor.
    """
    r = responses.data if isinstance(responses, Tensor) else np.asarray(responses)
    if predictions.data.min() <= 0:
        raise NumericalError("poisson loss needs strictly positive predictions")
    r = (r + eps).astype(predictions.data.dtype)
    o = predictions + float(eps)
    return (o - Tensor(r) * o.log()).sum()


def l1_penalty_value(model: V1TModel, cfg: TrainConfig) -> float:
    total = 0.0
    for name, t in model.params.items():
        coef = l1_coefficient(name, cfg)
        if coef:
            total += coef * float(np.abs(t.data).sum())
    return total


def add_l1_subgradient(model: V1TModel, cfg: TrainConfig):
    """Add coef * sign(w) to the accumulated gradients (sign(0) = 0)."""
    for name, t in model.params.items():
        coef = l1_coefficient(name, cfg)
        if coef:
            g = (coef * np.sign(t.data)).astype(t.data.dtype)
            t.grad = g if t.grad is None else t.grad + g


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict):
        for k, t in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(t.data)
                self.v[k] = np.zeros_like(t.data)


def optimizer_step(model: V1TModel, state: AdamWState, cfg: TrainConfig, lr: float):
    """One AdamW update from the accumulated gradients.

    Decay is decoupled and applies to the same weight set as L1; a
    parameter with zero gradient still shrinks by lr * weight_decay.
    """
    state.ensure(model.params)
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in model.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if is_regularized(name):
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


# -- learning-rate schedule ---------------------------------------------------------


class ScheduleAction(enum.Enum):
    CONTINUE = "continue"
    REDUCE_LR = "reduce_lr"
    STOP = "stop"


@dataclass
class ScheduleState:
    current_lr: float
    best_val_loss: float = np.inf
    epochs_since_improvement: int = 0
    reductions_done: int = 0


def schedule_step(state: ScheduleState, val_loss: float, cfg: TrainConfig) -> ScheduleAction:
    """Plateau rule: after `patience` consecutive non-improving epochs the
    LR shrinks by `lr_decay`; when `max_reductions` have been spent and
    another full patience window passes without improvement, stop.
    Improvement means beating the all-time best by a relative margin.
    """
    margin = cfg.improvement_tol * abs(state.best_val_loss)
    if val_loss < state.best_val_loss - margin:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
        return ScheduleAction.CONTINUE
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= cfg.patience:
        if state.reductions_done < cfg.max_reductions:
            state.reductions_done += 1
            state.current_lr *= cfg.lr_decay
            state.epochs_since_improvement = 0
            return ScheduleAction.REDUCE_LR
        return ScheduleAction.STOP
    return ScheduleAction.CONTINUE


# -- epoch iteration -----------------------------------------------------------------


def _epoch_batches(records: list[MouseRecord], batch_size: int, rng: np.random.Generator):
    """Aligned per-step batches; shorter mice cycle through reshuffles.

    Yields dicts mouse_id -> index array.  Every mouse appears in every
    step; the epoch length is set by the mouse with the most batches.
    """
    order = {}
    cursor = {}
    for rec in records:
        idx = rec.trial_indices("train")
        order[rec.mouse_id] = rng.permutation(idx)
        cursor[rec.mouse_id] = 0
    n_steps = max(int(np.ceil(len(v) / batch_size)) for v in order.values())
    for _ in range(n_steps):
        batch = {}
        for rec in records:
            mid = rec.mouse_id
            take = order[mid][cursor[mid]:cursor[mid] + batch_size]
            if take.size < batch_size:
                order[mid] = rng.permutation(order[mid])
                cursor[mid] = batch_size - take.size
                take = np.concatenate([take, order[mid][:cursor[mid]]])
            else:
                cursor[mid] += batch_size
            batch[mid] = take
        yield batch


def _forward_loss(model: V1TModel, rec: MouseRecord, idx: np.ndarray,
                  cfg: TrainConfig, rng, train: bool) -> Tensor:
    out = model.forward(rec.mouse_id, rec.images[idx], rec.behaviors[idx],
                        rec.pupil_center[idx], rng=rng, train=train)
    return poisson_loss(rec.responses[idx], out, eps=cfg.eps)


def validation_loss(model: V1TModel, records: list[MouseRecord], cfg: TrainConfig,
                    split: str = "val") -> float:
    """Mean per-trial Poisson loss over the split, summed across mice."""
    total, n_trials = 0.0, 0
    for rec in records:
        idx = rec.trial_indices(split)
        for start in range(0, idx.size, cfg.batch_size):
            chunk = idx[start:start + cfg.batch_size]
            loss = _forward_loss(model, rec, chunk, cfg, rng=None, train=False)
            total += float(loss.data)
        n_trials += idx.size
    return total / max(n_trials, 1)


@dataclass
class FitResult:
    best_params: dict
    best_epoch: int
    best_val_loss: float
    curves: list          # rows: (epoch, train_loss, val_loss, lr, {mouse: val_corr})
    stopped_early: bool
    final_params: dict | None = None  # last-epoch weights (best-val ones are loaded)


def fit(model: V1TModel, records: list[MouseRecord], cfg: TrainConfig,
        log=None) -> FitResult:
    """Train in place; returns the best-validation snapshot and loss curves."""
    from .evaluation import predictions_for_split, single_trial_correlation

    cfg.validate()
    rng = make_rng(cfg.seed)
    sched = ScheduleState(current_lr=cfg.initial_lr)
    adamw = AdamWState()
    best = FitResult(best_params=model.copy_param_data(), best_epoch=0,
                     best_val_loss=np.inf, curves=[], stopped_early=False)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss, n_train = 0.0, 0
        for batch in _epoch_batches(records, cfg.batch_size, rng):
            model.zero_grad()
            for rec in records:
                idx = batch[rec.mouse_id]
                loss = _forward_loss(model, rec, idx, cfg, rng, train=True)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, mouse {rec.mouse_id}")
                loss.backward()
                epoch_loss += value
                n_train += idx.size
            add_l1_subgradient(model, cfg)
            optimizer_step(model, adamw, cfg, sched.current_lr)
        train_loss = epoch_loss / max(n_train, 1) + l1_penalty_value(model, cfg) / max(n_train, 1)

        val_loss = validation_loss(model, records, cfg)
        val_corr = {}
        for rec in records:
            r, o = predictions_for_split(model, rec, "val", cfg.batch_size)
            val_corr[rec.mouse_id] = single_trial_correlation(r, o).mean_correlation
        if val_loss < best.best_val_loss:
            best.best_params = model.copy_param_data()
            best.best_epoch = epoch
            best.best_val_loss = val_loss
        lr_before = sched.current_lr
        action = schedule_step(sched, val_loss, cfg)
        best.curves.append((epoch, train_loss, val_loss, lr_before, dict(val_corr)))
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
                f"lr {lr_before:.2e}  corr " +
                " ".join(f"{m}={c:.3f}" for m, c in val_corr.items()))
        if action is ScheduleAction.STOP:
            best.stopped_early = True
            break
    best.final_params = model.copy_param_data()
    model.load_param_data(best.best_params)
    return best


def curves_to_csv(path, curves, mouse_ids):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"] +
                        [f"val_corr_{m}" for m in mouse_ids])
        for epoch, train_loss, val_loss, lr, corr in curves:
            writer.writerow([epoch, f"{train_loss:.6f}", f"{val_loss:.6f}", f"{lr:.6e}"] +
                            [f"{corr[m]:.6f}" for m in mouse_ids])


# -- ensembles -----------------------------------------------------------------------


@dataclass
class EnsembleResult:
    members: list          # V1TModel, best-checkpoint parameters loaded
    member_seeds: list
    member_val_corr: list  # aggregate validation correlation per member
    kept: list             # indices into members, best-first


def train_ensemble(core_cfg: CoreConfig, records: list[MouseRecord], cfg: TrainConfig,
                   n_train: int = 10, n_keep: int = 5, log=None) -> EnsembleResult:
    """Train n_train models from distinct seeds, keep the n_keep best by
    validation correlation; the ensemble prediction is their mean output."""
    from .evaluation import predictions_for_split, single_trial_correlation

    members, seeds, scores = [], [], []
    for k in range(n_train):
        run_cfg = TrainConfig(**{**cfg.__dict__})
        run_cfg.seed = cfg.seed + k
        model = V1TModel.from_records(core_cfg, records, seed=run_cfg.seed)
        fit(model, records, run_cfg, log=log)
        corrs = []
        for rec in records:
            r, o = predictions_for_split(model, rec, "val", cfg.batch_size)
            corrs.append(single_trial_correlation(r, o).mean_correlation)
        members.append(model)
        seeds.append(run_cfg.seed)
        scores.append(float(np.mean(corrs)))
        if log is not None:
            log(f"ensemble member {k} (seed {run_cfg.seed}): val corr {scores[-1]:.4f}")
    kept = sorted(range(n_train), key=lambda i: -scores[i])[:n_keep]
    return EnsembleResult(members=members, member_seeds=seeds,
                          member_val_corr=scores, kept=kept)


def ensemble_predict(members: list[V1TModel], mouse_id: str, images, behaviors,
                     pupil_center) -> np.ndarray:
    """Arithmetic mean of member predictions (eval mode)."""
    outs = [m.forward(mouse_id, images, behaviors, pupil_center, train=False).data
            for m in members]
    return np.mean(outs, axis=0)
