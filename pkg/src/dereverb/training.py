"""Adam optimisation, plateau learning-rate schedule, and the batch loop.

Training minimises the negative SISDR of the model output against the
direct-path target.  Everything is deterministic for a fixed seed: batch
order, parameter updates, and the loss-curve CSV are bit-identical across
runs, and a state checkpoint restores the exact trajectory.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .dsp import ReverbSample
from .loss import sisdr, sisdr_loss
from .model import WDTCNModel, forward, model_from_dict, model_to_dict, save_model

__all__ = [
    "TrainConfig",
    "TrainState",
    "AdamState",
    "EpochRecord",
    "TrainingError",
    "adam_step",
    "lr_schedule_update",
    "train",
    "resume",
    "mean_sisdr",
    "write_loss_curve",
    "save_train_state",
    "load_train_state",
]

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STATE_MAGIC = "dereverb-trainstate"
STATE_VERSION = 1


class TrainingError(RuntimeError):
    """Aborted training run (e.g. non-finite loss)."""


@dataclass
class TrainConfig:
    """Training recipe.

    ``max_steps`` bounds the total number of optimizer steps across all
    epochs (None = unlimited).  ``deterministic`` is contract surface: the
    single-threaded implementation always uses a fixed reduction order, so
    runs with equal seeds are bit-identical either way.
    """

    epochs: int = 100
    batch_size: int = 4
    lr_initial: float = 0.001
    lr_halve_patience: int = 3
    clip_seconds: float = 4.0
    seed: int = 0
    max_steps: int | None = None
    grad_clip_norm: float = 5.0
    deterministic: bool = True


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss_db: float
    val_loss_db: float
    lr: float


@dataclass
class TrainState:
    lr_initial: float
    lr_current: float
    epoch: int = 0
    best_validation_loss: float = math.inf
    halvings: int = 0
    epochs_since_improvement: int = 0
    adam: AdamState = field(default_factory=AdamState)
    history: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        return cls(lr_initial=cfg.lr_initial, lr_current=cfg.lr_initial)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {tensor.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


def lr_schedule_update(state: TrainState, validation_loss: float, patience: int = 3) -> TrainState:
    """Halve the learning rate after ``patience`` epochs without a strictly
    lower validation loss; reset the counter on improvement or halving."""
    if validation_loss < state.best_validation_loss:
        state.best_validation_loss = validation_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= patience:
            state.lr_current *= 0.5
            state.halvings += 1
            state.epochs_since_improvement = 0
            logger.info("validation plateau: learning rate halved to %g", state.lr_current)
    return state


def _fix_length(samples: np.ndarray, n: int) -> np.ndarray:
    if samples.size >= n:
        return samples[:n].copy()
    out = np.zeros(n)
    out[: samples.size] = samples
    return out


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        logger.info("gradient norm %.3f clipped to %.3f", total, max_norm)
    return total


def _split_corpus(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n // 8
    if n_val == 0:
        # degenerate small corpus: validate on the training material
        return perm, perm
    return perm[n_val:], perm[:n_val]


def mean_sisdr(samples: list[ReverbSample], model: WDTCNModel | None = None) -> float:
    """Mean SISDR (dB) of the model output (or, without a model, of the
    unprocessed input) against the direct-path target."""
    values = []
    for sample in samples:
        if model is None:
            est = sample.input.samples
        else:
            est, _ = forward(sample.input, model)
            est = est.data
        values.append(sisdr(est, sample.target.samples).value_db)
    return float(np.mean(values))


def write_loss_curve(path, history: list[EpochRecord]) -> None:
    """CSV with full-precision float fields: epoch,train_loss_db,val_loss_db,lr."""
    with open(path, "w") as fh:
        fh.write("epoch,train_loss_db,val_loss_db,lr\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss_db!r},{rec.val_loss_db!r},{rec.lr!r}\n")


def train(
    model: WDTCNModel,
    corpus: list[ReverbSample],
    cfg: TrainConfig,
    out_dir=None,
) -> TrainState:
    """Train in place; returns the final state.

    Per epoch: seeded shuffle of the training split, batched negative-SISDR
    descent with global-norm gradient clipping, validation pass, plateau
    schedule update, and best-checkpoint retention.  With ``out_dir`` set,
    writes ``loss_curve.csv``, ``checkpoint_best.json``, and a resumable
    ``checkpoint_last.json``.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    state = TrainState.fresh(cfg)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    return _run_epochs(model, corpus, cfg, state, shuffle_rng, out_dir)


def resume(state_path, corpus: list[ReverbSample], cfg: TrainConfig, out_dir=None) -> TrainState:
    """Continue a run from a state checkpoint, bit-exactly."""
    model, state, shuffle_rng = load_train_state(state_path)
    return _run_epochs(model, corpus, cfg, state, shuffle_rng, out_dir)


def _run_epochs(
    model: WDTCNModel,
    corpus: list[ReverbSample],
    cfg: TrainConfig,
    state: TrainState,
    shuffle_rng: np.random.Generator,
    out_dir,
) -> TrainState:
    fs = corpus[0].input.sample_rate
    clip_len = int(round(cfg.clip_seconds * fs))
    inputs = [_fix_length(s.input.samples, clip_len) for s in corpus]
    targets = [_fix_length(s.target.samples, clip_len) for s in corpus]

    train_idx, val_idx = _split_corpus(len(corpus), cfg.seed)
    params = model.parameter_dict()
    tensors = list(params.values())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for _ in range(state.epoch, cfg.epochs):
        if cfg.max_steps is not None and state.adam.step_count >= cfg.max_steps:
            break
        epoch = state.epoch + 1
        order = train_idx.copy()
        shuffle_rng.shuffle(order)

        epoch_losses: list[float] = []
        for batch_no, start in enumerate(range(0, order.size, cfg.batch_size)):
            if cfg.max_steps is not None and state.adam.step_count >= cfg.max_steps:
                break
            batch = order[start : start + cfg.batch_size]
            ad.zero_grads(tensors)
            for idx in batch:
                est, _ = forward(inputs[idx], model)
                loss_node = sisdr_loss(est, targets[idx])
                loss_value = float(loss_node.data)
                if not math.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {batch_no} (sample {int(idx)})"
                    )
                epoch_losses.append(loss_value)
                ad.backward(loss_node * (1.0 / batch.size))
            grads = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()
            }
            _clip_global_norm(grads, cfg.grad_clip_norm)
            adam_step(params, grads, state.adam, state.lr_current)

        if not epoch_losses:
            break
        state.epoch = epoch
        train_loss = float(np.mean(epoch_losses))
        val_loss = float(
            np.mean([-sisdr(forward(inputs[i], model)[0].data, targets[i]).value_db for i in val_idx])
        )
        state.history.append(
            EpochRecord(epoch=epoch, train_loss_db=train_loss, val_loss_db=val_loss, lr=state.lr_current)
        )
        improved = val_loss < state.best_validation_loss
        if improved and out is not None:
            save_model(out / "checkpoint_best.json", model)
        lr_schedule_update(state, val_loss, cfg.lr_halve_patience)
        if out is not None:
            save_train_state(out / "checkpoint_last.json", model, state, shuffle_rng)

    if out is not None:
        write_loss_curve(out / "loss_curve.csv", state.history)
        if not (out / "checkpoint_best.json").exists():
            save_model(out / "checkpoint_best.json", model)
    return state


# -- state checkpoints ------------------------------------------------------------


def save_train_state(path, model: WDTCNModel, state: TrainState, shuffle_rng: np.random.Generator) -> None:
    payload = {
        "magic": STATE_MAGIC,
        "format_version": STATE_VERSION,
        "model": model_to_dict(model),
        "adam": {
            "step_count": state.adam.step_count,
            "m": {k: v.reshape(-1).tolist() for k, v in state.adam.m.items()},
            "v": {k: v.reshape(-1).tolist() for k, v in state.adam.v.items()},
        },
        "schedule": {
            "lr_initial": state.lr_initial,
            "lr_current": state.lr_current,
            "epoch": state.epoch,
            "best_validation_loss": state.best_validation_loss,
            "halvings": state.halvings,
            "epochs_since_improvement": state.epochs_since_improvement,
        },
        "history": [
            [r.epoch, r.train_loss_db, r.val_loss_db, r.lr] for r in state.history
        ],
        "rng_state": shuffle_rng.bit_generator.state,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_train_state(path) -> tuple[WDTCNModel, TrainState, np.random.Generator]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("magic") != STATE_MAGIC:
        raise ValueError(f"not a training state checkpoint: magic={payload.get('magic')!r}")
    model = model_from_dict(payload["model"])
    shapes = {name: t.shape for name, t in model.parameters()}
    adam = AdamState(step_count=payload["adam"]["step_count"])
    for key in ("m", "v"):
        store = getattr(adam, key)
        for name, flat in payload["adam"][key].items():
            store[name] = np.asarray(flat, dtype=np.float64).reshape(shapes[name])
    sched = payload["schedule"]
    state = TrainState(
        lr_initial=sched["lr_initial"],
        lr_current=sched["lr_current"],
        epoch=sched["epoch"],
        best_validation_loss=sched["best_validation_loss"],
        halvings=sched["halvings"],
        epochs_since_improvement=sched["epochs_since_improvement"],
        adam=adam,
        history=[
            EpochRecord(epoch=int(e), train_loss_db=t, val_loss_db=v, lr=lr)
            for e, t, v, lr in payload["history"]
        ],
    )
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = payload["rng_state"]
    return model, state, shuffle_rng
