"""Training loop: Adam with L2 decay, EMA-plateau LR schedule, early stopping,
and two-dataset cotraining through separate segmentation heads.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as C
from . import tensor as T
from .data import AugmentConfig, BatchGenerator, Case, center_crop
from .errors import ContractError, NonFiniteError, ParseError
from .inference import pad_to_multiple
from .losses import LossConfig, compute_loss
from .nn import ModelConfig, UNet, build_unet
from .regions import labels_to_classes, region_targets

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_factor: float = 5.0
    lr_patience_epochs: int = 30
    stop_patience_epochs: int = 60
    ema_alpha: float = 0.95
    weight_decay: float = 1e-5
    batches_per_epoch: int = 250
    max_epochs: int = 500
    batch_size: int = 2
    patch_size: int = 128
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    improvement_tol: float = 1e-8
    val_full_volume: bool = False
    seed: int = 0
    workers: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in (0, 1)")
        if self.lr_patience_epochs < 1 or self.stop_patience_epochs < 1:
            raise ValueError("patience values must be positive")
        if self.lr_factor <= 1.0:
            raise ValueError("lr_factor must be > 1")
        if self.batches_per_epoch < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("batches_per_epoch, max_epochs and batch_size must be positive")


# -- Adam ------------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              epoch: Optional[int] = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` maps names to tensors (or is a list of pairs). The L2 term
    ``weight_decay * param`` is added to each gradient before the moment
    updates. A missing gradient counts as zero.
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    beta1, beta2 = betas
    for name, p in items:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r} (epoch {epoch}, step {state.step + 1})")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in items:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


# -- schedule ----------------------------------------------------------------------
@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    lr: float = 1e-4
    ema: Optional[float] = None
    best_ema: float = math.inf
    epochs_since_best: int = 0
    lr_counter: int = 0
    reductions: int = 0
    stop: bool = False
    adam: AdamState = field(default_factory=AdamState)


def update_schedule(state: TrainState, val_loss: float, cfg: TrainConfig) -> TrainState:
    """Fold one epoch's validation loss into the EMA and apply LR/stop rules.

    The EMA starts at the first value. "Improved" means the EMA dropped below
    the best EMA by more than ``cfg.improvement_tol``. After
    ``lr_patience_epochs`` stale epochs the LR is divided by ``lr_factor`` and
    that counter restarts; after ``stop_patience_epochs`` stale epochs, or at
    ``max_epochs``, ``stop`` is set.
    """
    s = copy.copy(state)
    val_loss = float(val_loss)
    s.ema = val_loss if s.ema is None else cfg.ema_alpha * s.ema + (1.0 - cfg.ema_alpha) * val_loss
    s.epoch += 1
    if s.ema < s.best_ema - cfg.improvement_tol:
        s.best_ema = s.ema
        s.epochs_since_best = 0
        s.lr_counter = 0
    else:
        s.epochs_since_best += 1
        s.lr_counter += 1
        if s.lr_counter >= cfg.lr_patience_epochs:
            s.reductions += 1
            s.lr = cfg.lr_init / cfg.lr_factor ** s.reductions
            s.lr_counter = 0
    if s.epochs_since_best >= cfg.stop_patience_epochs or s.epoch >= cfg.max_epochs:
        s.stop = True
    return s


# -- checkpoints -------------------------------------------------------------------
CKPT_MAGIC = "VSEGCKPT1"
_TENSOR_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(path, model: UNet, meta: Optional[Dict[str, object]] = None,
                    train_cfg: Optional[TrainConfig] = None) -> Path:
    """Header of ``key=value`` lines (model config, train config, meta), then
    each parameter as ``name dtype ndim dims...`` plus a raw little-endian payload.
    """
    path = Path(path)
    lines = [CKPT_MAGIC]
    lines += [f"model.{k}={v}" for k, v in C.to_flat(model.cfg).items()]
    if train_cfg is not None:
        lines += [f"train.{k}={v}" for k, v in C.to_flat(train_cfg).items()]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={C.format_value(v)}")
    lines.append(f"tensors={len(model.params)}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name, p in model.params.items():
            code = "f64" if p.dtype == np.float64 else "f32"
            dims = " ".join(str(d) for d in p.shape)
            fh.write(f"{name} {code} {p.ndim} {dims}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(p.data, dtype=_TENSOR_DTYPES[code]).tobytes())
    return path


def load_checkpoint(path):
    """Return ``(model, meta, train_flat)``; meta values are strings."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii", "replace").strip() != CKPT_MAGIC:
            raise ParseError(path, "magic", f"not a {CKPT_MAGIC} checkpoint")
        header: Dict[str, str] = {}
        while True:
            line = fh.readline()
            if not line:
                raise ParseError(path, "header", "missing tensors= line")
            key, _, value = line.decode("ascii").strip().partition("=")
            if key == "tensors":
                count = int(value)
                break
            header[key] = value
        model_flat = {k[6:]: v for k, v in header.items() if k.startswith("model.")}
        cfg = C.from_flat(ModelConfig, model_flat, source=str(path))
        model = build_unet(cfg)
        state = {}
        for _ in range(count):
            fields = fh.readline().decode("ascii").split()
            if len(fields) < 3:
                raise ParseError(path, "tensor header", "truncated checkpoint")
            name, code, ndim = fields[0], fields[1], int(fields[2])
            shape = tuple(int(d) for d in fields[3:3 + ndim])
            if code not in _TENSOR_DTYPES:
                raise ParseError(path, name, f"unsupported dtype {code!r}")
            dtype = _TENSOR_DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ParseError(path, name, f"truncated payload ({len(raw)} of {nbytes} bytes)")
            state[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise ParseError(path, "payload", "trailing bytes after last tensor")
    try:
        model.load_state_dict(state)
    except (ContractError, ValueError) as exc:
        raise ParseError(path, "tensors", str(exc)) from None
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    train_flat = {k[6:]: v for k, v in header.items() if k.startswith("train.")}
    return model, meta, train_flat


# -- training log ------------------------------------------------------------------
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "ema", "lr", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    ema: float
    lr: float
    seconds: float

    def row(self) -> str:
        return (f"{self.epoch}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.ema!r}\t"
                f"{C.format_value(self.lr)}\t{self.seconds:.3f}")


@dataclass
class TrainResult:
    history: List[EpochRecord]
    state: TrainState
    steps: int
    step_losses: List[float]
    best_epoch: int
    best_state: Dict[str, np.ndarray]
    final_state: Dict[str, np.ndarray]
    checkpoints: Dict[str, Path] = field(default_factory=dict)


def _targets(labels: np.ndarray, head_mode: str) -> np.ndarray:
    return labels_to_classes(labels) if head_mode == "softmax" else region_targets(labels)


def validation_loss(model: UNet, cases: Sequence[Case], cfg: TrainConfig, head_index: int = 0) -> float:
    """Mean loss over ``cases``: center patch of ``patch_size`` or the full volume."""
    losses = []
    with T.no_grad():
        for case in cases:
            if cfg.val_full_volume:
                image, _ = pad_to_multiple(case.image(), model.cfg.divisor)
                label, _ = pad_to_multiple(case.label.data[None], model.cfg.divisor)
                label = label[0]
            else:
                image, label = center_crop(case, cfg.patch_size)
            logits = model.forward(image[None].astype(model.cfg.dtype), head_index)
            loss = compute_loss(logits, _targets(label[None], model.cfg.head_mode), cfg.loss, model.cfg.head_mode)
            losses.append(loss.item())
    return float(np.mean(losses))


def _write_log_header(fh, model: UNet, cfg: TrainConfig) -> None:
    for k, v in C.to_flat(cfg).items():
        fh.write(f"# {k}={v}\n")
    for k, v in C.to_flat(model.cfg).items():
        fh.write(f"# model.{k}={v}\n")
    fh.write("\t".join(LOG_COLUMNS) + "\n")


def _fit(model: UNet, streams: List[Tuple[BatchGenerator, int]], val_sets: List[Tuple[Sequence[Case], int]],
         cfg: TrainConfig, log_path=None, checkpoint_dir=None,
         on_epoch_end: Optional[Callable[[int, UNet, EpochRecord], bool]] = None) -> TrainResult:
    head_mode = model.cfg.head_mode
    state = TrainState(lr=cfg.lr_init)
    params = model.params
    history: List[EpochRecord] = []
    step_losses: List[float] = []
    best_state = model.state_dict()
    best_epoch = 0
    checkpoints: Dict[str, Path] = {}
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log = open(log_path, "w") if log_path is not None else None
    if log:
        _write_log_header(log, model, cfg)
    try:
        while not state.stop:
            start = time.perf_counter()
            epoch_losses = []
            for _ in range(cfg.batches_per_epoch):
                model.zero_grad()
                per_stream = []
                for gen, head in streams:
                    images, labels = gen.next_batch()
                    logits = model.forward(images.astype(model.cfg.dtype), head)
                    per_stream.append(compute_loss(logits, _targets(labels, head_mode), cfg.loss, head_mode))
                loss = per_stream[0]
                if len(per_stream) > 1:
                    total = per_stream[0]
                    for extra in per_stream[1:]:
                        total = total + extra
                    loss = total * (1.0 / len(per_stream))
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite training loss at epoch {state.epoch + 1}, step {state.adam.step + 1}")
                loss.backward()
                adam_step(params, state.adam, state.lr, cfg.weight_decay,
                          (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, epoch=state.epoch + 1)
                epoch_losses.append(value)
            step_losses.extend(epoch_losses)
            model.zero_grad()

            val = float(np.mean([validation_loss(model, cases, cfg, head) for cases, head in val_sets]))
            lr_used = state.lr
            previous_best = state.best_ema
            state = update_schedule(state, val, cfg)
            record = EpochRecord(state.epoch, float(np.mean(epoch_losses)), val, state.ema, lr_used,
                                 time.perf_counter() - start)
            history.append(record)
            logger.info("epoch %d train %.5f val %.5f ema %.5f lr %.3g", record.epoch,
                        record.train_loss, val, state.ema, lr_used)
            if log:
                log.write(record.row() + "\n")
                log.flush()
            meta = {"epoch": state.epoch, "lr": state.lr, "ema": state.ema}
            if state.best_ema < previous_best:
                best_state = model.state_dict()
                best_epoch = state.epoch
                if checkpoint_dir is not None:
                    checkpoints["best"] = save_checkpoint(checkpoint_dir / "best.ckpt", model, meta, cfg)
            if on_epoch_end is not None and on_epoch_end(state.epoch, model, record):
                state.stop = True
        if checkpoint_dir is not None:
            checkpoints["final"] = save_checkpoint(
                checkpoint_dir / "final.ckpt", model, {"epoch": state.epoch, "lr": state.lr, "ema": state.ema}, cfg
            )
    finally:
        if log:
            log.close()
        for gen, _ in streams:
            gen.close()
    return TrainResult(history, state, state.adam.step, step_losses, best_epoch, best_state,
                       model.state_dict(), checkpoints)


def _check_cases(cases, what):
    if not cases:
        raise ContractError(f"{what} must contain at least one case")
    for c in cases:
        if c.label is None:
            raise ContractError(f"{what}: case {c.id} has no label")


def train(model: UNet, train_cases: Sequence[Case], val_cases: Sequence[Case], cfg: TrainConfig,
          log_path=None, checkpoint_dir=None, on_epoch_end=None, head_index: int = 0) -> TrainResult:
    """Patch-based training of one head; returns history and best/final weights.

    ``on_epoch_end(epoch, model, record)`` may return True to stop early.
    """
    _check_cases(train_cases, "train_cases")
    _check_cases(val_cases, "val_cases")
    gen = BatchGenerator(train_cases, cfg.patch_size, cfg.batch_size, cfg.augment, cfg.seed, cfg.workers)
    return _fit(model, [(gen, head_index)], [(val_cases, head_index)], cfg, log_path, checkpoint_dir, on_epoch_end)


def cotrain(model: UNet, cases_a: Sequence[Case], cases_b: Sequence[Case], val_a: Sequence[Case],
            val_b: Sequence[Case], cfg: TrainConfig, log_path=None, checkpoint_dir=None,
            on_epoch_end=None) -> TrainResult:
    """Train on two datasets: head 0 sees only ``cases_a``, head 1 only ``cases_b``.

    Each minibatch holds ``batch_size // 2`` (at least one) samples per
    dataset; the minibatch loss is the mean of the two head losses. Both
    sampling streams use ``cfg.seed``.
    """
    if model.cfg.num_heads != 2:
        raise ContractError(f"cotraining needs a model with 2 heads, got {model.cfg.num_heads}")
    for cases, what in ((cases_a, "cases_a"), (cases_b, "cases_b"), (val_a, "val_a"), (val_b, "val_b")):
        _check_cases(cases, what)
    per = max(1, cfg.batch_size // 2)
    # both streams share one seed so that a == b yields identical batches
    gens = [
        BatchGenerator(cases, cfg.patch_size, per, cfg.augment, cfg.seed, cfg.workers)
        for cases in (cases_a, cases_b)
    ]
    return _fit(model, [(gens[0], 0), (gens[1], 1)], [(val_a, 0), (val_b, 1)], cfg,
                log_path, checkpoint_dir, on_epoch_end)


def cotrain_loss(model: UNet, batch_a, batch_b, loss_cfg: LossConfig):
    """Minibatch cotraining loss and its per-head parts: (total, loss_a, loss_b)."""
    mode = model.cfg.head_mode
    la = compute_loss(model.forward(batch_a[0].astype(model.cfg.dtype), 0), _targets(batch_a[1], mode), loss_cfg, mode)
    lb = compute_loss(model.forward(batch_b[0].astype(model.cfg.dtype), 1), _targets(batch_b[1], mode), loss_cfg, mode)
    return (la + lb) * 0.5, la, lb
