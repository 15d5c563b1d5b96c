"""Losses, AdamW, the learning-rate schedule and the training loops for
standalone networks and the super-network."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ArchConfig
from .data import AugConfig, LabeledBatch, Sample, make_batch
from .errors import ContractError, FormatError, TrainingDivergedError
from .model import ViTRes, check_params
from .space import SearchSpaceDef, max_choice
from .supernet import SuperNet, sample_choice, warmup_bounds

logger = logging.getLogger(__name__)

METRICS_HEADER = ("kind", "step", "epoch", "loss", "cls_loss", "token_loss", "lr", "top1")
LR_FLOOR_RATIO = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    drop_path_rate: float = 0.1
    num_archs: int = 16
    warmup_fraction: float = 0.25
    lr_warmup_fraction: float = 0.05
    seed: int = 0
    eval_every: int = 1
    grad_clip: float | None = 5.0
    token_loss: bool = True
    augment: bool = True
    per_class_val: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.num_archs < 1 or self.eval_every < 1:
            raise ContractError("epochs, batch_size, num_archs and eval_every must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ContractError("drop_path_rate must lie in [0, 1)")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ContractError("base_lr must be positive and weight_decay nonnegative")
        if not 0.0 <= self.warmup_fraction <= 1.0 or not 0.0 <= self.lr_warmup_fraction <= 1.0:
            raise ContractError("warmup fractions must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# --- losses -------------------------------------------------------------------------


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """-sum(target * log_softmax(logits)) averaged over every leading position."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ContractError(f"targets {t.shape} do not match logits {logits.shape}")
    per = ad.tsum(ad.mul(ad.log_softmax(logits), -t), axis=-1)
    return ad.mean(per)


def token_label_loss(cls_logits: Tensor, token_logits: Tensor | None, batch: LabeledBatch):
    """Classification loss plus the mean per-patch token loss, added with
    coefficient 1.  Returns (total, cls_term, token_term or None)."""
    cls_term = soft_cross_entropy(cls_logits, batch.image_labels)
    if batch.patch_labels is None or token_logits is None:
        return cls_term, cls_term, None
    if token_logits.shape[1] != batch.patch_labels.shape[1]:
        raise ContractError(f"{token_logits.shape[1]} token logits but {batch.patch_labels.shape[1]} patch labels")
    tok_term = soft_cross_entropy(token_logits, batch.patch_labels)
    return ad.add(cls_term, tok_term), cls_term, tok_term


# --- optimizer and schedule --------------------------------------------------------------


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices and kernels only."""
    return not (
        name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta")
        or name == "cls_token" or name.endswith("pos_embed")
    )


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, lr: float, weight_decay: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if weight_decay and decays(name):
                p.data *= 1.0 - lr * weight_decay
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_tensors(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
        return out

    def load(self, t: int, m: dict, v: dict) -> None:
        self.t, self.m, self.v = t, dict(m), dict(v)


def optimizer_step(params: dict, state: AdamW, lr: float, weight_decay: float) -> None:
    state.step(params, lr, weight_decay)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``1e-6 * base_lr``."""
    if step > total_steps:
        raise ContractError(f"step {step} beyond total_steps {total_steps}")
    floor = LR_FLOOR_RATIO * base_lr
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- metrics ----------------------------------------------------------------------------


@dataclass
class StepRecord:
    kind: str
    step: int
    epoch: int
    loss: float = float("nan")
    cls_loss: float = float("nan")
    token_loss: float = float("nan")
    lr: float = float("nan")
    top1: float = float("nan")
    extra: dict = field(default_factory=dict, repr=False)

    def row(self) -> list:
        return [self.kind, self.step, self.epoch] + [_fmt(v) for v in (self.loss, self.cls_loss, self.token_loss, self.lr, self.top1)]


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


class MetricsLog:
    """Append-only metrics with a fixed CSV header."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[StepRecord] = []
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def append(self, rec: StepRecord) -> None:
        last = next((r.step for r in reversed(self.records) if r.kind == rec.kind), None)
        if last is not None and (rec.step < last or (rec.kind == "train" and rec.step == last)):
            raise ContractError(f"{rec.kind} step {rec.step} does not follow step {last}")
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(rec.row())

    def losses(self) -> list[float]:
        return [r.loss for r in self.records if r.kind == "train"]


# --- training state --------------------------------------------------------------------


@dataclass
class TrainState:
    total_steps: int
    warmup_steps: int = 0
    step: int = 0
    epoch: int = 0
    optimizer: AdamW = field(default_factory=AdamW)


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Counter-based stream: identical for a given (seed, step) no matter how
    the run was interrupted and resumed."""
    return np.random.default_rng([seed, step, stream])


_DROP_STREAM, _ARCH_STREAM, _ORDER_STREAM = 1, 2, 3


def _finish_step(params: dict, total: Tensor, cls_t: Tensor, tok_t, cfg: TrainConfig, state: TrainState, lr: float, kind: str) -> StepRecord:
    loss = float(total.data)
    if not math.isfinite(loss):
        ad.get_tape().clear()
        raise TrainingDivergedError(state.step, loss)
    ad.backward(total)
    if cfg.grad_clip:
        clip_grad_norm(params, cfg.grad_clip)
    optimizer_step(params, state.optimizer, lr, cfg.weight_decay)
    for p in params.values():
        p.grad = None
    rec = StepRecord(kind, state.step, state.epoch, loss, float(cls_t.data), float(tok_t.data) if tok_t is not None else float("nan"), lr)
    state.step += 1
    return rec


def train_step(model: ViTRes, batch: LabeledBatch, cfg: TrainConfig, state: TrainState) -> StepRecord:
    lr = lr_schedule(state.step, state.total_steps, cfg.base_lr, state.warmup_steps)
    rng = step_rng(cfg.seed, state.step, _DROP_STREAM)
    cls_logits, tok_logits = model(batch.images, training=True, drop_path_rate=cfg.drop_path_rate, rng=rng)
    if not cfg.token_loss:
        batch = LabeledBatch(batch.images, batch.image_labels, None, batch.labels)
    total, cls_t, tok_t = token_label_loss(cls_logits, tok_logits, batch)
    return _finish_step(model.params, total, cls_t, tok_t, cfg, state, lr, "train")


def supernet_train_step(
    supernet: SuperNet, batch: LabeledBatch, cfg: TrainConfig, state: TrainState, epoch_fraction: float
) -> StepRecord:
    """Sample ``num_archs`` sub-networks under the warmup bounds and train them
    on equal sub-batches with one forward/backward pass."""
    if len(batch) % cfg.num_archs:
        raise ContractError(f"batch of {len(batch)} is not divisible by num_archs={cfg.num_archs}")
    lr = lr_schedule(state.step, state.total_steps, cfg.base_lr, state.warmup_steps)
    bounds = warmup_bounds(epoch_fraction, supernet.space, cfg.warmup_fraction)
    arng = step_rng(cfg.seed, state.step, _ARCH_STREAM)
    choices = [sample_choice(supernet.space, arng, bounds) for _ in range(cfg.num_archs)]
    rng = step_rng(cfg.seed, state.step, _DROP_STREAM)
    cls_logits, tok_logits = supernet(batch.images, choices, training=True, drop_path_rate=cfg.drop_path_rate, rng=rng)
    if not cfg.token_loss:
        batch = LabeledBatch(batch.images, batch.image_labels, None, batch.labels)
    total, cls_t, tok_t = token_label_loss(cls_logits, tok_logits, batch)
    rec = _finish_step(supernet.params, total, cls_t, tok_t, cfg, state, lr, "train")
    full = [len(o) for o in supernet.space.gene_options()]
    rec.extra = {"epoch_fraction": epoch_fraction, "allowed": sum(bounds), "full": sum(full), "choices": choices}
    return rec


# --- evaluation ------------------------------------------------------------------------


def top1_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class index."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        raise ContractError("cannot score an empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate_top1(model: Callable, dataset: Sequence[Sample], batch_size: int = 64) -> float:
    """Top-1 accuracy with drop path disabled; per-example ops only, so the
    result does not depend on ``batch_size``."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    with ad.no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset[lo : lo + batch_size]
            images = np.stack([s.image for s in chunk]).astype(ad.default_dtype())
            cls_logits, _ = model(images)
            correct += int(np.sum(np.argmax(cls_logits.data, axis=1) == np.array([s.label for s in chunk])))
    return correct / len(dataset)


# --- loops ---------------------------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, _ORDER_STREAM]).permutation(n)


def epoch_batches(n: int, cfg: TrainConfig, epoch: int, multiple: int = 1) -> list[np.ndarray]:
    """Index batches of one epoch.  With ``multiple > 1`` the trailing batch is
    trimmed to a multiple of it (the remainder is skipped this epoch)."""
    order = epoch_order(cfg.seed, epoch, n)
    out = []
    for lo in range(0, n, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        idx = idx[: len(idx) - len(idx) % multiple]
        if len(idx):
            out.append(idx)
    return out


def steps_per_epoch(n: int, cfg: TrainConfig, multiple: int = 1) -> int:
    full, rem = divmod(n, cfg.batch_size)
    return full + (1 if rem - rem % multiple > 0 else 0)


def new_state(n: int, cfg: TrainConfig, multiple: int = 1) -> TrainState:
    total = max(1, steps_per_epoch(n, cfg, multiple) * cfg.epochs)
    return TrainState(total_steps=total, warmup_steps=int(cfg.lr_warmup_fraction * total))


def fit(
    net,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    aug: AugConfig | None,
    *,
    val: Sequence[Sample] | None = None,
    metrics: MetricsLog | None = None,
    state: TrainState | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
    max_steps: int | None = None,
    stop_epoch: int | None = None,
) -> TrainState:
    """Run epochs from ``state.epoch`` to ``cfg.epochs``.  ``net`` is a
    :class:`ViTRes` (standalone) or a :class:`SuperNet`.  ``stop_epoch`` and
    ``max_steps`` end the run early without changing the schedule, which is
    how an interrupted run is simulated."""
    is_super = isinstance(net, SuperNet)
    multiple = cfg.num_archs if is_super else 1
    if is_super and cfg.batch_size % cfg.num_archs:
        raise ContractError(f"batch_size {cfg.batch_size} is not a multiple of num_archs {cfg.num_archs}")
    arch = net.arch
    k, classes = arch.num_token_labels, arch.num_classes
    metrics = metrics if metrics is not None else MetricsLog()
    state = state or new_state(len(samples), cfg, multiple)
    aug = aug if cfg.augment else None
    last = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)
    while state.epoch < last:
        batches = epoch_batches(len(samples), cfg, state.epoch, multiple)
        for i, idx in enumerate(batches):
            if max_steps is not None and state.step >= max_steps:
                return state
            batch = make_batch(samples, idx, aug, k, classes, cfg.seed, state.epoch)
            if is_super:
                frac = (state.epoch + i / len(batches)) / max(cfg.epochs, 1)
                rec = supernet_train_step(net, batch, cfg, state, frac)
            else:
                rec = train_step(net, batch, cfg, state)
            metrics.append(rec)
        state.epoch += 1
        if val and state.epoch % cfg.eval_every == 0:
            model = net.extract(max_choice(net.space)) if is_super else net
            acc = evaluate_top1(model, val)
            metrics.append(StepRecord("eval", state.step, state.epoch, top1=acc))
            logger.info("epoch %d top1 %.4f", state.epoch, acc)
        if on_epoch_end:
            on_epoch_end(state)
    return state


# --- checkpoints -----------------------------------------------------------------------


def save_training_checkpoint(path, net, state: TrainState | None = None, cfg: TrainConfig | None = None) -> Path:
    header: dict = {"epoch": 0, "step": 0}
    if isinstance(net, SuperNet):
        header["kind"] = "supernet"
        header["space"] = net.space.to_dict()
    else:
        header["kind"] = "model"
        header["arch"] = net.arch.to_dict()
    tensors = {f"param/{n}": t.data for n, t in net.params.items()}
    if state is not None:
        header.update(
            epoch=state.epoch, step=state.step, total_steps=state.total_steps, warmup_steps=state.warmup_steps,
            optimizer={"t": state.optimizer.t, "beta1": state.optimizer.beta1, "beta2": state.optimizer.beta2, "eps": state.optimizer.eps},
        )
        tensors.update(state.optimizer.state_tensors())
    if cfg is not None:
        header["train_config"] = asdict(cfg)
        header["rng"] = {"seed": cfg.seed, "counter": header["step"]}
    return save_checkpoint(path, header, tensors)


def _params_from(ckpt: Checkpoint) -> dict:
    return {n: Tensor(a, requires_grad=True, name=n) for n, a in ckpt.group("param").items()}


def load_training_checkpoint(path) -> tuple[object, TrainState | None, dict]:
    """Rebuild the network (and optimizer state when present) from a checkpoint."""
    ckpt = load_checkpoint(path)
    h = ckpt.header
    params = _params_from(ckpt)
    kind = h.get("kind")
    if kind == "model":
        arch = ArchConfig.from_dict(h["arch"])
        check_params(arch, params)
        net = ViTRes(arch, params)
    elif kind == "supernet":
        space = SearchSpaceDef.from_dict(h["space"])
        check_params(space.supernet_arch(), params)
        net = SuperNet(space, params)
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    state = None
    if "optimizer" in h:
        opt = AdamW(h["optimizer"]["beta1"], h["optimizer"]["beta2"], h["optimizer"]["eps"])
        opt.load(int(h["optimizer"]["t"]), ckpt.group("opt.m"), ckpt.group("opt.v"))
        state = TrainState(int(h["total_steps"]), int(h["warmup_steps"]), int(h["step"]), int(h["epoch"]), opt)
    return net, state, h
