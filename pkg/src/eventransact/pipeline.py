"""Training loop, optimiser and schedule, video-level inference, evaluation
reports and the single-clip timing benchmark."""

from __future__ import annotations

import json
import logging
import math
import platform
import statistics
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import _serde
from .events_io import EventStream, slice_stream
from .frames import (
    AugmentConfig,
    ClipSpec,
    EncoderConfig,
    Video,
    augment_video_views,
    derive_seed,
    encode_frames,
    make_two_views,
    sample_clips_uniform,
)
from .losses import LossConfig, total_loss
from .model import VTN, ModelConfig, model_from_tensors, read_tensors, save_model, write_tensors

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "TrainResult",
    "EvalReport",
    "TimingReport",
    "Prediction",
    "TrainingDiverged",
    "DataLoadError",
    "lr_at",
    "adam_step",
    "train",
    "predict_video",
    "evaluate",
    "benchmark",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 4e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    micro_batch: int | None = None  # gradient accumulation chunk; None = whole batch
    alpha: float = 1.0
    tau: float = 0.1
    symmetric_ec: bool = False
    seed: int = 0
    clip_len: int = 16
    eval_clips: int = 5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if self.clip_len < 1 or self.eval_clips < 1:
            raise ValueError("clip_len and eval_clips must be >= 1")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(tau=self.tau, alpha=self.alpha, symmetric=self.symmetric_ec)


class TrainingDiverged(RuntimeError):
    pass


class DataLoadError(RuntimeError):
    pass


# -- schedule & optimiser ----------------------------------------------------


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Per-step linear warm-up from 0, then half-cosine decay to 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm_steps = config.warmup_epochs * steps_per_epoch
    if step < warm_steps:
        return config.base_lr * (step + 1) / warm_steps
    e = step / steps_per_epoch
    frac = (e - config.warmup_epochs) / (config.epochs - config.warmup_epochs)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``.

    Raises ``FloatingPointError`` naming the first parameter whose gradient is
    not finite, before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    model: VTN
    optimizer: AdamState
    train_config: TrainConfig
    epoch: int  # completed epochs
    rng_state: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Model archive (see :func:`save_model`) plus optimiser moments and state."""
    moments = {f"m/{k}": v for k, v in ckpt.optimizer.m.items()}
    moments.update({f"v/{k}": v for k, v in ckpt.optimizer.v.items()})
    state = {"epoch": ckpt.epoch, "step": ckpt.optimizer.step, "rng": ckpt.rng_state}
    tmp = Path(str(path) + ".tmp")
    save_model(
        ckpt.model,
        tmp,
        extra={
            "moments.bin": write_tensors(moments),
            "train.json": json.dumps(_serde.to_dict(ckpt.train_config), indent=2),
            "state.json": json.dumps(state),
        },
    )
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        model = model_from_tensors(config, read_tensors(zf.read("params.bin")))
        moments = read_tensors(zf.read("moments.bin"))
        train_config = _serde.from_dict(TrainConfig, json.loads(zf.read("train.json")))
        state = json.loads(zf.read("state.json"))
    opt = AdamState(step=state["step"])
    for key, arr in moments.items():
        kind, name = key.split("/", 1)
        getattr(opt, kind)[name] = torch.from_numpy(arr)
    return Checkpoint(model, opt, train_config, state["epoch"], state.get("rng", {}))


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def _samples(dataset):
    return list(getattr(dataset, "samples", dataset))


def _load(sample):
    try:
        data = sample.load()
    except Exception as exc:  # noqa: BLE001 - reported with the sample name
        raise DataLoadError(f"failed to load sample {sample.source_id!r}: {exc}") from exc
    if not isinstance(data, (EventStream, Video)):
        raise DataLoadError(f"sample {sample.source_id!r} loaded {type(data).__name__}")
    return data


def _check_consistency(model_config: ModelConfig, config: TrainConfig, labels):
    enc = config.encoder
    if config.clip_len != model_config.clip_len:
        raise ValueError(f"clip_len {config.clip_len} != model clip_len {model_config.clip_len}")
    if enc.spatial_size != model_config.image_size:
        raise ValueError(f"encoder size {enc.spatial_size} != model image_size {model_config.image_size}")
    if enc.channels != model_config.in_channels:
        raise ValueError(f"encoder gives {enc.channels} channels, model expects {model_config.in_channels}")
    if labels and (min(labels) < 0 or max(labels) >= model_config.num_classes):
        raise ValueError(f"labels must lie in [0, {model_config.num_classes})")
    if config.alpha > 0 and config.clip_len < 2:
        raise ValueError("the contrastive loss needs clip_len >= 2")


def _two_views(data, config: TrainConfig, seed: int):
    if isinstance(data, Video):
        return augment_video_views(data, config.clip_len, config.augment, seed)
    return make_two_views(data, ClipSpec(config.clip_len), config.augment, config.encoder, seed=seed)


def train(
    dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    out_dir=None,
    resume: Checkpoint | str | Path | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[dict, VTN], None] | None = None,
) -> TrainResult:
    """Train a VTN on ``dataset`` (a manifest or a sequence of samples with
    ``source_id``, ``label`` and ``load()``).

    All randomness derives from ``config.seed`` and the epoch number, so a run
    resumed from an epoch-``k`` checkpoint continues exactly as the
    uninterrupted run. With ``out_dir``, the checkpoint is rewritten after every
    epoch and each epoch's record is appended to ``train_log.jsonl``.
    ``stop_after`` ends the run early after that many epochs in total.
    """
    samples = _samples(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    labels = [int(s.label) for s in samples]
    _check_consistency(model_config, config, labels)
    data = {s.source_id: _load(s) for s in samples}

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.model.config != model_config:
            raise ValueError("checkpoint model config differs from the requested one")
        model, opt, start_epoch = ckpt.model, ckpt.optimizer, ckpt.epoch
    else:
        model = VTN(model_config, seed=derive_seed(config.seed, "init") % 2**63)
        opt, start_epoch = AdamState(), 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    params = dict(model.named_parameters())
    N, bs = len(samples), config.batch_size
    steps_per_epoch = math.ceil(N / bs)
    micro = config.micro_batch or bs
    loss_cfg = config.loss
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    history = []
    ckpt = Checkpoint(model, opt, config, start_epoch)

    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        torch.manual_seed(derive_seed(config.seed, "torch", epoch) % 2**63)
        order = np.random.default_rng(derive_seed(config.seed, "order", epoch)).permutation(N)
        model.train()
        sums = {"ce": 0.0, "ec": 0.0, "total": 0.0}
        lr = 0.0
        for b in range(steps_per_epoch):
            batch = [samples[i] for i in order[b * bs : (b + 1) * bs]]
            model.zero_grad(set_to_none=True)
            for c in range(0, len(batch), micro):
                chunk = batch[c : c + micro]
                views = [
                    _two_views(
                        data[s.source_id],
                        config,
                        derive_seed(config.augment.seed, config.seed, epoch, s.source_id),
                    )
                    for s in chunk
                ]
                v1 = torch.from_numpy(np.stack([v.view1.to_array() for v in views]))
                v2 = torch.from_numpy(np.stack([v.view2.to_array() for v in views]))
                y = torch.tensor([s.label for s in chunk])
                out = model(v1, v2)
                use_ec = config.clip_len >= 2
                parts = total_loss(
                    out["logits"],
                    y,
                    out["proj1"] if use_ec else None,
                    out["proj2"] if use_ec else None,
                    loss_cfg,
                )
                if not torch.isfinite(parts["total"]):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b}; last good checkpoint kept"
                    )
                (parts["total"] * (len(chunk) / len(batch))).backward()
                for key, name in (("ce", "ce_part"), ("ec", "ec_part"), ("total", "total")):
                    sums[key] += float(parts[name].detach()) * len(chunk)
            lr = lr_at(opt.step, steps_per_epoch, config)
            grads = {k: p.grad for k, p in params.items()}
            try:
                adam_step(params, grads, opt, lr, config)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}; last good checkpoint kept") from exc
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "ce": sums["ce"] / N,
            "ec": sums["ec"] / N,
            "total": sums["total"] / N,
            "wall_s": time.perf_counter() - t0,
        }
        history.append(record)
        ckpt = Checkpoint(model, opt, config, epoch + 1, {"seed": config.seed, "next_epoch": epoch + 1})
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
            with open(out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        log.info("epoch %d: total=%.4f ce=%.4f ec=%.4f lr=%.3g", epoch + 1, record["total"], record["ce"], record["ec"], lr)
        if on_epoch is not None:
            on_epoch(record, model)
    return TrainResult(ckpt, history)


# -- inference ---------------------------------------------------------------


@dataclass
class Prediction:
    label: int
    probabilities: np.ndarray


def _logits(model, clips: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        out = model.logits(clips)
    return np.asarray(out.detach().cpu().double() if isinstance(out, torch.Tensor) else out, dtype=np.float64)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_video(model, video: Video, n: int, k: int = 5) -> Prediction:
    """Average the softmax outputs of ``k`` uniformly spaced clips; ties in the
    argmax go to the lowest class index."""
    clips = sample_clips_uniform(video, n, k)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        probs = _softmax(_logits(model, np.stack([c.to_array() for c in clips])))
    finally:
        if was_training:
            model.train()
    mean = probs.mean(axis=0)
    return Prediction(int(np.argmax(mean)), mean)


@dataclass
class EvalReport:
    top1_accuracy: float
    per_class_accuracy: list
    confusion_matrix: list
    num_videos: int

    def to_json(self) -> str:
        return json.dumps(_serde.to_dict(self), indent=2)


def to_video(data, encoder: EncoderConfig, source_id: str = "", label: int = -1) -> Video:
    if isinstance(data, Video):
        return data
    return encode_frames(data, encoder, source_id=source_id, label=label)


def evaluate(
    model,
    dataset,
    *,
    encoder: EncoderConfig = EncoderConfig(),
    n: int | None = None,
    k: int = 5,
    num_classes: int | None = None,
) -> EvalReport:
    """Top-1 accuracy, per-class accuracy and confusion matrix (rows = truth)."""
    samples = _samples(dataset)
    if num_classes is None:
        num_classes = model.config.num_classes
    if n is None:
        n = model.config.clip_len
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in samples:
        video = to_video(_load(s), encoder, s.source_id, s.label)
        pred = predict_video(model, video, n, k)
        cm[int(s.label), pred.label] += 1
    total = int(cm.sum())
    per_class = [
        (float(cm[c, c] / cm[c].sum()) if cm[c].sum() else None) for c in range(num_classes)
    ]
    return EvalReport(
        top1_accuracy=float(np.trace(cm) / total) if total else 0.0,
        per_class_accuracy=per_class,
        confusion_matrix=cm.tolist(),
        num_videos=total,
    )


# -- timing ------------------------------------------------------------------


@dataclass
class TimingReport:
    preprocess_ms: dict
    forward_ms: dict
    trials: int
    hardware: str

    def to_json(self) -> str:
        return json.dumps(_serde.to_dict(self), indent=2)


def hardware_descriptor() -> str:
    return (
        f"{platform.machine()} {platform.processor() or 'cpu'}; "
        f"torch {torch.__version__}, {torch.get_num_threads()} threads"
    )


def benchmark(
    model: VTN,
    sample: EventStream,
    trials: int = 30,
    *,
    encoder: EncoderConfig = EncoderConfig(),
    n: int | None = None,
    warmup: int = 5,
) -> TimingReport:
    """Time preprocessing of one clip (slice + encode, no augmentation) and the
    eval-mode forward of that clip at batch size 1. Warm-up runs are discarded."""
    if trials < 30:
        raise ValueError("at least 30 trials are required")
    if warmup < 5:
        raise ValueError("at least 5 warm-up iterations are required")
    n = model.config.clip_len if n is None else n
    span = n * encoder.rho_usec

    def preprocess():
        clip_stream = slice_stream(sample, 0, span) if len(sample) else sample
        return encode_frames(clip_stream, encoder, num_frames=n).to_array()[None]

    was_training = model.training
    model.eval()
    pre, fwd = [], []
    try:
        with torch.no_grad():
            for i in range(warmup + trials):
                t0 = time.perf_counter()
                clip = torch.from_numpy(preprocess())
                t1 = time.perf_counter()
                model.logits(clip)
                t2 = time.perf_counter()
                if i >= warmup:
                    pre.append((t1 - t0) * 1e3)
                    fwd.append((t2 - t1) * 1e3)
    finally:
        model.train(was_training)
    return TimingReport(
        preprocess_ms={"mean": statistics.fmean(pre), "sd": statistics.stdev(pre)},
        forward_ms={"mean": statistics.fmean(fwd), "sd": statistics.stdev(fwd)},
        trials=trials,
        hardware=hardware_descriptor(),
    )
