"""AdamW optimisation, the training loop, and checkpoint files."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .data import AUGMENT_OPS, AugmentConfig, Dataset, SplitManifest, augment, clahe, clahe_subset
from .errors import CheckpointFormatError, CheckpointVersionError, ConfigError, ContractError
from .models import BEiT, Classifier, MaskPlan, ModelConfig, build_model, images_to_input
from .tensor import Tensor, cross_entropy

log = logging.getLogger(__name__)

__all__ = [
    "AdamW", "TrainConfig", "History", "adamw_step", "cross_entropy", "train",
    "save_checkpoint", "load_checkpoint", "Checkpoint",
]


# -- optimiser -------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3 / 4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments."""
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            grads[name] = p.grad
    missing = [n for n in params if n not in grads or grads[n] is None]
    if missing:
        raise ContractError(f"missing gradients for {missing[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-3 / 4):
        self.params = dict(named_params)
        self.state = OptimizerState(lr, betas[0], betas[1], eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def hyper(self) -> dict:
        s = self.state
        return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
                "weight_decay": s.weight_decay, "step": s.step}

    def moment_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.state.m:
            out[f"optim.m.{name}"] = self.state.m[name]
            out[f"optim.v.{name}"] = self.state.v[name]
        return out

    def load(self, hyper: dict, tensors: dict[str, np.ndarray]) -> None:
        s = self.state
        s.lr, s.beta1, s.beta2 = hyper["lr"], hyper["beta1"], hyper["beta2"]
        s.eps, s.weight_decay, s.step = hyper["eps"], hyper["weight_decay"], int(hyper["step"])
        s.m, s.v = {}, {}
        for name, p in self.params.items():
            if f"optim.m.{name}" in tensors:
                s.m[name] = np.array(tensors[f"optim.m.{name}"], dtype=p.dtype)
                s.v[name] = np.array(tensors[f"optim.v.{name}"], dtype=p.dtype)


# -- configuration -----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3 / 4
    batch_size: int = 8
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    augment: bool = False
    augment_ops: tuple[str, ...] = AUGMENT_OPS
    clahe_fraction: float = 0.3
    restore_best: bool = True
    # BEiT stages
    vq_steps: int = 300
    vq_lr: float = 1e-2
    pretrain_epochs: int = 20

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "TrainConfig":
        if preset == "paper":
            base = dict(batch_size=32, augment=True)
        elif preset == "desk":
            base = dict(batch_size=8, augment=False)
        else:
            raise ConfigError(f"unknown preset '{preset}'")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "History":
        return cls(**d)


def preprocess_training_set(train: Dataset, config: TrainConfig) -> Dataset:
    """Apply CLAHE to the seeded ``clahe_fraction`` subset of the training images."""
    if config.clahe_fraction <= 0 or len(train) == 0:
        return train
    chosen = set(clahe_subset(train.ids, config.seed, config.clahe_fraction))
    images = train.images.copy()
    for i, sid in enumerate(train.ids):
        if sid in chosen:
            images[i] = clahe(images[i])
    return Dataset(list(train.ids), images, train.labels.copy(), train.masks)


def evaluate(model: Classifier, ds: Dataset) -> tuple[float, float]:
    """(accuracy, mean negative log-likelihood) without augmentation."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    probs = model.predict_proba(ds.images)
    acc = float((np.argmax(probs, axis=1) == ds.labels).mean())
    p = np.clip(probs[np.arange(len(ds)), ds.labels].astype(np.float64), 1e-12, 1.0)
    return acc, float(-np.log(p).mean())


def _batch_images(images: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    if not config.augment:
        return images
    return np.stack([augment(im, rng, AugmentConfig(ops=tuple(config.augment_ops))) for im in images])


def train(model: Classifier, dataset: Dataset, split: SplitManifest, config: TrainConfig,
          teacher: Classifier | None = None, resume: "Checkpoint | None" = None,
          checkpoint_path=None, on_epoch: Callable[[int, History], None] | None = None,
          params: dict[str, Tensor] | None = None) -> History:
    """Mini-batch AdamW training with early stopping on validation accuracy.

    Ties in validation accuracy are broken by validation loss. The best
    parameters are restored at the end when ``config.restore_best`` is set.
    With ``checkpoint_path`` a resumable checkpoint is written every epoch.
    """
    if not split.train:
        raise ConfigError("training split is empty")
    train_ds = preprocess_training_set(dataset.subset(split.train), config)
    val_ds = dataset.subset(split.val) if split.val else train_ds
    params = params if params is not None else model.trainable_parameters()
    opt = AdamW(params.items(), config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = History()
    start = 0
    best_state = None
    best_key = (-1.0, float("inf"))
    stale = 0
    if resume is not None:
        resume.apply_to(model)
        opt.load(resume.optimizer, resume.tensors)
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
        extra = resume.extra
        history = History.from_dict(extra["history"])
        best_key = tuple(extra["best_key"])
        stale = int(extra["stale"])
        best_state = {k[len("best."):]: v for k, v in resume.tensors.items() if k.startswith("best.")} or None

    n = len(train_ds)
    for epoch in range(start, config.epochs):
        if stale >= config.patience:
            break
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            images = _batch_images(train_ds.images[idx], rng, config)
            labels = train_ds.labels[idx]
            t_labels = None
            if teacher is not None:
                t_labels = np.argmax(teacher.predict_logits(images), axis=1)
            opt.zero_grad()
            model.zero_grad()
            loss = model.loss(images, labels, t_labels)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.train_loss.append(float(np.mean(losses)))
        history.train_acc.append(evaluate(model, train_ds)[0])
        v_acc, v_loss = evaluate(model, val_ds)
        history.val_acc.append(v_acc)
        history.val_loss.append(v_loss)
        if v_acc > best_key[0] or (v_acc == best_key[0] and v_loss < best_key[1]):
            best_key = (v_acc, v_loss)
            best_state = model.state_dict()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f", epoch, history.train_loss[-1],
                 history.train_acc[-1], v_acc)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer=opt, rng=rng, epoch=epoch + 1,
                            extra={"history": history.to_dict(), "best_key": list(best_key), "stale": stale},
                            more_tensors={f"best.{k}": v for k, v in (best_state or {}).items()})
        if on_epoch is not None:
            on_epoch(epoch, history)
    history.stopped_early = stale >= config.patience
    if config.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    return history


# -- BEiT stages ---------------------------------------------------------------------

def vq_train_step(patches: np.ndarray, codebook, optimizer: AdamW) -> float:
    """One tokenizer update; returns the total VQ loss before the step."""
    optimizer.zero_grad()
    loss, _ = codebook.loss(patches)
    T.backward(loss)
    optimizer.step()
    codebook.retract()
    return loss.item()


def fit_tokenizer(model: BEiT, images: np.ndarray, config: TrainConfig) -> list[float]:
    """Stage 1: fit the visual tokenizer on the patches of ``images``."""
    rng = np.random.default_rng([config.seed, 1])
    tok = model.tokenizer
    patches = images_to_input(images, model.config.patch).data.reshape(-1, tok.proj.shape[0])
    tok.init_from_data(patches, rng)
    opt = AdamW(tok.named_parameters(), lr=config.vq_lr, weight_decay=0.0)
    losses = []
    batch = 256
    for step in range(config.vq_steps):
        idx = rng.choice(len(patches), size=min(batch, len(patches)), replace=False)
        losses.append(vq_train_step(patches[idx], tok, opt))
    tok.mark_trained()
    return losses


def pretrain_params(model: BEiT) -> dict[str, Tensor]:
    named = {f"backbone.{k}": v for k, v in model.backbone.named_parameters() if not k.startswith("head.")}
    named["mask_token"] = model.mask_token
    named.update({f"mim_head.{k}": v for k, v in model.mim_head.named_parameters()})
    return named


def pretrain_mim(model: BEiT, images: np.ndarray, config: TrainConfig, epochs: int | None = None) -> list[float]:
    """Stage 2: masked-image modelling with the tokenizer held fixed."""
    rng = np.random.default_rng([config.seed, 2])
    params = pretrain_params(model)
    opt = AdamW(params.items(), config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    tokens = model.visual_tokens(images)
    n, n_p = len(images), model.config.n_patches
    losses = []
    for _ in range(config.pretrain_epochs if epochs is None else epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            mask = np.stack([MaskPlan.random(n_p, model.config.mask_ratio, rng).as_mask() for _ in idx])
            opt.zero_grad()
            loss = model.mim_loss(images[idx], mask, tokens[idx])
            T.backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
    return losses


def beit_pretrain_step(model: BEiT, images: np.ndarray, mask, optimizer: AdamW) -> float:
    optimizer.zero_grad()
    loss = model.mim_loss(images, mask)
    T.backward(loss)
    optimizer.step()
    return loss.item()


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"FFT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict | None = None
    rng_state: dict | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(("optim.", "best."))}

    def apply_to(self, model: Classifier) -> None:
        model.load_state_dict(self.model_tensors())
        if isinstance(model, BEiT) and self.extra.get("tokenizer_trained"):
            model.tokenizer.mark_trained()

    def build_model(self) -> Classifier:
        model = build_model(ModelConfig.from_dict(self.config))
        self.apply_to(model)
        return model


def save_checkpoint(path, model: Classifier, optimizer: AdamW | None = None, rng: np.random.Generator | None = None,
                    epoch: int = 0, extra: dict | None = None, more_tensors: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float32 payload``."""
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.moment_tensors())
    if more_tensors:
        tensors.update(more_tensors)
    extra = dict(extra or {})
    if isinstance(model, BEiT):
        extra["tokenizer_trained"] = model.tokenizer.trained
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": directory,
        "optimizer": optimizer.hyper() if optimizer is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "epoch": epoch,
        "extra": extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    payload = memoryview(raw)[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload at tensor '{entry['name']}'")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return Checkpoint(header["config"], tensors, header.get("optimizer"), header.get("rng_state"),
                      int(header.get("epoch", 0)), header.get("extra") or {}, version)
