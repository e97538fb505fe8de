"""The four transformer variants, their objectives, and the visual tokenizer."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    ClassAttentionBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    LinearHead,
    MLPHead,
    Module,
    PatchEmbedding,
    param,
    patchify,
)
from .errors import ConfigError, ContractError, StateError
from .tensor import Tensor

VARIANTS = ("vit", "deit", "cait", "beit")
N_CLASSES = 5

_PRESETS = {
    # image_side, patch, dim, depth, heads, vocab, code_dim
    "paper": dict(image_side=256, patch=64, dim=384, depth=12, heads=6, vocab_size=512, code_dim=32),
    "desk": dict(image_side=64, patch=16, dim=64, depth=4, heads=4, vocab_size=32, code_dim=16),
}


@dataclass
class ModelConfig:
    variant: str = "vit"
    image_side: int = 64
    patch: int = 16
    dim: int = 64
    depth: int = 4
    heads: int = 4
    n_classes: int = N_CLASSES
    preset: str = "desk"
    mlp_hidden: int = 128
    layer_scale_init: float = 1e-4
    class_attn_depth: int = 2
    vocab_size: int = 32
    code_dim: int = 16
    mask_ratio: float = 0.4
    commitment: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'; expected one of {VARIANTS}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"embedding dim {self.dim} not divisible by {self.heads} heads")
        if self.patch <= 0 or self.image_side % self.patch:
            raise ConfigError(f"image side {self.image_side} not divisible by patch width {self.patch}")
        if self.n_classes != N_CLASSES:
            raise ConfigError("exactly five severity classes are supported")

    @classmethod
    def from_preset(cls, preset: str, variant: str = "vit", **overrides) -> "ModelConfig":
        if preset not in _PRESETS:
            raise ConfigError(f"unknown preset '{preset}'")
        values = dict(_PRESETS[preset], preset=preset, variant=variant)
        values.update(overrides)
        return cls(**values)

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def images_to_input(images: np.ndarray, patch: int) -> Tensor:
    """uint8 ``(B, H, W, 3)`` images to ``(B, n_p, P)`` patches scaled to [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    x = images.astype(T._get_dtype()) / 255.0
    return Tensor(patchify(x, patch))


class Classifier(Module):
    """Shared prediction plumbing. Subclasses implement ``logits``."""

    config: ModelConfig

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        side = self.config.image_side
        if images.shape[1:] != (side, side, 3):
            raise ConfigError(f"image shape {images.shape[1:]} does not match config side {side}")
        return images

    def patches(self, images) -> Tensor:
        return images_to_input(self._check_images(images), self.config.patch)

    def logits(self, images, capture: bool = False) -> Tensor:
        raise NotImplementedError

    def loss(self, images, labels, teacher_labels=None) -> Tensor:
        return T.cross_entropy(self.logits(images), labels)

    def _batched(self, fn, images: np.ndarray, batch: int) -> np.ndarray:
        images = self._check_images(images)
        with T.no_grad():
            outs = [fn(images[i:i + batch]) for i in range(0, len(images), batch)]
        return np.concatenate(outs, axis=0)

    def predict_logits(self, images, batch: int = 64) -> np.ndarray:
        return self._batched(lambda x: self.logits(x).data, images, batch)

    def predict_proba(self, images, batch: int = 64) -> np.ndarray:
        return self._batched(lambda x: T.softmax(self.logits(x), axis=-1).data, images, batch)

    def predict(self, images, batch: int = 64) -> np.ndarray:
        return np.argmax(self.predict_proba(images, batch), axis=1)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters(trainable_only=True))

    def parameter_hash(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()


class ViT(Classifier):
    """Patch embedding, encoder stack, final LayerNorm and Mish MLP head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.embed = PatchEmbedding(config.image_side, config.patch, config.dim, rng)
        self.blocks = [EncoderBlock(config.dim, config.heads, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(config.dim)
        self.head = MLPHead(config.dim, rng, config.mlp_hidden, config.n_classes)
        self._captured: Tensor | None = None

    def encode(self, z: Tensor, capture: bool = False) -> Tensor:
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            z = block(z, capture=capture and i == last)
        if capture:
            self._captured = self.blocks[-1]._normed
        return self.norm(z)

    def representation(self, images, capture: bool = False) -> Tensor:
        z = self.encode(self.embed(self.patches(images)), capture)
        return z[:, 0]

    def logits(self, images, capture: bool = False) -> Tensor:
        return self.head(self.representation(images, capture))

    def captured_patch_activations(self) -> Tensor:
        """Normalised tokens entering the last encoder block's attention (all rows)."""
        return self._captured

    def patch_rows(self) -> slice:
        return slice(1, 1 + self.config.n_patches)


def vit_forward(images, model: ViT) -> np.ndarray:
    with T.no_grad():
        return T.softmax(model.logits(images), axis=-1).data


class DeiT(Classifier):
    """ViT encoder with an extra distillation token and two linear heads."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.embed = PatchEmbedding(config.image_side, config.patch, config.dim, rng, distill_token=True)
        self.blocks = [EncoderBlock(config.dim, config.heads, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(config.dim)
        self.head = LinearHead(config.dim, rng, config.n_classes)
        self.head_dist = LinearHead(config.dim, rng, config.n_classes)
        self._captured: Tensor | None = None

    encode = ViT.encode

    def both_logits(self, images, capture: bool = False) -> tuple[Tensor, Tensor]:
        z = self.encode(self.embed(self.patches(images)), capture)
        return self.head(z[:, 0]), self.head_dist(z[:, -1])

    def logits(self, images, capture: bool = False) -> Tensor:
        # pre-softmax score used for Grad-CAM: mean of the two heads
        cls, dist = self.both_logits(images, capture)
        return (cls + dist) * 0.5

    def forward(self, images) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with T.no_grad():
            cls, dist = self.both_logits(self._check_images(images))
            p_cls = T.softmax(cls, axis=-1).data
            p_dist = T.softmax(dist, axis=-1).data
        return p_cls, p_dist, fuse_heads(p_cls, p_dist)

    def predict_proba(self, images, batch: int = 64) -> np.ndarray:
        return self._batched(lambda x: self.forward(x)[2], images, batch)

    def loss(self, images, labels, teacher_labels=None) -> Tensor:
        if teacher_labels is None:
            raise ContractError("DeiT training needs teacher labels")
        cls, dist = self.both_logits(images)
        return hard_distillation_loss(cls, labels, teacher_labels=teacher_labels, distill_logits=dist)

    captured_patch_activations = ViT.captured_patch_activations

    def patch_rows(self) -> slice:
        return slice(1, 1 + self.config.n_patches)


def fuse_heads(p_cls: np.ndarray, p_dist: np.ndarray) -> np.ndarray:
    fused = 0.5 * (np.asarray(p_cls) + np.asarray(p_dist))
    return fused / fused.sum(axis=-1, keepdims=True)


def deit_forward(images, model: DeiT):
    return model.forward(images)


def hard_distillation_loss(student_logits: Tensor, labels, teacher_logits=None, *,
                           teacher_labels=None, distill_logits: Tensor | None = None) -> Tensor:
    """Half cross-entropy on ground truth plus half on the teacher's argmax.

    The teacher term uses ``distill_logits`` when given (the distillation
    token's head), else the same student logits.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if teacher_labels is None:
        if teacher_logits is None:
            raise ContractError("need teacher_logits or teacher_labels")
        tl = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
        teacher_labels = np.argmax(tl.reshape(len(labels), -1), axis=1)
    teacher_labels = np.asarray(teacher_labels, dtype=np.int64).reshape(-1)
    d = student_logits if distill_logits is None else distill_logits
    return T.cross_entropy(student_logits, labels) * 0.5 + T.cross_entropy(d, teacher_labels) * 0.5


class CaiT(Classifier):
    """Self-attention over patches with LayerScale, then class attention."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.embed = PatchEmbedding(config.image_side, config.patch, config.dim, rng, class_token=False)
        self.blocks = [EncoderBlock(config.dim, config.heads, rng, layer_scale=config.layer_scale_init)
                       for _ in range(config.depth)]
        self.cls_token = param(rng.normal(0, 0.02, (1, 1, config.dim)))
        self.ca_blocks = [ClassAttentionBlock(config.dim, config.heads, rng)
                          for _ in range(config.class_attn_depth)]
        self.norm = LayerNorm(config.dim)
        self.head = LinearHead(config.dim, rng, config.n_classes)
        self._captured: Tensor | None = None
        self._patches_out: Tensor | None = None

    def features(self, images, capture: bool = False) -> tuple[Tensor, Tensor]:
        z = self.embed(self.patches(images))
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            z = block(z, capture=capture and i == last)
        if capture:
            self._captured = self.blocks[-1]._normed
        cls = T.Tensor(np.ones((z.shape[0], 1, 1)), dtype=z.dtype) * self.cls_token
        for block in self.ca_blocks:
            cls = block(cls, z)
        self._patches_out = z
        return self.norm(cls)[:, 0], z

    def logits(self, images, capture: bool = False) -> Tensor:
        return self.head(self.features(images, capture)[0])

    captured_patch_activations = ViT.captured_patch_activations

    def patch_rows(self) -> slice:
        return slice(0, self.config.n_patches)


def cait_forward(images, model: CaiT) -> np.ndarray:
    with T.no_grad():
        return T.softmax(model.logits(images), axis=-1).data


# -- BEiT ------------------------------------------------------------------

class VQCodebook(Module):
    """Vector-quantising patch tokenizer with a tied linear decoder.

    Patches are encoded as ``(x - mean) @ proj`` where ``proj`` keeps
    orthonormal columns (re-orthonormalised after each update), and decoded
    as ``code @ proj.T + mean``. Decoding then encoding a code vector
    returns that vector, so token assignment is a fixed point of
    encode -> decode -> encode.
    """

    frozen = True

    def __init__(self, patch_dim: int, code_dim: int, vocab_size: int, rng: np.random.Generator,
                 commitment: float = 0.25):
        q, _ = np.linalg.qr(rng.normal(size=(patch_dim, code_dim)))
        self.proj = param(q)
        self.mean = param(np.zeros(patch_dim))
        self.codes = param(rng.normal(0, 1.0, (vocab_size, code_dim)))
        self._commitment = commitment
        self._trained = False

    @property
    def vocab_size(self) -> int:
        return self.codes.shape[0]

    @property
    def trained(self) -> bool:
        return self._trained

    def mark_trained(self, value: bool = True) -> None:
        self._trained = value

    def encode(self, patches: np.ndarray) -> np.ndarray:
        x = np.asarray(patches, dtype=self.proj.dtype)
        return (x - self.mean.data) @ self.proj.data

    def decode(self, indices) -> np.ndarray:
        return self.codes.data[np.asarray(indices)] @ self.proj.data.T + self.mean.data

    def nearest(self, z: np.ndarray) -> np.ndarray:
        c = self.codes.data
        d = (z * z).sum(-1, keepdims=True) - 2 * z @ c.T + (c * c).sum(-1)
        return np.argmin(d, axis=-1)

    def tokenize(self, patches: np.ndarray) -> np.ndarray:
        if not self._trained:
            raise StateError("codebook has not been trained")
        return self.nearest(self.encode(patches))

    def init_from_data(self, patches: np.ndarray, rng: np.random.Generator) -> None:
        """Mean and principal directions from data; codes from distinct encoded samples."""
        x = np.asarray(patches, dtype=np.float64).reshape(-1, patches.shape[-1])
        mu = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - mu, full_matrices=False)
        k = self.proj.shape[1]
        basis = vt[:k].T
        if basis.shape[1] < k:
            extra, _ = np.linalg.qr(rng.normal(size=(x.shape[1], k)))
            basis = np.linalg.qr(np.concatenate([basis, extra], axis=1))[0][:, :k]
        self.mean.data = mu.astype(self.mean.dtype)
        self.proj.data = np.ascontiguousarray(basis, dtype=self.proj.dtype)
        z = self.encode(x)
        uniq = np.unique(np.round(z, 6), axis=0)
        v = self.vocab_size
        pick = rng.choice(len(uniq), size=min(v, len(uniq)), replace=False)
        codes = uniq[pick]
        if len(codes) < v:
            jitter = rng.normal(0, 1e-2, (v - len(codes), k))
            codes = np.concatenate([codes, codes[rng.integers(0, len(codes), v - len(codes))] + jitter])
        self.codes.data = codes.astype(self.codes.dtype)

    def loss(self, patches: np.ndarray) -> tuple[Tensor, dict]:
        """Reconstruction MSE + codebook term + ``commitment`` x commitment term.

        The decoder sees the quantised code through a straight-through
        estimator, so reconstruction gradients reach the encoder.
        """
        x = Tensor(np.asarray(patches, dtype=self.proj.dtype).reshape(-1, self.proj.shape[0]))
        z = (x - self.mean) @ self.proj
        idx = self.nearest(z.data)
        q = self.codes[idx]
        z_st = z + (q - z).detach()
        recon = z_st @ self.proj.T + self.mean
        rec = ((recon - x) ** 2).mean()
        codebook = ((z.detach() - q) ** 2).mean()
        commit = ((z - q.detach()) ** 2).mean()
        total = rec + codebook + commit * self._commitment
        return total, {"reconstruction": rec.item(), "codebook": codebook.item(), "commitment": commit.item()}

    def retract(self) -> None:
        """Project ``proj`` back onto matrices with orthonormal columns."""
        q, r = np.linalg.qr(self.proj.data.astype(np.float64))
        q = q * np.sign(np.diag(r))
        self.proj.data = np.ascontiguousarray(q, dtype=self.proj.dtype)


@dataclass
class MaskPlan:
    indices: np.ndarray
    n_patches: int

    def __post_init__(self):
        self.indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_patches):
            raise ContractError(f"mask indices outside [0, {self.n_patches})")

    @classmethod
    def random(cls, n_patches: int, ratio: float, rng: np.random.Generator) -> "MaskPlan":
        k = int(math.floor(ratio * n_patches + 0.5))
        return cls(rng.choice(n_patches, size=k, replace=False), n_patches)

    @classmethod
    def full(cls, n_patches: int) -> "MaskPlan":
        return cls(np.arange(n_patches), n_patches)

    def as_mask(self) -> np.ndarray:
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.indices] = True
        return m


class BEiT(Classifier):
    """ViT backbone with masked-image-modelling pre-training.

    The tokenizer is frozen: it is trained in a separate stage and never
    receives optimiser updates while the backbone learns.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.backbone = ViT(config, rng)
        self.mask_token = param(rng.normal(0, 0.02, (1, 1, config.dim)))
        self.mim_head = Linear(config.dim, config.vocab_size, rng, zero=True)
        patch_dim = config.patch * config.patch * 3
        self.tokenizer = VQCodebook(patch_dim, config.code_dim, config.vocab_size, rng, config.commitment)

    def logits(self, images, capture: bool = False) -> Tensor:
        return self.backbone.logits(images, capture)

    def captured_patch_activations(self) -> Tensor:
        return self.backbone.captured_patch_activations()

    def patch_rows(self) -> slice:
        return self.backbone.patch_rows()

    def visual_tokens(self, images) -> np.ndarray:
        p = images_to_input(self._check_images(images), self.config.patch).data
        return self.tokenizer.tokenize(p)

    def mim_loss(self, images, mask, tokens: np.ndarray | None = None) -> Tensor:
        """Mean negative log-likelihood of the visual tokens at masked positions.

        ``mask`` is a :class:`MaskPlan` shared by the batch or a boolean
        ``(B, n_p)`` array.
        """
        images = self._check_images(images)
        b, n_p = len(images), self.config.n_patches
        if isinstance(mask, MaskPlan):
            mask = np.broadcast_to(mask.as_mask(), (b, n_p))
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractError("mask plan selects no patches; MIM loss undefined")
        if tokens is None:
            tokens = self.visual_tokens(images)
        patches = self.patches(images)
        emb = self.backbone.embed
        projected = emb.project(patches)
        m = Tensor(mask[..., None].astype(np.float64), dtype=projected.dtype)
        corrupted = projected * (1.0 - m) + m * self.mask_token
        h = self.backbone.encode(emb(patches, projected=corrupted))
        hp = h[:, 1:1 + n_p].reshape(b * n_p, self.config.dim)
        rows = np.flatnonzero(mask.reshape(-1))
        return T.cross_entropy(self.mim_head(hp[rows]), np.asarray(tokens).reshape(-1)[rows])

    def trainable_parameters(self) -> dict[str, Tensor]:
        # fine-tuning updates the backbone only; the MIM head is discarded
        return {f"backbone.{k}": v for k, v in self.backbone.named_parameters()}

    def backbone_state(self) -> dict[str, np.ndarray]:
        return self.backbone.state_dict()


def beit_tokenize(images, codebook: VQCodebook, patch: int) -> np.ndarray:
    return codebook.tokenize(images_to_input(images, patch).data)


MODEL_CLASSES = {"vit": ViT, "deit": DeiT, "cait": CaiT, "beit": BEiT}


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> Classifier:
    return MODEL_CLASSES[config.variant](config, rng)
