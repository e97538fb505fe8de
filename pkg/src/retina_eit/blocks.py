"""Transformer building blocks: patch embedding, attention, encoder blocks,
class-attention and classification heads.

Activations are laid out ``(batch, tokens, dim)``. Token order inside a
sequence is ``[class; patch_1 .. patch_n; distillation]``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes in insertion
    order: tensors with ``requires_grad``, sub-modules, and lists of
    sub-modules. A module with ``frozen = True`` is skipped by
    ``named_parameters(trainable_only=True)``.
    """

    frozen = False

    def named_parameters(self, prefix: str = "", trainable_only: bool = False) -> Iterator[tuple[str, Tensor]]:
        if trainable_only and self.frozen:
            return
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".", trainable_only)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", trainable_only)

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [p for _, p in self.named_parameters(trainable_only=trainable_only)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        for name, arr in state.items():
            if name in own and tuple(arr.shape) != own[name].shape:
                raise DimensionError(
                    f"shape mismatch for '{name}': checkpoint {tuple(arr.shape)} vs model {own[name].shape}")
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise DimensionError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name in own:
                own[name].data = np.array(arr, dtype=own[name].dtype)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


# -- patches ---------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split ``(..., side, side, C)`` images into raster-ordered flat patches.

    Returns ``(..., n_patches, patch * patch * C)``; each row is the
    row-major flattening of one ``patch x patch x C`` block.
    """
    *lead, h, w, c = image.shape
    if patch <= 0 or h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch width {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    *lead, n_p, _ = patches.shape
    g = int(round(math.sqrt(n_p)))
    if g * g != n_p:
        raise DimensionError(f"{n_p} patches do not tile a square grid")
    x = patches.reshape(*lead, g, g, patch, patch, channels)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, g * patch, g * patch, channels)


class PatchEmbedding(Module):
    """Linear patch projection plus learned tokens and positions."""

    def __init__(self, image_side: int, patch: int, dim: int, rng: np.random.Generator,
                 class_token: bool = True, distill_token: bool = False, channels: int = 3):
        if image_side % patch:
            raise ConfigError(f"image side {image_side} not divisible by patch width {patch}")
        self.n_patches = (image_side // patch) ** 2
        self.patch = patch
        self.proj = Linear(patch * patch * channels, dim, rng, bias=False)
        self.cls_token = param(rng.normal(0, 0.02, (1, 1, dim))) if class_token else None
        self.dist_token = param(rng.normal(0, 0.02, (1, 1, dim))) if distill_token else None
        n_tokens = self.n_patches + int(class_token) + int(distill_token)
        self.pos = param(rng.normal(0, 0.02, (1, n_tokens, dim)))

    @property
    def n_tokens(self) -> int:
        return self.pos.shape[1]

    def project(self, patches: Tensor) -> Tensor:
        if patches.shape[-1] != self.proj.weight.shape[0]:
            raise DimensionError(f"patch width {patches.shape[-1]} != projection rows {self.proj.weight.shape[0]}")
        return self.proj(patches)

    def __call__(self, patches: Tensor, projected: Tensor | None = None) -> Tensor:
        """Return ``z_0`` for ``(B, n_p, P)`` patches.

        ``projected`` overrides ``patches @ E`` (used for masked modelling).
        """
        x = self.project(patches) if projected is None else projected
        b = x.shape[0]
        parts = []
        if self.cls_token is not None:
            parts.append(_expand(self.cls_token, b))
        parts.append(x)
        if self.dist_token is not None:
            parts.append(_expand(self.dist_token, b))
        z = T.concat(parts, axis=1) if len(parts) > 1 else x
        if z.shape[1] != self.n_tokens:
            raise DimensionError(f"{z.shape[1]} tokens but positional table has {self.n_tokens} rows")
        return z + self.pos


def _expand(token: Tensor, batch: int) -> Tensor:
    ones = Tensor(np.ones((batch, 1, 1)), dtype=token.dtype)
    return ones * token


# -- attention ---------------------------------------------------------------

def scaled_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_h)) v`` over the last two axes."""
    d_h = q.shape[-1]
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_h))
    weights = T.softmax(scores, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class MultiHeadSelfAttention(Module):
    """Per-head projections are stored concatenated as ``dim x dim`` matrices."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads <= 0 or dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = param(xavier(rng, dim, dim))
        self.w_k = param(xavier(rng, dim, dim))
        self.w_v = param(xavier(rng, dim, dim))
        self.w_l = param(xavier(rng, dim, dim))

    def __call__(self, x: Tensor, return_weights: bool = False):
        h = self.heads
        q = _split_heads(x @ self.w_q, h)
        k = _split_heads(x @ self.w_k, h)
        v = _split_heads(x @ self.w_v, h)
        out, weights = scaled_attention(q, k, v, return_weights=True)
        y = _merge_heads(out) @ self.w_l
        return (y, weights) if return_weights else y


def msa(x: Tensor, attn: MultiHeadSelfAttention) -> Tensor:
    return attn(x)


class MLP(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        self.fc1 = Linear(dim, hidden or 4 * dim, rng)
        self.fc2 = Linear(hidden or 4 * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm encoder block with optional LayerScale diagonals."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, layer_scale: float | None = None):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)
        if layer_scale is None:
            self.scale1 = self.scale2 = None
        else:
            self.scale1 = param(np.full(dim, layer_scale))
            self.scale2 = param(np.full(dim, layer_scale))

    def __call__(self, z: Tensor, capture: bool = False) -> Tensor:
        u = self.ln1(z)
        # normalised tokens feeding attention, kept for saliency
        self._normed = u if capture else None
        a = self.attn(u)
        if self.scale1 is not None:
            a = self.scale1 * a
        z = a + z
        m = self.mlp(self.ln2(z))
        if self.scale2 is not None:
            m = self.scale2 * m
        return m + z


class ClassAttentionBlock(Module):
    """Updates only the class embedding; patch rows are read, never written."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.w_q = param(xavier(rng, dim, dim))
        self.w_k = param(xavier(rng, dim, dim))
        self.w_v = param(xavier(rng, dim, dim))
        self.w_l = param(xavier(rng, dim, dim))
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def __call__(self, cls: Tensor, patches: Tensor) -> Tensor:
        u = self.ln1(T.concat([cls, patches], axis=1))
        h = self.heads
        q = _split_heads(u[:, :1] @ self.w_q, h)
        k = _split_heads(u @ self.w_k, h)
        v = _split_heads(u @ self.w_v, h)
        c = _merge_heads(scaled_attention(q, k, v)) @ self.w_l + cls
        return self.mlp(self.ln2(c)) + c


# -- heads -------------------------------------------------------------------

class MLPHead(Module):
    """Hidden Mish layer followed by the class logits."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 128, n_classes: int = 5):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, n_classes, rng)

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc2(T.mish(self.fc1(y)))


class LinearHead(Module):
    def __init__(self, dim: int, rng: np.random.Generator, n_classes: int = 5):
        self.fc = Linear(dim, n_classes, rng)

    def __call__(self, y: Tensor) -> Tensor:
        return self.fc(y)


def mlp_head(y: Tensor, head: MLPHead) -> Tensor:
    """Class probabilities from the image representation."""
    return T.softmax(head(y), axis=-1)


def linear_head(y: Tensor, head: LinearHead) -> Tensor:
    return T.softmax(head(y), axis=-1)
