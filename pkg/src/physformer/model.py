"""End-to-end video transformer that maps facial clips to pulse signals.

The network is a shallow convolutional stem (three conv-BN-ReLU-maxpool
blocks that keep T and divide H and W by 8), a tube tokenizer (non
overlapping average pooling), a stack of temporal-difference transformer
blocks, and a predictor head that upsamples time back to the input rate,
averages space away and projects to a single channel.

Transformer blocks are post-norm: layer normalization runs after each
residual addition. Query and key projections are temporal difference
convolutions followed by batch norm; the value projection is pointwise
without batch norm. Attention uses a fixed temperature ``tau`` instead
of sqrt(head_dim), which sharpens the softmax for quasi-periodic
signals. No position embeddings are added after tokenization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convops import Conv3dParams, TdcParams, conv3d, he_conv_params, tdc, upsample_temporal
from .tensor import ShapeError, Tensor

__all__ = [
    "ArchConfig",
    "NonFiniteAttentionError",
    "PhysFormer",
    "TransformerBlock",
    "export_attention",
]


class NonFiniteAttentionError(FloatingPointError):
    """Attention logits left the finite range; carries the block index."""


@dataclass
class ArchConfig:
    """Structural hyperparameters of the network."""

    num_blocks: int = 12
    num_heads: int = 4
    embed_dim: int = 96
    ff_dim: int = 144
    theta: float = 0.7
    tau: float = 2.0
    tube: tuple[int, int, int] = (4, 4, 4)
    input_shape: tuple[int, int, int] = (160, 128, 128)

    def __post_init__(self):
        self.tube = tuple(int(v) for v in self.tube)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} must divide into {self.num_heads} heads")
        if self.embed_dim % 4:
            raise ValueError(f"embed_dim {self.embed_dim} must be a multiple of 4 for the stem widths")
        if self.ff_dim < 1 or self.num_blocks < 1:
            raise ValueError("ff_dim and num_blocks must be positive")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if any(v < 1 for v in self.tube):
            raise ValueError(f"tube extents must be positive, got {self.tube}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def stem_output_shape(self, input_shape: tuple[int, int, int] | None = None) -> tuple[int, int, int, int]:
        t, h, w = input_shape or self.input_shape
        if h % 8 or w % 8:
            raise ValueError(f"spatial extents must divide by 8, got {(h, w)}")
        return (self.embed_dim, t, h // 8, w // 8)

    def token_grid(self, input_shape: tuple[int, int, int] | None = None) -> tuple[int, int, int]:
        """Token map extents: floor(T/Ts), floor((H/8)/Hs), floor((W/8)/Ws)."""
        _, t, h, w = self.stem_output_shape(input_shape)
        return (t // self.tube[0], h // self.tube[1], w // self.tube[2])

    def token_count(self, input_shape: tuple[int, int, int] | None = None) -> int:
        grid = self.token_grid(input_shape)
        return grid[0] * grid[1] * grid[2]

    def signal_length(self, frames: int | None = None) -> int:
        t = frames if frames is not None else self.input_shape[0]
        return (t // self.tube[0]) * self.tube[0]


class LayerNormChannel:
    """Layer norm over the channel axis with per-channel scale and shift."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, axis=1)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class BatchNorm3d:
    """Per-channel batch norm over (batch, T, H, W) with running statistics.

    Training mode normalizes with batch statistics (gradient flows through
    them) and folds the batch into the running estimates with momentum 0.9.
    Eval mode uses the stored estimates. Variances are population style.
    """

    momentum = 0.9
    eps = 1e-5

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if not training:
            return T.batch_norm_inference(x, self.gamma, self.beta,
                                          self.running_mean, self.running_var, self.eps)
        mu = x.mean((0, 2, 3, 4), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean((0, 2, 3, 4), keepdims=True)
        inv = (var + self.eps) ** -0.5
        shape = (1, len(self.running_mean), 1, 1, 1)
        out = centered * inv * self.gamma.reshape(shape) + self.beta.reshape(shape)
        self.running_mean *= self.momentum
        self.running_mean += (1.0 - self.momentum) * mu.data.reshape(-1)
        self.running_var *= self.momentum
        self.running_var += (1.0 - self.momentum) * var.data.reshape(-1)
        return out

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Stem:
    """Three conv blocks, kernels (1,5,5), (3,3,3), (3,3,3), widths D/4, D/2, D.

    Each block is conv, batch norm, ReLU, then 1x2x2 max pooling, so the
    output is (D, T, H/8, W/8).
    """

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        widths = (cfg.embed_dim // 4, cfg.embed_dim // 2, cfg.embed_dim)
        self.conv1 = he_conv_params(rng, widths[0], 3, (1, 5, 5), padding=(0, 2, 2))
        self.bn1 = BatchNorm3d(widths[0])
        self.conv2 = he_conv_params(rng, widths[1], widths[0], (3, 3, 3), padding=(1, 1, 1))
        self.bn2 = BatchNorm3d(widths[1])
        self.conv3 = he_conv_params(rng, widths[2], widths[1], (3, 3, 3), padding=(1, 1, 1))
        self.bn3 = BatchNorm3d(widths[2])

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"stem expects a (batch, 3, T, H, W) clip, got {x.shape}")
        if x.shape[3] % 8 or x.shape[4] % 8:
            raise ShapeError(f"stem needs spatial extents divisible by 8, got {x.shape}")
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2), (self.conv3, self.bn3)):
            x = T.maxpool_spatial(T.relu(bn(conv3d(x, conv), training)))
        return x

    def named_parameters(self, prefix: str):
        for i, conv in enumerate((self.conv1, self.conv2, self.conv3), start=1):
            yield f"{prefix}.conv{i}.weight", conv.weight
            yield f"{prefix}.conv{i}.bias", conv.bias
        for i, bn in enumerate((self.bn1, self.bn2, self.bn3), start=1):
            yield from bn.named_parameters(f"{prefix}.bn{i}")

    def named_buffers(self, prefix: str):
        for i, bn in enumerate((self.bn1, self.bn2, self.bn3), start=1):
            yield from bn.named_buffers(f"{prefix}.bn{i}")


class TransformerBlock:
    """One temporal-difference attention block plus its feed-forward."""

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator, index: int):
        dim, hidden = cfg.embed_dim, cfg.ff_dim
        self.index = index
        self.num_heads = cfg.num_heads
        self.tau = cfg.tau
        self.query_proj = TdcParams(
            he_conv_params(rng, dim, dim, (3, 3, 3), padding=(1, 1, 1)), cfg.theta)
        self.key_proj = TdcParams(
            he_conv_params(rng, dim, dim, (3, 3, 3), padding=(1, 1, 1)), cfg.theta)
        self.bn_query = BatchNorm3d(dim)
        self.bn_key = BatchNorm3d(dim)
        self.value_proj = he_conv_params(rng, dim, dim, (1, 1, 1))
        self.out_proj = Tensor(rng.standard_normal((dim, dim)) / np.sqrt(dim), requires_grad=True)
        self.ff_expand = he_conv_params(rng, hidden, dim, (1, 1, 1))
        self.ff_depthwise = he_conv_params(rng, hidden, hidden, (3, 3, 3),
                                           padding=(1, 1, 1), depthwise=True)
        self.ff_bn = BatchNorm3d(hidden)
        self.ff_project = he_conv_params(rng, dim, hidden, (1, 1, 1))
        self.ln1 = LayerNormChannel(dim)
        self.ln2 = LayerNormChannel(dim)

    def attention(self, tokens: Tensor, training: bool, capture: bool = False):
        batch, dim, t, h, w = tokens.shape
        if dim % self.num_heads:
            raise ShapeError(f"channel dim {dim} does not divide into {self.num_heads} heads")
        seq_len = t * h * w
        head_dim = dim // self.num_heads
        query = self.bn_query(tdc(tokens, self.query_proj), training)
        key = self.bn_key(tdc(tokens, self.key_proj), training)
        value = conv3d(tokens, self.value_proj)

        def to_heads(u: Tensor) -> Tensor:
            return u.reshape((batch, self.num_heads, head_dim, seq_len)).transpose((0, 1, 3, 2))

        q, k, v = to_heads(query), to_heads(key), to_heads(value)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / self.tau)
        if not np.isfinite(scores.data).all():
            raise NonFiniteAttentionError(
                f"block {self.index}: attention logits are not finite")
        attn = T.softmax(scores, axis=3)
        context = attn @ v
        merged = context.transpose((0, 1, 3, 2)).reshape((batch, dim, seq_len))
        projected = merged.transpose((0, 2, 1)) @ self.out_proj
        out = projected.transpose((0, 2, 1)).reshape((batch, dim, t, h, w))
        return out, (attn.data.copy() if capture else None)

    def feed_forward(self, x: Tensor, training: bool) -> Tensor:
        y = conv3d(x, self.ff_expand)
        y = conv3d(y, self.ff_depthwise)
        y = T.elu(self.ff_bn(y, training))
        y = conv3d(y, self.ff_project)
        return self.ln2(x + y)

    def __call__(self, tokens: Tensor, training: bool, capture: bool = False):
        attn_out, attn_map = self.attention(tokens, training, capture)
        x = self.ln1(tokens + attn_out)
        return self.feed_forward(x, training), attn_map

    def named_parameters(self, prefix: str):
        yield f"{prefix}.qk0.weight", self.query_proj.conv.weight
        yield f"{prefix}.qk0.bias", self.query_proj.conv.bias
        yield f"{prefix}.qk1.weight", self.key_proj.conv.weight
        yield f"{prefix}.qk1.bias", self.key_proj.conv.bias
        yield from self.bn_query.named_parameters(f"{prefix}.bn_q")
        yield from self.bn_key.named_parameters(f"{prefix}.bn_k")
        yield f"{prefix}.v.weight", self.value_proj.weight
        yield f"{prefix}.v.bias", self.value_proj.bias
        yield f"{prefix}.proj.weight", self.out_proj
        yield f"{prefix}.ff_expand.weight", self.ff_expand.weight
        yield f"{prefix}.ff_expand.bias", self.ff_expand.bias
        yield f"{prefix}.ff_depthwise.weight", self.ff_depthwise.weight
        yield f"{prefix}.ff_depthwise.bias", self.ff_depthwise.bias
        yield from self.ff_bn.named_parameters(f"{prefix}.ff_bn")
        yield f"{prefix}.ff_project.weight", self.ff_project.weight
        yield f"{prefix}.ff_project.bias", self.ff_project.bias
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")

    def named_buffers(self, prefix: str):
        yield from self.bn_query.named_buffers(f"{prefix}.bn_q")
        yield from self.bn_key.named_buffers(f"{prefix}.bn_k")
        yield from self.ff_bn.named_buffers(f"{prefix}.ff_bn")


class RppgHead:
    """Upsample time back to the clip rate, average space, project to 1-d.

    One nearest-neighbor + 3x1x1 conv stage per factor in the tube
    decomposition (4 -> two x2 stages), each followed by BN and ELU. The
    output signal is centered per clip.
    """

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        dim = cfg.embed_dim
        self.stages: list[tuple[int, Conv3dParams, BatchNorm3d]] = []
        remaining = cfg.tube[0]
        while remaining > 1:
            factor = 2 if remaining % 2 == 0 else remaining
            self.stages.append((factor,
                                he_conv_params(rng, dim, dim, (3, 1, 1)),
                                BatchNorm3d(dim)))
            remaining //= factor
        self.project = he_conv_params(rng, 1, dim, (1, 1, 1))

    def __call__(self, tokens: Tensor, training: bool) -> Tensor:
        x = tokens
        for factor, conv, bn in self.stages:
            x = T.elu(bn(upsample_temporal(x, factor, conv), training))
        x = x.mean((3, 4), keepdims=True)
        x = conv3d(x, self.project)
        signal = x.reshape((x.shape[0], x.shape[2]))
        return signal - signal.mean((1,), keepdims=True)

    def named_parameters(self, prefix: str):
        for i, (_, conv, bn) in enumerate(self.stages, start=1):
            yield f"{prefix}.up{i}.weight", conv.weight
            yield f"{prefix}.up{i}.bias", conv.bias
            yield from bn.named_parameters(f"{prefix}.up_bn{i}")
        yield f"{prefix}.project.weight", self.project.weight
        yield f"{prefix}.project.bias", self.project.bias

    def named_buffers(self, prefix: str):
        for i, (_, _, bn) in enumerate(self.stages, start=1):
            yield from bn.named_buffers(f"{prefix}.up_bn{i}")


class PhysFormer:
    """The full network. Forward is pure in eval mode; training mode also
    updates batch-norm running statistics."""

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator | int | None = None):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.stem = Stem(cfg, rng)
        self.blocks = [TransformerBlock(cfg, rng, i) for i in range(cfg.num_blocks)]
        self.head = RppgHead(cfg, rng)

    def forward(self, x: Tensor, training: bool = False, capture_block: int | None = None):
        """Map a (batch, 3, T, H, W) clip to a (batch, T') signal.

        T' is T floored to a multiple of the temporal tube size. With
        ``capture_block`` set, also returns that block's softmax
        attention as a (batch, heads, M, M) array.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        features = self.stem(x, training)
        tokens = T.avgpool3d(features, self.cfg.tube)
        attn_map = None
        for i, block in enumerate(self.blocks):
            tokens, attn = block(tokens, training, capture=(capture_block == i))
            if attn is not None:
                attn_map = attn
        return self.head(tokens, training), attn_map

    def __call__(self, x: Tensor, training: bool = False):
        return self.forward(x, training)

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self):
        yield from self.stem.named_parameters("stem")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"block{i:02d}")
        yield from self.head.named_parameters("head")

    def named_buffers(self):
        yield from self.stem.named_buffers("stem")
        for i, block in enumerate(self.blocks):
            yield from block.named_buffers(f"block{i:02d}")
        yield from self.head.named_buffers("head")

    def state(self) -> dict[str, np.ndarray]:
        """All arrays needed to reproduce forward exactly: params + buffers."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays in place; shapes must match and names must cover."""
        own = self.state()
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"state is missing {len(missing)} entries, e.g. {missing[:3]}")
        for name, target in own.items():
            source = np.asarray(state[name], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeError(f"{name}: stored shape {source.shape} != model shape {target.shape}")
            target[...] = source

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def export_attention(model: PhysFormer, clip: Tensor, block: int, head: int) -> np.ndarray:
    """Softmax attention matrix (M x M) for one block and head, rows sum to 1.

    Runs an eval-mode forward on the first batch item of ``clip``.
    """
    if not 0 <= block < len(model.blocks):
        raise IndexError(f"block index {block} out of range [0, {len(model.blocks)})")
    if not 0 <= head < model.cfg.num_heads:
        raise IndexError(f"head index {head} out of range [0, {model.cfg.num_heads})")
    with T.no_grad():
        _, attn = model.forward(clip, training=False, capture_block=block)
    return attn[0, head]
