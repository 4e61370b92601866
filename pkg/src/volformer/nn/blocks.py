"""Composite neural blocks: residual bottlenecks, multi-head attention,
pre-norm transformer blocks, bidirectional LSTM, and factorized
spatial/through-plane convolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..errors import ConfigError, UsageError
from .layers import (
    EVAL_CTX,
    BatchNorm,
    Conv,
    CostRow,
    Dropout,
    LayerNormModule,
    Linear,
    Module,
)


@dataclass
class AttentionConfig:
    model_dim: int
    heads: int
    mlp_ratio: float = 1.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")


@dataclass
class LstmState:
    """Recurrent carry; shapes stay constant across time steps."""

    hidden: object  # (B, hidden_dim) tensor
    cell: object  # (B, hidden_dim) tensor


class MultiHeadAttention(Module):
    """Scaled dot-product attention over a token sequence, shape-preserving.

    Accepts (B, L, d) or unbatched (L, d) token stacks.
    """

    def __init__(self, cfg: AttentionConfig, init):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = Linear(d, d, init)
        self.wk = Linear(d, d, init)
        self.wv = Linear(d, d, init)
        self.wo = Linear(d, d, init)
        self.drop = Dropout(cfg.dropout_rate)

    def forward(self, tokens, ctx=EVAL_CTX):
        unbatched = tokens.ndim == 2
        if unbatched:
            tokens = ag.reshape(tokens, (1,) + tokens.shape)
        b, l, d = tokens.shape
        h = self.cfg.heads
        dh = d // h
        scale = 1.0 / np.sqrt(dh)

        def split_heads(t):
            return ag.transpose(ag.reshape(t, (b, l, h, dh)), (0, 2, 1, 3))

        q = split_heads(self.wq(tokens, ctx))
        k = split_heads(self.wk(tokens, ctx))
        v = split_heads(self.wv(tokens, ctx))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * scale
        attn = ag.softmax(scores, axis=-1)
        attn = self.drop(attn, ctx)
        mixed = ag.matmul(attn, v)  # (B, h, L, dh)
        merged = ag.reshape(ag.transpose(mixed, (0, 2, 1, 3)), (b, l, d))
        out = self.wo(merged, ctx)
        return ag.reshape(out, (l, d)) if unbatched else out

    def trace(self, in_shape, prefix=""):
        l, d = in_shape[-2], in_shape[-1]
        if d != self.cfg.model_dim:
            raise ConfigError(f"{prefix}attention built for dim {self.cfg.model_dim}, got {in_shape}")
        proj_macs = 4 * l * d * d
        score_macs = 2 * l * l * d
        params = sum(p.size for p in self.parameters())
        rows = [
            CostRow(prefix + "attn_proj", "attention", proj_macs, params),
            CostRow(prefix + "attn_scores", "attention", score_macs, 0),
        ]
        return in_shape, rows


class TransformerBlock(Module):
    """Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, cfg: AttentionConfig, init):
        super().__init__()
        d = cfg.model_dim
        hidden = int(round(cfg.mlp_ratio * d))
        self.ln1 = LayerNormModule(d, init)
        self.attn = MultiHeadAttention(cfg, init)
        self.ln2 = LayerNormModule(d, init)
        self.fc1 = Linear(d, hidden, init)
        self.fc2 = Linear(hidden, d, init)
        self.drop = Dropout(cfg.dropout_rate)

    def forward(self, tokens, ctx=EVAL_CTX):
        x = tokens + self.drop(self.attn(self.ln1(tokens, ctx), ctx), ctx)
        h = self.fc2(ag.gelu(self.fc1(self.ln2(x, ctx), ctx)), ctx)
        return x + self.drop(h, ctx)

    def trace(self, in_shape, prefix=""):
        rows = []
        _, r = self.ln1.trace(in_shape, prefix + "ln1.")
        rows += r
        _, r = self.attn.trace(in_shape, prefix)
        rows += r
        _, r = self.ln2.trace(in_shape, prefix + "ln2.")
        rows += r
        s, r = self.fc1.trace(in_shape, prefix + "mlp1.")
        rows += r
        _, r = self.fc2.trace(s, prefix + "mlp2.")
        rows += r
        return in_shape, rows


class BottleneckBlock(Module):
    """Residual bottleneck: 1x1 reduce, KxK spatial (strided), 1x1 expand.

    ``dims`` selects 2-D or 3-D convolutions; the skip is identity when
    shapes match and a strided 1x1 projection + norm otherwise.
    """

    expansion = 4

    def __init__(self, in_channels, width, init, stride=1, dims=2):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"bottleneck stride must be 1 or 2, got {stride}")
        if width < 1 or in_channels < 1:
            raise ConfigError(f"bottleneck widths must be positive, got {in_channels}/{width}")
        out_channels = width * self.expansion
        self.dims = dims
        self.stride = stride
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv(in_channels, width, 1, init, dims=dims)
        self.bn1 = BatchNorm(width, init, dims=dims)
        self.conv2 = Conv(width, width, 3, init, stride=stride, padding=1, dims=dims)
        self.bn2 = BatchNorm(width, init, dims=dims)
        self.conv3 = Conv(width, out_channels, 1, init, dims=dims)
        self.bn3 = BatchNorm(out_channels, init, dims=dims)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv(in_channels, out_channels, 1, init, stride=stride, dims=dims)
            self.proj_bn = BatchNorm(out_channels, init, dims=dims)
        else:
            self.proj = None

    def forward(self, x, ctx=EVAL_CTX):
        unbatched = x.ndim == self.dims + 1
        if unbatched:
            x = ag.reshape(x, (1,) + x.shape)
        out = ag.relu(self.bn1(self.conv1(x, ctx), ctx))
        out = ag.relu(self.bn2(self.conv2(out, ctx), ctx))
        out = self.bn3(self.conv3(out, ctx), ctx)
        skip = x if self.proj is None else self.proj_bn(self.proj(x, ctx), ctx)
        out = ag.relu(out + skip)
        return ag.reshape(out, out.shape[1:]) if unbatched else out

    def trace(self, in_shape, prefix=""):
        rows = []
        s, r = self.conv1.trace(in_shape, prefix + "c1.")
        rows += r
        s, r2 = self.bn1.trace(s, prefix + "c1.")
        rows += r2
        s, r = self.conv2.trace(s, prefix + "c2.")
        rows += r
        s, r2 = self.bn2.trace(s, prefix + "c2.")
        rows += r2
        s, r = self.conv3.trace(s, prefix + "c3.")
        rows += r
        s, r2 = self.bn3.trace(s, prefix + "c3.")
        rows += r2
        if self.proj is not None:
            ps, r = self.proj.trace(in_shape, prefix + "proj.")
            rows += r
            _, r2 = self.proj_bn.trace(ps, prefix + "proj.")
            rows += r2
            if ps != s:
                raise ConfigError(f"{prefix}skip projection shape {ps} != main path {s}")
        elif in_shape != s:
            raise ConfigError(f"{prefix}identity skip needs matching shapes: {in_shape} vs {s}")
        return s, rows


class BiLSTM(Module):
    """Single-layer bidirectional LSTM returning concatenated terminal states.

    The forward direction contributes its last hidden state, the backward
    direction the state after consuming the sequence reversed, i.e. its view
    of the first element. Output dim is 2 * hidden_dim.
    """

    def __init__(self, input_dim, hidden_dim, init):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for tag in ("fw", "bw"):
            setattr(self, f"w_ih_{tag}", init.param((input_dim, 4 * hidden_dim), "xavier_uniform",
                                                    fan_in=input_dim, fan_out=4 * hidden_dim))
            setattr(self, f"w_hh_{tag}", init.param((hidden_dim, 4 * hidden_dim), "xavier_uniform",
                                                    fan_in=hidden_dim, fan_out=4 * hidden_dim))
            setattr(self, f"bias_{tag}", init.param((4 * hidden_dim,), "zeros"))

    def _run(self, steps, tag, ctx):
        h = self.hidden_dim
        w_ih = getattr(self, f"w_ih_{tag}").tensor
        w_hh = getattr(self, f"w_hh_{tag}").tensor
        bias = getattr(self, f"bias_{tag}").tensor
        b = steps[0].shape[0]
        state = LstmState(hidden=ag.tensor(np.zeros((b, h), dtype=steps[0].dtype)),
                          cell=ag.tensor(np.zeros((b, h), dtype=steps[0].dtype)))
        for x_t in steps:
            gates = ag.matmul(x_t, w_ih) + ag.matmul(state.hidden, w_hh) + bias
            i = ag.sigmoid(gates[:, 0 * h:1 * h])
            f = ag.sigmoid(gates[:, 1 * h:2 * h])
            g = ag.tanh(gates[:, 2 * h:3 * h])
            o = ag.sigmoid(gates[:, 3 * h:4 * h])
            cell = f * state.cell + i * g
            state = LstmState(hidden=o * ag.tanh(cell), cell=cell)
        return state.hidden

    def forward(self, seq, ctx=EVAL_CTX):
        unbatched = seq.ndim == 2
        if unbatched:
            seq = ag.reshape(seq, (1,) + seq.shape)
        k = seq.shape[1]
        if k < 1:
            raise UsageError("BiLSTM requires a non-empty sequence")
        steps = [seq[:, t, :] for t in range(k)]
        fw = self._run(steps, "fw", ctx)
        bw = self._run(steps[::-1], "bw", ctx)
        out = ag.concat([fw, bw], axis=1)
        return ag.reshape(out, (2 * self.hidden_dim,)) if unbatched else out

    def trace(self, in_shape, prefix=""):
        k, f = in_shape[-2], in_shape[-1]
        if f != self.input_dim:
            raise ConfigError(f"{prefix}bilstm expects feature dim {self.input_dim}, got {in_shape}")
        macs = 2 * k * 4 * (f + self.hidden_dim) * self.hidden_dim
        params = sum(p.size for p in self.parameters())
        return (2 * self.hidden_dim,), [CostRow(prefix + "bilstm", "lstm", macs, params)]


def factorized_mid_width(in_channels, out_channels, spatial_kernel=3, depth_kernel=3):
    """Intermediate width matching the parameter count of the full 3-D kernel.

    M = floor(Kt*Ks^2*Cin*Cout / (Ks^2*Cin + Kt*Cout)).
    """
    num = depth_kernel * spatial_kernel * spatial_kernel * in_channels * out_channels
    den = spatial_kernel * spatial_kernel * in_channels + depth_kernel * out_channels
    return num // den


class Conv2Plus1dBlock(Module):
    """Factorized volumetric conv: in-slice (1,3,3) then through-plane (3,1,1).

    The intermediate width is chosen so the two factors together carry the
    same parameter budget as the full 3x3x3 convolution they replace.
    Input layout is (C, D, H, W) with D the through-plane axis (plus an
    optional leading batch dim). Stride applies to all three axes.
    """

    def __init__(self, in_channels, out_channels, init, stride=1):
        super().__init__()
        mid = factorized_mid_width(in_channels, out_channels)
        if mid < 1:
            raise ConfigError(f"factorized width collapsed to {mid} for "
                              f"{in_channels}->{out_channels}")
        self.mid = mid
        st = stride if isinstance(stride, tuple) else (stride,) * 3
        self.spatial = Conv(in_channels, mid, (1, 3, 3), init,
                            stride=(1, st[1], st[2]), padding=(0, 1, 1), dims=3)
        self.bn_mid = BatchNorm(mid, init, dims=3)
        self.depth = Conv(mid, out_channels, (3, 1, 1), init,
                          stride=(st[0], 1, 1), padding=(1, 0, 0), dims=3)

    def forward(self, x, ctx=EVAL_CTX):
        unbatched = x.ndim == 4
        if unbatched:
            x = ag.reshape(x, (1,) + x.shape)
        out = self.depth(ag.relu(self.bn_mid(self.spatial(x, ctx), ctx)), ctx)
        return ag.reshape(out, out.shape[1:]) if unbatched else out

    def trace(self, in_shape, prefix=""):
        s, rows = self.spatial.trace(in_shape, prefix + "spatial.")
        s, r = self.bn_mid.trace(s, prefix + "spatial.")
        rows += r
        s, r = self.depth.trace(s, prefix + "depth.")
        rows += r
        return s, rows
