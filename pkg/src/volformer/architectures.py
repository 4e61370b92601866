"""Declarative model zoo: slice-wise CNN encoders with transformer / FC /
BiLSTM aggregation, multi-view variants, and volumetric baselines.

Every family builds at arbitrary scale from the same config schema. Building
only wires shapes and seeds; parameter payloads materialize lazily, so
full-scale graphs are cheap to construct for analytic cost profiling while
remaining runnable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError
from .checkpoint import load_checkpoint
from .nn import (
    AttentionConfig,
    BatchNorm,
    BiLSTM,
    BottleneckBlock,
    Conv,
    Conv2Plus1dBlock,
    CostRow,
    Ctx,
    Linear,
    Module,
    ParamInit,
    Sequential,
    TransformerBlock,
)
from .nn.layers import EVAL_CTX, LayerNormModule

VIEWS = ("sag", "cor", "ax")
SINGLE_VIEW_FAMILIES = ("2d_trf", "2d_fc", "2d_bilstm")
MULTIVIEW_FAMILIES = ("2d_trf_multiview_shared", "2d_trf_multiview_individual")
VOLUMETRIC_FAMILIES = ("conv2plus1d", "conv3d")
FAMILIES = SINGLE_VIEW_FAMILIES + MULTIVIEW_FAMILIES + VOLUMETRIC_FAMILIES


@dataclass
class EncoderSpec:
    in_channels: int = 3
    stem_width: int = 64
    stage_widths: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (3, 4, 6, 3)
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True

    @property
    def feature_dim(self):
        return self.stage_widths[-1] * BottleneckBlock.expansion


@dataclass
class AggregatorSpec:
    model_dim: int = 2048
    blocks: int = 4
    heads: int = 8
    mlp_ratio: float = 1.0
    dropout: float = 0.1
    fc_hidden: int = 512
    lstm_hidden: int = 256


@dataclass
class ModelConfig:
    family: str = "2d_trf"
    views: tuple = ("sag",)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    num_classes: int = 3
    slice_count: dict = field(default_factory=lambda: {"sag": 64})
    slice_shape: dict = field(default_factory=lambda: {"sag": (160, 160)})
    init_mode: str = "random"
    weights_file: str | None = None

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if not self.views or any(v not in VIEWS for v in self.views):
            raise ConfigError(f"views must be a non-empty subset of {VIEWS}, got {self.views}")
        if len(set(self.views)) != len(self.views):
            raise ConfigError(f"duplicate views in {self.views}")
        if self.family in MULTIVIEW_FAMILIES and len(self.views) < 2:
            raise ConfigError(f"family {self.family} requires >=2 views, got {self.views}")
        if self.family not in MULTIVIEW_FAMILIES and len(self.views) != 1:
            raise ConfigError(f"family {self.family} takes exactly one view, got {self.views}")
        if self.aggregator.model_dim % self.aggregator.heads != 0:
            raise ConfigError(
                f"model_dim {self.aggregator.model_dim} not divisible by "
                f"heads {self.aggregator.heads}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >=2, got {self.num_classes}")
        if len(self.encoder.stage_widths) != len(self.encoder.blocks_per_stage):
            raise ConfigError("stage_widths and blocks_per_stage lengths differ")
        if min(self.encoder.stage_widths) < 1 or min(self.encoder.blocks_per_stage) < 1:
            raise ConfigError("encoder stage widths and block counts must be positive")
        for v in self.views:
            if v not in self.slice_count or v not in self.slice_shape:
                raise ConfigError(f"missing slice_count/slice_shape for view {v!r}")
            if self.slice_count[v] < 1:
                raise ConfigError(f"slice_count for {v!r} must be >=1")
            if min(self.slice_shape[v]) < 1:
                raise ConfigError(f"slice_shape for {v!r} must be positive")
        if self.init_mode not in ("random", "weights_file"):
            raise ConfigError(f"init must be 'random' or 'weights_file', got {self.init_mode!r}")
        if self.init_mode == "weights_file" and not self.weights_file:
            raise ConfigError("init = weights_file requires a weights_file path")
        return self

    def input_spec(self):
        if self.family in VOLUMETRIC_FAMILIES:
            v = self.views[0]
            return {v: (self.slice_count[v],) + tuple(self.slice_shape[v])}
        return {v: (self.slice_count[v],) + tuple(self.slice_shape[v]) for v in self.views}


class SliceEncoder(Module):
    """Bottleneck-stage CNN over single slices; global-avg pooled features."""

    def __init__(self, spec: EncoderSpec, init, dims=2):
        super().__init__()
        self.spec = spec
        self.dims = dims
        k, s = spec.stem_kernel, spec.stem_stride
        self.stem = Conv(spec.in_channels, spec.stem_width, k, init,
                         stride=s, padding=k // 2, dims=dims)
        self.stem_bn = BatchNorm(spec.stem_width, init, dims=dims)
        channels = spec.stem_width
        stages = []
        for i, (width, n_blocks) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
            blocks = []
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BottleneckBlock(channels, width, init, stride=stride, dims=dims))
                channels = width * BottleneckBlock.expansion
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.out_dim = channels

    def forward(self, x, ctx=EVAL_CTX):
        x = ag.relu(self.stem_bn(self.stem(x, ctx), ctx))
        if self.spec.stem_pool:
            x = ag.max_pool_nd(x, 3, stride=2, padding=1)
        x = self.stages(x, ctx)
        return ag.global_avg_pool(x)

    def trace(self, in_shape, prefix=""):
        s, rows = self.stem.trace(in_shape, prefix + "stem.")
        s, r = self.stem_bn.trace(s, prefix + "stem.")
        rows += r
        if self.spec.stem_pool:
            sp = tuple((d + 2 - 3) // 2 + 1 for d in s[1:])
            if min(sp) < 1:
                raise ShapeError(f"{prefix}stem pool collapses extents {s}")
            s = (s[0],) + sp
            rows.append(CostRow(prefix + "stem.pool", "pool", 0, 0))
        s, r = self.stages.trace(s, prefix + "stage")
        rows += r
        rows.append(CostRow(prefix + "gap", "pool", 0, 0))
        return (s[0],), rows


def resnet50(init=None, num_classes=1000, in_channels=3):
    """Canonical 50-layer bottleneck classifier (stem 64; stages 3/4/6/3)."""
    init = init or ParamInit(seed=0)
    spec = EncoderSpec(in_channels=in_channels)
    encoder = SliceEncoder(spec, init)
    head = Linear(spec.feature_dim, num_classes, init)

    class _Classifier(Module):
        def __init__(self):
            super().__init__()
            self.encoder = encoder
            self.head = head

        def forward(self, x, ctx=EVAL_CTX):
            return self.head(self.encoder(x, ctx), ctx)

        def trace(self, in_shape, prefix=""):
            s, rows = self.encoder.trace(in_shape, prefix + "encoder.")
            s, r = self.head.trace(s, prefix + "head.")
            return s, rows + r

    return _Classifier()


class TransformerAggregator(Module):
    """Project per-slice features, add positional (and per-view) embeddings
    plus a learned class token, run transformer blocks, classify from the
    final class-token state."""

    def __init__(self, feature_dim, spec: AggregatorSpec, views, slice_counts,
                 num_classes, init):
        super().__init__()
        self.views = tuple(views)
        self.slice_counts = dict(slice_counts)
        self.total_tokens = sum(self.slice_counts[v] for v in self.views)
        d = spec.model_dim
        self.spec = spec
        self.proj = Linear(feature_dim, d, init)
        self.cls_token = init.param((1, 1, d), "normal002")
        self.pos = init.param((self.total_tokens + 1, d), "normal002")
        if len(self.views) > 1:
            for v in self.views:
                setattr(self, f"view_emb_{v}", init.param((d,), "normal002"))
        cfg = AttentionConfig(d, spec.heads, spec.mlp_ratio, spec.dropout)
        self.blocks = Sequential(*[TransformerBlock(cfg, init) for _ in range(spec.blocks)])
        self.final_norm = LayerNormModule(d, init)
        self.head = Linear(d, num_classes, init)

    def forward(self, feats, ctx=EVAL_CTX):
        """feats: dict view -> (B, k_v, f) in self.views order."""
        parts = []
        for v in self.views:
            t = self.proj(feats[v], ctx)
            if len(self.views) > 1:
                t = t + getattr(self, f"view_emb_{v}").tensor
            parts.append(t)
        tokens = parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)
        b = tokens.shape[0]
        cls = self.cls_token.tensor
        cls = ag.concat([cls] * b, axis=0) if b > 1 else cls
        x = ag.concat([cls, tokens], axis=1) + self.pos.tensor
        x = self.blocks(x, ctx)
        x = self.final_norm(x, ctx)
        return self.head(x[:, 0, :], ctx)

    def trace(self, feature_dim, prefix=""):
        rows = []
        for v in self.views:
            _, r = self.proj.trace((self.slice_counts[v], feature_dim), prefix + f"proj@{v}.")
            if v != self.views[0]:
                for row in r:
                    row.params = 0
            rows += r
        d = self.spec.model_dim
        rows.append(CostRow(prefix + "tokens", "embedding", 0,
                            self.cls_token.size + self.pos.size
                            + sum(getattr(self, f"view_emb_{v}").size
                                  for v in self.views if len(self.views) > 1)))
        shape = (self.total_tokens + 1, d)
        shape, r = self.blocks.trace(shape, prefix + "block")
        rows += r
        shape, r = self.final_norm.trace(shape, prefix + "final.")
        rows += r
        _, r = self.head.trace((d,), prefix + "head.")
        rows += r
        return (self.head.out_features,), rows


class FcAggregator(Module):
    """Flatten slice features slice-major, two FC layers with ReLU between."""

    def __init__(self, feature_dim, slice_count, hidden, num_classes, init):
        super().__init__()
        self.feature_dim = feature_dim
        self.slice_count = slice_count
        self.fc1 = Linear(slice_count * feature_dim, hidden, init)
        self.fc2 = Linear(hidden, num_classes, init)

    def forward(self, feats, ctx=EVAL_CTX):
        b, k, f = feats.shape
        flat = ag.reshape(feats, (b, k * f))  # row-major: slice index varies slowest
        return self.fc2(ag.relu(self.fc1(flat, ctx)), ctx)

    def trace(self, feature_dim, prefix=""):
        s, rows = self.fc1.trace((self.slice_count * feature_dim,), prefix + "fc1.")
        s, r = self.fc2.trace(s, prefix + "fc2.")
        return s, rows + r


class BiLstmAggregator(Module):
    """Bidirectional LSTM over the slice sequence; classify the terminal states."""

    def __init__(self, feature_dim, slice_count, hidden, num_classes, init):
        super().__init__()
        self.slice_count = slice_count
        self.lstm = BiLSTM(feature_dim, hidden, init)
        self.head = Linear(2 * hidden, num_classes, init)

    def forward(self, feats, ctx=EVAL_CTX):
        if feats.shape[1] != self.slice_count:
            raise ShapeError(f"aggregator built for {self.slice_count} slices, "
                             f"got {feats.shape[1]}")
        return self.head(self.lstm(feats, ctx), ctx)

    def trace(self, feature_dim, prefix=""):
        s, rows = self.lstm.trace((self.slice_count, feature_dim), prefix)
        s, r = self.head.trace(s, prefix + "head.")
        return s, rows + r


class SlicewiseModel(Module):
    """Shared-per-slice encoder(s) + feature aggregator."""

    def __init__(self, cfg: ModelConfig, init):
        super().__init__()
        self.cfg = cfg
        if cfg.family == "2d_trf_multiview_individual":
            for v in cfg.views:
                setattr(self, f"encoder_{v}", SliceEncoder(cfg.encoder, init))
            f = getattr(self, f"encoder_{cfg.views[0]}").out_dim
        else:
            self.encoder = SliceEncoder(cfg.encoder, init)
            f = self.encoder.out_dim
        agg = cfg.aggregator
        if cfg.family in ("2d_trf",) + MULTIVIEW_FAMILIES:
            self.aggregator = TransformerAggregator(
                f, agg, cfg.views, cfg.slice_count, cfg.num_classes, init)
        elif cfg.family == "2d_fc":
            self.aggregator = FcAggregator(
                f, cfg.slice_count[cfg.views[0]], agg.fc_hidden, cfg.num_classes, init)
        elif cfg.family == "2d_bilstm":
            self.aggregator = BiLstmAggregator(
                f, cfg.slice_count[cfg.views[0]], agg.lstm_hidden, cfg.num_classes, init)
        else:
            raise ConfigError(f"family {cfg.family} is not slice-wise")
        self.feature_dim = f

    def encoder_for(self, view):
        if self.cfg.family == "2d_trf_multiview_individual":
            return getattr(self, f"encoder_{view}")
        return self.encoder

    def encode_slices(self, slices, view=None, ctx=EVAL_CTX):
        """(B, k, H, W) or (k, H, W) single-channel slices -> (B, k, f)."""
        view = view or self.cfg.views[0]
        slices = slices if isinstance(slices, ag.Tensor) else ag.tensor(slices)
        unbatched = slices.ndim == 3
        if unbatched:
            slices = ag.reshape(slices, (1,) + slices.shape)
        b, k, h, w = slices.shape
        if k != self.cfg.slice_count[view]:
            raise ShapeError(f"view {view!r} expects {self.cfg.slice_count[view]} slices, got {k}")
        x = ag.reshape(slices, (b * k, 1, h, w))
        c = self.cfg.encoder.in_channels
        if c > 1:
            x = ag.concat([x] * c, axis=1)  # grayscale replicated across channels
        feats = self.encoder_for(view)(x, ctx)
        feats = ag.reshape(feats, (b, k, self.feature_dim))
        return ag.reshape(feats, (k, self.feature_dim)) if unbatched else feats

    def forward(self, inputs, ctx=EVAL_CTX):
        """inputs: array/Tensor for single-view, or dict view -> array."""
        if not isinstance(inputs, dict):
            inputs = {self.cfg.views[0]: inputs}
        missing = [v for v in self.cfg.views if v not in inputs]
        if missing:
            raise ShapeError(f"missing input view(s): {', '.join(missing)}")
        feats = {v: self.encode_slices(inputs[v], v, ctx) for v in self.cfg.views}
        first = feats[self.cfg.views[0]]
        unbatched = first.ndim == 2
        if unbatched:
            feats = {v: ag.reshape(t, (1,) + t.shape) for v, t in feats.items()}
        if isinstance(self.aggregator, TransformerAggregator):
            logits = self.aggregator(feats, ctx)
        else:
            logits = self.aggregator(feats[self.cfg.views[0]], ctx)
        return ag.reshape(logits, (self.cfg.num_classes,)) if unbatched else logits

    def trace(self, input_spec, prefix=""):
        rows = []
        f_dim = None
        shared = self.cfg.family != "2d_trf_multiview_individual"
        for i, v in enumerate(self.cfg.views):
            k, h, w = input_spec[v]
            enc = self.encoder_for(v)
            label = f"{prefix}encoder@{v}." if shared else f"{prefix}encoder_{v}."
            out, enc_rows = enc.trace((self.cfg.encoder.in_channels, h, w), label)
            f_dim = out[0]
            for row in enc_rows:
                row.macs *= k  # shared weights applied once per slice
                if shared and i > 0:
                    row.params = 0
            rows += enc_rows
        if isinstance(self.aggregator, TransformerAggregator):
            for v in self.cfg.views:
                if input_spec[v][0] != self.cfg.slice_count[v]:
                    raise ShapeError(
                        f"aggregator positional table built for {self.cfg.slice_count[v]} "
                        f"slices of view {v!r}, got {input_spec[v][0]}")
        out, r = self.aggregator.trace(f_dim, prefix + "agg.")
        rows += r
        return out, rows


class VolumetricModel(Module):
    """Residual volumetric CNN; ``conv2plus1d`` swaps full 3-D bottlenecks
    for factorized spatial/through-plane blocks."""

    def __init__(self, cfg: ModelConfig, init):
        super().__init__()
        self.cfg = cfg
        spec = cfg.encoder
        k, s = spec.stem_kernel, spec.stem_stride
        self.stem = Conv(spec.in_channels, spec.stem_width, k, init,
                         stride=s, padding=k // 2, dims=3)
        self.stem_bn = BatchNorm(spec.stem_width, init, dims=3)
        channels = spec.stem_width
        stages = []
        for i, (width, n_blocks) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
            blocks = []
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                if cfg.family == "conv3d":
                    blocks.append(BottleneckBlock(channels, width, init, stride=stride, dims=3))
                    channels = width * BottleneckBlock.expansion
                else:
                    blocks.append(_Factorized(channels, width, init, stride))
                    channels = width
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.out_dim = channels
        self.head = Linear(channels, cfg.num_classes, init)

    def forward(self, volume, ctx=EVAL_CTX):
        """(B, D, H, W) or (D, H, W) single-channel volumes -> logits."""
        if isinstance(volume, dict):
            volume = volume[self.cfg.views[0]]
        x = volume if isinstance(volume, ag.Tensor) else ag.tensor(volume)
        unbatched = x.ndim == 3
        if unbatched:
            x = ag.reshape(x, (1,) + x.shape)
        x = ag.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if self.cfg.encoder.in_channels > 1:
            x = ag.concat([x] * self.cfg.encoder.in_channels, axis=1)
        x = ag.relu(self.stem_bn(self.stem(x, ctx), ctx))
        x = self.stages(x, ctx)
        logits = self.head(ag.global_avg_pool(x), ctx)
        return ag.reshape(logits, (self.cfg.num_classes,)) if unbatched else logits

    def trace(self, input_spec, prefix=""):
        d, h, w = input_spec[self.cfg.views[0]]
        s, rows = self.stem.trace((self.cfg.encoder.in_channels, d, h, w), prefix + "stem.")
        s, r = self.stem_bn.trace(s, prefix + "stem.")
        rows += r
        s, r = self.stages.trace(s, prefix + "stage")
        rows += r
        rows.append(CostRow(prefix + "gap", "pool", 0, 0))
        out, r = self.head.trace((s[0],), prefix + "head.")
        return out, rows + r


class _Factorized(Module):
    """(2+1)D stage block: factorized conv, norm, relu."""

    def __init__(self, in_channels, out_channels, init, stride=1):
        super().__init__()
        self.block = Conv2Plus1dBlock(in_channels, out_channels, init, stride=stride)
        self.bn = BatchNorm(out_channels, init, dims=3)

    def forward(self, x, ctx=EVAL_CTX):
        return ag.relu(self.bn(self.block(x, ctx), ctx))

    def trace(self, in_shape, prefix=""):
        s, rows = self.block.trace(in_shape, prefix)
        s, r = self.bn.trace(s, prefix)
        return s, rows + r


@dataclass
class ModelGraph:
    """A built model: runnable module plus its shape-validated layer table."""

    config: ModelConfig
    module: Module
    layers: list
    seed: int

    @property
    def input_spec(self):
        return self.config.input_spec()

    def param_count(self):
        return self.module.param_count()

    def forward(self, inputs, ctx=None):
        return self.module(inputs, ctx or EVAL_CTX)

    def predict_proba(self, inputs):
        """Class probabilities with no graph recording (frozen model)."""
        with ag.no_grad():
            logits = self.module(inputs, EVAL_CTX)
            probs = ag.softmax(logits, axis=-1)
        return probs.data

    def state_dict(self):
        return self.module.state_dict()

    def save(self, path):
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self.state_dict())


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32) -> ModelGraph:
    """Instantiate a config into a shape-validated, runnable graph.

    Deterministic: identical (cfg, seed) gives bit-identical parameters.
    ``init_mode == 'weights_file'`` overlays matching checkpoint tensors,
    leaving unmatched parameters at their seeded initialization.
    """
    cfg.validate()
    init = ParamInit(seed=seed, dtype=dtype)
    if cfg.family in VOLUMETRIC_FAMILIES:
        module = VolumetricModel(cfg, init)
    else:
        module = SlicewiseModel(cfg, init)
    out_shape, rows = module.trace(cfg.input_spec())
    if out_shape != (cfg.num_classes,):
        raise ShapeError(f"model traces to {out_shape}, expected ({cfg.num_classes},)")
    if cfg.init_mode == "weights_file":
        module.load_state_dict(load_checkpoint(cfg.weights_file))
    return ModelGraph(config=cfg, module=module, layers=rows, seed=seed)


# ------------------------------------------------------------------
# operation-style entry points


def forward_slicewise(graph: ModelGraph, volume_slices, view=None):
    """Apply the shared encoder independently per slice: (k, H, W) -> (k, f)."""
    if not isinstance(graph.module, SlicewiseModel):
        raise ConfigError(f"family {graph.config.family} has no slice-wise encoder")
    return graph.module.encode_slices(volume_slices, view)


def aggregate_transformer(graph: ModelGraph, features):
    """(k, f) slice features -> class logits via the transformer aggregator."""
    agg = graph.module.aggregator
    if not isinstance(agg, TransformerAggregator):
        raise ConfigError("model does not use a transformer aggregator")
    v = graph.config.views[0]
    feats = features if isinstance(features, ag.Tensor) else ag.tensor(features)
    unbatched = feats.ndim == 2
    if unbatched:
        feats = ag.reshape(feats, (1,) + feats.shape)
    logits = agg({v: feats})
    return ag.reshape(logits, (graph.config.num_classes,)) if unbatched else logits


def aggregate_fc(graph: ModelGraph, features):
    return _simple_aggregate(graph, features, FcAggregator)


def aggregate_bilstm(graph: ModelGraph, features):
    return _simple_aggregate(graph, features, BiLstmAggregator)


def _simple_aggregate(graph, features, kind):
    agg = graph.module.aggregator
    if not isinstance(agg, kind):
        raise ConfigError(f"model aggregator is {type(agg).__name__}, expected {kind.__name__}")
    feats = features if isinstance(features, ag.Tensor) else ag.tensor(features)
    unbatched = feats.ndim == 2
    if unbatched:
        feats = ag.reshape(feats, (1,) + feats.shape)
    logits = agg(feats)
    return ag.reshape(logits, (graph.config.num_classes,)) if unbatched else logits


def multiview_forward(graph: ModelGraph, view_slices):
    """Forward a {view: slices} mapping through a multi-view model."""
    return graph.forward(dict(view_slices))
