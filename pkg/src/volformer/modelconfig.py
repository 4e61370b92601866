"""Flat key-value model config files (UTF-8, ``key = value``, ``#`` comments).

Every ModelConfig field is addressable; unknown keys are a hard error so
typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import replace

from .architectures import VIEWS, AggregatorSpec, EncoderSpec, ModelConfig
from .errors import ConfigError

_INT_KEYS = {
    "num_classes",
    "encoder.in_channels", "encoder.stem_width", "encoder.stem_kernel", "encoder.stem_stride",
    "agg.model_dim", "agg.blocks", "agg.heads", "agg.fc_hidden", "agg.lstm_hidden",
}
_FLOAT_KEYS = {"agg.mlp_ratio", "agg.dropout"}
_BOOL_KEYS = {"encoder.stem_pool"}
_LIST_KEYS = {"encoder.stage_widths", "encoder.blocks_per_stage"}
_STR_KEYS = {"family", "init", "weights_file"}
_VIEW_SCOPED = {"slice_count", "slice_shape"}

KNOWN_KEYS = (
    _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _LIST_KEYS | _STR_KEYS
    | {"views"} | _VIEW_SCOPED
    | {f"{base}.{v}" for base in _VIEW_SCOPED for v in VIEWS}
)


def _parse_bool(raw, key, line_no):
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"line {line_no}: {key} expects a boolean, got {raw!r}")


def _parse_shape(raw, key, line_no):
    parts = raw.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"line {line_no}: {key} expects HxW, got {raw!r}")
    try:
        return (int(parts[0]), int(parts[1]))
    except ValueError:
        raise ConfigError(f"line {line_no}: {key} expects integers, got {raw!r}") from None


def parse_model_config(text) -> ModelConfig:
    entries = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        if key in entries:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        entries[key] = (raw, line_no)

    views = ("sag",)
    if "views" in entries:
        raw, ln = entries["views"]
        views = tuple(v.strip() for v in raw.split(",") if v.strip())

    cfg = ModelConfig(views=views, slice_count={}, slice_shape={})
    enc_kwargs, agg_kwargs = {}, {}
    for key, (raw, line_no) in entries.items():
        try:
            if key in _INT_KEYS:
                value = int(raw)
            elif key in _FLOAT_KEYS:
                value = float(raw)
            elif key in _BOOL_KEYS:
                value = _parse_bool(raw, key, line_no)
            elif key in _LIST_KEYS:
                value = tuple(int(v.strip()) for v in raw.split(","))
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"line {line_no}: cannot parse {key} value {raw!r}") from None

        if key == "views":
            continue
        if key == "family":
            cfg.family = value
        elif key == "init":
            cfg.init_mode = value
        elif key == "weights_file":
            cfg.weights_file = value
        elif key == "num_classes":
            cfg.num_classes = value
        elif key.startswith("encoder."):
            enc_kwargs[key.split(".", 1)[1]] = value
        elif key.startswith("agg."):
            agg_kwargs[key.split(".", 1)[1]] = value
        elif key == "slice_count":
            for v in views:
                cfg.slice_count.setdefault(v, int(raw))
        elif key == "slice_shape":
            for v in views:
                cfg.slice_shape.setdefault(v, _parse_shape(raw, key, line_no))
        elif key.startswith("slice_count."):
            cfg.slice_count[key.split(".", 1)[1]] = int(raw)
        elif key.startswith("slice_shape."):
            cfg.slice_shape[key.split(".", 1)[1]] = _parse_shape(raw, key, line_no)

    # per-view overrides win over the scoped defaults
    for key in entries:
        if key.startswith("slice_count."):
            cfg.slice_count[key.split(".", 1)[1]] = int(entries[key][0])
        elif key.startswith("slice_shape."):
            cfg.slice_shape[key.split(".", 1)[1]] = _parse_shape(*entries[key], 0)

    cfg.encoder = replace(EncoderSpec(), **enc_kwargs)
    cfg.aggregator = replace(AggregatorSpec(), **agg_kwargs)
    return cfg.validate()


def load_model_config(path) -> ModelConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read model config {path}: {exc}") from exc
    try:
        return parse_model_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def format_model_config(cfg: ModelConfig) -> str:
    """Serialize back to the flat file format (round-trips via parse)."""
    lines = [
        f"family = {cfg.family}",
        f"views = {','.join(cfg.views)}",
        f"num_classes = {cfg.num_classes}",
        f"init = {cfg.init_mode}",
    ]
    if cfg.weights_file:
        lines.append(f"weights_file = {cfg.weights_file}")
    enc, agg = cfg.encoder, cfg.aggregator
    lines += [
        f"encoder.in_channels = {enc.in_channels}",
        f"encoder.stem_width = {enc.stem_width}",
        f"encoder.stage_widths = {','.join(map(str, enc.stage_widths))}",
        f"encoder.blocks_per_stage = {','.join(map(str, enc.blocks_per_stage))}",
        f"encoder.stem_kernel = {enc.stem_kernel}",
        f"encoder.stem_stride = {enc.stem_stride}",
        f"encoder.stem_pool = {'true' if enc.stem_pool else 'false'}",
        f"agg.model_dim = {agg.model_dim}",
        f"agg.blocks = {agg.blocks}",
        f"agg.heads = {agg.heads}",
        f"agg.mlp_ratio = {agg.mlp_ratio}",
        f"agg.dropout = {agg.dropout}",
        f"agg.fc_hidden = {agg.fc_hidden}",
        f"agg.lstm_hidden = {agg.lstm_hidden}",
    ]
    for v in cfg.views:
        lines.append(f"slice_count.{v} = {cfg.slice_count[v]}")
        h, w = cfg.slice_shape[v]
        lines.append(f"slice_shape.{v} = {h}x{w}")
    return "\n".join(lines) + "\n"
