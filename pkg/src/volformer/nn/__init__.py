from .layers import (
    BatchNorm,
    Conv,
    CostRow,
    Ctx,
    Dropout,
    LayerNormModule,
    Linear,
    Module,
    ParamInit,
    Parameter,
    Sequential,
)
from .blocks import (
    AttentionConfig,
    BiLSTM,
    BottleneckBlock,
    Conv2Plus1dBlock,
    LstmState,
    MultiHeadAttention,
    TransformerBlock,
    factorized_mid_width,
)

__all__ = [
    "AttentionConfig",
    "BatchNorm",
    "BiLSTM",
    "BottleneckBlock",
    "Conv",
    "Conv2Plus1dBlock",
    "CostRow",
    "Ctx",
    "Dropout",
    "LayerNormModule",
    "Linear",
    "LstmState",
    "Module",
    "MultiHeadAttention",
    "ParamInit",
    "Parameter",
    "Sequential",
    "TransformerBlock",
    "factorized_mid_width",
]
