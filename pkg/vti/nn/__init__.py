"""Neural layers built on the tensor engine"""
from vti.nn.layers import (
    AttentionParams,
    ConvStage,
    EmbeddingTable,
    LinearLayer,
    LstmCellParams,
    TransformerLayerParams,
    attention_weights,
    conv_stage,
    embed,
    layer_norm,
    linear,
    lstm_cell,
    multi_head_attention,
    sinusoidal_table,
    to_feature_map,
    transformer_layer,
)
from vti.nn.params import ParameterStore

__all__ = [
    "ParameterStore", "LinearLayer", "EmbeddingTable", "LstmCellParams", "AttentionParams",
    "TransformerLayerParams", "ConvStage", "linear", "embed", "lstm_cell",
    "multi_head_attention", "attention_weights", "transformer_layer", "layer_norm",
    "sinusoidal_table", "conv_stage", "to_feature_map",
]
