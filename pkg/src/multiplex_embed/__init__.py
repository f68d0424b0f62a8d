"""Relation-conditioned text embeddings for multiplex text-rich graphs.

One small transformer encoder is shared by every relation; each relation
owns a few learned prior embeddings that are prepended to the token
sequence, so the same document can be embedded differently per relation.
"""

from .checkpoint import Checkpoint
from .encoder import EncoderConfig, RelationPriorTable, encode_conditioned, init_params
from .errors import ConfigError, GraphError, MultiplexError, NonFiniteError
from .eval_harness import average_prec_at_1, cross_relation_matrix, macro_f1, prec_at_1, rmse
from .graph_store import MultiplexGraph, build_graph, load_graph, load_graph_dir, shift_matrix, split_edges
from .task_head import SelectionConfig, TaskKind, train_selection
from .text_pipeline import Vocabulary, build_vocabulary, encode_text
from .trainer import RelationWeights, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "EncoderConfig", "GraphError", "MultiplexError", "MultiplexGraph",
    "NonFiniteError", "RelationPriorTable", "RelationWeights", "SelectionConfig", "TaskKind", "TrainConfig",
    "Vocabulary", "average_prec_at_1", "build_graph", "build_vocabulary", "cross_relation_matrix",
    "encode_conditioned", "encode_text", "init_params", "load_graph", "load_graph_dir", "macro_f1",
    "prec_at_1", "rmse", "shift_matrix", "split_edges", "train", "train_selection",
]
