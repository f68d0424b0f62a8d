# %% [markdown]
# # Picking source relations for a new task
#
# A downstream matching task whose positives come from relation `r0` only.
# The trained encoder and prior pool stay frozen; a few query vectors learn
# to attend over the pool. The per-relation attention mass shows which
# source relations the task found useful.

# %%
from multiplex_embed import task_head as th
from multiplex_embed.encoder import EncoderConfig
from multiplex_embed.graph_store import split_edges
from multiplex_embed.synthetic import make_factor_graph
from multiplex_embed.text_pipeline import build_vocabulary, encode_corpus
from multiplex_embed.trainer import TrainConfig, train

graph = make_factor_graph(n_nodes=300, seed=0).graph
train_graph, test_graph = split_edges(graph, 0.2, seed=0)
vocab = build_vocabulary(graph.texts)
ckpt = train(train_graph, vocab, EncoderConfig(vocab_size=len(vocab), max_positions=17),
             TrainConfig(epochs=30, max_len=12)).checkpoint

# %%
ids, lengths = encode_corpus(vocab, graph.texts, ckpt.max_len)


def pairs_to_data(pairs):
    a, b = graph.positions(pairs[:, 0]), graph.positions(pairs[:, 1])
    return th.TaskData((ids[a], lengths[a]), targets=(ids[b], lengths[b]))


held = test_graph.edge_array("r0")
train_set = pairs_to_data(train_graph.edge_array("r0"))
val_set, test_set = pairs_to_data(held[: len(held) // 2]), pairs_to_data(held[len(held) // 2:])

digest = ckpt.frozen_digest()
result = th.train_selection(ckpt, th.TaskKind("matching"), train_set, val_set, th.SelectionConfig(lr=3e-2))
assert ckpt.frozen_digest() == digest  # encoder and pool untouched

# %%
print("val PREC@1 at init / best:", round(result.init_val_metric, 3), round(result.val_metric, 3))
test = th.evaluate_selection(ckpt, th.TaskKind("matching"), result.queries, result.head, test_set)
print("test PREC@1:", round(test, 3))
mixed = th.attention_mixup(result.queries, ckpt.priors)
print(th.format_report(th.relation_weight_report(mixed, ckpt.relation_names)), end="")

# %% [markdown]
# For comparison, direct inference with `r0`'s own priors on the same pairs:

# %%
from multiplex_embed.eval_harness import relation_prec_at_1

print("direct r0 test PREC@1:", round(relation_prec_at_1(ckpt, graph, "r0", held[len(held) // 2:]), 3))
