"""
Similarity part of FNR: supervised text <-> image contrastive loss.

    P   = F_T F_I^T                          predicted matrix
    S   = (F_T F_T^T + F_I F_I^T) / 2        averaged self-similarity
    E   = softmax_rows(S)                    expected matrix (text anchors)
    l_T = bce(E, softmax_rows(P))
    l_I = bce(softmax_rows(S^T), softmax_rows(P^T))
    l_s = (l_T + l_I) / 2

Raw inner products are unbounded, so P is row-softmaxed before the
logarithms. No temperature and no length normalisation.
"""

from dataclasses import dataclass

import numpy as np

from autodiff import Graph
from errors import ContractError, ShapeError


@dataclass
class SimilarityPair:
    P: np.ndarray
    P_norm: np.ndarray
    E: np.ndarray


def _check(graph, f_t, f_i):
    if graph.shape(f_t) != graph.shape(f_i):
        raise ShapeError(f"text features {graph.shape(f_t)} and image features {graph.shape(f_i)} differ")


def predicted_matrix(graph, f_t, f_i):
    _check(graph, f_t, f_i)
    return graph.inner(f_t, f_i)


def _self_similarity(graph, f_t, f_i):
    return graph.scale(graph.add(graph.inner(f_t, f_t), graph.inner(f_i, f_i)), 0.5)


def expected_matrix(graph, f_t, f_i):
    _check(graph, f_t, f_i)
    return graph.softmax_rows(_self_similarity(graph, f_t, f_i))


def contrastive_loss(graph, f_t, f_i):
    """Add l_T, l_I and l_s to the graph; returns their node ids."""
    _check(graph, f_t, f_i)
    if graph.shape(f_t)[0] < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 items")

    p = graph.inner(f_t, f_i)
    s = _self_similarity(graph, f_t, f_i)

    l_t = graph.bce_mean(graph.softmax_rows(s), graph.softmax_rows(p))
    l_i = graph.bce_mean(graph.softmax_rows(graph.transpose(s)), graph.softmax_rows(graph.transpose(p)))
    l_s = graph.scale(graph.add(l_t, l_i), 0.5)
    return l_t, l_i, l_s


# ---------------------------------------------------------------------- #
# array-level helpers
# ---------------------------------------------------------------------- #
def similarity(f_t, f_i, precision="extended"):
    graph = Graph(precision)
    t, i = graph.constant(f_t), graph.constant(f_i)
    p = predicted_matrix(graph, t, i)
    return SimilarityPair(
        P=graph.value(p),
        P_norm=graph.value(graph.softmax_rows(p)),
        E=graph.value(expected_matrix(graph, t, i)),
    )


def similarity_losses(f_t, f_i, precision="extended"):
    """(l_T, l_I, l_s) as floats."""
    graph = Graph(precision)
    nodes = contrastive_loss(graph, graph.constant(f_t), graph.constant(f_i))
    return tuple(graph.scalar(n) for n in nodes)
