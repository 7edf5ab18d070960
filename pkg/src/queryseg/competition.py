"""Inter-query competition mechanics.

Three cooperating pieces built from the previous decoder layer's predictions:

* preparation: a per-query competition score (top class probability times
  predicted mask quality), pairwise score differences and their signs, and
  pairwise mask IoU between binarized predicted masks;
* the query competition layer (QCL): each query is paired with its strongest
  competitor (highest mask overlap), the higher-scoring member of the pair
  leads and the other lags, and static leader/laggard embeddings gathered by
  those roles are fused back into the query features;
* relative relationship encoding (RRE): the signed rank/IoU product is
  quantized into a table lookup whose rows interact with the self-attention
  query and key vectors to form an additive attention bias;
* rank cross attention (RCA): query-to-feature similarities are min-max
  normalized over queries per feature column, so each feature's best query
  keeps its similarity while all others shrink before the spatial softmax.

Everything derived from previous-layer predictions (scores, ranks, IoUs,
indices) is non-differentiable routing information and is computed on plain
numpy arrays; gradients flow only through the query features, the static
embeddings, the fusion layers, the encoding tables and the attention tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat_axis,
    gather_rows,
    mlp,
    reduce_extrema_axis,
    softmax_axis,
)


@dataclass
class CompetitionConfig:
    quant_size: float = 0.1   # quantization step for the relative state
    table_len: int = 24       # rows in each relationship encoding table (even)

    def validate(self) -> None:
        if self.quant_size <= 0:
            raise ValueError(f"competition.quant_size must be positive, got {self.quant_size}")
        if self.table_len < 2 or self.table_len % 2 != 0:
            raise ValueError(f"competition.table_len must be a positive even int, got {self.table_len}")


@dataclass
class CompetitionToggles:
    qcl: bool = False
    rre: bool = False
    rca: bool = False

    @classmethod
    def none(cls) -> "CompetitionToggles":
        return cls(False, False, False)

    @classmethod
    def all(cls) -> "CompetitionToggles":
        return cls(True, True, True)

    def any(self) -> bool:
        return self.qcl or self.rre or self.rca

    def label(self) -> str:
        parts = [name for name, on in (("qcl", self.qcl), ("rre", self.rre), ("rca", self.rca)) if on]
        return "+".join(parts) if parts else "none"


@dataclass
class CompetitionState:
    """Per-layer derived quantities, all detached from the autodiff graph."""

    k: np.ndarray            # (N,) competition score per query
    c_score: np.ndarray      # (N, N) k_i - k_j
    c_rank: np.ndarray       # (N, N) +1 where c_score >= 0 else -1
    c_iou: np.ndarray        # (N, N) pairwise IoU of binarized masks
    b: np.ndarray            # (N,) strongest competitor index per query
    c_cq: np.ndarray         # (N,) rank of query i against b[i]
    i_leader: np.ndarray     # (N,) leader index per position
    i_laggard: np.ndarray    # (N,) laggard index per position
    r_state: np.ndarray      # (N, N) signed competition state
    r_hat: np.ndarray        # (N, N) quantized state, table indices

    def validate(self) -> None:
        n = self.k.shape[0]
        assert np.allclose(self.c_score, -self.c_score.T), "c_score must be antisymmetric"
        assert np.array_equal(np.diag(self.c_rank), np.ones(n, dtype=np.int64)), \
            "c_rank diagonal must be +1"
        assert np.allclose(self.c_iou, self.c_iou.T), "c_iou must be symmetric"
        assert np.allclose(np.diag(self.c_iou), 1.0), "c_iou diagonal must be 1"
        for i in range(n):
            assert {int(self.i_leader[i]), int(self.i_laggard[i])} == {i, int(self.b[i])}, \
                f"leader/laggard at {i} must be {{i, b[i]}}"


# ----------------------------------------------------------------------
# preparation


def competition_score(p_obj: np.ndarray, s_iou: np.ndarray) -> np.ndarray:
    """Per-query competition score: top object-class probability times the
    predicted IoU score. ``p_obj`` holds object-class probabilities only."""
    p = np.asarray(p_obj, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    return p.max(axis=1) * np.asarray(s_iou, dtype=np.float64).reshape(-1)


def pairwise_rank(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise score differences and the leading/lagging sign matrix.

    Ties (including the zero diagonal) read as leading: sign(0) is +1.
    """
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    c_score = k[:, None] - k[None, :]
    c_rank = np.where(c_score >= 0.0, 1, -1).astype(np.int64)
    return c_score, c_rank


def binarize_masks(mask_logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize mask logits at a sigmoid-probability threshold."""
    logit_thr = np.log(threshold / (1.0 - threshold))
    return np.asarray(mask_logits, dtype=np.float64) >= logit_thr


def pairwise_mask_iou(mask_logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """IoU between every pair of binarized predicted masks.

    Two empty masks have IoU 0 off the diagonal; the diagonal is forced to 1.
    """
    masks = binarize_masks(mask_logits, threshold).astype(np.float64)
    inter = masks @ masks.T
    sizes = masks.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    np.fill_diagonal(iou, 1.0)
    return iou


# ----------------------------------------------------------------------
# query competition layer


def strongest_competitor(c_iou: np.ndarray) -> np.ndarray:
    """Index of the most overlapping other query, per query.

    The query itself is excluded (its self-IoU of 1 would always win) and
    ties resolve to the lowest index. With a single query the result is the
    degenerate [0] and the competition layer carries no information.
    """
    c = np.asarray(c_iou, dtype=np.float64)
    n = c.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    masked = c.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1).astype(np.int64)


def leader_laggard_lists(
    b: np.ndarray, c_rank: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Aligned leader/laggard index lists for each competitor-query pair.

    Position i keeps the pair {i, b[i]}: if query i leads its strongest
    competitor, i goes to the leader list and b[i] to the laggard list,
    otherwise the roles swap.
    """
    b = np.asarray(b, dtype=np.int64)
    n = b.shape[0]
    own = np.arange(n, dtype=np.int64)
    c_cq = c_rank[own, b].astype(np.int64)
    i_leader = np.where(c_cq > 0, own, b)
    i_laggard = np.where(c_cq > 0, b, own)
    return c_cq, i_leader, i_laggard


def qcl_update(
    q: Tensor,
    e_leader: Tensor,
    e_laggard: Tensor,
    fuse_params: tuple[Tensor, Tensor, Tensor, Tensor],
    update_params: tuple[Tensor, Tensor, Tensor, Tensor],
    i_leader: np.ndarray,
    i_laggard: np.ndarray,
) -> Tensor:
    """Fuse competition-aware static embeddings back into the queries.

    Gathers leader/laggard embedding rows by role, fuses the pair
    (laggard first) down to the model width, then fuses the result with the
    incoming queries. Only gathered embedding rows receive gradient.
    """
    e_le = gather_rows(e_leader, i_leader)
    e_la = gather_rows(e_laggard, i_laggard)
    e_fuse = mlp(concat_axis(e_la, e_le, axis=1), *fuse_params)
    return mlp(concat_axis(q, e_fuse, axis=1), *update_params)


# ----------------------------------------------------------------------
# relative relationship encoding


def relative_state(c_rank: np.ndarray, c_iou: np.ndarray) -> np.ndarray:
    """Signed competition state: rank sign times overlap, in [-1, 1]."""
    return c_rank.astype(np.float64) * np.asarray(c_iou, dtype=np.float64)


def quantize_state(r_state: np.ndarray, quant_size: float, table_len: int) -> np.ndarray:
    """Quantize the signed state into table indices in [0, table_len).

    Floor-divide by the quantization step, shift by half the table so the
    result is non-negative, clamp as a guard against float edge cases.
    """
    idx = np.floor(np.asarray(r_state, dtype=np.float64) / quant_size).astype(np.int64)
    idx += table_len // 2
    return np.clip(idx, 0, table_len - 1)


def relationship_bias(
    table: Tensor, r_hat: np.ndarray, v_q: Tensor, v_k: Tensor
) -> Tensor:
    """Additive self-attention bias from the relationship encoding table.

    Looks up one table row per query pair and dots it with the pair's
    attention query vector and key vector. Single head: ``table`` is
    (table_len, head_dim), ``v_q``/``v_k`` are (N, head_dim).
    """
    r_hat = np.asarray(r_hat, dtype=np.int64)
    n = r_hat.shape[0]
    if r_hat.min() < 0 or r_hat.max() >= table.shape[0]:
        raise IndexError(
            f"relationship state index outside table of length {table.shape[0]}"
        )
    w_rel = gather_rows(table, r_hat.reshape(-1))              # (N*N, d)
    rows = np.repeat(np.arange(n, dtype=np.int64), n)
    cols = np.tile(np.arange(n, dtype=np.int64), n)
    vq_rep = gather_rows(v_q, rows)
    vk_rep = gather_rows(v_k, cols)
    bias = (w_rel * vq_rep + w_rel * vk_rep).sum(axis=1)
    return bias.reshape((n, n))


# ----------------------------------------------------------------------
# rank cross attention


def rank_attention_weights(x: Tensor) -> Tensor:
    """Attention weights with per-feature min-max rank modulation.

    ``x`` is the (N, M) query-to-feature similarity matrix. Each feature
    column is normalized over the query axis so its best query sits at
    exactly 1 and its worst at exactly 0; the similarities are scaled by
    that factor and softmaxed over the feature axis. A column whose max
    equals its min (always the case for a single query) gets a factor of 1,
    which reproduces plain softmax attention exactly.
    """
    lo, _ = reduce_extrema_axis(x, axis=0, mode="min", keepdims=True)
    hi, _ = reduce_extrema_axis(x, axis=0, mode="max", keepdims=True)
    spread = hi - lo
    degenerate = Tensor((spread.data <= 0.0).astype(np.float64))  # (1, M) constant
    live = Tensor(1.0) - degenerate
    x_norm = (x - lo) / (spread + degenerate) * live + degenerate
    return softmax_axis(x * x_norm, axis=1)


def rank_normalize(x: Tensor) -> Tensor:
    """The min-max factor of rank attention alone (exposed for analysis)."""
    lo, _ = reduce_extrema_axis(x, axis=0, mode="min", keepdims=True)
    hi, _ = reduce_extrema_axis(x, axis=0, mode="max", keepdims=True)
    spread = hi - lo
    degenerate = Tensor((spread.data <= 0.0).astype(np.float64))
    live = Tensor(1.0) - degenerate
    return (x - lo) / (spread + degenerate) * live + degenerate


# ----------------------------------------------------------------------
# state assembly


def prepare_state(
    p_cls: np.ndarray,
    s_iou: np.ndarray,
    mask_logits: np.ndarray,
    mask_threshold: float,
    cfg: CompetitionConfig,
    num_object_classes: int | None = None,
) -> CompetitionState:
    """Build the full competition state from one layer's detached predictions.

    ``p_cls`` is the (N, C+1) class distribution with the no-object class in
    the last column; the competition score only considers object classes.
    """
    p = np.asarray(p_cls, dtype=np.float64)
    c_obj = num_object_classes if num_object_classes is not None else p.shape[1] - 1
    k = competition_score(p[:, :c_obj], s_iou)
    c_score, c_rank = pairwise_rank(k)
    c_iou = pairwise_mask_iou(mask_logits, mask_threshold)
    b = strongest_competitor(c_iou)
    c_cq, i_leader, i_laggard = leader_laggard_lists(b, c_rank)
    r_state = relative_state(c_rank, c_iou)
    r_hat = quantize_state(r_state, cfg.quant_size, cfg.table_len)
    state = CompetitionState(
        k=k, c_score=c_score, c_rank=c_rank, c_iou=c_iou, b=b,
        c_cq=c_cq, i_leader=i_leader, i_laggard=i_laggard,
        r_state=r_state, r_hat=r_hat,
    )
    state.validate()
    return state
