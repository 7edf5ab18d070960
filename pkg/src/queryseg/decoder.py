"""Query decoder: point encoder, attention layers, and prediction heads.

A small learnable per-point MLP stands in for a sparse-convolution backbone;
its features are average-pooled per superpoint and fed, together with a set
of learned queries, through pre-norm transformer layers. Each layer emits a
classification distribution, a mask-quality score and pool-level mask logits.

From the second layer on, the competition mechanisms can be switched in per
toggle: query updates from the competition layer, a relationship bias inside
self-attention, and rank-modulated cross attention. The first layer has no
predecessor predictions, so it always runs the plain path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import competition as comp
from .tensor import (
    Tensor,
    concat_axis,
    layer_norm,
    linear,
    matmul,
    mlp,
    softmax_axis,
)


@dataclass
class DecoderConfig:
    layers: int = 6
    num_queries: int = 32
    model_dim: int = 64
    head_dim: int = 16
    heads: int = 4
    num_classes: int = 6              # object classes; a no-object class is implicit
    mask_threshold: float = 0.5
    feature_dim: int = 32             # point-encoder output width
    encoder_hidden: int = 64
    ffn_hidden: int = 128

    def validate(self) -> None:
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"decoder.model_dim ({self.model_dim}) must equal "
                f"decoder.heads * decoder.head_dim ({self.heads} * {self.head_dim})"
            )
        if self.layers < 2:
            raise ValueError(f"decoder.layers must be >= 2, got {self.layers}")
        if self.num_queries < 1:
            raise ValueError(f"decoder.num_queries must be >= 1, got {self.num_queries}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError(f"decoder.mask_threshold must lie in (0, 1), got {self.mask_threshold}")


@dataclass
class LayerPrediction:
    """One decoder layer's outputs, graph-connected for the loss."""

    p_cls: Tensor        # (N, C+1) softmax rows, no-object last
    s_iou: Tensor        # (N,) in [0, 1]
    mask_logits: Tensor  # (N, M)

    def validate(self) -> None:
        rows = self.p_cls.data.sum(axis=1)
        assert np.all(np.abs(rows - 1.0) < 1e-6), "class rows must sum to 1"
        assert np.all((self.s_iou.data >= 0.0) & (self.s_iou.data <= 1.0)), \
            "iou scores must lie in [0, 1]"
        for t in (self.p_cls, self.s_iou, self.mask_logits):
            assert np.all(np.isfinite(t.data)), "predictions must be finite"


ENCODER_INPUT_DIM = 9  # xyz, rgb, xyz relative to the scene centroid


# ----------------------------------------------------------------------
# parameters


def init_params(
    cfg: DecoderConfig,
    comp_cfg: comp.CompetitionConfig | None = None,
    seed: int = 0,
) -> dict[str, Tensor]:
    """Create all trainable tensors, keyed by dotted names.

    Attention projections are stored input-major (in, head_dim) and applied
    with a plain matmul; every other weight matrix is (out, in) for
    ``linear``. Competition parameters exist for layers 2..L regardless of
    toggles so one parameter set serves every mode.
    """
    cfg.validate()
    comp_cfg = comp_cfg or comp.CompetitionConfig()
    comp_cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def xavier(out_dim: int, in_dim: int) -> np.ndarray:
        scale = math.sqrt(2.0 / (in_dim + out_dim))
        return rng.normal(0.0, scale, size=(out_dim, in_dim))

    def add(name: str, value: np.ndarray) -> None:
        params[name] = Tensor(value, requires_grad=True)

    def add_linear(name: str, out_dim: int, in_dim: int) -> None:
        add(f"{name}.w", xavier(out_dim, in_dim))
        add(f"{name}.b", np.zeros(out_dim))

    def add_ln(name: str, dim: int) -> None:
        add(f"{name}.g", np.ones(dim))
        add(f"{name}.b", np.zeros(dim))

    d, dm = cfg.head_dim, cfg.model_dim

    add_linear("encoder.l0", cfg.encoder_hidden, ENCODER_INPUT_DIM)
    add_linear("encoder.l1", cfg.encoder_hidden, cfg.encoder_hidden)
    add_linear("encoder.l2", cfg.feature_dim, cfg.encoder_hidden)

    add_linear("input_proj.l0", dm, cfg.feature_dim)
    add_linear("input_proj.l1", dm, dm)

    add("queries", rng.normal(0.0, 0.02, size=(cfg.num_queries, dm)))

    def add_attention(prefix: str) -> None:
        add_ln(f"{prefix}.ln", dm)
        for h in range(cfg.heads):
            # projections are stored input-major (model_dim, head_dim)
            add(f"{prefix}.wq.h{h}", xavier(dm, d))
            add(f"{prefix}.wk.h{h}", xavier(dm, d))
            add(f"{prefix}.wv.h{h}", xavier(dm, d))
        add_linear(f"{prefix}.out", dm, cfg.heads * d)

    for layer in range(1, cfg.layers + 1):
        add_attention(f"layer{layer}.self")
        add_attention(f"layer{layer}.cross")
        add_ln(f"layer{layer}.ffn.ln", dm)
        add_linear(f"layer{layer}.ffn.l0", cfg.ffn_hidden, dm)
        add_linear(f"layer{layer}.ffn.l1", dm, cfg.ffn_hidden)
        if layer >= 2:
            add(f"layer{layer}.qcl.e_leader", rng.normal(0.0, 0.02, size=(cfg.num_queries, dm)))
            add(f"layer{layer}.qcl.e_laggard", rng.normal(0.0, 0.02, size=(cfg.num_queries, dm)))
            add_linear(f"layer{layer}.qcl.fuse.l0", 2 * dm, 2 * dm)
            add_linear(f"layer{layer}.qcl.fuse.l1", dm, 2 * dm)
            add_linear(f"layer{layer}.qcl.update.l0", 2 * dm, 2 * dm)
            add_linear(f"layer{layer}.qcl.update.l1", dm, 2 * dm)
            for h in range(cfg.heads):
                add(f"layer{layer}.rre.table.h{h}",
                    rng.normal(0.0, 0.02, size=(comp_cfg.table_len, d)))

    add_ln("head.ln", dm)
    add_linear("head.cls", cfg.num_classes + 1, dm)
    add_linear("head.iou", 1, dm)
    add_linear("head.mask.l0", dm, dm)
    add_linear("head.mask.l1", dm, dm)
    return params


# ----------------------------------------------------------------------
# blocks


def extract_point_features(points: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Per-point features from coordinates and colors (pointwise 3-layer MLP)."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts[:, :3] - pts[:, :3].mean(axis=0, keepdims=True)
    x = Tensor(np.concatenate([pts[:, :3], pts[:, 3:6], centered], axis=1))
    h = linear(x, params["encoder.l0.w"], params["encoder.l0.b"]).relu()
    h = linear(h, params["encoder.l1.w"], params["encoder.l1.b"]).relu()
    return linear(h, params["encoder.l2.w"], params["encoder.l2.b"])


def _heads_attention(
    h: Tensor,
    memory: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: DecoderConfig,
    rel_bias: list[Tensor] | None,
    rre_tables: list[Tensor] | None,
    r_hat: np.ndarray | None,
    rank_weights: bool,
) -> tuple[Tensor, list[np.ndarray]]:
    scale = 1.0 / math.sqrt(cfg.head_dim)
    outs: list[Tensor] = []
    weights: list[np.ndarray] = []
    for head in range(cfg.heads):
        q = matmul(h, params[f"{prefix}.wq.h{head}"])
        k = matmul(memory, params[f"{prefix}.wk.h{head}"])
        v = matmul(memory, params[f"{prefix}.wv.h{head}"])
        logits = matmul(q, k.T) * scale
        if rel_bias is not None:
            logits = logits + rel_bias[head]
        if rre_tables is not None:
            logits = logits + comp.relationship_bias(rre_tables[head], r_hat, q, k)
        w = comp.rank_attention_weights(logits) if rank_weights else softmax_axis(logits, axis=1)
        outs.append(matmul(w, v))
        weights.append(w.data)
    merged = outs[0]
    for o in outs[1:]:
        merged = concat_axis(merged, o, axis=1)
    return merged, weights


def self_attention(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: DecoderConfig,
    rel_bias: list[Tensor] | None = None,
    rre_tables: list[Tensor] | None = None,
    r_hat: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Pre-norm multi-head self-attention with optional additive bias.

    ``rel_bias`` supplies one (N, N) bias tensor per head; alternatively
    ``rre_tables`` plus ``r_hat`` build the bias from the relationship
    encoding inside, using this block's own query/key vectors.
    """
    if rel_bias is not None and len(rel_bias) != cfg.heads:
        raise ValueError(f"expected {cfg.heads} bias matrices, got {len(rel_bias)}")
    h = layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    merged, weights = _heads_attention(
        h, h, params, prefix, cfg, rel_bias, rre_tables, r_hat, rank_weights=False
    )
    out = x + linear(merged, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return (out, weights) if return_weights else out


def cross_attention(
    x: Tensor,
    memory: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: DecoderConfig,
    rank_weights: bool = False,
    return_weights: bool = False,
):
    """Pre-norm multi-head cross attention over pooled features.

    With ``rank_weights`` the per-head similarity matrix is min-max
    modulated over the query axis before the spatial softmax.
    """
    if memory.shape[0] < 1:
        raise ValueError("cross attention needs at least one pooled feature")
    h = layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    merged, weights = _heads_attention(
        h, memory, params, prefix, cfg, None, None, None, rank_weights=rank_weights
    )
    out = x + linear(merged, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    h = linear(h, params[f"{prefix}.l0.w"], params[f"{prefix}.l0.b"]).relu()
    return x + linear(h, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"])


def prediction_head(q: Tensor, f: Tensor, params: dict[str, Tensor]) -> LayerPrediction:
    """Classification, mask-quality and mask logits for one layer's queries.

    Mask logits are dot products between projected queries and the pooled
    features, so each query scores every superpoint.
    """
    p_cls = softmax_axis(linear(q, params["head.cls.w"], params["head.cls.b"]), axis=1)
    s_iou = linear(q, params["head.iou.w"], params["head.iou.b"]).sigmoid()
    s_iou = s_iou.reshape((q.shape[0],))
    mask_emb = mlp(q, params["head.mask.l0.w"], params["head.mask.l0.b"],
                   params["head.mask.l1.w"], params["head.mask.l1.b"])
    mask_logits = matmul(mask_emb, f.T)
    return LayerPrediction(p_cls=p_cls, s_iou=s_iou, mask_logits=mask_logits)


# ----------------------------------------------------------------------
# full forward pass


def decoder_forward(
    pooled: Tensor,
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    toggles: comp.CompetitionToggles | None = None,
    comp_cfg: comp.CompetitionConfig | None = None,
) -> tuple[list[LayerPrediction], Tensor]:
    """Run all decoder layers over pooled scene features.

    Returns one prediction per layer plus the final query features. The
    competition toggles select which mechanisms are live from layer 2 on.
    """
    cfg.validate()
    toggles = toggles or comp.CompetitionToggles.none()
    comp_cfg = comp_cfg or comp.CompetitionConfig()

    f = mlp(pooled, params["input_proj.l0.w"], params["input_proj.l0.b"],
            params["input_proj.l1.w"], params["input_proj.l1.b"])
    q = params["queries"]
    predictions: list[LayerPrediction] = []

    for layer in range(1, cfg.layers + 1):
        competing = layer >= 2 and toggles.any()
        state = None
        if competing and (toggles.qcl or toggles.rre):
            prev = predictions[-1]
            state = comp.prepare_state(
                prev.p_cls.data, prev.s_iou.data, prev.mask_logits.data,
                cfg.mask_threshold, comp_cfg, num_object_classes=cfg.num_classes,
            )
        if competing and toggles.qcl:
            q = comp.qcl_update(
                q,
                params[f"layer{layer}.qcl.e_leader"],
                params[f"layer{layer}.qcl.e_laggard"],
                (params[f"layer{layer}.qcl.fuse.l0.w"], params[f"layer{layer}.qcl.fuse.l0.b"],
                 params[f"layer{layer}.qcl.fuse.l1.w"], params[f"layer{layer}.qcl.fuse.l1.b"]),
                (params[f"layer{layer}.qcl.update.l0.w"], params[f"layer{layer}.qcl.update.l0.b"],
                 params[f"layer{layer}.qcl.update.l1.w"], params[f"layer{layer}.qcl.update.l1.b"]),
                state.i_leader,
                state.i_laggard,
            )
        if competing and toggles.rre:
            tables = [params[f"layer{layer}.rre.table.h{h}"] for h in range(cfg.heads)]
            q = self_attention(q, params, f"layer{layer}.self", cfg,
                               rre_tables=tables, r_hat=state.r_hat)
        else:
            q = self_attention(q, params, f"layer{layer}.self", cfg)
        q = cross_attention(q, f, params, f"layer{layer}.cross", cfg,
                            rank_weights=competing and toggles.rca)
        q = feed_forward(q, params, f"layer{layer}.ffn")
        normed = layer_norm(q, params["head.ln.g"], params["head.ln.b"])
        predictions.append(prediction_head(normed, f, params))

    return predictions, q
