"""Set-prediction training: bipartite matching, losses, optimizer, loop.

Each decoder layer's predictions are matched one-to-one to ground-truth
instances by solving the assignment problem on a classification + mask cost.
Matched queries are supervised on class, mask and mask-quality; unmatched
queries are pushed to the no-object class. Deep supervision applies the same
loss at every layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import competition as comp
from .decoder import DecoderConfig, LayerPrediction, decoder_forward, extract_point_features, init_params
from .evalstats import map_suite
from .scenegen import PoolingAssignment, Scene, superpoint_pool
from .tensor import Tensor, bce_with_logits, gather_rows


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; training aborts with context."""


@dataclass
class LossWeights:
    lambda_cls: float = 0.5
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_iou: float = 0.5

    def validate(self) -> None:
        vals = (self.lambda_cls, self.lambda_bce, self.lambda_dice, self.lambda_iou)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    mode: str = "competitor"        # baseline | competitor
    deep_supervision: bool = True
    no_object_weight: float = 0.2   # class-weight of the no-object column in the CE
    eval_interval: int = 0          # epochs between val mAP50 evaluations, 0 = never
    stop_map50: float = 0.0         # stop once val mAP50 reaches this, 0 = run all epochs
    lr_decay_epoch: int = 0         # multiply lr by lr_decay_factor from this epoch on (0 = never)
    lr_decay_factor: float = 1.0
    augment: bool = False           # train-time scene augmentation (rotation, shift, jitter)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be >= 1, got {self.batch_size}")
        # lr 0 is allowed: it runs the loop without changing parameters
        if self.lr < 0:
            raise ValueError(f"train.lr must be >= 0, got {self.lr}")
        if self.mode not in ("baseline", "competitor"):
            raise ValueError(f"train.mode must be 'baseline' or 'competitor', got {self.mode!r}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]          # (query index, gt index), injective both sides
    unmatched_queries: list[int]

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass
class PackedScene:
    """Scene tensors prepared once for repeated forward passes."""

    points: np.ndarray
    assignment: PoolingAssignment
    gt_masks: np.ndarray
    gt_classes: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene) -> "PackedScene":
        return cls(
            points=scene.points,
            assignment=PoolingAssignment(scene.superpoint_id, scene.num_pools),
            gt_masks=scene.gt_masks,
            gt_classes=scene.gt_semantic,
        )


def toggles_for_mode(mode: str, toggles: comp.CompetitionToggles | None = None) -> comp.CompetitionToggles:
    """Resolve effective toggles: baseline forces everything off, competitor
    uses the explicit toggles (default: all on)."""
    if mode == "baseline":
        return comp.CompetitionToggles.none()
    return toggles if toggles is not None else comp.CompetitionToggles.all()


def scene_forward(
    packed: PackedScene,
    params: dict[str, Tensor],
    dec_cfg: DecoderConfig,
    toggles: comp.CompetitionToggles,
    comp_cfg: comp.CompetitionConfig | None = None,
) -> tuple[list[LayerPrediction], Tensor]:
    feats = extract_point_features(packed.points, params)
    pooled = superpoint_pool(feats, packed.assignment)
    return decoder_forward(pooled, params, dec_cfg, toggles, comp_cfg)


# ----------------------------------------------------------------------
# matching


def _stable_bce_terms(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    base = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return base - logits, base  # per-element BCE at target 1 and target 0


def match_cost(
    pred: LayerPrediction,
    gt_masks: np.ndarray,
    gt_classes: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """(N, G) assignment cost: negative class probability plus mean mask BCE
    plus soft dice cost. Detached from the graph."""
    p = pred.p_cls.data
    z = pred.mask_logits.data
    t = gt_masks.astype(np.float64)
    m = z.shape[1]
    cls_cost = -p[:, np.asarray(gt_classes, dtype=np.int64)]
    bce_pos, bce_neg = _stable_bce_terms(z)
    bce_cost = (bce_pos @ t.T + bce_neg @ (1.0 - t).T) / m
    probs = 1.0 / (1.0 + np.exp(-np.abs(z)))
    probs = np.where(z >= 0, probs, 1.0 - probs)
    inter = probs @ t.T
    dice_cost = 1.0 - (2.0 * inter + 1.0) / (probs.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + 1.0)
    return (weights.lambda_cls * cls_cost
            + weights.lambda_bce * bce_cost
            + weights.lambda_dice * dice_cost)


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injective assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {q for q, _ in pairs}
    unmatched = [q for q in range(cost.shape[0]) if q not in matched]
    return MatchResult(pairs=pairs, unmatched_queries=unmatched)


# ----------------------------------------------------------------------
# losses


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; empty-vs-empty is 0."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def layer_loss(
    pred: LayerPrediction,
    gt_masks: np.ndarray,
    gt_classes: np.ndarray,
    match: MatchResult,
    weights: LossWeights,
    mask_threshold: float = 0.5,
    no_object_weight: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted loss for one layer under a fixed matching.

    Cross entropy over all queries (no-object target for unmatched ones,
    optionally down-weighted), BCE + soft dice on matched masks, and a mean
    squared error pulling the predicted mask-quality score toward the true
    IoU of the binarized mask against its matched instance.
    """
    n, num_cols = pred.p_cls.shape
    no_object = num_cols - 1

    targets = np.full(n, no_object, dtype=np.int64)
    for q, g in match.pairs:
        targets[q] = gt_classes[g]
    onehot = np.zeros((n, num_cols))
    onehot[np.arange(n), targets] = 1.0
    sample_w = np.where(targets == no_object, no_object_weight, 1.0)
    log_p = pred.p_cls.log()
    ce = -(log_p * Tensor(onehot * sample_w[:, None])).sum() * (1.0 / sample_w.sum())

    comps = {"cls": weights.lambda_cls * ce.item()}
    total = weights.lambda_cls * ce

    if match.pairs:
        qi = match.query_indices
        gi = match.gt_indices
        t = gt_masks[gi].astype(np.float64)
        pm_logits = gather_rows(pred.mask_logits, qi)
        bce = bce_with_logits(pm_logits, t).mean()
        probs = pm_logits.sigmoid()
        inter = (probs * Tensor(t)).sum(axis=1)
        dice = (1.0 - (inter * 2.0 + 1.0) / (probs.sum(axis=1) + Tensor(t.sum(axis=1) + 1.0))).mean()

        binarized = comp.binarize_masks(pred.mask_logits.data[qi], mask_threshold)
        iou_targets = np.array([mask_iou(binarized[p], gt_masks[gi[p]]) for p in range(len(qi))])
        s = gather_rows(pred.s_iou, qi)
        iou_mse = ((s - Tensor(iou_targets)) ** 2.0).mean()

        total = total + weights.lambda_bce * bce + weights.lambda_dice * dice \
            + weights.lambda_iou * iou_mse
        comps["mask"] = weights.lambda_bce * bce.item() + weights.lambda_dice * dice.item()
        comps["iou"] = weights.lambda_iou * iou_mse.item()
    else:
        comps["mask"] = 0.0
        comps["iou"] = 0.0

    comps["total"] = total.item()
    return total, comps


def scene_loss(
    predictions: list[LayerPrediction],
    gt_masks: np.ndarray,
    gt_classes: np.ndarray,
    weights: LossWeights,
    mask_threshold: float = 0.5,
    deep_supervision: bool = True,
    no_object_weight: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-layer losses, each under its own matching."""
    layers = predictions if deep_supervision else predictions[-1:]
    total: Tensor | None = None
    agg = {"cls": 0.0, "mask": 0.0, "iou": 0.0, "total": 0.0}
    for pred in layers:
        match = hungarian(match_cost(pred, gt_masks, gt_classes, weights))
        loss, comps = layer_loss(pred, gt_masks, gt_classes, match, weights,
                                 mask_threshold, no_object_weight)
        total = loss if total is None else total + loss
        for key in agg:
            agg[key] += comps[key]
    return total, agg


# ----------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


# ----------------------------------------------------------------------
# training loop


class Trainer:
    """Deterministic single-threaded training session, resumable mid-run."""

    def __init__(
        self,
        scenes: list[Scene],
        cfg: TrainConfig,
        dec_cfg: DecoderConfig,
        weights: LossWeights | None = None,
        comp_cfg: comp.CompetitionConfig | None = None,
        toggles: comp.CompetitionToggles | None = None,
        val_scenes: list[Scene] | None = None,
        params: dict[str, Tensor] | None = None,
    ):
        if not scenes:
            raise ValueError("training needs at least one scene")
        cfg.validate()
        dec_cfg.validate()
        self.cfg = cfg
        self.dec_cfg = dec_cfg
        self.weights = weights or LossWeights()
        self.weights.validate()
        self.comp_cfg = comp_cfg or comp.CompetitionConfig()
        self.toggles = toggles_for_mode(cfg.mode, toggles)
        self.packed = [PackedScene.from_scene(s) for s in scenes]
        self.val_packed = [PackedScene.from_scene(s) for s in (val_scenes or [])]
        self.params = params if params is not None else init_params(dec_cfg, self.comp_cfg, seed=cfg.seed)
        self.opt = AdamW(self.params, cfg.lr, cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0

    def run(self, log_fn=None) -> list[dict]:
        """Run remaining epochs; returns one metrics entry per epoch run."""
        metrics: list[dict] = []
        while self.epoch < self.cfg.epochs:
            entry = self._run_epoch()
            if log_fn is not None:
                log_fn(entry)
            metrics.append(entry)
            if (self.cfg.stop_map50 > 0.0 and "map50_val" in entry
                    and entry["map50_val"] >= self.cfg.stop_map50):
                break
        return metrics

    def _run_epoch(self) -> dict:
        self.epoch += 1
        # stateless schedule: the rate is a pure function of the epoch, so a
        # resumed run sees exactly what the uninterrupted run saw
        if self.cfg.lr_decay_epoch > 0 and self.epoch >= self.cfg.lr_decay_epoch:
            self.opt.lr = self.cfg.lr * self.cfg.lr_decay_factor
        order = self.rng.permutation(len(self.packed))
        sums = {"cls": 0.0, "mask": 0.0, "iou": 0.0, "total": 0.0}
        for start in range(0, len(order), self.cfg.batch_size):
            batch = order[start:start + self.cfg.batch_size]
            self.opt.zero_grad()
            inv = 1.0 / len(batch)
            for idx in batch:
                packed = self.packed[idx]
                if self.cfg.augment:
                    packed = self._augment(packed)
                preds, _ = scene_forward(packed, self.params, self.dec_cfg,
                                         self.toggles, self.comp_cfg)
                for pred in preds:
                    if not (np.isfinite(pred.mask_logits.data).all()
                            and np.isfinite(pred.p_cls.data).all()
                            and np.isfinite(pred.s_iou.data).all()):
                        raise TrainingDivergence(
                            f"non-finite predictions at epoch {self.epoch}, "
                            f"scene index {int(idx)}"
                        )
                loss, comps = scene_loss(
                    preds, packed.gt_masks, packed.gt_classes, self.weights,
                    self.dec_cfg.mask_threshold, self.cfg.deep_supervision,
                    self.cfg.no_object_weight,
                )
                if not np.isfinite(comps["total"]):
                    raise TrainingDivergence(
                        f"non-finite loss {comps['total']} at epoch {self.epoch}, "
                        f"scene index {int(idx)}"
                    )
                (loss * inv).backward()
                for key in sums:
                    sums[key] += comps[key]
            self.opt.step()
        n = len(self.packed)
        entry = {
            "epoch": self.epoch,
            "loss_total": sums["total"] / n,
            "loss_cls": sums["cls"] / n,
            "loss_mask": sums["mask"] / n,
            "loss_iou": sums["iou"] / n,
        }
        if (self.val_packed and self.cfg.eval_interval > 0
                and (self.epoch % self.cfg.eval_interval == 0 or self.epoch == self.cfg.epochs)):
            entry["map50_val"] = self.evaluate_map50()
        return entry

    def _augment(self, packed: PackedScene) -> PackedScene:
        """Random rigid transform plus jitter of one scene's points.

        The superpoint partition and pool-level masks are a fixed grouping of
        the points, so only the point attributes change. Draws come from the
        trainer's seeded stream, keeping runs reproducible and resumable.
        """
        pts = packed.points.copy()
        center = pts[:, :2].mean(axis=0)
        theta = self.rng.uniform(0.0, 2.0 * np.pi)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
        pts[:, :2] = (pts[:, :2] - center) @ rot.T + center
        pts[:, :3] += self.rng.uniform(-0.5, 0.5, size=3)
        pts[:, :3] += self.rng.normal(0.0, 0.01, size=pts[:, :3].shape)
        pts[:, 3:6] = np.clip(pts[:, 3:6] + self.rng.normal(0.0, 0.02, size=3), 0.0, 1.0)
        return PackedScene(points=pts, assignment=packed.assignment,
                           gt_masks=packed.gt_masks, gt_classes=packed.gt_classes)

    def evaluate_map50(self) -> float:
        preds, gts = collect_predictions(
            self.params, self.val_packed, self.dec_cfg, self.toggles, self.comp_cfg
        )
        return map_suite(preds, gts).map50

    # -- checkpoint plumbing -------------------------------------------

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "params": {k: p.data.tolist() for k, p in self.params.items()},
            "optimizer": self.opt.state_dict(),
            "rng_state": _encode_rng_state(self.rng),
        }

    def load_state_dict(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        for k, p in self.params.items():
            p.data = np.asarray(state["params"][k], dtype=np.float64).reshape(p.data.shape)
        self.opt.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = _decode_rng_state(state["rng_state"])


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _decode_rng_state(enc: dict) -> dict:
    return {
        "bit_generator": enc["bit_generator"],
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }


def train(
    scenes: list[Scene],
    cfg: TrainConfig,
    dec_cfg: DecoderConfig,
    weights: LossWeights | None = None,
    comp_cfg: comp.CompetitionConfig | None = None,
    toggles: comp.CompetitionToggles | None = None,
    val_scenes: list[Scene] | None = None,
    params: dict[str, Tensor] | None = None,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Train from scratch (or from given params); returns params and the log."""
    trainer = Trainer(scenes, cfg, dec_cfg, weights, comp_cfg, toggles, val_scenes, params)
    metrics = trainer.run()
    return trainer.params, metrics


# ----------------------------------------------------------------------
# inference glue


def collect_predictions(
    params: dict[str, Tensor],
    packed_scenes: list[PackedScene],
    dec_cfg: DecoderConfig,
    toggles: comp.CompetitionToggles,
    comp_cfg: comp.CompetitionConfig | None = None,
) -> tuple[list[list[tuple[int, float, np.ndarray]]], list[tuple[np.ndarray, np.ndarray]]]:
    """Final-layer instance predictions plus ground truth, per scene.

    Returns (preds, gts) in the shapes the metrics module consumes: each
    scene's predictions are (class, confidence, boolean mask) triples ranked
    later by confidence; confidence is top object-class probability times
    the predicted mask-quality score. Empty binarized masks are dropped.
    """
    preds_out = []
    gts_out = []
    for packed in packed_scenes:
        preds, _ = scene_forward(packed, params, dec_cfg, toggles, comp_cfg)
        final = preds[-1]
        scene_preds = instance_predictions(final, dec_cfg.num_classes, dec_cfg.mask_threshold)
        preds_out.append(scene_preds)
        gts_out.append((packed.gt_classes, packed.gt_masks))
    return preds_out, gts_out


def instance_predictions(
    pred: LayerPrediction, num_classes: int, mask_threshold: float = 0.5
) -> list[tuple[int, float, np.ndarray]]:
    p_obj = pred.p_cls.data[:, :num_classes]
    classes = p_obj.argmax(axis=1)
    conf = p_obj.max(axis=1) * pred.s_iou.data
    masks = comp.binarize_masks(pred.mask_logits.data, mask_threshold)
    out = []
    for i in range(p_obj.shape[0]):
        if masks[i].any():
            out.append((int(classes[i]), float(conf[i]), masks[i]))
    return out
