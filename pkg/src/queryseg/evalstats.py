"""Instance-segmentation metrics and competition analytics.

mAP follows the usual protocol: predictions are ranked by confidence within
each class, greedily matched to unclaimed ground-truth instances at an IoU
threshold, and the all-point interpolated area under the precision/recall
curve is averaged over classes and thresholds. Parity with any particular
benchmark script is not a goal.

Competition analytics mirror two published views of inter-query competition:
the average number of surplus queries above an IoU threshold per instance
(per decoder layer), and empirical CDFs of scores split into matched and
unmatched query populations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

Prediction = tuple[int, float, np.ndarray]          # class, confidence, boolean mask
SceneGroundTruth = tuple[np.ndarray, np.ndarray]    # classes (G,), masks (G, M)


@dataclass
class APResult:
    per_class: dict[int, dict[float, float]]
    map: float
    map50: float
    map25: float

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "map50": self.map50,
            "map25": self.map25,
            "per_class": {
                str(c): {f"{t:.2f}": v for t, v in table.items()}
                for c, table in self.per_class.items()
            },
        }


@dataclass
class CompetitionStats:
    rows: list[tuple[int, float, float]]  # layer, threshold, average surplus queries

    def value(self, layer: int, tau: float) -> float:
        for l, t, v in self.rows:
            if l == layer and abs(t - tau) < 1e-12:
                return v
        raise KeyError(f"no entry for layer {layer}, tau {tau}")


@dataclass
class CdfSeries:
    values: list[float]
    fractions: list[float]

    @property
    def count(self) -> int:
        return len(self.values)

    def mean(self) -> float:
        return float(np.mean(self.values))


def _bool_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ----------------------------------------------------------------------
# average precision


def _class_ap(
    ranked: list[tuple[int, np.ndarray]],
    gts_by_scene: dict[int, list[np.ndarray]],
    tau: float,
) -> float:
    """AP for one class: ``ranked`` holds (scene, mask) in confidence order."""
    total_gt = sum(len(v) for v in gts_by_scene.values())
    if total_gt == 0:
        raise ValueError("class has no ground-truth instances")
    if not ranked:
        return 0.0
    claimed: dict[int, set[int]] = {s: set() for s in gts_by_scene}
    tp = np.zeros(len(ranked))
    for rank, (scene, mask) in enumerate(ranked):
        best_iou, best_g = 0.0, -1
        for g, gt_mask in enumerate(gts_by_scene.get(scene, [])):
            if g in claimed[scene]:
                continue
            iou = _bool_iou(mask, gt_mask)
            if iou > best_iou:
                best_iou, best_g = iou, g
        if best_g >= 0 and best_iou >= tau:
            claimed[scene].add(best_g)
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # all-point interpolation: running max of precision from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def average_precision(
    preds: list[list[Prediction]],
    gts: list[SceneGroundTruth],
    tau: float,
) -> float:
    """Mean over classes (with ground truth) of the class AP at one threshold."""
    table = _ap_table(preds, gts, [tau])
    return float(np.mean([aps[tau] for aps in table.values()]))


def _ap_table(
    preds: list[list[Prediction]],
    gts: list[SceneGroundTruth],
    taus: list[float],
) -> dict[int, dict[float, float]]:
    classes = sorted({int(c) for gt_classes, _ in gts for c in gt_classes})
    by_class: dict[int, list[tuple[float, int, int, np.ndarray]]] = {c: [] for c in classes}
    for scene, scene_preds in enumerate(preds):
        for order, (cls, conf, mask) in enumerate(scene_preds):
            if cls in by_class:
                by_class[cls].append((conf, scene, order, mask))
    table: dict[int, dict[float, float]] = {}
    for cls in classes:
        gts_by_scene = {
            scene: [masks[g] for g in range(len(gt_classes)) if int(gt_classes[g]) == cls]
            for scene, (gt_classes, masks) in enumerate(gts)
        }
        # descending confidence; scene/order break ties deterministically
        ranked = [
            (scene, mask)
            for conf, scene, order, mask in sorted(
                by_class[cls], key=lambda item: (-item[0], item[1], item[2])
            )
        ]
        table[cls] = {tau: _class_ap(ranked, gts_by_scene, tau) for tau in taus}
    return table


def map_suite(preds: list[list[Prediction]], gts: list[SceneGroundTruth]) -> APResult:
    """AP table over the 0.50:0.05:0.95 threshold ladder plus 0.25."""
    taus = list(MAP_THRESHOLDS) + [0.25]
    table = _ap_table(preds, gts, taus)
    if not table:
        return APResult(per_class={}, map=0.0, map50=0.0, map25=0.0)
    map_all = float(np.mean([np.mean([aps[t] for t in MAP_THRESHOLDS]) for aps in table.values()]))
    map50 = float(np.mean([aps[0.5] for aps in table.values()]))
    map25 = float(np.mean([aps[0.25] for aps in table.values()]))
    return APResult(per_class=table, map=map_all, map50=map50, map25=map25)


# ----------------------------------------------------------------------
# competition analytics


def competing_query_stats(
    layer_masks: list[list[np.ndarray]],
    gt_masks: list[np.ndarray],
    thresholds: list[float],
) -> CompetitionStats:
    """Average surplus competing queries per instance, per layer and threshold.

    For each ground-truth instance, queries whose binarized mask overlaps it
    with IoU strictly above the threshold are contenders; one of them is the
    legitimate predictor, the rest are competition. The count is floored at
    zero and averaged over every instance of every scene.
    """
    rows: list[tuple[int, float, float]] = []
    for layer, scenes in enumerate(layer_masks, start=1):
        per_tau: dict[float, list[int]] = {t: [] for t in thresholds}
        for masks, gt in zip(scenes, gt_masks):
            for g in range(gt.shape[0]):
                ious = np.array([_bool_iou(masks[q], gt[g]) for q in range(masks.shape[0])])
                for tau in thresholds:
                    per_tau[tau].append(max(0, int((ious > tau).sum()) - 1))
        for tau in thresholds:
            counts = per_tau[tau]
            rows.append((layer, tau, float(np.mean(counts)) if counts else 0.0))
    return CompetitionStats(rows=rows)


def score_cdf(values) -> CdfSeries:
    """Empirical CDF at the sorted sample points (duplicates kept)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("score_cdf needs at least one sample")
    vals.sort()
    n = len(vals)
    return CdfSeries(values=vals, fractions=[(i + 1) / n for i in range(n)])


def split_matched_scores(
    match_pairs: list[tuple[int, int]],
    num_queries: int,
    scores: np.ndarray,
) -> tuple[list[float], list[float]]:
    """Partition per-query scores into matched and unmatched populations."""
    matched_idx = {q for q, _ in match_pairs}
    matched = [float(scores[q]) for q in range(num_queries) if q in matched_idx]
    unmatched = [float(scores[q]) for q in range(num_queries) if q not in matched_idx]
    return matched, unmatched
