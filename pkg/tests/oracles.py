"""Independent reference implementations used as test oracles.

Everything here is deliberately written along a different code path than
the library: IoU via the measure identity |A| + |B| - |A i B|, AP via
per-prefix re-enumeration of the precision/recall curve, and gradients
via central finite differences over every parameter entry.
"""

from __future__ import annotations

import numpy as np


def iou_ref(a: tuple[float, float], b: tuple[float, float]) -> float:
    (s1, e1), (s2, e2) = a, b
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    if inter == 0.0:
        return 1.0 if (s1, e1) == (s2, e2) else 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def assign_ref(det_segment, gt_segments) -> int | None:
    """Argmax-IoU index subject to IoU > 0, lowest index on ties."""
    ious = [iou_ref(det_segment, g) for g in gt_segments]
    if not ious or max(ious) <= 0.0:
        return None
    return int(np.argmax(ious))


def brute_force_ap(
    dets_per_video,
    gts_per_video,
    class_index: int,
    tau_iou: float,
    ranking: str,
) -> float:
    """AP by explicit enumeration: rank the class candidates, then for
    every prefix of the ranked list redo the greedy matching from
    scratch and accumulate precision times recall change."""
    gt_count = sum(
        1 for gts in gts_per_video for g in gts if g.label == class_index
    )
    if gt_count == 0:
        return 0.0
    cands = []
    for vid, dets in enumerate(dets_per_video):
        for det in dets:
            if int(np.argmax(det.class_probs)) != class_index:
                continue
            seg = (det.segment.start, det.segment.end)
            if ranking == "overlap":
                key = max(
                    (
                        iou_ref(seg, (g.segment.start, g.segment.end))
                        for g in gts_per_video[vid]
                    ),
                    default=0.0,
                )
            else:
                key = float(det.class_probs[class_index])
            cands.append((vid, det, key))
    order = sorted(range(len(cands)), key=lambda i: -cands[i][2])  # stable

    def prefix_stats(k: int) -> tuple[float, float]:
        claimed = set()
        tp = 0
        for idx in order[:k]:
            vid, det, _ = cands[idx]
            gts = gts_per_video[vid]
            segs = [(g.segment.start, g.segment.end) for g in gts]
            g_idx = assign_ref((det.segment.start, det.segment.end), segs)
            if g_idx is None:
                continue
            if gts.items[g_idx].label != class_index:
                continue
            if iou_ref((det.segment.start, det.segment.end), segs[g_idx]) < tau_iou:
                continue
            if (vid, g_idx) in claimed:
                continue
            claimed.add((vid, g_idx))
            tp += 1
        precision = tp / k if k else 0.0
        recall = len(claimed) / gt_count
        return precision, recall

    ap = 0.0
    prev_recall = 0.0
    for k in range(1, len(order) + 1):
        precision, recall = prefix_stats(k)
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def brute_force_mean_ap(dets_per_video, gts_per_video, tau_iou, ranking) -> float:
    classes = sorted({g.label for gts in gts_per_video for g in gts})
    values = [
        brute_force_ap(dets_per_video, gts_per_video, c, tau_iou, ranking)
        for c in classes
    ]
    return float(np.mean(values))


# --------------------------------------------------------------------
# Finite differences over parameter sets
# --------------------------------------------------------------------


def fd_param_gradient(arrays: dict[str, np.ndarray], f, h: float = 1e-6):
    """Central finite differences of the scalar ``f()`` with respect to
    every entry of every array (mutated in place and restored)."""
    grads = {}
    for name, arr in arrays.items():
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = grad
    return grads


def max_rel_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    floor: float = 1e-6,
) -> float:
    """Normwise relative error over all arrays: the largest absolute
    deviation divided by the larger of the two gradient magnitudes."""
    num = max(
        float(np.max(np.abs(analytic[name] - numeric[name])))
        for name in analytic
    )
    den = max(
        floor,
        max(float(np.max(np.abs(a))) for a in analytic.values()),
        max(float(np.max(np.abs(n))) for n in numeric.values()),
    )
    return num / den
