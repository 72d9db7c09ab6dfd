"""CLEAR-MOT counts and recall-averaged AMOTA/AMOTP over center-distance matching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene_model import DetectionNode, Frame


@dataclass
class FrameCounts:
    frame: int
    matches: int
    false_positives: int
    misses: int
    id_switches: int
    gt: int


@dataclass
class MotTally:
    matches: int = 0
    false_positives: int = 0
    misses: int = 0
    id_switches: int = 0
    gt: int = 0
    distance_sum: float = 0.0
    frames: list[FrameCounts] = field(default_factory=list)

    def add(self, fc: FrameCounts, dist: float) -> None:
        self.frames.append(fc)
        self.matches += fc.matches
        self.false_positives += fc.false_positives
        self.misses += fc.misses
        self.id_switches += fc.id_switches
        self.gt += fc.gt
        self.distance_sum += dist


@dataclass
class Correspondence:
    pairs: list[tuple[int, int, float]]  # (gt index, pred index, BEV distance)
    unmatched_gt: list[int]
    unmatched_pred: list[int]


def _bev(d: DetectionNode) -> np.ndarray:
    return np.asarray(d.position[:2], dtype=np.float64)


def match_frame(gt_dets: Sequence[DetectionNode], pred_dets: Sequence[DetectionNode], radius: float = 2.0,
                previous: dict[int, int] | None = None, same_class: bool = True) -> Correspondence:
    """Keep last correspondences still within ``radius``, then greedy nearest centres."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    previous = previous or {}
    G, P = len(gt_dets), len(pred_dets)
    if G and P:
        dist = np.linalg.norm(np.stack([_bev(g) for g in gt_dets])[:, None]
                              - np.stack([_bev(p) for p in pred_dets])[None], axis=-1)
        ok = dist <= radius
        if same_class:
            ok &= np.array([g.cls for g in gt_dets])[:, None] == np.array([p.cls for p in pred_dets])[None]
    else:
        dist = np.zeros((G, P))
        ok = np.zeros((G, P), dtype=bool)
    pairs, used_g, used_p = [], set(), set()
    pred_index = {p.track_id: j for j, p in enumerate(pred_dets)}
    for gi, g in enumerate(gt_dets):
        j = pred_index.get(previous.get(g.gt_id, None), None)
        if j is not None and ok[gi, j] and j not in used_p:
            pairs.append((gi, j, float(dist[gi, j])))
            used_g.add(gi)
            used_p.add(j)
    gi_all, pj_all = np.nonzero(ok)
    for o in np.lexsort((pj_all, gi_all, dist[gi_all, pj_all])):
        gi, j = int(gi_all[o]), int(pj_all[o])
        if gi in used_g or j in used_p:
            continue
        pairs.append((gi, j, float(dist[gi, j])))
        used_g.add(gi)
        used_p.add(j)
    return Correspondence(sorted(pairs), [i for i in range(G) if i not in used_g],
                          [j for j in range(P) if j not in used_p])


def _index(frames: Sequence[Frame]) -> dict[int, tuple]:
    return {f.index: f.detections for f in frames}


def clear_mot(gt_frames: Sequence[Frame], pred_frames: Sequence[Frame], radius: float = 2.0,
              min_score: float | None = None, same_class: bool = True) -> MotTally:
    """Accumulate matches/FP/FN/IDS over a sequence; predictions below ``min_score`` are ignored."""
    gt_by, pred_by = _index(gt_frames), _index(pred_frames)
    last: dict[int, int] = {}
    tally = MotTally()
    for fi in sorted(set(gt_by) | set(pred_by)):
        gts = gt_by.get(fi, ())
        preds = pred_by.get(fi, ())
        if min_score is not None:
            preds = tuple(p for p in preds if p.score >= min_score)
        corr = match_frame(gts, preds, radius, last, same_class)
        ids = 0
        dist = 0.0
        for gi, pj, dd in corr.pairs:
            g, h = gts[gi].gt_id, preds[pj].track_id
            if g in last and last[g] != h:
                ids += 1
            last[g] = h
            dist += dd
        tally.add(FrameCounts(fi, len(corr.pairs), len(corr.unmatched_pred), len(corr.unmatched_gt), ids,
                              len(gts)), dist)
    return tally


def mota(tally: MotTally) -> float:
    if tally.gt == 0:
        raise ValueError("MOTA undefined without ground truth")
    return 1.0 - (tally.misses + tally.false_positives + tally.id_switches) / tally.gt


def motar(tally: MotTally, recall: float) -> float:
    """Recall-normalised MOTA, clamped at 0."""
    G = tally.gt
    return max(0.0, 1.0 - (tally.id_switches + tally.false_positives + tally.misses - (1.0 - recall) * G)
               / (recall * G))


def amota_amotp(gt_frames: Sequence[Frame], pred_frames: Sequence[Frame], n_recall: int = 40,
                recall_floor: float = 0.1, radius: float = 2.0, same_class: bool = True) -> tuple[float, float, list]:
    """Average MOTAR and mean match distance over evenly spaced recall targets.

    For each target in linspace(0, 1, n_recall) at or above ``recall_floor`` the highest score
    threshold reaching that recall is used; unreachable targets are left out of both averages.
    Returns (amota, amotp, per-target rows).
    """
    G = sum(len(f.detections) for f in gt_frames)
    if G == 0:
        raise ValueError("AMOTA undefined without ground truth")
    scores = sorted({p.score for f in pred_frames for p in f.detections}, reverse=True)
    cache: dict[int, MotTally] = {}

    def at(k: int) -> MotTally:
        if k not in cache:
            cache[k] = clear_mot(gt_frames, pred_frames, radius, scores[k], same_class)
        return cache[k]

    rows = []
    for target in np.linspace(0.0, 1.0, n_recall):
        if target < recall_floor - 1e-12 or not scores:
            continue
        if at(len(scores) - 1).matches / G < target - 1e-12:
            continue
        lo, hi = 0, len(scores) - 1  # first threshold index whose recall reaches target
        while lo < hi:
            mid = (lo + hi) // 2
            if at(mid).matches / G >= target - 1e-12:
                hi = mid
            else:
                lo = mid + 1
        t = at(lo)
        r = t.matches / G
        rows.append({"target": float(target), "threshold": scores[lo], "recall": r,
                     "motar": motar(t, r), "motp": t.distance_sum / t.matches if t.matches else 0.0})
    if not rows:
        return 0.0, float("nan"), rows
    return (float(np.mean([r["motar"] for r in rows])), float(np.mean([r["motp"] for r in rows])), rows)


def evaluate(gt_frames: Sequence[Frame], pred_frames: Sequence[Frame], radius: float = 2.0,
             n_recall: int = 40, recall_floor: float = 0.1) -> dict:
    tally = clear_mot(gt_frames, pred_frames, radius)
    amota, amotp, _ = amota_amotp(gt_frames, pred_frames, n_recall, recall_floor, radius)
    return {
        "AMOTA": amota,
        "AMOTP": amotp,
        "MOTA": mota(tally),
        "IDS": tally.id_switches,
        "FP": tally.false_positives,
        "FN": tally.misses,
        "TP": tally.matches,
        "GT": tally.gt,
    }


def merge_reports(reports: Sequence[dict]) -> dict:
    """Pool counts across sequences; AMOTA/AMOTP are averaged per sequence."""
    out = {k: sum(r[k] for r in reports) for k in ("IDS", "FP", "FN", "TP", "GT")}
    out["MOTA"] = 1.0 - (out["FN"] + out["FP"] + out["IDS"]) / out["GT"] if out["GT"] else float("nan")
    out["AMOTA"] = float(np.mean([r["AMOTA"] for r in reports]))
    out["AMOTP"] = float(np.nanmean([r["AMOTP"] for r in reports]))
    return out


def format_table(report: dict) -> str:
    keys = ("AMOTA", "AMOTP", "MOTA", "IDS", "FP", "FN", "TP", "GT")
    cells = [f"{report[k]:.4f}" if isinstance(report[k], float) else str(report[k]) for k in keys]
    widths = [max(len(k), len(c)) for k, c in zip(keys, cells)]
    head = "  ".join(k.rjust(w) for k, w in zip(keys, widths))
    body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return head + "\n" + body + "\n"


def write_report(report: dict, json_path, table_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if table_path is not None:
        with open(table_path, "w", encoding="utf-8") as fh:
            fh.write(format_table(report))
