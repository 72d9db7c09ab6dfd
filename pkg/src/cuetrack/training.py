"""Teacher-forced training on mini-sequences."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .association import Assignment, focal_loss, position_loss, total_loss, update_tracks
from .config import TrainConfig
from .model import CueTrackModel
from .scene_model import Frame, GroundTruthSequence, Track

log = logging.getLogger(__name__)


@dataclass
class LabelledSequence:
    gt: GroundTruthSequence
    detections: list[Frame]

    def __post_init__(self):
        if len(self.gt.frames) != len(self.detections):
            raise ValueError("ground truth and detections must cover the same frames")


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    l_assoc: float
    l_pos: float
    loss: float


@dataclass
class TrainResult:
    model: CueTrackModel
    optimizer: nx.AdamW
    rows: list[LogRow] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    last_epoch: int = 0


class TrainingDiverged(nx.NumericError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def supervision(tracks: Sequence[Track], frame: Frame, gt_frame: Frame):
    """Identity match matrix [M, N], BEV targets [M, 2] and which tracks have a target."""
    det_gt = [d.gt_id for d in frame.detections]
    gt_xy = {d.gt_id: d.position[:2] for d in gt_frame.detections}
    M, N = len(tracks), len(det_gt)
    match = np.zeros((M, N), dtype=bool)
    for i, t in enumerate(tracks):
        if t.gt_id is None:
            continue
        for j, g in enumerate(det_gt):
            if g == t.gt_id:
                match[i, j] = True
                break
    target = np.array([gt_xy.get(t.gt_id, (np.nan, np.nan)) for t in tracks], dtype=np.float64).reshape(M, 2)
    supervised = np.array([t.gt_id in gt_xy for t in tracks], dtype=bool)
    return match, target, supervised


def run_window(model: CueTrackModel, seq: LabelledSequence, start: int, length: int):
    """Roll the teacher-forced tracker over frames [start, start+length).

    Returns a list of (L, L_a, L_p) tensors, one per frame that had live tracks.
    """
    cfg = model.cfg
    tracks: list[Track] = []
    states_by_frame: dict = {}
    ids = itertools.count(1)
    losses = []
    for fi in range(start, min(start + length, len(seq.detections))):
        frame, gt_frame = seq.detections[fi], seq.gt.frames[fi]
        det_states = frame.states(cfg.num_classes)
        det_gt = [d.gt_id for d in frame.detections]
        out = model.forward_frame(tracks, det_states, states_by_frame, frame.index)
        match, target, supervised = supervision(tracks, frame, gt_frame)
        if tracks:
            la = focal_loss(out.affinity.A, match, out.affinity.mask, cfg.focal_gamma, cfg.focal_alpha)
            lp = position_loss(out.predicted, target, supervised)
            losses.append((total_loss(la, lp, cfg.lambda_p), la, lp))
        pairs = [(int(i), int(j), 1.0) for i, j in zip(*np.nonzero(match))]
        used = {j for _, j, _ in pairs}
        live_ids = {t.gt_id for t in tracks}
        result = Assignment(pairs, [i for i in range(len(tracks)) if i not in {p[0] for p in pairs}],
                            [j for j in range(len(det_gt)) if j not in used])
        tracks, det_track = update_tracks(
            tracks, result, det_states, out.cues, frame.index, lambda: next(ids),
            t_max=cfg.t_max, k_neighbors=cfg.k_neighbors, max_misses=cfg.max_misses,
            birth_score_min=0.0, det_classes=[d.cls for d in frame.detections],
            states_by_frame=states_by_frame,
            birth_filter=lambda j: det_gt[j] is not None and det_gt[j] not in live_ids)
        by_id = {t.id: t for t in tracks}
        for j, tid in det_track.items():
            if by_id[tid].gt_id is None:
                by_id[tid].gt_id = det_gt[j]
    return losses


def _diagnostics(model: CueTrackModel, epoch: int, step: int, values) -> dict:
    return {
        "epoch": epoch,
        "step": step,
        "losses": [float(v) for v in values],
        "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()},
    }


def train(dataset: Sequence[LabelledSequence], cfg: TrainConfig, model: CueTrackModel | None = None,
          optimizer_state: dict | None = None, start_epoch: int = 0, target_loss: float | None = None,
          on_row: Callable[[LogRow], None] | None = None) -> TrainResult:
    """AdamW with cosine-power decay, one optimizer step per mini-sequence.

    Epochs ``start_epoch + 1 .. cfg.epochs`` run; ``target_loss`` stops early once an epoch's
    mean loss drops below it.
    """
    if not dataset:
        raise ValueError("empty training set")
    model = model or CueTrackModel(cfg)
    params = model.parameters()
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if optimizer_state:
        opt.load_state_arrays(optimizer_state)
    total_steps = cfg.epochs * len(dataset)
    step = int(opt.state.get("step", 0))
    result = TrainResult(model, opt, last_epoch=start_epoch)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])  # per-epoch stream keeps resumed runs identical
        epoch_vals = []
        for si in rng.permutation(len(dataset)):
            seq = dataset[si]
            n = len(seq.detections)
            start = int(rng.integers(0, max(1, n - cfg.mini_seq_len + 1)))
            frame_losses = run_window(model, seq, start, cfg.mini_seq_len)
            if not frame_losses:
                continue
            scale = 1.0 / len(frame_losses)
            loss = sum((l for l, _, _ in frame_losses), nx.Tensor(0.0)) * scale
            la = sum(float(a.data) for _, a, _ in frame_losses) * scale
            lp = sum(float(p.data) for _, _, p in frame_losses) * scale
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}",
                                       _diagnostics(model, epoch, step, (float(loss.data), la, lp)))
            opt.zero_grad()
            nx.backward(loss)
            lr = nx.cosine_power_lr(step, total_steps, cfg.lr, cfg.lr_power)
            opt.step(lr)
            step += 1
            row = LogRow(epoch, step, lr, la, lp, float(loss.data))
            result.rows.append(row)
            epoch_vals.append(row.loss)
            if on_row:
                on_row(row)
        mean = float(np.mean(epoch_vals)) if epoch_vals else float("nan")
        result.epoch_losses.append(mean)
        result.last_epoch = epoch
        log.info("epoch %d loss %.5f", epoch, mean)
        if target_loss is not None and epoch_vals and mean < target_loss:
            break
    return result
