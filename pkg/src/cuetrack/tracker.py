"""Online, frame-by-frame tracking with a trained model."""

from __future__ import annotations

import itertools
import time
from typing import Sequence

import numpy as np

from . import numerics as nx
from .association import assign, update_tracks
from .model import CueTrackModel
from .scene_model import DetectionNode, Frame, Track, fill_frame_gaps


class Tracker:
    """Holds the live tracks and per-frame state history for one sequence."""

    def __init__(self, model: CueTrackModel):
        self.model = model
        self.cfg = model.cfg
        self.tracks: list[Track] = []
        self.states_by_frame: dict[int, dict[int, np.ndarray]] = {}
        self._ids = itertools.count(1)

    def _prune_history(self, frame_index: int) -> None:
        horizon = frame_index - self.cfg.t_max - self.cfg.max_misses - 1
        for f in [f for f in self.states_by_frame if f < horizon]:
            del self.states_by_frame[f]

    def step(self, frame: Frame) -> list[DetectionNode]:
        """Associate one frame; returns its detections labelled with track ids (matched or born)."""
        cfg = self.cfg
        det_states = frame.states(cfg.num_classes)
        with nx.no_grad():
            out = self.model.forward_frame(self.tracks, det_states, self.states_by_frame, frame.index)
        result = assign(out.affinity, threshold=cfg.match_threshold, method=cfg.assign_method)
        self.tracks, det_track = update_tracks(
            self.tracks, result, det_states, out.cues, frame.index, lambda: next(self._ids),
            t_max=cfg.t_max, k_neighbors=cfg.k_neighbors, max_misses=cfg.max_misses,
            birth_score_min=cfg.birth_score_min, det_classes=[d.cls for d in frame.detections],
            states_by_frame=self.states_by_frame)
        self._prune_history(frame.index)
        labelled = []
        for di, det in enumerate(frame.detections):
            if di in det_track:
                labelled.append(DetectionNode(det.position, det.heading, det.size, det.velocity, det.cls,
                                              det.score, det.frame_index, det.num_classes,
                                              track_id=det_track[di]))
        return labelled


def track_sequence(frames: Sequence[Frame], model: CueTrackModel) -> tuple[list[Frame], float]:
    """Run the tracker over a sequence. Returns (output frames, throughput in frames/s)."""
    tracker = Tracker(model)
    out = []
    start = time.perf_counter()
    filled = fill_frame_gaps(frames)
    for frame in filled:
        out.append(Frame(frame.index, frame.timestamp, tuple(tracker.step(frame))))
    elapsed = time.perf_counter() - start
    fps = len(filled) / elapsed if filled and elapsed > 0 else 0.0
    return [f for f in out if f.detections], fps
