"""The full per-frame network: history encoding, cue-consistency rounds, affinity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .association import AffinityHead, AffinityMatrix, affinity
from .config import TrainConfig
from .cue_consistency import (CueBlock, PositionHead, build_interaction_mask, cue_consistency,
                   predict_positions, topk_indices)
from .geometric_encoder import GeometricLayer, encode_detections, encode_history_rows, gather_histories
from .numerics import Module, Parameter, Tensor
from .scene_model import Track, class_distance_thresholds, state_dim
from .temporal_encoder import TemporalLayer, temporal_encode_batch


@dataclass
class FrameOutput:
    affinity: AffinityMatrix
    predicted: Tensor  # [M, 2]
    cues: list  # per detection: indices of its top-k peers
    z_tracks: Tensor  # [M, d] temporal summaries


class CueTrackModel(Module):
    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, S = cfg.d_model, state_dim(cfg.num_classes)
        self.geo = [GeometricLayer(d, S, rng, bands=cfg.sin_bands, pos_scale=cfg.pos_scale,
                                   vel_scale=cfg.vel_scale) for _ in range(cfg.n_geo_layers)]
        self.temporal = [TemporalLayer(d, rng) for _ in range(cfg.n_geo_layers)]
        self.track_token = Parameter(rng.normal(0.0, 1.0, (1, d)))
        self.cue = [CueBlock(d, rng) for _ in range(cfg.n_cue_layers)]
        self.position_head = PositionHead(d, rng)
        self.affinity_head = AffinityHead(d, rng)
        self.thresholds = class_distance_thresholds(cfg.class_max_speed, cfg.frame_dt,
                                                    cfg.gate_margin, cfg.gate_floor)
        self.named_parameters()  # assigns names

    def header(self) -> dict:
        return {"config": self.cfg.to_dict(), **{k: getattr(self.cfg, k) for k in TrainConfig.ARCH_KEYS}}

    @staticmethod
    def frame_origin(tracks: Sequence[Track], det_states: np.ndarray) -> np.ndarray:
        if len(det_states):
            xy = np.asarray(det_states)[:, :2].mean(axis=0)
        elif tracks:
            xy = np.mean([t.last_state[:2] for t in tracks], axis=0)
        else:
            xy = np.zeros(2)
        return np.array([xy[0], xy[1], 0.0])

    def encode_tracks(self, tracks: Sequence[Track], states_by_frame: Mapping, frame_index: int,
                      origin: np.ndarray) -> Tensor:
        """Temporal summary per track [M, d]; each geometric pass after the first refines the
        previous pass's history rows."""
        d = self.cfg.d_model
        if not tracks:
            return Tensor(np.zeros((0, d)))
        batch = gather_histories(tracks, states_by_frame, frame_index, state_dim(self.cfg.num_classes))
        f = None
        z_hat = None
        for geo, temp in zip(self.geo, self.temporal):
            rows = encode_history_rows(batch, geo, origin, f=f)
            z_hat, Z_hat = temporal_encode_batch(rows, batch.lengths, batch.offsets, batch.lags,
                                                 self.track_token, temp)
            f = Z_hat.reshape(Z_hat.shape[0], 1, d)
        return z_hat

    def forward_frame(self, tracks: Sequence[Track], det_states: np.ndarray, states_by_frame: Mapping,
                      frame_index: int) -> FrameOutput:
        cfg = self.cfg
        det_states = np.asarray(det_states, dtype=np.float64).reshape(-1, state_dim(cfg.num_classes))
        origin = self.frame_origin(tracks, det_states)
        Zm = self.encode_tracks(tracks, states_by_frame, frame_index, origin)
        ZB = encode_detections(det_states, self.geo[0], origin)
        anchors = np.array([t.last_state[:2] for t in tracks]).reshape(-1, 2)
        pred = predict_positions(Zm, self.position_head, anchors)
        lag = np.array([frame_index - t.last_frame for t in tracks], dtype=np.float64)
        mask = build_interaction_mask([t.cls for t in tracks], np.argmax(det_states[:, 9:-1], axis=1),
                                      pred.data, det_states[:, :2], self.thresholds, track_scale=lag)
        Ym, YB, EB = cue_consistency(Zm, ZB, mask.allowed, self.cue, cfg.k_cue, cfg.cross_mode)
        aff = affinity(Ym, YB, self.affinity_head, mask.allowed)
        cues = [list(row) for row in topk_indices(EB, cfg.k_cue)] if len(det_states) else []
        return FrameOutput(aff, pred, cues, Zm)


def save_model(path, model: CueTrackModel, extra_arrays: dict | None = None, **header) -> None:
    arrays = dict(model.state_dict())
    for k, v in (extra_arrays or {}).items():
        arrays[f"optim/{k}"] = v
    nx.save_checkpoint(path, arrays, {**model.header(), **header})


def load_model(path) -> tuple[CueTrackModel, dict, dict]:
    """Returns (model, header, optimizer arrays)."""
    header, arrays = nx.load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = CueTrackModel(cfg)
    params = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    model.load_state_dict(params)
    return model, header, optim
