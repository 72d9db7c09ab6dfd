"""Self-information encoders, top-k attention cues and cue-consistent cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import FFN, MLP, LayerNorm, Module, Parameter, Tensor

CROSS_MODES = ("cue", "vanilla")


class SelfInfoLayer(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(d)
        self.d = d
        self.WQ = Parameter(rng.normal(0, s, (d, d)))
        self.WK = Parameter(rng.normal(0, s, (d, d)))
        self.WV = Parameter(rng.normal(0, s, (d, d)))
        self.ln = LayerNorm(d)
        self.ffn = FFN(d, rng)


class CrossLayer(Module):
    """Parameters for one direction of the cross-attention."""

    def __init__(self, d: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(d)
        self.d = d
        self.WQ = Parameter(rng.normal(0, s, (d, d)))
        self.WK = Parameter(rng.normal(0, s, (d, d)))
        self.WV = Parameter(rng.normal(0, s, (d, d)))
        self.ln = LayerNorm(d)
        self.ffn = FFN(d, rng)


class CueBlock(Module):
    """One round: both self-info encoders, then both cross directions."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.self_tracks = SelfInfoLayer(d, rng)
        self.self_dets = SelfInfoLayer(d, rng)
        self.det_from_tracks = CrossLayer(d, rng)
        self.tracks_from_dets = CrossLayer(d, rng)


@dataclass
class CueSet:
    features: Tensor  # [k', d]
    source_indices: np.ndarray  # [k']


def self_info_encode(Z: Tensor, layer: SelfInfoLayer) -> tuple[Tensor, np.ndarray]:
    """Vanilla self-attention + residual/LN/FFN. Returns (Z_tilde, post-softmax scores)."""
    Z = nx.as_tensor(Z)
    n = Z.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, layer.d))), np.zeros((0, 0))
    attn, scores = nx.attention(Z @ layer.WQ, Z @ layer.WK, Z @ layer.WV)
    return layer.ffn(layer.ln(Z + attn)), scores.data


def topk_indices(E: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k largest scores; ties go to the lower index."""
    E = np.asarray(E)
    return np.argsort(-E, axis=-1, kind="stable")[..., : min(k, E.shape[-1])]


def extract_cue(Z_tilde: Tensor, E: np.ndarray, i: int, k: int) -> CueSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = topk_indices(E[i], k)
    return CueSet(nx.as_tensor(Z_tilde)[idx], idx)


def consistency_score(Ca: CueSet, Cb: CueSet, WQ, WK) -> Tensor:
    """Sum over rank l of (Ca[l] WQ).(Cb[l] WK) / sqrt(d), over the shorter cue."""
    n = min(len(Ca.source_indices), len(Cb.source_indices))
    if n == 0:
        raise nx.ContractError("cues must be non-empty")
    a = Ca.features[:n] @ WQ
    b = Cb.features[:n] @ WK
    return (a * b).sum() * (1.0 / math.sqrt(a.shape[-1]))


def pair_scores(Zq: Tensor, Eq: np.ndarray, Zk: Tensor, Ek: np.ndarray, WQ, WK, k: int,
                mode: str = "cue") -> Tensor:
    """All query/key consistency scores [nq, nk] in one product.

    In ``vanilla`` mode the plain feature dot product is used instead of cues.
    """
    Qp = Zq @ WQ
    Kp = Zk @ WK
    d = Qp.shape[-1]
    if mode == "vanilla":
        return (Qp @ Kp.T) * (1.0 / math.sqrt(d))
    if mode != "cue":
        raise ValueError(f"unknown cross mode {mode!r}")
    iq = topk_indices(Eq, k)
    ik = topk_indices(Ek, k)
    n = min(iq.shape[1], ik.shape[1])
    CQ = Qp[iq[:, :n]].reshape(iq.shape[0], n * d)
    CK = Kp[ik[:, :n]].reshape(ik.shape[0], n * d)
    return (CQ @ CK.T) * (1.0 / math.sqrt(d))


def cue_attend(Zq: Tensor, Eq: np.ndarray, Zk: Tensor, Ek: np.ndarray, allowed: np.ndarray,
               layer: CrossLayer, k: int, mode: str = "cue") -> Tensor:
    """Update queries from keys weighted by softmax over permitted consistency scores.

    Queries with no permitted key keep only the residual path before LN/FFN.
    """
    Zq, Zk = nx.as_tensor(Zq), nx.as_tensor(Zk)
    nq, nk = Zq.shape[0], Zk.shape[0]
    if nq == 0:
        return Tensor(np.zeros((0, layer.d)))
    allowed = np.asarray(allowed, dtype=bool).reshape(nq, nk)
    if nk == 0 or not allowed.any():
        return layer.ffn(layer.ln(Zq))
    s = pair_scores(Zq, Eq, Zk, Ek, layer.WQ, layer.WK, k, mode)
    live = allowed.any(axis=1)
    w = nx.softmax(s, axis=-1, mask=np.where(live[:, None], allowed, True))
    Y = (w @ (Zk @ layer.WV)) * live[:, None].astype(np.float64)
    return layer.ffn(layer.ln(Zq + Y))


def cue_cross_attention(Zm: Tensor, Em: np.ndarray, ZB: Tensor, EB: np.ndarray, mask: np.ndarray,
                        block: CueBlock, k: int, mode: str = "cue") -> tuple[Tensor, Tensor]:
    """Both directions from the same self-info outputs. ``mask`` is [M, N] (track, detection)."""
    mask = np.asarray(mask, dtype=bool).reshape(nx.as_tensor(Zm).shape[0], nx.as_tensor(ZB).shape[0])
    YB = cue_attend(ZB, EB, Zm, Em, mask.T, block.det_from_tracks, k, mode)
    Ym = cue_attend(Zm, Em, ZB, EB, mask, block.tracks_from_dets, k, mode)
    return Ym, YB


def cue_consistency(Zm: Tensor, ZB: Tensor, mask: np.ndarray, blocks, k: int, mode: str = "cue"):
    """Run the g rounds; attention scores are recomputed every round.

    Returns (Y_m, Y_B, E_B of the last round).
    """
    EB = np.zeros((0, 0))
    for block in blocks:
        Zm_t, Em = self_info_encode(Zm, block.self_tracks)
        ZB_t, EB = self_info_encode(ZB, block.self_dets)
        Zm, ZB = cue_cross_attention(Zm_t, Em, ZB_t, EB, mask, block, k, mode)
    return Zm, ZB, EB


class PositionHead(Module):
    def __init__(self, d: int, rng: np.random.Generator, out_dim: int = 2):
        self.net = MLP([d, d, out_dim], rng)


def predict_positions(Z_hat: Tensor, head: PositionHead, anchors: np.ndarray | None = None) -> Tensor:
    """BEV position per track; with ``anchors`` the head output is a displacement from them."""
    Z_hat = nx.as_tensor(Z_hat)
    if Z_hat.shape[0] == 0:
        return Tensor(np.zeros((0, head.net.layers[-1].W.shape[1])))
    out = head.net(Z_hat)
    return out if anchors is None else out + anchors


@dataclass
class InteractionMask:
    allowed: np.ndarray  # [M, N] bool


def build_interaction_mask(track_classes, det_classes, predicted_xy, det_xy, thresholds,
                           track_scale=None) -> InteractionMask:
    """Same class and BEV distance to the predicted position within the class threshold.

    ``track_scale`` optionally widens each track's radius (e.g. by frames since last seen).
    """
    tc = np.asarray(track_classes, dtype=int)
    dc = np.asarray(det_classes, dtype=int)
    M, N = len(tc), len(dc)
    if M == 0 or N == 0:
        return InteractionMask(np.zeros((M, N), dtype=bool))
    pred = np.asarray(predicted_xy, dtype=np.float64)[:, :2]
    det = np.asarray(det_xy, dtype=np.float64)[:, :2]
    dist = np.sqrt(((pred[:, None, :] - det[None, :, :]) ** 2).sum(-1))
    radius = np.asarray(thresholds, dtype=np.float64)[tc]
    if track_scale is not None:
        radius = radius * np.asarray(track_scale, dtype=np.float64)
    return InteractionMask((tc[:, None] == dc[None, :]) & (dist <= radius[:, None]))
