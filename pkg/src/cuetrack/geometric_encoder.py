"""Point pair features and geometry-injected attention over object neighbourhoods."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .numerics import MLP, FFN, LayerNorm, Module, Parameter, Tensor
from .scene_model import DetectionNode, Track, encode_state

PPF_DIM = 4


class PPFVector(NamedTuple):
    dist: float
    a1: float  # angle(n_ref, d)
    a2: float  # angle(n_nb, d)
    a3: float  # angle(n_nb, n_ref)


def _unsigned_angle(ux, uy, vx, vy):
    # atan2(|u x v|, u.v) stays accurate near 0 and pi where arccos does not
    return np.arctan2(np.abs(ux * vy - uy * vx), ux * vx + uy * vy)


def ppf_array(ref: np.ndarray, nb: np.ndarray) -> np.ndarray:
    """Vectorised PPF over broadcastable state arrays [..., S] -> [..., 4].

    Distance is 3-D; the three angles live in BEV. Coincident BEV centres give a1 = a2 = 0.
    """
    d = nb[..., 0:3] - ref[..., 0:3]
    dist = np.sqrt((d * d).sum(axis=-1))
    dx, dy = d[..., 0], d[..., 1]
    degenerate = np.hypot(dx, dy) < 1e-9
    ci, si = np.cos(ref[..., 3]), np.sin(ref[..., 3])
    cj, sj = np.cos(nb[..., 3]), np.sin(nb[..., 3])
    a1 = np.where(degenerate, 0.0, _unsigned_angle(ci, si, dx, dy))
    a2 = np.where(degenerate, 0.0, _unsigned_angle(cj, sj, dx, dy))
    a3 = _unsigned_angle(cj, sj, ci, si)
    return np.stack(np.broadcast_arrays(dist, a1, a2, a3), axis=-1)


def ppf(ref: DetectionNode, nb: DetectionNode) -> PPFVector:
    out = ppf_array(encode_state(ref), encode_state(nb))
    return PPFVector(*(float(v) for v in out))


def featurize(states: np.ndarray, origin: np.ndarray, pos_scale: float = 10.0,
              vel_scale: float = 10.0) -> np.ndarray:
    """Fixed input normalisation applied before the shared state MLP.

    [p - origin, sin/cos heading, log size, velocity, class one-hot, score] -> 11 + C values.
    """
    p = (states[..., 0:3] - origin) / pos_scale
    th = states[..., 3:4]
    size = np.log(np.maximum(states[..., 4:7], 1e-3))
    v = states[..., 7:9] / vel_scale
    return np.concatenate([p, np.sin(th), np.cos(th), size, v, states[..., 9:]], axis=-1)


@dataclass
class GeometricTriplet:
    f: Tensor  # [..., 1, d]
    F: Tensor  # [..., k, d]
    R: Tensor  # [..., k, d]
    valid: np.ndarray  # [..., k] bool


class GeometricLayer(Module):
    """Shared state MLP, PPF embedding MLP and one GIA block."""

    def __init__(self, d: int, state_dim: int, rng: np.random.Generator, bands: int = 8,
                 gia_hidden: bool = True, pos_scale: float = 10.0, vel_scale: float = 10.0):
        feat_dim = state_dim + 1  # heading becomes sin/cos
        self.d = d
        self.bands = bands
        self.pos_scale = pos_scale
        self.vel_scale = vel_scale
        self.state_mlp = MLP([feat_dim, d, d], rng)
        self.ppf_mlp = MLP([PPF_DIM * 2 * bands, d, d], rng)
        scale = 1.0 / math.sqrt(d)
        self.Wq = Parameter(rng.normal(0, scale, (d, d)))
        self.WK = Parameter(rng.normal(0, scale, (d, d)))
        self.WV = Parameter(rng.normal(0, scale, (d, d)))
        self.WE = Parameter(rng.normal(0, scale, (d, d)))
        self.WG = Parameter(rng.normal(0, scale, (d, d)))
        self.mlp_gia = MLP([2 * d, d, d] if gia_hidden else [2 * d, d], rng)
        self.ln = LayerNorm(d)
        self.ffn = FFN(d, rng)

    def embed_states(self, states: np.ndarray, origin: np.ndarray) -> Tensor:
        return self.state_mlp(featurize(states, origin, self.pos_scale, self.vel_scale))

    def embed_geometry(self, ref: np.ndarray, nb: np.ndarray) -> Tensor:
        return self.ppf_mlp(nx.sinusoidal_encoding(ppf_array(ref, nb), self.bands))


def build_triplet(ref: np.ndarray, neighbors: np.ndarray, valid: np.ndarray | None,
                  layer: GeometricLayer, origin: np.ndarray, f: Tensor | None = None) -> GeometricTriplet:
    """Triplet for refs [..., S] with neighbours [..., k, S].

    A neighbourhood with zero columns gets one padded, invalid row. ``f`` replaces the
    reference embedding (used when refining features from a previous pass).
    """
    ref = np.asarray(ref, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if valid is None:
        valid = np.ones(neighbors.shape[:-1], dtype=bool)
    if neighbors.shape[-2] == 0:
        neighbors = np.zeros(neighbors.shape[:-2] + (1, neighbors.shape[-1]))
        valid = np.zeros(neighbors.shape[:-1], dtype=bool)
    keep = valid[..., None].astype(np.float64)
    if f is None:
        f = layer.embed_states(ref[..., None, :], origin)
    F = layer.embed_states(neighbors, origin) * keep
    R = layer.embed_geometry(ref[..., None, :], neighbors) * keep
    return GeometricTriplet(f, F, R, valid)


def gia(tri: GeometricTriplet, layer: GeometricLayer) -> tuple[Tensor, Tensor]:
    """Geometry-injected attention of the reference over its neighbours.

    Returns (z [..., d], attention weights [..., 1, k]). Without any valid neighbour the
    attention branch is skipped and z' = f.
    """
    d = layer.d
    q = tri.f @ layer.Wq
    K = tri.F @ layer.WK
    V = tri.F @ layer.WV
    E = tri.R @ layer.WE
    G = tri.R @ layer.WG
    has_nb = tri.valid.any(axis=-1)
    mask = np.where(has_nb[..., None], tri.valid, True)[..., None, :]
    bias = q @ E.swapaxes(-1, -2)
    aV, a = nx.attention(q, K, V, mask=mask, bias=bias)
    aG = a @ G
    msg = layer.mlp_gia(nx.concat([aV, aG], axis=-1))
    z_prime = tri.f + msg * has_nb[..., None, None].astype(np.float64)
    z = layer.ffn(layer.ln(z_prime))
    return z.reshape(z.shape[:-2] + (d,)), a


# ---------------------------------------------------------------- batched encoders

@dataclass
class HistoryBatch:
    """Flattened (track, time) rows; rows of track m are offsets[m]:offsets[m]+lengths[m]."""
    refs: np.ndarray  # [R, S]
    neighbors: np.ndarray  # [R, K, S]
    valid: np.ndarray  # [R, K]
    lengths: np.ndarray  # [M]
    offsets: np.ndarray  # [M]
    lags: np.ndarray  # [R] frames between memory entry and current frame


def gather_histories(tracks: Sequence[Track], states_by_frame: Mapping[int, Mapping[int, np.ndarray]],
                     current_frame: int, state_dim: int) -> HistoryBatch:
    refs, nbs, lags, lengths = [], [], [], []
    for trk in tracks:
        if not trk.memory:
            raise nx.ContractError(f"track {trk.id} has empty memory")
        lengths.append(len(trk.memory))
        order = sorted(trk.neighbor_ids)
        for fi, state in trk.memory:
            at = states_by_frame.get(fi, {})
            refs.append(state)
            nbs.append([at[n] for n in order if n in at])
            lags.append(current_frame - fi)
    kmax = max([1] + [len(n) for n in nbs])
    R = len(refs)
    nb_arr = np.zeros((R, kmax, state_dim))
    valid = np.zeros((R, kmax), dtype=bool)
    for r, rows in enumerate(nbs):
        if rows:
            nb_arr[r, : len(rows)] = rows
            valid[r, : len(rows)] = True
    lengths = np.asarray(lengths, dtype=int)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int) if len(lengths) else lengths
    return HistoryBatch(np.asarray(refs).reshape(R, state_dim), nb_arr, valid, lengths, offsets,
                        np.asarray(lags, dtype=np.float64))


def encode_history_rows(batch: HistoryBatch, layer: GeometricLayer, origin: np.ndarray,
                        f: Tensor | None = None) -> Tensor:
    """GIA output for every (track, time) row: [R, d]."""
    tri = build_triplet(batch.refs, batch.neighbors, batch.valid, layer, origin, f=f)
    z, _ = gia(tri, layer)
    return z


def encode_track_history(track: Track, states_by_frame, layer: GeometricLayer, origin: np.ndarray,
                         current_frame: int | None = None) -> Tensor:
    """Frame-wise geometric features of one track: [T', d]."""
    if current_frame is None:
        current_frame = track.last_frame + 1 if track.memory else 0
    batch = gather_histories([track], states_by_frame, current_frame, len(track.last_state) if track.memory else 0)
    return encode_history_rows(batch, layer, origin)


def neighbor_table(n: int) -> np.ndarray:
    """Row i lists every index except i: [n, n-1]."""
    idx = np.arange(n)
    return np.stack([np.delete(idx, i) for i in range(n)]) if n > 1 else np.zeros((n, 0), dtype=int)


def encode_detections(states: np.ndarray, layer: GeometricLayer, origin: np.ndarray) -> Tensor:
    """Each detection attends over all others in its frame: [N, d]."""
    states = np.asarray(states, dtype=np.float64)
    n = len(states)
    if n == 0:
        return Tensor(np.zeros((0, layer.d)))
    nb = states[neighbor_table(n)]  # [n, n-1, S]
    tri = build_triplet(states, nb, None, layer, origin)
    z, _ = gia(tri, layer)
    return z
