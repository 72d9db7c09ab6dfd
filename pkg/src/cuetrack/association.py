"""Affinity, assignment, lifecycle/neighbourhood updates and the training losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, MutableMapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .numerics import MLP, Module, Tensor
from .scene_model import Track


class AffinityHead(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.net = MLP([d, d, 1], rng)


@dataclass
class AffinityMatrix:
    A: Tensor  # [M, N] probabilities
    mask: np.ndarray  # [M, N] bool

    @property
    def values(self) -> np.ndarray:
        return self.A.data


def affinity(Ym: Tensor, YB: Tensor, head: AffinityHead, mask: np.ndarray | None = None) -> AffinityMatrix:
    """sigmoid(MLP(y_m - y_b)) for every track/detection pair."""
    Ym, YB = nx.as_tensor(Ym), nx.as_tensor(YB)
    M, N = Ym.shape[0], YB.shape[0]
    if mask is None:
        mask = np.ones((M, N), dtype=bool)
    if M == 0 or N == 0:
        return AffinityMatrix(Tensor(np.zeros((M, N))), np.asarray(mask, dtype=bool).reshape(M, N))
    d = Ym.shape[1]
    diff = Ym.reshape(M, 1, d) - YB.reshape(1, N, d)
    logits = head.net(diff).reshape(M, N)
    return AffinityMatrix(nx.sigmoid(logits), np.asarray(mask, dtype=bool))


@dataclass
class Assignment:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_dets: list[int] = field(default_factory=list)


def _finish(matches, M, N) -> Assignment:
    mt = {m for m, _, _ in matches}
    md = {n for _, n, _ in matches}
    return Assignment(sorted(matches), [i for i in range(M) if i not in mt], [j for j in range(N) if j not in md])


def assign_greedy(A: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> Assignment:
    """Take eligible pairs by descending score (ties by track, then detection index)."""
    A = np.asarray(A, dtype=np.float64)
    M, N = A.shape
    elig = np.asarray(mask, dtype=bool) & (A >= threshold)
    rows, cols = np.nonzero(elig)
    order = np.lexsort((cols, rows, -A[rows, cols]))
    used_t, used_d, matches = set(), set(), []
    for o in order:
        i, j = int(rows[o]), int(cols[o])
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        matches.append((i, j, float(A[i, j])))
    return _finish(matches, M, N)


def assign_hungarian(A: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> Assignment:
    """Maximum total affinity over eligible pairs (mask-allowed and >= threshold)."""
    A = np.asarray(A, dtype=np.float64)
    M, N = A.shape
    if M == 0 or N == 0:
        return _finish([], M, N)
    elig = np.asarray(mask, dtype=bool) & (A >= threshold)
    w = np.where(elig, A, 0.0)
    rows, cols = linear_sum_assignment(w, maximize=True)
    matches = [(int(i), int(j), float(A[i, j])) for i, j in zip(rows, cols) if elig[i, j]]
    return _finish(matches, M, N)


def assign(aff: AffinityMatrix | np.ndarray, mask: np.ndarray | None = None, threshold: float = 0.5,
           method: str = "greedy") -> Assignment:
    if isinstance(aff, AffinityMatrix):
        A, mask = aff.values, aff.mask if mask is None else mask
    else:
        A = np.asarray(aff)
        mask = np.ones(A.shape, dtype=bool) if mask is None else mask
    if method == "greedy":
        return assign_greedy(A, mask, threshold)
    if method == "hungarian":
        return assign_hungarian(A, mask, threshold)
    raise ValueError(f"unknown assignment method {method!r}")


# ---------------------------------------------------------------- track updates

def update_tracks(tracks: list[Track], assignment: Assignment, det_states: np.ndarray,
                  cue_indices: Sequence[Sequence[int]], frame_index: int,
                  new_id: Callable[[], int], *, t_max: int = 7, k_neighbors: int = 3,
                  max_misses: int = 2, birth_score_min: float = 0.3,
                  det_classes: Sequence[int] | None = None,
                  states_by_frame: MutableMapping[int, dict] | None = None,
                  birth_filter: Callable[[int], bool] | None = None) -> tuple[list[Track], dict[int, int]]:
    """Apply one frame's assignment. Returns (surviving tracks, detection index -> track id).

    Matched and newborn tracks take their neighbour ids from their detection's cue: the
    track ids now attached to the cue's detections, self excluded.
    """
    det_states = np.asarray(det_states, dtype=np.float64)
    det_track: dict[int, int] = {}
    touched: list[tuple[Track, int]] = []
    for ti, di, _ in assignment.matches:
        trk = tracks[ti]
        trk.push(frame_index, det_states[di])
        trk.misses = 0
        det_track[di] = trk.id
        touched.append((trk, di))
    matched = {ti for ti, _, _ in assignment.matches}
    for ti, trk in enumerate(tracks):
        trk.age += 1
        if ti not in matched:
            trk.misses += 1
    born: list[Track] = []
    for di in assignment.unmatched_dets:
        score = det_states[di][-1]
        if score < birth_score_min or (birth_filter is not None and not birth_filter(di)):
            continue
        cls = int(det_classes[di]) if det_classes is not None else int(np.argmax(det_states[di][9:-1]))
        trk = Track(new_id(), cls, t_max=t_max, k_neighbors=k_neighbors)
        trk.push(frame_index, det_states[di])
        det_track[di] = trk.id
        born.append(trk)
        touched.append((trk, di))
    alive = [t for t in tracks if t.misses <= max_misses] + born
    ids = [t.id for t in alive]
    if len(set(ids)) != len(ids):
        raise RuntimeError(f"duplicate track ids after update: {ids}")
    for trk, di in touched:
        cue = cue_indices[di] if di < len(cue_indices) else ()
        trk.set_neighbors(det_track[j] for j in cue if j in det_track)
    live = set(ids)
    for trk in alive:
        trk.neighbor_ids &= live
    if states_by_frame is not None:
        states_by_frame.setdefault(frame_index, {}).update(
            {trk.id: trk.last_state for trk, _ in touched})
    return alive, det_track


# ---------------------------------------------------------------- losses

def focal_loss(A, gt: np.ndarray, mask: np.ndarray, gamma: float = 1.0, alpha: float = -1.0,
               eps: float = 1e-12) -> Tensor:
    """Mean over permitted entries of -(1 - p_t)^gamma log p_t.

    A negative ``alpha`` disables class balancing; otherwise positives weigh ``alpha``
    and negatives ``1 - alpha``.
    """
    A = nx.as_tensor(A)
    gt = np.asarray(gt, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    pt = nx.clip(nx.where(gt, A, 1.0 - A), eps, 1.0)
    loss = -nx.log(pt)
    if gamma != 0:
        loss = loss * (1.0 - pt) ** gamma
    if alpha >= 0:
        loss = loss * np.where(gt, alpha, 1.0 - alpha)
    return (loss * mask.astype(np.float64)).sum() * (1.0 / n)


def position_loss(pred: Tensor, target: np.ndarray, supervised: np.ndarray, delta: float = 1.0) -> Tensor:
    """Smooth-L1 summed over coordinates, averaged over supervised tracks."""
    pred = nx.as_tensor(pred)
    supervised = np.asarray(supervised, dtype=bool)
    n = int(supervised.sum())
    if n == 0:
        return Tensor(0.0)
    target = np.asarray(target, dtype=np.float64)[:, : pred.shape[1]]
    err = pred - np.where(supervised[:, None], target, pred.data)
    return (nx.smooth_l1(err, delta) * supervised[:, None].astype(np.float64)).sum() * (1.0 / n)


def total_loss(l_assoc, l_pos, lambda_p: float = 0.5) -> Tensor:
    return nx.as_tensor(l_assoc) + nx.as_tensor(l_pos) * lambda_p
