"""Detections, tracks, frames, JSON-lines I/O and the synthetic scene generator."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("car", "pedestrian", "bicycle", "bus", "motorcycle", "trailer", "truck")

# (min, max) speed in m/s per class for the generator; max doubles as the gating statistic
DEFAULT_SPEED_RANGES = (
    (4.0, 12.0), (0.5, 2.0), (2.0, 6.0), (3.0, 10.0), (4.0, 14.0), (2.0, 8.0), (3.0, 10.0),
)
DEFAULT_SIZES = (
    (4.6, 1.9, 1.7), (0.7, 0.7, 1.75), (1.7, 0.6, 1.3), (11.0, 2.9, 3.5),
    (2.1, 0.8, 1.5), (12.0, 2.9, 3.9), (6.9, 2.5, 2.8),
)
DEFAULT_CLASS_PROBS = (0.5, 0.15, 0.05, 0.05, 0.05, 0.05, 0.15)


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def state_dim(num_classes: int = 7) -> int:
    return 10 + num_classes


def wrap_angle(a):
    """Map to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class DetectionNode:
    position: tuple[float, float, float]
    heading: float
    size: tuple[float, float, float]
    velocity: tuple[float, float]
    cls: int
    score: float
    frame_index: int
    num_classes: int = 7
    gt_id: int | None = None
    track_id: int | None = None

    def __post_init__(self):
        if not 0 <= self.cls < self.num_classes:
            raise ConfigError(f"class {self.cls} outside 0..{self.num_classes - 1}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if min(self.size) <= 0:
            raise ValueError(f"sizes must be positive, got {self.size}")


def encode_state(d: DetectionNode, num_classes: int | None = None) -> np.ndarray:
    """[p(3), heading, size(3), vel(2), one-hot class(C), score]."""
    C = d.num_classes if num_classes is None else num_classes
    if C != d.num_classes:
        raise ConfigError(f"detection has {d.num_classes} classes, config expects {C}")
    onehot = np.zeros(C)
    onehot[d.cls] = 1.0
    return np.concatenate([d.position, [d.heading], d.size, d.velocity, onehot, [d.score]]).astype(np.float64)


def decode_state(vec: Sequence[float], frame_index: int, num_classes: int = 7, **extra) -> DetectionNode:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (state_dim(num_classes),):
        raise ConfigError(f"state length {vec.shape} does not match {num_classes} classes")
    onehot = vec[9:9 + num_classes]
    if np.count_nonzero(onehot) != 1 or onehot.max() != 1.0:
        raise ValueError("class block is not one-hot")
    return DetectionNode(
        position=tuple(float(v) for v in vec[0:3]),
        heading=float(vec[3]),
        size=tuple(float(v) for v in vec[4:7]),
        velocity=(float(vec[7]), float(vec[8])),
        cls=int(np.argmax(onehot)),
        score=float(vec[-1]),
        frame_index=frame_index,
        num_classes=num_classes,
        **extra,
    )


@dataclass
class Track:
    id: int
    cls: int
    t_max: int = 7
    k_neighbors: int = 3
    memory: deque = field(default_factory=deque)  # (frame_index, state) pairs
    neighbor_ids: set = field(default_factory=set)
    age: int = 0
    misses: int = 0
    gt_id: int | None = None  # training-time lineage only

    def __post_init__(self):
        self.memory = deque(self.memory, maxlen=self.t_max)

    def push(self, frame_index: int, state: np.ndarray) -> None:
        if self.memory and frame_index <= self.memory[-1][0]:
            raise ValueError(f"track {self.id}: frame {frame_index} not after {self.memory[-1][0]}")
        self.memory.append((frame_index, np.asarray(state, dtype=np.float64)))

    def set_neighbors(self, ids: Iterable[int]) -> None:
        out = []
        for i in ids:
            if i != self.id and i not in out:
                out.append(i)
        self.neighbor_ids = set(out[: self.k_neighbors])

    @property
    def last_frame(self) -> int:
        return self.memory[-1][0]

    @property
    def last_state(self) -> np.ndarray:
        return self.memory[-1][1]


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp: float
    detections: tuple[DetectionNode, ...] = ()

    def __post_init__(self):
        for d in self.detections:
            if d.frame_index != self.index:
                raise ValueError(f"detection frame {d.frame_index} in frame {self.index}")

    def states(self, num_classes: int = 7) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, state_dim(num_classes)))
        return np.stack([encode_state(d, num_classes) for d in self.detections])


@dataclass(frozen=True)
class GroundTruthSequence:
    frames: tuple[Frame, ...]

    def __post_init__(self):
        for f in self.frames:
            ids = [d.gt_id for d in f.detections]
            if None in ids or len(set(ids)) != len(ids):
                raise ValueError(f"frame {f.index}: gt ids missing or repeated")


# ---------------------------------------------------------------- JSON lines

def detection_to_record(d: DetectionNode, timestamp: float) -> dict:
    rec = {
        "frame": d.frame_index,
        "t": timestamp,
        "p": list(d.position),
        "theta": d.heading,
        "size": list(d.size),
        "vel": list(d.velocity),
        "class": d.cls,
        "score": d.score,
    }
    if d.gt_id is not None:
        rec["gt_id"] = d.gt_id
    if d.track_id is not None:
        rec["track_id"] = d.track_id
    return rec


def write_frames(path, frames: Iterable[Frame]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in frames:
            for d in f.detections:
                fh.write(json.dumps(detection_to_record(d, f.timestamp), separators=(",", ":")) + "\n")


_REQUIRED = ("frame", "t", "p", "theta", "size", "vel", "class", "score")


def _parse_record(rec: dict, lineno: int, num_classes: int) -> tuple[float, DetectionNode]:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise SchemaError(f"line {lineno}: missing field(s) {missing}")
    try:
        p, size, vel = rec["p"], rec["size"], rec["vel"]
        if len(p) != 3 or len(size) != 3 or len(vel) != 2:
            raise SchemaError(f"line {lineno}: wrong vector length in p/size/vel")
        det = DetectionNode(
            position=tuple(float(v) for v in p),
            heading=float(rec["theta"]),
            size=tuple(float(v) for v in size),
            velocity=tuple(float(v) for v in vel),
            cls=int(rec["class"]),
            score=float(rec["score"]),
            frame_index=int(rec["frame"]),
            num_classes=num_classes,
            gt_id=None if rec.get("gt_id") is None else int(rec["gt_id"]),
            track_id=None if rec.get("track_id") is None else int(rec["track_id"]),
        )
    except SchemaError:
        raise
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: {exc}") from exc
    return float(rec["t"]), det


def ingest_detections(path, num_classes: int = 7) -> list[Frame]:
    """Read a JSON-lines detection (or track) file into frames sorted by index."""
    by_frame: dict[int, list] = {}
    stamps: dict[int, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise SchemaError(f"line {lineno}: expected a JSON object")
            t, det = _parse_record(rec, lineno, num_classes)
            by_frame.setdefault(det.frame_index, []).append(det)
            stamps.setdefault(det.frame_index, t)
    return [Frame(i, stamps[i], tuple(by_frame[i])) for i in sorted(by_frame)]


def fill_frame_gaps(frames: Sequence[Frame]) -> list[Frame]:
    """Insert empty frames for missing indices, timestamps interpolated linearly."""
    out: list[Frame] = []
    for f in frames:
        if out:
            prev = out[-1]
            gap = f.index - prev.index
            for j in range(1, gap):
                t = prev.timestamp + (f.timestamp - prev.timestamp) * j / gap
                out.append(Frame(prev.index + j, t, ()))
        out.append(f)
    return out


# ---------------------------------------------------------------- thresholds

def class_distance_thresholds(max_speeds: Sequence[float], dt: float, margin: float = 1.5,
                              floor: float = 1.0) -> np.ndarray:
    """Gating radius per class: max_speed * dt * margin, never below ``floor``."""
    speeds = np.asarray(max_speeds, dtype=np.float64)
    if speeds.ndim != 1 or (speeds < 0).any():
        raise ConfigError("max speeds must be a non-negative vector, one per class")
    return np.maximum(speeds * dt * margin, floor)


# ---------------------------------------------------------------- generator

@dataclass
class SceneConfig:
    n_objects: int = 8
    n_frames: int = 10
    dt: float = 0.5
    arena: float = 50.0  # half-extent in metres
    num_classes: int = 7
    class_probs: tuple = DEFAULT_CLASS_PROBS
    speed_ranges: tuple = DEFAULT_SPEED_RANGES
    sizes: tuple = DEFAULT_SIZES
    max_turn_rate: float = 0.15  # rad/s
    sigma_pos: float = 0.0
    sigma_heading: float = 0.0
    sigma_size: float = 0.0
    sigma_vel: float = 0.0
    sigma_score: float = 0.0
    drop_prob: float = 0.0
    clutter_rate: float = 0.0
    occlusions: tuple = ()  # (object index, start frame, length)
    layout: str = "random"  # random | separated | crossing
    lane_spacing: float = 15.0
    cross_radius: float = 15.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("drop_prob",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        for name in ("sigma_pos", "sigma_heading", "sigma_size", "sigma_vel", "sigma_score",
                     "clutter_rate", "max_turn_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_objects < 0 or self.n_frames < 0 or self.dt <= 0:
            raise ConfigError("n_objects, n_frames must be >= 0 and dt > 0")
        for name in ("class_probs", "speed_ranges", "sizes"):
            if len(getattr(self, name)) != self.num_classes:
                raise ConfigError(f"{name} needs one entry per class ({self.num_classes})")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ConfigError("class_probs must sum to 1")
        if self.layout not in ("random", "separated", "crossing"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        for occ in self.occlusions:
            if len(occ) != 3 or occ[1] < 0 or occ[2] < 0:
                raise ConfigError(f"occlusion entries are (object, start, length): {occ}")

    @property
    def max_speeds(self) -> list[float]:
        return [hi for _, hi in self.speed_ranges]


def _initial_states(cfg: SceneConfig, rng: np.random.Generator):
    n = cfg.n_objects
    cls = rng.choice(cfg.num_classes, size=n, p=np.asarray(cfg.class_probs))
    lo = np.array([cfg.speed_ranges[c][0] for c in cls])
    hi = np.array([cfg.speed_ranges[c][1] for c in cls])
    speed = rng.uniform(lo, hi)
    turn = rng.uniform(-cfg.max_turn_rate, cfg.max_turn_rate, size=n)
    duration = cfg.n_frames * cfg.dt
    if cfg.layout == "random":
        xy = rng.uniform(-cfg.arena, cfg.arena, size=(n, 2))
        heading = rng.uniform(-math.pi, math.pi, size=n)
    elif cfg.layout == "separated":
        # one object per lane, alternating direction, no turning
        turn[:] = 0.0
        lanes = (np.arange(n) - (n - 1) / 2) * cfg.lane_spacing
        heading = np.where(np.arange(n) % 2 == 0, 0.0, -math.pi)
        travel = speed * duration
        x0 = np.where(heading == 0.0, -travel / 2, travel / 2) + rng.uniform(-5, 5, size=n)
        xy = np.stack([x0, lanes], axis=1)
    else:  # crossing: aim at points near the centre, arriving mid-sequence
        aim = rng.uniform(-1, 1, size=(n, 2)) * cfg.cross_radius
        heading = rng.uniform(-math.pi, math.pi, size=n)
        arrive = rng.uniform(0.3, 0.7, size=n) * duration
        back = speed * arrive
        xy = aim - back[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        turn[:] = 0.0
    scale = rng.uniform(0.85, 1.15, size=(n, 3))
    size = np.array([cfg.sizes[c] for c in cls]).reshape(n, 3) * scale
    return cls, xy, np.asarray(heading, dtype=np.float64), speed, turn, size


def generate_scene(cfg: SceneConfig) -> tuple[GroundTruthSequence, list[Frame]]:
    """Constant-speed, bounded-turn-rate objects; noisy, dropped and cluttered detections."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C = cfg.num_classes
    cls, xy, heading, speed, turn, size = _initial_states(cfg, rng)
    occluded = {(o, f) for o, s, length in cfg.occlusions for f in range(s, s + length)}

    gt_frames, det_frames = [], []
    for fi in range(cfg.n_frames):
        t = fi * cfg.dt
        gts, dets = [], []
        for i in range(cfg.n_objects):
            vel = speed[i] * np.array([math.cos(heading[i]), math.sin(heading[i])])
            pos = (float(xy[i, 0]), float(xy[i, 1]), float(size[i, 2] / 2))
            gt = DetectionNode(pos, float(wrap_angle(heading[i])), tuple(float(s) for s in size[i]),
                               (float(vel[0]), float(vel[1])), int(cls[i]), 1.0, fi, C, gt_id=i)
            gts.append(gt)
            dropped = rng.random() < cfg.drop_prob
            noise = rng.normal(size=10)
            if dropped or (i, fi) in occluded:
                continue
            dets.append(_perturb(gt, cfg, noise))
        for _ in range(rng.poisson(cfg.clutter_rate) if cfg.clutter_rate > 0 else 0):
            dets.append(_clutter(cfg, rng, fi))
        gt_frames.append(Frame(fi, t, tuple(gts)))
        det_frames.append(Frame(fi, t, tuple(dets)))
        # advance kinematics
        xy = xy + (speed * cfg.dt)[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        heading = heading + turn * cfg.dt
    return GroundTruthSequence(tuple(gt_frames)), det_frames


def _perturb(gt: DetectionNode, cfg: SceneConfig, z: np.ndarray) -> DetectionNode:
    if cfg.sigma_pos == cfg.sigma_heading == cfg.sigma_size == cfg.sigma_vel == cfg.sigma_score == 0:
        return gt
    p = np.asarray(gt.position) + cfg.sigma_pos * z[0:3]
    s = np.maximum(np.asarray(gt.size) + cfg.sigma_size * z[4:7], 0.05)
    v = np.asarray(gt.velocity) + cfg.sigma_vel * z[7:9]
    score = float(np.clip(1.0 - abs(cfg.sigma_score * z[9]), 0.0, 1.0))
    return DetectionNode(tuple(float(x) for x in p), float(wrap_angle(gt.heading + cfg.sigma_heading * z[3])),
                         tuple(float(x) for x in s), (float(v[0]), float(v[1])), gt.cls, score,
                         gt.frame_index, gt.num_classes, gt_id=gt.gt_id)


def _clutter(cfg: SceneConfig, rng: np.random.Generator, fi: int) -> DetectionNode:
    c = int(rng.integers(cfg.num_classes))
    xy = rng.uniform(-cfg.arena, cfg.arena, size=2)
    h = float(rng.uniform(-math.pi, math.pi))
    spd = float(rng.uniform(*cfg.speed_ranges[c]))
    size = np.asarray(cfg.sizes[c]) * rng.uniform(0.85, 1.15, size=3)
    return DetectionNode((float(xy[0]), float(xy[1]), float(size[2] / 2)), float(wrap_angle(h)),
                         tuple(float(s) for s in size), (spd * math.cos(h), spd * math.sin(h)),
                         c, float(rng.uniform(0.1, 0.5)), fi, cfg.num_classes)
