"""Cue-consistency 3D multi-object tracking with a small numpy autodiff core."""

from .config import TrainConfig
from .model import CueTrackModel, load_model, save_model
from .scene_model import DetectionNode, Frame, SceneConfig, Track, generate_scene
from .tracker import Tracker, track_sequence

__all__ = [
    "CueTrackModel",
    "DetectionNode",
    "Frame",
    "SceneConfig",
    "Track",
    "TrainConfig",
    "Tracker",
    "generate_scene",
    "load_model",
    "save_model",
    "track_sequence",
]

__version__ = "0.1.0"
