"""Synthetic occluded scenes, a small detector, training and per-tier AP."""
from .detector import DetectorSpec, ToyDetector, build_detector
from .evaluation import Metrics, ap_11_point, evaluate_detections, iou, nms
from .scenes import Scene, SceneSpec, generate_scene, make_dataset
from .training import TrainConfig, epochs_to_converge, one_cycle_lr, train

__all__ = [
    "DetectorSpec", "Metrics", "Scene", "SceneSpec", "ToyDetector", "TrainConfig", "ap_11_point",
    "build_detector", "epochs_to_converge", "evaluate_detections", "generate_scene", "iou",
    "make_dataset", "nms", "one_cycle_lr", "train",
]
