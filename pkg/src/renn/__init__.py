"""Rule-embedded fully convolutional networks for ECG R-peak detection."""

from .ecgsynth import EcgRecord, NoiseConfig, SynthConfig
from .fcn import FcnConfig, Model, build_fcn, load_weights, save_weights
from .pipeline import (DetectionReport, InferenceTrace, TrainConfig, evaluate, infer,
                       run_experiment, train_stage1, train_stage2)
from .rules import rule_modulate

__version__ = "0.1.0"
