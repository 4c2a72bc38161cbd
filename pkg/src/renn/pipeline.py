"""Two-stage training, inference and detection metrics.

Stage 1 fits the local block ``f`` on per-sample R-peak labels. Stage 2 freezes
``f``, computes the feature map F and the rule map R for every record, and fits
the global block ``g`` on the 3-channel input ``[X; R; F_pos]``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorops as ops
from .ecgsynth import EcgRecord
from .errors import ConfigError, PreconditionError, RennError, UsageError
from .fcn import FcnConfig, Model, build_fcn, pad_to_pool
from .rules import CANDIDATE_MIN_SEP_S, CANDIDATE_THRESHOLD, pick_candidates, rule_modulate

log = logging.getLogger(__name__)

W_POS_CAP = 100.0
TABLE_HEADER = ["type", "channels", "tp", "fp", "fn", "f1"]


@dataclass
class TrainConfig:
    channels: int = 8
    epochs: int = 20
    lr0: float = 1e-4
    decay_rate: float = 0.99
    decay_every_steps: int = 1000
    w_pos: float | str = "auto"
    seed: int = 0
    stage: int = 1

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("decay_rate must lie in (0, 1]")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.decay_every_steps < 1:
            raise ConfigError("decay_every_steps must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.w_pos != "auto" and not float(self.w_pos) > 0:
            raise ConfigError("w_pos must be positive or 'auto'")


@dataclass
class LossHistory:
    epoch_loss: list[float] = field(default_factory=list)
    learning_rates: list[tuple[int, float]] = field(default_factory=list)  # (step, lr) per epoch start


@dataclass
class InferenceTrace:
    x: np.ndarray
    f_pos: np.ndarray
    r: np.ndarray
    o_pos: np.ndarray
    detected: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        lengths = {len(self.x), len(self.f_pos), len(self.r), len(self.o_pos)}
        if len(lengths) != 1:
            raise RennError(f"trace series lengths differ: {sorted(lengths)}")


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def __add__(self, other: "DetectionReport") -> "DetectionReport":
        return DetectionReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_rate ** (step // cfg.decay_every_steps)


def auto_pos_weight(records: Sequence[EcgRecord]) -> float:
    pos = sum(r.labels.size for r in records)
    total = sum(len(r) for r in records)
    if pos == 0:
        return W_POS_CAP
    return min(W_POS_CAP, (total - pos) / pos)


def resolve_pos_weight(records, cfg: TrainConfig) -> float:
    return auto_pos_weight(records) if cfg.w_pos == "auto" else float(cfg.w_pos)


def standardize(x) -> np.ndarray:
    """Scale a signal to unit standard deviation (network input convention)."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return x / sd if sd > 0 else x.copy()


def _fit(model: Model, inputs: list[np.ndarray], targets: list[np.ndarray], w_pos: float,
         cfg: TrainConfig, label: str) -> LossHistory:
    """Adam over one record per step, shuffled each epoch."""
    rng = np.random.default_rng(cfg.seed)
    padded = [pad_to_pool(x)[0] for x in inputs]
    params = model.parameters()
    state = ops.AdamState.zeros_like(params)
    history = LossHistory()
    model.unfreeze()
    step = 0
    for epoch in range(cfg.epochs):
        history.learning_rates.append((step, learning_rate(step, cfg)))
        total = 0.0
        for i in rng.permutation(len(inputs)):
            y = targets[i]
            n = y.size
            probs = model.forward(padded[i], keep_cache=True)
            total += ops.weighted_cross_entropy(probs[:, :n], y, w_pos)
            grad = np.zeros_like(probs)
            grad[:, :n] = ops.softmax_cross_entropy_backward(probs[:, :n], y, w_pos)
            ops.adam_step(params, model.backward(grad), state, learning_rate(step, cfg))
            step += 1
        history.epoch_loss.append(total / len(inputs))
        log.info("%s epoch %d/%d loss %.6g", label, epoch + 1, cfg.epochs, history.epoch_loss[-1])
    model.freeze()
    return history


def _check_records(records):
    if not records:
        raise PreconditionError("training set is empty")
    if len({r.fs for r in records}) != 1:
        raise PreconditionError("all training records must share fs")


def train_stage1(records: Sequence[EcgRecord], cfg: TrainConfig) -> tuple[Model, LossHistory]:
    """Fit the local feature-mapping block. Returns it frozen."""
    cfg.validate()
    _check_records(records)
    f = build_fcn(FcnConfig(in_channels=1, hidden_channels=cfg.channels, seed=cfg.seed))
    hist = _fit(f, [standardize(r.signal)[None, :] for r in records], [r.label_mask() for r in records],
                resolve_pos_weight(records, cfg), cfg, "stage1")
    return f, hist


def feature_map(f: Model, x) -> np.ndarray:
    padded, n = pad_to_pool(x)
    return f.forward(padded)[:, :n]


def global_input(f: Model, record: EcgRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(g_input, F, R)`` for one record; ``g_input`` is [X; R; F_pos].

    X is the standardized signal, the same input the local block sees. The R
    channel is the rule map with widths and offsets measured in seconds, which
    is the samples-unit map scaled by fs; ``R`` itself is returned in samples.
    """
    x = standardize(record.signal)
    fm = feature_map(f, x)
    r = rule_modulate(fm, record.fs)
    return np.vstack([x, r * record.fs, fm[1]]), fm, r


def train_stage2(records: Sequence[EcgRecord], f: Model, cfg: TrainConfig) -> tuple[Model, LossHistory]:
    """Fit the global block with ``f`` frozen. Returns ``g`` frozen."""
    cfg.validate()
    _check_records(records)
    if f.mode != "infer":
        raise UsageError("stage 2 needs a frozen feature-mapping block (call f.freeze())")
    inputs = [global_input(f, r)[0] for r in records]
    g = build_fcn(FcnConfig(in_channels=3, hidden_channels=cfg.channels, seed=cfg.seed + 1))
    hist = _fit(g, inputs, [r.label_mask() for r in records],
                resolve_pos_weight(records, cfg), cfg, "stage2")
    return g, hist


def detect(prob_pos, fs) -> np.ndarray:
    return pick_candidates(prob_pos, CANDIDATE_THRESHOLD, CANDIDATE_MIN_SEP_S, fs)


def infer_local(f: Model, record: EcgRecord) -> np.ndarray:
    return detect(feature_map(f, standardize(record.signal))[1], record.fs)


def infer(f: Model, g: Model, record: EcgRecord, train_fs: int | None = None) -> InferenceTrace:
    if f.mode != "infer" or g.mode != "infer":
        raise UsageError("both models must be frozen for inference")
    if train_fs is not None and record.fs != train_fs:
        raise PreconditionError(f"record fs={record.fs} differs from training fs={train_fs}")
    g_in, fm, r = global_input(f, record)
    out = feature_map(g, g_in)
    return InferenceTrace(record.signal.copy(), fm[1], r, out[1], detect(out[1], record.fs),
                          record.labels.copy())


def evaluate(detected, labels, tolerance_samples: int = 2) -> DetectionReport:
    """Greedy one-to-one matching in time order with an inclusive tolerance."""
    d = np.asarray(detected, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if np.any(np.diff(d) < 0) or np.any(np.diff(y) < 0):
        raise PreconditionError("detections and labels must be sorted")
    tp = 0
    j = 0
    for det in d:
        while j < y.size and y[j] < det - tolerance_samples:
            j += 1
        if j < y.size and y[j] <= det + tolerance_samples:
            tp += 1
            j += 1
    return DetectionReport(tp, d.size - tp, y.size - tp)


def evaluate_records(records, detector, tolerance_samples: int = 2) -> DetectionReport:
    total = DetectionReport(0, 0, 0)
    for rec in records:
        total = total + evaluate(detector(rec), rec.labels, tolerance_samples)
    return total


@dataclass(frozen=True)
class TableRow:
    type: str
    channels: int
    report: DetectionReport

    def fields(self) -> list[str]:
        r = self.report
        return [self.type, str(self.channels), str(r.tp), str(r.fp), str(r.fn), f"{r.f1:.4f}"]


def format_table(rows: Sequence[TableRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for row in rows:
        writer.writerow(row.fields())
    return buf.getvalue()


@dataclass
class ExperimentResult:
    rows: list[TableRow]
    models: dict[int, tuple[Model, Model]]
    histories: dict[int, tuple[LossHistory, LossHistory]]

    def table(self) -> str:
        return format_table(self.rows)


def run_experiment(train: Sequence[EcgRecord], test: Sequence[EcgRecord], channels: Sequence[int],
                   cfg: TrainConfig, tolerance_samples: int = 2) -> ExperimentResult:
    """Local-only versus full two-stage model for each channel count."""
    rows, models, histories = [], {}, {}
    for c in channels:
        ccfg = TrainConfig(**{**cfg.__dict__, "channels": c})
        f, h1 = train_stage1(train, ccfg)
        local = evaluate_records(test, lambda rec: infer_local(f, rec), tolerance_samples)
        g, h2 = train_stage2(train, f, ccfg)
        glob = evaluate_records(test, lambda rec: infer(f, g, rec).detected, tolerance_samples)
        rows += [TableRow("local", c, local), TableRow("global", c, glob)]
        models[c] = (f, g)
        histories[c] = (h1, h2)
        log.info("C=%d local F1 %.4f global F1 %.4f", c, local.f1, glob.f1)
    rows.sort(key=lambda r: (r.type != "local", r.channels))
    return ExperimentResult(rows, models, histories)


def tolerance_ms_to_samples(tolerance_ms: float, fs: int) -> tuple[int, bool]:
    """Whole samples within the tolerance and whether rounding down was needed."""
    exact = tolerance_ms * fs / 1000.0
    samples = math.floor(exact + 1e-9)
    return samples, abs(exact - samples) > 1e-9
