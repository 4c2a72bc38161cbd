"""Synthetic single-lead ECG records, noise models, filtering and CSV datasets."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (
    ConfigError,
    DatasetParseError,
    LabelOrderError,
    MalformedRowError,
    SampleRateMismatchError,
)

# P, Q, R, S, T
WAVE_OFFSETS_S = (-0.20, -0.05, 0.0, 0.05, 0.30)
WAVE_WIDTHS_S = (0.04, 0.01, 0.012, 0.012, 0.06)
WAVE_AMPLITUDES = (0.15, -0.1, 1.0, -0.25, 0.35)
T_WAVE_EXTENT_S = WAVE_OFFSETS_S[4] + 3 * WAVE_WIDTHS_S[4]

HIGHPASS_HZ = 1.0
LOWPASS_HZ = 32.0
DATASET_VERSION = 1
RECORD_HEADER = ["sample", "voltage_mv", "label"]
MANIFEST_HEADER = ["path", "split"]
RR_RANGE = (0.3, 1.5)


@dataclass(frozen=True)
class NoiseConfig:
    white_sigma_mv: float = 0.0
    baseline_amp_mv: float = 0.0
    baseline_freq_hz: float = 0.3
    ac_amp_mv: float = 0.0
    ac_freq_hz: float = 50.0
    dropout_prob: float = 0.0
    # beats kept (and labelled) but shrunk by a factor in weak_beat_scale
    weak_beat_prob: float = 0.0
    weak_beat_scale: tuple[float, float] = (0.25, 0.5)
    # short QRS-like bursts (motion / muscle artifacts) per second of record
    artifact_rate_hz: float = 0.0
    artifact_amp_mv: float = 0.0


NOISE_LEVELS = {
    0: NoiseConfig(),
    1: NoiseConfig(white_sigma_mv=0.02, baseline_amp_mv=0.1, ac_amp_mv=0.03,
                   weak_beat_prob=0.05, artifact_rate_hz=0.2, artifact_amp_mv=0.3),
    2: NoiseConfig(white_sigma_mv=0.04, baseline_amp_mv=0.2, ac_amp_mv=0.05, dropout_prob=0.01,
                   weak_beat_prob=0.08, artifact_rate_hz=0.3, artifact_amp_mv=0.5),
    3: NoiseConfig(white_sigma_mv=0.06, baseline_amp_mv=0.3, ac_amp_mv=0.1, dropout_prob=0.03,
                   weak_beat_prob=0.12, artifact_rate_hz=0.5, artifact_amp_mv=0.7),
}


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 12.0
    fs: int = 125
    mean_rr_s: float = 0.8
    rr_jitter_s: float = 0.02
    r_amplitude_mv: float = 1.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def validate(self):
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.fs <= 0:
            raise ConfigError("fs must be positive")
        if not RR_RANGE[0] <= self.mean_rr_s <= RR_RANGE[1]:
            raise ConfigError(f"mean_rr_s must lie in {RR_RANGE}")
        if self.rr_jitter_s < 0 or self.mean_rr_s <= 4 * self.rr_jitter_s:
            raise ConfigError("need 0 <= rr_jitter_s < mean_rr_s / 4")
        if self.r_amplitude_mv <= 0:
            raise ConfigError("r_amplitude_mv must be positive")


@dataclass
class EcgRecord:
    signal: np.ndarray
    labels: np.ndarray
    fs: int = 125
    record_id: str = ""

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.signal.size

    def label_mask(self) -> np.ndarray:
        y = np.zeros(self.signal.size)
        y[self.labels] = 1.0
        return y


def beat_times(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    times = []
    t = 0.5 * cfg.mean_rr_s
    while t + T_WAVE_EXTENT_S <= cfg.duration_s:
        times.append(t)
        eta = rng.normal(0.0, cfg.rr_jitter_s) if cfg.rr_jitter_s > 0 else 0.0
        eta = float(np.clip(eta, -3 * cfg.rr_jitter_s, 3 * cfg.rr_jitter_s))
        t = t + cfg.mean_rr_s + eta
    return np.array(times)


def _render_beat(t_beat: float, n: int, fs: int) -> tuple[np.ndarray, slice]:
    lo = max(0, int(math.floor((t_beat - 0.4) * fs)))
    hi = min(n, int(math.ceil((t_beat + 0.6) * fs)) + 1)
    tt = np.arange(lo, hi) / fs - t_beat
    wave = np.zeros(hi - lo)
    for off, width, amp in zip(WAVE_OFFSETS_S, WAVE_WIDTHS_S, WAVE_AMPLITUDES):
        wave += amp * np.exp(-0.5 * ((tt - off) / width) ** 2)
    return wave, slice(lo, hi)


def synth_ecg(cfg: SynthConfig, record_id: str = "") -> EcgRecord:
    """Render a clean PQRST beat train. Noise is added separately by ``add_noise``.

    Each beat is scaled so its own sampled maximum equals ``r_amplitude_mv``
    (times a shrink factor for weak beats); the label is the sample of that
    maximum. Dropped beats leave neither waveform nor label.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration_s * cfg.fs))
    sig = np.zeros(n)
    labels = []
    times = beat_times(cfg, rng)
    keep = rng.random(times.size) >= cfg.noise.dropout_prob
    weak = rng.random(times.size) < cfg.noise.weak_beat_prob
    shrink = rng.uniform(*cfg.noise.weak_beat_scale, size=times.size)
    for t_beat, kept, is_weak, factor in zip(times, keep, weak, shrink):
        if not kept:
            continue
        wave, sl = _render_beat(t_beat, n, cfg.fs)
        peak = int(np.argmax(wave))
        amp = cfg.r_amplitude_mv * (factor if is_weak else 1.0)
        sig[sl] += wave * (amp / wave[peak])
        labels.append(sl.start + peak)
    return EcgRecord(sig, np.array(labels, dtype=np.int64), cfg.fs, record_id)


def add_noise(record: EcgRecord, noise: NoiseConfig, seed: int = 0) -> EcgRecord:
    """Add white noise, baseline wander, mains interference and artifact bursts."""
    rng = np.random.default_rng(seed)
    n = len(record)
    t = np.arange(n) / record.fs
    out = record.signal.copy()
    if noise.white_sigma_mv > 0:
        out += rng.normal(0.0, noise.white_sigma_mv, n)
    if noise.baseline_amp_mv > 0:
        out += noise.baseline_amp_mv * np.sin(
            2 * np.pi * noise.baseline_freq_hz * t + rng.uniform(0, 2 * np.pi))
    if noise.ac_amp_mv > 0:
        out += noise.ac_amp_mv * np.sin(2 * np.pi * noise.ac_freq_hz * t + rng.uniform(0, 2 * np.pi))
    if noise.artifact_rate_hz > 0 and noise.artifact_amp_mv > 0:
        count = rng.poisson(noise.artifact_rate_hz * n / record.fs)
        for _ in range(count):
            center = rng.uniform(0, n / record.fs)
            width = rng.uniform(0.01, 0.03)
            amp = noise.artifact_amp_mv * rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
            out += amp * np.exp(-0.5 * ((t - center) / width) ** 2)
    return replace(record, signal=out, labels=record.labels.copy())


def bandpass(record: EcgRecord) -> EcgRecord:
    """Zero-phase 1-32 Hz band-pass (2-pole high-pass, 4-pole low-pass, forward-backward)."""
    if record.fs <= 2 * LOWPASS_HZ:
        raise ConfigError("bandpass needs fs > 64 Hz")
    sos = np.vstack([
        sps.butter(2, HIGHPASS_HZ, btype="highpass", fs=record.fs, output="sos"),
        sps.butter(4, LOWPASS_HZ, btype="lowpass", fs=record.fs, output="sos"),
    ])
    return replace(record, signal=sps.sosfiltfilt(sos, record.signal),
                   labels=record.labels.copy())


# -- default dataset -------------------------------------------------------------

def record_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0])


def default_record(index: int, base_seed: int = 0, noise_level: int = 1,
                   duration_s: float = 12.0, fs: int = 125,
                   mean_rr_range=(0.6, 1.0), rr_jitter_s: float = 0.02,
                   amplitude_range=(0.2, 1.0)) -> EcgRecord:
    seed = record_seed(base_seed, index)
    rng = np.random.default_rng(seed)
    noise = NOISE_LEVELS[noise_level] if isinstance(noise_level, int) else noise_level
    cfg = SynthConfig(duration_s=duration_s, fs=fs,
                      mean_rr_s=float(rng.uniform(*mean_rr_range)),
                      rr_jitter_s=rr_jitter_s,
                      r_amplitude_mv=float(rng.uniform(*amplitude_range)),
                      noise=noise, seed=int(rng.integers(2 ** 63)))
    rec = synth_ecg(cfg, record_id=f"rec{index:05d}")
    rec = add_noise(rec, noise, seed=int(rng.integers(2 ** 63)))
    return bandpass(rec)


def make_dataset(count: int, base_seed: int = 0, noise_level=1, train_fraction: float = 0.8,
                 **kwargs) -> tuple[list[EcgRecord], list[str]]:
    """Records plus a split tag per record; the first 80% are train."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    records = [default_record(i, base_seed, noise_level, **kwargs) for i in range(count)]
    n_train = int(round(train_fraction * count))
    splits = ["train"] * n_train + ["test"] * (count - n_train)
    return records, splits


# -- CSV dataset format ----------------------------------------------------------

def record_to_csv(record: EcgRecord) -> str:
    buf = io.StringIO()
    buf.write(",".join(RECORD_HEADER) + "\n")
    mask = record.label_mask().astype(int)
    for i, (v, y) in enumerate(zip(record.signal, mask)):
        buf.write(f"{i},{v:.17g},{y}\n")
    return buf.getvalue()


def write_record(record: EcgRecord, path) -> None:
    Path(path).write_text(record_to_csv(record), encoding="utf-8", newline="\n")


def read_record(path, fs: int = 125) -> EcgRecord:
    path = Path(path)
    rows = list(csv.reader(path.read_text(encoding="utf-8").splitlines()))
    if not rows or [h.strip() for h in rows[0]] != RECORD_HEADER:
        raise MalformedRowError(f"{path}: header must be {','.join(RECORD_HEADER)}")
    signal, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise MalformedRowError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            sample, volt, flag = int(row[0]), float(row[1]), int(row[2])
        except ValueError as exc:
            raise MalformedRowError(f"{path}:{lineno}: {exc}") from None
        if sample != len(signal):
            raise LabelOrderError(f"{path}:{lineno}: sample index {sample} out of sequence")
        if flag not in (0, 1):
            raise MalformedRowError(f"{path}:{lineno}: label must be 0 or 1, got {flag}")
        if not math.isfinite(volt):
            raise MalformedRowError(f"{path}:{lineno}: non-finite voltage")
        signal.append(volt)
        if flag:
            labels.append(sample)
    return EcgRecord(np.array(signal), np.array(labels, dtype=np.int64), fs, path.stem)


@dataclass
class DatasetManifest:
    paths: list[str]
    splits: list[str]
    fs: int = 125
    version: int = DATASET_VERSION

    def split(self, name: str) -> list[str]:
        return [p for p, s in zip(self.paths, self.splits) if s == name]


def write_dataset(records, splits, directory) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fs_values = {r.fs for r in records}
    if len(fs_values) > 1:
        raise ConfigError("all records in a dataset must share fs")
    fs = fs_values.pop() if fs_values else 125
    paths = []
    for i, rec in enumerate(records):
        name = f"{rec.record_id or f'rec{i:05d}'}.csv"
        write_record(rec, directory / name)
        paths.append(name)
    if len(set(paths)) != len(paths):
        raise ConfigError("record ids must be unique")
    manifest = DatasetManifest(paths, list(splits), fs)
    write_manifest(manifest, directory)
    return manifest


def write_manifest(manifest: DatasetManifest, directory) -> None:
    directory = Path(directory)
    lines = [",".join(MANIFEST_HEADER)] + [f"{p},{s}" for p, s in zip(manifest.paths, manifest.splits)]
    (directory / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    (directory / "meta").write_text(f"fs={manifest.fs}\nversion={manifest.version}\n",
                                    encoding="utf-8", newline="\n")


def read_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    meta = {}
    try:
        for line in (directory / "meta").read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
        rows = list(csv.reader((directory / "manifest.csv").read_text(encoding="utf-8").splitlines()))
    except FileNotFoundError as exc:
        raise DatasetParseError(f"{directory}: missing {Path(exc.filename).name}") from None
    try:
        fs, version = int(meta["fs"]), int(meta["version"])
    except (KeyError, ValueError):
        raise DatasetParseError(f"{directory}/meta must define integer fs and version") from None
    if version != DATASET_VERSION:
        raise DatasetParseError(f"{directory}: unsupported dataset version {version}")
    if not rows or rows[0] != MANIFEST_HEADER:
        raise MalformedRowError(f"{directory}/manifest.csv: header must be path,split")
    paths, splits = [], []
    for row in rows[1:]:
        if len(row) != 2 or row[1] not in ("train", "test"):
            raise MalformedRowError(f"{directory}/manifest.csv: bad row {row}")
        paths.append(row[0])
        splits.append(row[1])
    if len(set(paths)) != len(paths):
        raise MalformedRowError(f"{directory}/manifest.csv: duplicate paths")
    return DatasetManifest(paths, splits, fs, version)


def read_dataset(directory, split: str | None = None, expected_fs: int | None = None):
    """Return ``(records, manifest)``; optionally only one split."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_fs is not None and manifest.fs != expected_fs:
        raise SampleRateMismatchError(
            f"{directory}: dataset fs={manifest.fs}, expected {expected_fs}")
    records = []
    for path, tag in zip(manifest.paths, manifest.splits):
        if split is not None and tag != split:
            continue
        records.append(read_record(directory / path, manifest.fs))
    return records, manifest


def check_fs(records, fs: int) -> None:
    for r in records:
        if r.fs != fs:
            raise SampleRateMismatchError(f"record {r.record_id} has fs={r.fs}, expected {fs}")
