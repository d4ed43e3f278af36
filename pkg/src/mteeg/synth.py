"""Deterministic multi-task EEG-like data.

A sample of class k is a sum of sinusoids at that class's signature
frequencies, each channel with independent random phases, plus white Gaussian
noise. Task shapes (channels, rate, duration, classes) mirror common public
EEG corpora; the content is synthetic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mteeg.preprocessing import RawRecording, synthetic_channel_names, write_recording

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthTaskConfig:
    task_id: int
    name: str
    channels: int
    sample_rate: float
    duration_s: float
    n_classes: int
    signatures: tuple = ()  # per class: tuple of frequencies (Hz)
    amplitudes: tuple = ()  # per class: tuple of amplitudes (volts), defaults to 8e-5 split evenly
    noise: float = 0.0  # noise std in volts
    n_train: int = 64
    n_val: int = 32
    n_test: int = 64
    seed: int = 0

    def __post_init__(self):
        sigs = self.signatures or default_signatures(self.n_classes, self.sample_rate)
        object.__setattr__(self, "signatures", tuple(tuple(float(f) for f in s) for s in sigs))
        if len(self.signatures) != self.n_classes:
            raise ValueError("one signature per class required")
        if len(set(self.signatures)) != self.n_classes:
            raise ValueError("class signatures must be pairwise distinct")
        amps = self.amplitudes or tuple((8e-5 / len(s),) * len(s) for s in self.signatures)
        object.__setattr__(self, "amplitudes", tuple(tuple(float(a) for a in s) for s in amps))
        for f, a in zip(self.signatures, self.amplitudes):
            if len(f) != len(a):
                raise ValueError("amplitudes must match signature frequencies")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration_s))


# well inside 0.1-75 Hz, clear of 50/60 Hz mains, below 1/2 of the lowest rate used
_FREQ_LADDER = (3.0, 7.0, 11.0, 17.0, 23.0, 29.0, 37.0, 43.0)


def default_signatures(k: int, sample_rate: float) -> tuple:
    usable = [f for f in _FREQ_LADDER if f < 0.45 * sample_rate]
    if len(usable) < k:
        raise ValueError(f"not enough distinct frequencies for {k} classes at {sample_rate} Hz")
    return tuple((usable[i],) for i in range(k))


@dataclass
class Sample:
    recording: RawRecording
    label: int
    sample_id: str


def _one(cfg: SynthTaskConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(cfg.n_samples) / cfg.sample_rate
    x = np.zeros((cfg.channels, cfg.n_samples))
    for f, a in zip(cfg.signatures[label], cfg.amplitudes[label]):
        phase = rng.uniform(0.0, 2.0 * np.pi, (cfg.channels, 1))
        x += a * np.sin(2.0 * np.pi * f * t[None, :] + phase)
    if cfg.noise > 0:
        x += rng.normal(0.0, cfg.noise, x.shape)
    return x


def generate(cfg: SynthTaskConfig) -> dict[str, list[Sample]]:
    """Balanced class cycles; splits drawn sequentially from one seeded stream."""
    rng = np.random.default_rng((cfg.seed, cfg.task_id))
    names = synthetic_channel_names(cfg.channels)
    out: dict[str, list[Sample]] = {}
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        labels = np.arange(n) % cfg.n_classes
        rng.shuffle(labels)
        out[split] = [
            Sample(RawRecording(_one(cfg, int(y), rng), cfg.sample_rate, list(names)), int(y), f"t{cfg.task_id}_{split}_{i:05d}")
            for i, y in enumerate(labels)
        ]
    return out


# (name, channels, rate, duration, classes)
PAPER_TASKS = (
    ("tuab", 23, 256.0, 10.0, 2),
    ("tuev", 23, 256.0, 5.0, 6),
    ("seedv", 62, 1000.0, 1.0, 5),
    ("chbmit", 16, 256.0, 10.0, 2),
    ("sleepedf", 2, 100.0, 30.0, 5),
    ("physionet", 64, 160.0, 4.0, 5),
)
SUITE3 = (
    ("tuab", 23, 256.0, 10.0, 2),
    ("seedv", 62, 200.0, 1.0, 5),
    ("sleepedf", 2, 100.0, 30.0, 5),
)
PRESETS = {"paper6": PAPER_TASKS, "suite3": SUITE3}


def task_configs(preset: str = "suite3", noise: float = 0.0, n_train: int = 64, n_val: int = 32, n_test: int = 64, seed: int = 0) -> list[SynthTaskConfig]:
    rows = PRESETS[preset]
    return [
        SynthTaskConfig(i + 1, name, c, rate, dur, k, noise=noise, n_train=n_train, n_val=n_val, n_test=n_test, seed=seed)
        for i, (name, c, rate, dur, k) in enumerate(rows)
    ]


def write_dataset(root, configs) -> int:
    """Write every sample as an MTRC file plus ``labels.csv``; returns sample count."""
    root = Path(root)
    (root / "recordings").mkdir(parents=True, exist_ok=True)
    rows = []
    for cfg in configs:
        for split, samples in generate(cfg).items():
            for s in samples:
                write_recording(root / "recordings" / f"{s.sample_id}.mtrc", s.recording)
                rows.append((s.sample_id, cfg.task_id, split, s.label))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "task_id", "split", "label"])
        w.writerows(rows)
    return len(rows)


def read_manifest(root) -> list[tuple[str, int, str, int]]:
    with open(Path(root) / "labels.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["sample_id"], int(r["task_id"]), r["split"], int(r["label"])) for r in reader]


def fft_magnitudes(x: np.ndarray) -> np.ndarray:
    """Channel-averaged one-sided FFT magnitude of a (C, N) array."""
    return np.abs(np.fft.rfft(x, axis=-1)).mean(axis=0)


def nearest_centroid_accuracy(train: list[Sample], test: list[Sample]) -> float:
    """One-nearest-centroid classifier on FFT magnitudes."""
    feats = np.stack([fft_magnitudes(s.recording.samples) for s in train])
    labels = np.array([s.label for s in train])
    classes = np.unique(labels)
    cents = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    hits = 0
    for s in test:
        f = fft_magnitudes(s.recording.samples)
        hits += int(classes[np.argmin(((cents - f) ** 2).sum(axis=1))] == s.label)
    return hits / len(test)
