"""EEG signal conditioning and patch segmentation.

Pipeline order is fixed: band-pass, mains notch, resample, amplitude
normalization. Filter design comes from ``scipy.signal``; all filters are
linear and applied along the time axis of a (C, N) array.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

RECORDING_MAGIC = b"MTRC"
RECORDING_VERSION = 1
_HEADER = struct.Struct("<4sIIQd")

AMPLITUDE_UNIT_VOLTS = 1e-4  # 0.1 mV


class ConfigError(ValueError):
    pass


class EmptyGridError(ValueError):
    pass


class RecordingFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class RawRecording:
    samples: np.ndarray  # (C, N), volts unless normalized
    sample_rate_hz: float
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.samples.shape[1] < 1:
            raise ConfigError("recording needs at least one sample")
        if not self.channel_names:
            self.channel_names = synthetic_channel_names(self.samples.shape[0])
        if len(self.channel_names) != self.samples.shape[0]:
            raise ConfigError("channel_names length does not match channel count")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class PatchGrid:
    patches: np.ndarray  # (C, J, w)
    window_w: int
    channel_names: list[str]

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


def synthetic_channel_names(c: int) -> list[str]:
    return [f"S{i}" for i in range(c)]


@dataclass(frozen=True)
class PreprocessConfig:
    lo_hz: float = 0.1
    hi_hz: float = 75.0
    mains_hz: float = 50.0
    notch_q: float = 30.0
    target_hz: float = 200.0
    zero_phase: bool = False
    input_scale: float = 1.0  # multiply raw values to get volts, e.g. 1e-6 for microvolt files


def _apply(sos, x, zero_phase):
    if zero_phase:
        return signal.sosfiltfilt(sos, x, axis=-1)
    return signal.sosfilt(sos, x, axis=-1)


def bandpass(rec: RawRecording, lo_hz: float = 0.1, hi_hz: float = 75.0, order: int = 4, zero_phase: bool = False) -> RawRecording:
    nyq = rec.sample_rate_hz / 2.0
    if not 0.0 < lo_hz < hi_hz < nyq:
        raise ConfigError(f"band ({lo_hz}, {hi_hz}) Hz invalid for Nyquist {nyq} Hz")
    sos = signal.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=rec.sample_rate_hz, output="sos")
    return replace(rec, samples=_apply(sos, rec.samples, zero_phase))


def highpass(rec: RawRecording, lo_hz: float = 0.1, order: int = 4, zero_phase: bool = False) -> RawRecording:
    nyq = rec.sample_rate_hz / 2.0
    if not 0.0 < lo_hz < nyq:
        raise ConfigError(f"cutoff {lo_hz} Hz invalid for Nyquist {nyq} Hz")
    sos = signal.butter(order, lo_hz, btype="highpass", fs=rec.sample_rate_hz, output="sos")
    return replace(rec, samples=_apply(sos, rec.samples, zero_phase))


def notch(rec: RawRecording, mains_hz: float = 50.0, q: float = 30.0, zero_phase: bool = False) -> RawRecording:
    if mains_hz not in (50, 60):
        raise ConfigError("mains_hz must be 50 or 60")
    if mains_hz >= rec.sample_rate_hz / 2.0:
        raise ConfigError(f"mains {mains_hz} Hz at or above Nyquist")
    b, a = signal.iirnotch(mains_hz, q, fs=rec.sample_rate_hz)
    return replace(rec, samples=_apply(signal.tf2sos(b, a), rec.samples, zero_phase))


def resample(rec: RawRecording, target_hz: float = 200.0) -> RawRecording:
    """Rational polyphase resampling with a Kaiser(8) windowed-sinc kernel."""
    if target_hz <= 0:
        raise ConfigError("target_hz must be positive")
    if target_hz == rec.sample_rate_hz:
        return rec
    ratio = Fraction(target_hz / rec.sample_rate_hz).limit_denominator(10_000)
    n_out = int(round(rec.n_samples * target_hz / rec.sample_rate_hz))
    if n_out < 1:
        raise ConfigError("resampled recording would be empty")
    y = signal.resample_poly(rec.samples, ratio.numerator, ratio.denominator, axis=-1, window=("kaiser", 8.0))
    return replace(rec, samples=y[:, :n_out], sample_rate_hz=float(target_hz))


def normalize_amplitude(rec: RawRecording) -> RawRecording:
    """Volts to units of 0.1 mV."""
    return replace(rec, samples=rec.samples / AMPLITUDE_UNIT_VOLTS)


def filter_stage(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> RawRecording:
    """Band-pass then notch at the recording's native rate.

    When the upper band edge or the mains frequency is at or above Nyquist the
    corresponding constraint is already met by the sampling, so only the
    high-pass edge (resp. nothing) is applied.
    """
    nyq = rec.sample_rate_hz / 2.0
    if cfg.hi_hz < nyq:
        rec = bandpass(rec, cfg.lo_hz, cfg.hi_hz, zero_phase=cfg.zero_phase)
    else:
        rec = highpass(rec, cfg.lo_hz, zero_phase=cfg.zero_phase)
    if cfg.mains_hz < nyq:
        rec = notch(rec, cfg.mains_hz, cfg.notch_q, zero_phase=cfg.zero_phase)
    return rec


def preprocess(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> RawRecording:
    if cfg.input_scale != 1.0:
        rec = replace(rec, samples=rec.samples * cfg.input_scale)
    rec = filter_stage(rec, cfg)
    rec = resample(rec, cfg.target_hz)
    return normalize_amplitude(rec)


def segment_patches(rec: RawRecording, w: int = 200) -> PatchGrid:
    if w < 1:
        raise ConfigError("window must be >= 1 sample")
    j = rec.n_samples // w
    if j == 0:
        raise EmptyGridError(f"recording of {rec.n_samples} samples shorter than window {w}")
    patches = rec.samples[:, : j * w].reshape(rec.channels, j, w).copy()
    return PatchGrid(patches=patches, window_w=w, channel_names=list(rec.channel_names))


# -----------------------------------------------------------------------------
# file formats
# -----------------------------------------------------------------------------


def write_recording(path, rec: RawRecording) -> None:
    c, n = rec.samples.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RECORDING_MAGIC, RECORDING_VERSION, c, n, float(rec.sample_rate_hz)))
        fh.write(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())


def read_recording(path, channel_names=None) -> RawRecording:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise RecordingFormatError("truncated header", len(raw))
    magic, version, c, n, rate = _HEADER.unpack_from(raw, 0)
    if magic != RECORDING_MAGIC:
        raise RecordingFormatError(f"bad magic {magic!r}", 0)
    if version != RECORDING_VERSION:
        raise RecordingFormatError(f"unsupported version {version}", 4)
    need = _HEADER.size + 4 * c * n
    if len(raw) < need:
        raise RecordingFormatError(f"payload truncated, expected {need} bytes", len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=c * n, offset=_HEADER.size).reshape(c, n)
    return RawRecording(data.astype(np.float64), rate, list(channel_names) if channel_names else [])


def read_recording_csv(path, sample_rate_hz: float) -> RawRecording:
    """One channel per column, header row of channel names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=np.float64).T
    return RawRecording(data, sample_rate_hz, names)
