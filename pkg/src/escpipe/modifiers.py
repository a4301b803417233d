"""Time-domain audio modifiers.

Eight filtration modes are supported, one per experiment column:

* ``NO_FILTER`` and ``PCEN`` leave the waveform untouched (PCEN only switches
  the spectrogram frontend downstream).
* ``AUDIO_CROP`` removes silent samples and tiles the remainder out to the
  longest clip length in the corpus.
* ``NOISE_REMOVAL`` is stationary spectral gating.
* The four Butterworth modes use the fixed cutoffs 512 Hz / 2048 Hz.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .audio import AudioClip
from .errors import (
    EmptyDatasetError,
    FilterDesignError,
    NoSignalError,
    TooShortError,
)

# Fixed cutoffs shared by all four filter modes.
LOW_CUTOFF_HZ = 512.0
HIGH_CUTOFF_HZ = 2048.0

DEFAULT_FILTER_ORDER = 4


class FiltrationMode(enum.Enum):
    """Experiment axis: which modifier (or frontend switch) is active."""

    NO_FILTER = "No Filter"
    NOISE_REMOVAL = "Noise Removal"
    PCEN = "PCEN"
    AUDIO_CROP = "Audio Crop"
    LOW_PASS = "Low Pass Filter"
    HIGH_PASS = "High Pass Filter"
    BAND_PASS = "Band Pass Filter"
    BAND_STOP = "Band Stop Filter"

    @property
    def display_name(self) -> str:
        """Exact column name used in reports."""
        return self.value

    @classmethod
    def parse(cls, name: str) -> "FiltrationMode":
        """Accept the display name (case-insensitive) or a snake_case alias."""
        folded = name.strip().lower().replace("_", " ").replace("-", " ")
        for mode in cls:
            if mode.value.lower() == folded or mode.name.lower().replace("_", " ") == folded:
                return mode
        raise ValueError(
            f"unknown filtration mode {name!r}; expected one of "
            + ", ".join(repr(m.value) for m in cls)
        )


class FilterKind(enum.Enum):
    LOW_PASS = "lowpass"
    HIGH_PASS = "highpass"
    BAND_PASS = "bandpass"
    BAND_STOP = "bandstop"


@dataclass(frozen=True)
class CropParams:
    """Parameters for the silence-removal-and-tile modifier.

    ``max_time`` is the target output length in samples (normally the longest
    clip in the corpus). A sample x is silent when ``|x| <= silence_threshold``;
    the default threshold 0 removes exact zeros only. ``quotient_basis``
    selects the length used for the tiling quotient: ``"kept"`` (the
    silence-stripped length, output exactly ``max_time`` samples) or
    ``"original"`` (the literal pre-strip length, output may be shorter).
    """

    max_time: int
    silence_threshold: float = 0.0
    quotient_basis: str = "kept"

    def __post_init__(self):
        if self.max_time < 1:
            raise ValueError(f"max_time must be >= 1, got {self.max_time}")
        if self.silence_threshold < 0:
            raise ValueError("silence_threshold must be non-negative")
        if self.quotient_basis not in ("kept", "original"):
            raise ValueError(
                f"quotient_basis must be 'kept' or 'original', got {self.quotient_basis!r}"
            )


@dataclass(frozen=True)
class GateParams:
    """Stationary spectral-gate parameters.

    The gate threshold for every time-frequency cell is
    ``mean + n_std * std`` of the clip's own magnitude spectrogram, taken per
    frequency row over all frames. The binary keep-mask is then box-smoothed
    over ``smoothing_bins x smoothing_frames`` cells.
    """

    frame_size: int = 2048
    hop_size: int = 512
    n_std: float = 1.5
    smoothing_bins: int = 3
    smoothing_frames: int = 5

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size & (self.frame_size - 1):
            raise ValueError(f"frame_size must be a power of two, got {self.frame_size}")
        if not (0 < self.hop_size <= self.frame_size):
            raise ValueError("hop_size must satisfy 0 < hop <= frame_size")
        if self.n_std <= 0:
            raise ValueError("n_std must be positive")
        if self.smoothing_bins < 1 or self.smoothing_frames < 1:
            raise ValueError("smoothing extents must be >= 1")


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth design request: kind, cutoff(s) in Hz, prototype order."""

    kind: FilterKind
    cutoff_high: float
    cutoff_low: float | None = None
    order: int = DEFAULT_FILTER_ORDER

    def __post_init__(self):
        if self.order < 2 or self.order % 2:
            raise ValueError(f"order must be a positive even integer, got {self.order}")
        if self.kind in (FilterKind.BAND_PASS, FilterKind.BAND_STOP):
            if self.cutoff_low is None:
                raise ValueError(f"{self.kind.value} requires cutoff_low")
            if not (0 < self.cutoff_low < self.cutoff_high):
                raise ValueError("band filters need 0 < cutoff_low < cutoff_high")
        elif self.cutoff_low is not None:
            raise ValueError(f"{self.kind.value} takes a single cutoff")

    @property
    def cutoffs(self) -> tuple[float, ...]:
        if self.cutoff_low is None:
            return (self.cutoff_high,)
        return (self.cutoff_low, self.cutoff_high)


@dataclass(frozen=True)
class BiquadCascade:
    """Cascade of second-order sections (a0 normalized to 1).

    Every section must be stable: poles strictly inside the unit circle,
    i.e. |a2| < 1 and |a1| < 1 + a2.
    """

    sections: tuple[tuple[float, float, float, float, float], ...]

    def __post_init__(self):
        for i, (b0, b1, b2, a1, a2) in enumerate(self.sections):
            if not all(np.isfinite([b0, b1, b2, a1, a2])):
                raise ValueError(f"section {i} has non-finite coefficients")
            if abs(a2) >= 1.0 or abs(a1) >= 1.0 + a2:
                raise ValueError(f"section {i} is unstable (a1={a1}, a2={a2})")

    def as_sos(self) -> np.ndarray:
        """(n_sections, 6) array in b0,b1,b2,a0,a1,a2 layout."""
        rows = [(b0, b1, b2, 1.0, a1, a2) for b0, b1, b2, a1, a2 in self.sections]
        return np.asarray(rows, dtype=np.float64)

    def response(self, freqs, sample_rate: int) -> np.ndarray:
        """Complex frequency response evaluated on the unit circle."""
        z1 = np.exp(-2j * np.pi * np.asarray(freqs, dtype=np.float64) / sample_rate)
        h = np.ones_like(z1, dtype=np.complex128)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * z1 + b2 * z1 * z1) / (1.0 + a1 * z1 + a2 * z1 * z1)
        return h

    def magnitude_db(self, freqs, sample_rate: int, floor: float = 1e-20) -> np.ndarray:
        mag = np.abs(self.response(freqs, sample_rate))
        return 20.0 * np.log10(np.maximum(mag, floor))


IDENTITY_CASCADE = BiquadCascade(sections=((1.0, 0.0, 0.0, 0.0, 0.0),))


def max_time_len(durations) -> int:
    """Longest clip length, in samples, over a corpus."""
    durations = list(durations)
    if not durations:
        raise EmptyDatasetError("cannot take the maximum length of an empty corpus")
    for d in durations:
        if d < 1:
            raise ValueError(f"clip lengths must be >= 1 sample, got {d}")
    return int(max(durations))


def crop_audio(clip: AudioClip, params: CropParams) -> AudioClip:
    """Remove silent samples, then tile the remainder out to ``max_time``.

    With the default ``quotient_basis="kept"`` the kept sequence K (samples
    with |x| > threshold, order preserved) is repeated in whole copies and
    prefix-padded from K's start, producing exactly ``max_time`` samples:
    output[i] = K[i mod len(K)].

    ``quotient_basis="original"`` reproduces the literal write-up where the
    tiling quotient divides by the clip's pre-strip length; the result then
    has length len(K) * max(q, 1) + (max_time mod original_length), which is
    shorter than max_time whenever silence was removed.
    """
    x = clip.samples
    kept = x[np.abs(x) > params.silence_threshold]
    if kept.size == 0:
        raise NoSignalError(
            "clip has no samples above the silence threshold; nothing to tile"
        )
    if params.quotient_basis == "kept":
        q, r = divmod(params.max_time, kept.size)
        out = np.concatenate([np.tile(kept, q), kept[:r]])
    else:
        q, r = divmod(params.max_time, x.size)
        tiled = np.tile(kept, max(q, 1))
        # appending element j of the growing array == cyclic extension
        out = np.resize(tiled, tiled.size + r)
    return clip.replace_samples(out)


def crop_oracle(samples: np.ndarray, max_time: int, threshold: float = 0.0) -> np.ndarray:
    """Brute-force reference for the default crop: output[i] = K[i mod |K|]."""
    kept = samples[np.abs(samples) > threshold]
    if kept.size == 0:
        raise NoSignalError("no samples above threshold")
    return np.array([kept[i % kept.size] for i in range(max_time)])


def spectral_gate(clip: AudioClip, params: GateParams | None = None) -> AudioClip:
    """Stationary noise gate in the time-frequency plane.

    Per frequency row, cells whose magnitude exceeds the row's
    mean + n_std * std over the whole clip are kept; everything below the
    gate is zeroed. The binary mask is box-smoothed before being applied to
    the complex spectrogram, which is then inverted by overlap-add. Output
    length equals input length.

    A component present throughout the clip contributes its own level to the
    gate and is attenuated like stationary noise; the gate preserves sounds
    that are loud relative to their row's long-run statistics.
    """
    params = params or GateParams()
    x = clip.samples
    if x.size < params.frame_size:
        raise TooShortError(
            f"clip of {x.size} samples is shorter than one frame ({params.frame_size})"
        )
    noverlap = params.frame_size - params.hop_size
    _, _, stft = scipy.signal.stft(
        x,
        nperseg=params.frame_size,
        noverlap=noverlap,
        window="hann",
        boundary="zeros",
        padded=True,
    )
    mag = np.abs(stft)
    gate = mag.mean(axis=1) + params.n_std * mag.std(axis=1)
    mask = (mag > gate[:, None]).astype(np.float64)
    kernel = np.ones((params.smoothing_bins, params.smoothing_frames))
    kernel /= kernel.size
    mask = scipy.signal.fftconvolve(mask, kernel, mode="same")
    np.clip(mask, 0.0, 1.0, out=mask)
    _, out = scipy.signal.istft(
        stft * mask,
        nperseg=params.frame_size,
        noverlap=noverlap,
        window="hann",
        boundary=True,
    )
    if out.size >= x.size:
        out = out[: x.size]
    else:
        out = np.pad(out, (0, x.size - out.size))
    return clip.replace_samples(out)


def design_butterworth(spec: FilterSpec, sample_rate: int) -> BiquadCascade:
    """Butterworth cascade via bilinear transform with frequency prewarping.

    Magnitude at each cutoff is -3.01 dB; band kinds apply the prototype
    order to each band edge (order-4 band filters have eight poles).
    """
    nyquist = sample_rate / 2.0
    for c in spec.cutoffs:
        if not (0.0 < c < nyquist):
            raise FilterDesignError(
                f"cutoff {c} Hz outside (0, {nyquist}) for fs={sample_rate}"
            )
    wn = spec.cutoffs[0] if len(spec.cutoffs) == 1 else list(spec.cutoffs)
    sos = scipy.signal.butter(
        spec.order, wn, btype=spec.kind.value, fs=sample_rate, output="sos"
    )
    sections = tuple(
        (row[0] / row[3], row[1] / row[3], row[2] / row[3], row[4] / row[3], row[5] / row[3])
        for row in sos
    )
    return BiquadCascade(sections=sections)


def apply_iir(clip: AudioClip, cascade: BiquadCascade) -> AudioClip:
    """Causal direct-form-II-transposed filtering with zero initial state."""
    out = scipy.signal.sosfilt(cascade.as_sos(), clip.samples)
    return clip.replace_samples(out)


def _table_filter_spec(mode: FiltrationMode) -> FilterSpec:
    if mode is FiltrationMode.LOW_PASS:
        return FilterSpec(kind=FilterKind.LOW_PASS, cutoff_high=LOW_CUTOFF_HZ)
    if mode is FiltrationMode.HIGH_PASS:
        return FilterSpec(kind=FilterKind.HIGH_PASS, cutoff_high=HIGH_CUTOFF_HZ)
    if mode is FiltrationMode.BAND_PASS:
        return FilterSpec(
            kind=FilterKind.BAND_PASS, cutoff_low=LOW_CUTOFF_HZ, cutoff_high=HIGH_CUTOFF_HZ
        )
    if mode is FiltrationMode.BAND_STOP:
        return FilterSpec(
            kind=FilterKind.BAND_STOP, cutoff_low=LOW_CUTOFF_HZ, cutoff_high=HIGH_CUTOFF_HZ
        )
    raise ValueError(f"{mode} is not a filter mode")


def filter_spec_for_mode(mode: FiltrationMode) -> FilterSpec:
    """The fixed-cutoff spec used by the four filter modes."""
    return _table_filter_spec(mode)


def apply_modifier(
    clip: AudioClip,
    mode: FiltrationMode,
    crop: CropParams | None = None,
    gate: GateParams | None = None,
) -> AudioClip:
    """Dispatch one filtration mode onto a clip.

    NO_FILTER and PCEN return the clip unchanged (PCEN is a spectrogram
    frontend selected downstream, not a waveform transform). AUDIO_CROP
    requires ``crop`` because its target length comes from the corpus.
    """
    if mode in (FiltrationMode.NO_FILTER, FiltrationMode.PCEN):
        return clip
    if mode is FiltrationMode.AUDIO_CROP:
        if crop is None:
            raise ValueError("AUDIO_CROP requires CropParams (corpus max_time)")
        return crop_audio(clip, crop)
    if mode is FiltrationMode.NOISE_REMOVAL:
        return spectral_gate(clip, gate)
    cascade = design_butterworth(_table_filter_spec(mode), clip.sample_rate)
    return apply_iir(clip, cascade)
