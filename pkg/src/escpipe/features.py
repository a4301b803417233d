"""Spectrogram frontends and pooled feature vectors.

Two frontends produce a :class:`SpectrogramMatrix` from a clip: reference-
relative log-mel (dB) and per-channel energy normalization (PCEN). Matrices
are pooled into fixed-length vectors (per-mel-row mean and population std)
for the classifier heads, exported as 8-bit grayscale PNGs, or persisted in
a small binary tensor container with a JSON provenance sidecar.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import lfilter

from .audio import AudioClip
from .errors import ContainerError, ContainerVersionError, FilterDesignError

TENSOR_MAGIC = b"ESCT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class StftParams:
    """Framing parameters. ``window`` is "hann" for analysis; "rect" exists
    for energy-conservation checks. With ``center`` the signal is reflect-
    padded by n_fft/2 on both ends and frame count is floor(n/hop) + 1."""

    n_fft: int = 2048
    hop: int = 512
    window: str = "hann"
    center: bool = True

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not (0 < self.hop <= self.n_fft):
            raise ValueError("hop must satisfy 0 < hop <= n_fft")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"window must be 'hann' or 'rect', got {self.window!r}")


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 22050.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max):
            raise ValueError("need 0 <= f_min < f_max")


@dataclass(frozen=True)
class PcenParams:
    """Three-stage normalization: temporal integration (smoothing coefficient
    ``s``), adaptive gain control (exponent ``alpha`` on the smoother), and
    dynamic range compression (bias ``delta``, exponent ``r``)."""

    s: float = 0.025
    alpha: float = 0.98
    delta: float = 2.0
    r: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not (0 < self.s <= 1):
            raise ValueError("s must lie in (0, 1]")
        if not (0 <= self.alpha <= 1):
            raise ValueError("alpha must lie in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not (0 < self.r <= 1):
            raise ValueError("r must lie in (0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class SpectrogramMatrix:
    """Mel-bins x frames matrix in dB or PCEN units, with its provenance."""

    values: np.ndarray
    unit: str  # "dB" or "PCEN"
    mel_params: MelParams
    stft_params: StftParams

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("spectrogram must be 2-D (mel bins x frames)")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureVector:
    """Per-mel-row mean and population std, concatenated: length 2 * n_mels."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size % 2:
            raise ValueError("feature vector must be 1-D with even length")
        half = values.size // 2
        if np.any(values[half:] < -1e-12):
            raise ValueError("std half of the feature vector must be non-negative")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_mels(self) -> int:
        return self.values.size // 2

    @property
    def means(self) -> np.ndarray:
        return self.values[: self.n_mels]

    @property
    def stds(self) -> np.ndarray:
        return self.values[self.n_mels:]


def _window(params: StftParams) -> np.ndarray:
    if params.window == "rect":
        return np.ones(params.n_fft)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(params.n_fft) / params.n_fft)


def stft_power(clip: AudioClip, params: StftParams | None = None) -> np.ndarray:
    """Power spectrogram |FFT|^2, shape (n_fft/2 + 1, n_frames)."""
    params = params or StftParams()
    x = clip.samples
    if x.size < 1:
        raise ValueError("clip must contain at least one sample")
    if params.center:
        pad = params.n_fft // 2
        if x.size == 1:
            x = np.pad(x, pad)  # nothing to reflect
        else:
            x = np.pad(x, pad, mode="reflect")
        n_frames = clip.duration_samples // params.hop + 1
    else:
        if x.size < params.n_fft:
            raise ValueError("uncentered framing needs at least one full frame")
        n_frames = (x.size - params.n_fft) // params.hop + 1
    win = _window(params)
    starts = np.arange(n_frames) * params.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, params.n_fft)[starts]
    spec = np.fft.rfft(frames * win, axis=1)
    return (spec.real**2 + spec.imag**2).T


def hz_to_mel(f):
    """Mel scale m(f) = 2595 log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel: MelParams, sample_rate: int, n_fft: int) -> np.ndarray:
    """Triangular filters uniformly spaced on the mel scale, area-normalized.

    Returns an (n_mels, n_fft/2 + 1) matrix mapping power-spectrum bins to
    mel bands. Raises when the grid is too fine for the FFT resolution
    (a filter with no spectral support).
    """
    if mel.f_max > sample_rate / 2:
        raise FilterDesignError(
            f"f_max {mel.f_max} Hz exceeds Nyquist {sample_rate / 2} Hz"
        )
    edges = mel_to_hz(np.linspace(hz_to_mel(mel.f_min), hz_to_mel(mel.f_max), mel.n_mels + 2))
    if np.any(np.diff(edges) <= 0):
        raise FilterDesignError(
            f"n_mels={mel.n_mels} produces coincident band edges in [{mel.f_min}, {mel.f_max}] Hz"
        )
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((mel.n_mels, fft_freqs.size))
    for i in range(mel.n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # unit area per filter
    if np.any(fb.sum(axis=1) == 0.0):
        raise FilterDesignError(
            f"n_mels={mel.n_mels} too large for n_fft={n_fft} at {sample_rate} Hz: "
            "some filters have no FFT-bin support"
        )
    return fb


def filter_center_frequencies(mel: MelParams) -> np.ndarray:
    """Hz center of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(mel.f_min), hz_to_mel(mel.f_max), mel.n_mels + 2))
    return edges[1:-1]


def log_mel(
    power_mel: np.ndarray,
    mel_params: MelParams,
    stft_params: StftParams,
    top_db: float = 80.0,
    amin: float = 1e-10,
) -> SpectrogramMatrix:
    """Reference-relative dB: 10 log10(max(x, amin)) - 10 log10(ref), floored
    at -top_db. The reference is the matrix maximum, so positive rescaling of
    the input leaves the output unchanged; an all-silent matrix (max <= 0)
    falls back to ref = 1 and lands on the -top_db floor."""
    p = np.asarray(power_mel, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("power matrix must be non-negative")
    ref = p.max() if p.size and p.max() > 0 else 1.0
    db = 10.0 * np.log10(np.maximum(p, amin)) - 10.0 * np.log10(max(ref, amin))
    db = np.maximum(db, -top_db)
    return SpectrogramMatrix(values=db, unit="dB", mel_params=mel_params, stft_params=stft_params)


def pcen(
    power_mel: np.ndarray,
    params: PcenParams,
    mel_params: MelParams,
    stft_params: StftParams,
) -> SpectrogramMatrix:
    """Per-channel energy normalization of a mel power matrix.

    The per-row smoother is M[t] = (1-s) M[t-1] + s E[t] with M[0] = E[0];
    the output is (E / (eps + M)^alpha + delta)^r - delta^r.
    """
    e = np.asarray(power_mel, dtype=np.float64)
    if np.any(e < 0):
        raise ValueError("power matrix must be non-negative")
    if e.ndim != 2 or e.shape[1] < 1:
        raise ValueError("power matrix must be 2-D with at least one frame")
    zi = (1.0 - params.s) * e[:, :1]
    m, _ = lfilter([params.s], [1.0, -(1.0 - params.s)], e, axis=1, zi=zi)
    out = (e / (params.eps + m) ** params.alpha + params.delta) ** params.r
    out -= params.delta**params.r
    return SpectrogramMatrix(
        values=out, unit="PCEN", mel_params=mel_params, stft_params=stft_params
    )


def pool_features(spec: SpectrogramMatrix) -> FeatureVector:
    """Concatenate per-row mean and per-row population std over frames."""
    if spec.n_frames < 1:
        raise ValueError("cannot pool a spectrogram with zero frames")
    means = spec.values.mean(axis=1)
    stds = spec.values.std(axis=1)
    return FeatureVector(values=np.concatenate([means, stds]))


def render_png(spec: SpectrogramMatrix) -> bytes:
    """8-bit grayscale PNG, one pixel per cell, frequency axis bottom-up.

    The value range maps linearly to 0..255; a constant matrix renders as
    all-zero pixels.
    """
    v = spec.values
    lo, hi = v.min(), v.max()
    if hi > lo:
        q = np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        q = np.zeros_like(v, dtype=np.uint8)
    img = Image.fromarray(np.flipud(q), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_tensor(array: np.ndarray) -> bytes:
    """Serialize a float tensor: magic, u16 version, u8 rank, u32 dims,
    then float32 little-endian row-major payload."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds container limit")
    head = TENSOR_MAGIC + struct.pack("<HB", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def load_tensor(data: bytes) -> np.ndarray:
    if len(data) < 7 or data[:4] != TENSOR_MAGIC:
        raise ContainerError("not a feature tensor container (bad magic)")
    version, rank = struct.unpack_from("<HB", data, 4)
    if version != TENSOR_VERSION:
        raise ContainerVersionError(f"unsupported tensor container version {version}")
    off = 7
    if len(data) < off + 4 * rank:
        raise ContainerError("tensor container truncated in dims")
    dims = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) != off + 4 * count:
        raise ContainerError(
            f"tensor payload size mismatch: expected {4 * count} bytes, "
            f"got {len(data) - off}"
        )
    return np.frombuffer(data[off:], dtype="<f4").reshape(dims).astype(np.float64)


def write_feature_file(path, array: np.ndarray, provenance: dict | None = None) -> None:
    """Write a .esct tensor plus a .json sidecar describing where it came from."""
    path = Path(path)
    path.write_bytes(save_tensor(array))
    if provenance is not None:
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(provenance, indent=2, sort_keys=True)
        )


def read_feature_file(path) -> tuple[np.ndarray, dict | None]:
    path = Path(path)
    array = load_tensor(path.read_bytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    provenance = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return array, provenance


def frontend_spectrogram(
    clip: AudioClip,
    use_pcen: bool,
    stft_params: StftParams | None = None,
    mel_params: MelParams | None = None,
    pcen_params: PcenParams | None = None,
    top_db: float = 80.0,
    amin: float = 1e-10,
) -> SpectrogramMatrix:
    """Clip -> mel power -> log-mel dB or PCEN, depending on the frontend."""
    stft_params = stft_params or StftParams()
    mel_params = mel_params or MelParams(f_max=clip.sample_rate / 2.0)
    power = stft_power(clip, stft_params)
    fb = mel_filterbank(mel_params, clip.sample_rate, stft_params.n_fft)
    mel_power = fb @ power
    if use_pcen:
        return pcen(mel_power, pcen_params or PcenParams(), mel_params, stft_params)
    return log_mel(mel_power, mel_params, stft_params, top_db=top_db, amin=amin)


def params_as_dict(obj) -> dict:
    """Dataclass params -> plain dict (for provenance sidecars)."""
    return asdict(obj)
