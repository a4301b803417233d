"""Canonical mono audio representation plus WAV decode/encode and resampling.

Everything downstream consumes :class:`AudioClip`: a finite, immutable mono
waveform with an explicit sample rate. The project-wide canonical rate is
44.1 kHz (``CANONICAL_RATE``); clips at other rates are accepted and can be
brought to the canonical rate with :func:`resample`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from .errors import AudioDecodeError

CANONICAL_RATE = 44100

# fmt-chunk codec tags we accept
_FORMAT_PCM = 0x0001
_FORMAT_IEEE_FLOAT = 0x0003


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform. Samples are dimensionless, nominally in [-1, 1].

    Samples are stored as a read-only float64 array; instances can be shared
    freely across workers.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def replace_samples(self, samples: np.ndarray) -> "AudioClip":
        """New clip with the same rate and different samples."""
        return AudioClip(samples=samples, sample_rate=self.sample_rate)


def _scan_chunks(data: bytes):
    """Yield (chunk_id, payload) for every top-level RIFF sub-chunk."""
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioDecodeError(
                "chunk extends past end of file", chunk_id=cid.decode("latin1")
            )
        yield cid, body
        pos += 8 + size + (size & 1)  # chunks are word-aligned


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string into a mono clip.

    Accepts integer PCM at 8/16/24/32 bits and 32-bit IEEE float, one or
    more channels. Multi-channel audio is downmixed by arithmetic mean;
    integer samples are scaled to [-1, 1] by the type's full-scale value
    (e.g. 1/32768 for 16-bit).
    """
    if len(data) < 12:
        raise AudioDecodeError("file too short for a RIFF header", chunk_id="RIFF")
    if data[0:4] != b"RIFF":
        raise AudioDecodeError(
            "not a RIFF container", chunk_id=data[0:4].decode("latin1", "replace")
        )
    if data[8:12] != b"WAVE":
        raise AudioDecodeError(
            "RIFF form type is not WAVE",
            chunk_id=data[8:12].decode("latin1", "replace"),
        )

    fmt = None
    payload = None
    for cid, body in _scan_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise AudioDecodeError("fmt chunk too short", chunk_id="fmt ")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
            break  # fmt must precede data in well-formed files
    if fmt is None:
        raise AudioDecodeError("missing fmt chunk", chunk_id="fmt ")
    if payload is None:
        raise AudioDecodeError("missing data chunk", chunk_id="data")

    format_tag, n_channels, sample_rate, _byte_rate, block_align, bits = fmt
    if n_channels < 1:
        raise AudioDecodeError("channel count is zero", chunk_id="fmt ")
    if sample_rate <= 0:
        raise AudioDecodeError("sample rate is zero", chunk_id="fmt ")

    if format_tag == _FORMAT_PCM and bits in (8, 16, 24, 32):
        frames = _decode_pcm(payload, n_channels, bits)
    elif format_tag == _FORMAT_IEEE_FLOAT and bits == 32:
        frames = _decode_float32(payload, n_channels)
    else:
        raise AudioDecodeError(
            f"unsupported codec: format tag 0x{format_tag:04X} at {bits} bits",
            chunk_id="fmt ",
        )

    mono = frames.mean(axis=1) if n_channels > 1 else frames[:, 0]
    return AudioClip(samples=mono, sample_rate=sample_rate)


def _decode_pcm(payload: bytes, n_channels: int, bits: int) -> np.ndarray:
    bytes_per = bits // 8
    frame_bytes = bytes_per * n_channels
    n_frames = len(payload) // frame_bytes
    payload = payload[: n_frames * frame_bytes]
    if bits == 8:
        # 8-bit WAV is unsigned with midpoint 128
        raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
        scaled = (raw - 128.0) / 128.0
    elif bits == 16:
        raw = np.frombuffer(payload, dtype="<i2").astype(np.float64)
        scaled = raw / 32768.0
    elif bits == 24:
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3)
        raw = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        raw = np.where(raw >= 1 << 23, raw - (1 << 24), raw).astype(np.float64)
        scaled = raw / float(1 << 23)
    else:  # 32
        raw = np.frombuffer(payload, dtype="<i4").astype(np.float64)
        scaled = raw / float(1 << 31)
    return scaled.reshape(n_frames, n_channels)


def _decode_float32(payload: bytes, n_channels: int) -> np.ndarray:
    n_frames = len(payload) // (4 * n_channels)
    raw = np.frombuffer(payload[: n_frames * 4 * n_channels], dtype="<f4")
    return raw.astype(np.float64).reshape(n_frames, n_channels)


def encode_wav(clip: AudioClip, bits: int = 16) -> bytes:
    """Encode a clip as mono PCM WAV (16-bit) or IEEE float (32-bit).

    16-bit quantization rounds x*32768 and clips to the int16 range, so a
    decode round trip reproduces every sample within 1/32768.
    """
    if bits == 16:
        q = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        format_tag, bytes_per = _FORMAT_PCM, 2
    elif bits == 32:
        payload = clip.samples.astype("<f4").tobytes()
        format_tag, bytes_per = _FORMAT_IEEE_FLOAT, 4
    else:
        raise ValueError(f"unsupported encode width: {bits} bits")

    sr = clip.sample_rate
    fmt = struct.pack("<HHIIHH", format_tag, 1, sr, sr * bytes_per, bytes_per, bits * 1)
    chunks = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    return b"RIFF" + struct.pack("<I", len(chunks)) + chunks


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling to ``target_rate``.

    Output length is exactly round(n * target_rate / source_rate). Tones
    below the Nyquist frequency of both rates survive within a fraction of
    a dB; the identity case returns the clip unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(clip.sample_rate, int(target_rate))
    up, down = int(target_rate) // g, clip.sample_rate // g
    out = resample_poly(clip.samples, up, down)
    n_out = int(round(clip.duration_samples * target_rate / clip.sample_rate))
    if len(out) >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - len(out)))
    return AudioClip(samples=out, sample_rate=int(target_rate))
