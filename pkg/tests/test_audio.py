import struct

import numpy as np
import pytest

from escpipe.audio import AudioClip, decode_wav, encode_wav, resample
from escpipe.errors import AudioDecodeError


def wav_bytes(payload, format_tag, channels, rate, bits):
    fmt = struct.pack(
        "<HHIIHH", format_tag, channels, rate, rate * channels * bits // 8,
        channels * bits // 8, bits,
    )
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestDecode:
    def test_16bit_mono_scaling(self):
        payload = struct.pack("<4h", 0, 16384, -16384, 0)
        clip = decode_wav(wav_bytes(payload, 1, 1, 44100, 16))
        assert clip.sample_rate == 44100
        np.testing.assert_array_equal(clip.samples, [0.0, 0.5, -0.5, 0.0])

    def test_stereo_downmix_is_channel_mean(self):
        payload = struct.pack("<2f", 0.2, 0.4)
        clip = decode_wav(wav_bytes(payload, 3, 2, 48000, 32))
        np.testing.assert_allclose(clip.samples, [0.3], atol=1e-7)

    def test_8bit_unsigned_scaling(self):
        payload = bytes([128, 255, 0])
        clip = decode_wav(wav_bytes(payload, 1, 1, 8000, 8))
        np.testing.assert_allclose(clip.samples, [0.0, 127 / 128, -1.0])

    def test_24bit_scaling(self):
        vals = [0, 1 << 22, -(1 << 22)]
        payload = b"".join(int(v).to_bytes(3, "little", signed=True) for v in vals)
        clip = decode_wav(wav_bytes(payload, 1, 1, 44100, 24))
        np.testing.assert_allclose(clip.samples, [0.0, 0.5, -0.5])

    def test_32bit_int_scaling(self):
        payload = struct.pack("<2i", 1 << 30, -(1 << 30))
        clip = decode_wav(wav_bytes(payload, 1, 1, 44100, 32))
        np.testing.assert_allclose(clip.samples, [0.5, -0.5])

    def test_float32_passthrough(self):
        payload = struct.pack("<3f", 0.25, -0.75, 1.5)
        clip = decode_wav(wav_bytes(payload, 3, 1, 44100, 32))
        np.testing.assert_allclose(clip.samples, [0.25, -0.75, 1.5], atol=1e-7)

    def test_rifx_magic_rejected(self):
        data = b"RIFX" + wav_bytes(b"\x00\x00", 1, 1, 44100, 16)[4:]
        with pytest.raises(AudioDecodeError) as err:
            decode_wav(data)
        assert "RIFX" in str(err.value)

    def test_unsupported_codec_reports_chunk(self):
        with pytest.raises(AudioDecodeError) as err:
            decode_wav(wav_bytes(b"\x00\x00", 0x0055, 1, 44100, 16))  # MP3 tag
        assert "fmt" in str(err.value)

    def test_missing_data_chunk(self):
        fmt = struct.pack("<HHIIHH", 1, 1, 44100, 88200, 2, 16)
        body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        data = b"RIFF" + struct.pack("<I", len(body)) + body
        with pytest.raises(AudioDecodeError, match="data"):
            decode_wav(data)

    def test_truncated_chunk(self):
        good = wav_bytes(struct.pack("<4h", 1, 2, 3, 4), 1, 1, 44100, 16)
        with pytest.raises(AudioDecodeError):
            decode_wav(good[:-5])

    def test_not_wave_form(self):
        data = wav_bytes(b"\x00\x00", 1, 1, 44100, 16)
        data = data[:8] + b"AVI " + data[12:]
        with pytest.raises(AudioDecodeError, match="AVI"):
            decode_wav(data)


class TestEncodeRoundTrip:
    def test_16bit_roundtrip_within_half_lsb(self, rng):
        samples = rng.uniform(-1, 1, 4096)
        clip = AudioClip(samples=samples, sample_rate=44100)
        back = decode_wav(encode_wav(clip, bits=16))
        assert back.sample_rate == 44100
        assert np.abs(back.samples - samples).max() <= 1 / 32768

    def test_float32_roundtrip(self, rng):
        samples = rng.uniform(-1, 1, 512)
        clip = AudioClip(samples=samples, sample_rate=22050)
        back = decode_wav(encode_wav(clip, bits=32))
        assert np.abs(back.samples - samples).max() <= 1e-7


class TestClipInvariants:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            AudioClip(samples=np.array([0.0, np.nan]), sample_rate=44100)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioClip(samples=np.zeros(4), sample_rate=0)

    def test_samples_immutable(self):
        clip = AudioClip(samples=np.zeros(4), sample_rate=44100)
        with pytest.raises(ValueError):
            clip.samples[0] = 1.0

    def test_duration(self):
        clip = AudioClip(samples=np.zeros(441), sample_rate=44100)
        assert clip.duration_samples == 441
        assert clip.duration_seconds == pytest.approx(0.01)


class TestResample:
    def test_identity_returns_same_clip(self, make_sine):
        clip = make_sine(440, seconds=0.1)
        assert resample(clip, 44100) is clip

    def test_length_formula(self):
        clip = AudioClip(samples=np.zeros(11025), sample_rate=22050)
        assert resample(clip, 44100).duration_samples == 22050

    def test_length_formula_non_integer_ratio(self):
        clip = AudioClip(samples=np.zeros(3), sample_rate=48000)
        assert resample(clip, 44100).duration_samples == round(3 * 44100 / 48000)

    def test_tone_survives_48k_to_44k(self):
        sr = 48000
        t = np.arange(sr) / sr
        clip = AudioClip(samples=np.sin(2 * np.pi * 1000 * t), sample_rate=sr)
        out = resample(clip, 44100)
        assert out.sample_rate == 44100
        spectrum = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(out.duration_samples, 1 / 44100)
        peak = freqs[np.argmax(spectrum)]
        assert abs(peak - 1000.0) <= freqs[1]  # within one bin

    def test_amplitude_bounded(self, rng):
        # band-limited content below both Nyquists; broadband noise would
        # grow new peaks from the anti-alias filter itself
        t = np.arange(20000) / 44100
        for target in (32000, 48000, 22050):
            samples = np.zeros_like(t)
            for _ in range(4):
                f = rng.uniform(50, 9000)
                samples += rng.uniform(0.1, 0.3) * np.sin(
                    2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
                )
            clip = AudioClip(samples=samples, sample_rate=44100)
            out = resample(clip, target)
            assert np.abs(out.samples).max() <= 1.05 * np.abs(clip.samples).max()

    def test_double_resample_preserves_tone(self):
        sr = 44100
        t = np.arange(sr) / sr
        clip = AudioClip(samples=np.sin(2 * np.pi * 1000 * t), sample_rate=sr)
        back = resample(resample(clip, 22050), sr)
        mid = slice(4000, 40000)  # skip filter transients
        rms_in = np.sqrt(np.mean(clip.samples[mid] ** 2))
        rms_out = np.sqrt(np.mean(back.samples[mid] ** 2))
        assert abs(20 * np.log10(rms_out / rms_in)) < 1.0
        spectrum = np.abs(np.fft.rfft(back.samples))
        assert np.argmax(spectrum) == np.argmax(np.abs(np.fft.rfft(clip.samples)))

    def test_rejects_bad_rate(self, make_sine):
        with pytest.raises(ValueError):
            resample(make_sine(440, seconds=0.01), 0)
