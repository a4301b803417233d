"""Synthetic tone-family corpus in the on-disk layout the pipeline expects.

Each group gets a distinct frequency band and each chosen category within it
a distinct tone; clips add light noise, random detuning, and random level so
the task stays realistic while remaining separable. Used by the desk-scale
end-to-end checks and handy for demos without the real dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, encode_wav
from .dataset import GroupLabel, Taxonomy

DEFAULT_CLIP_SECONDS = 0.5
DEFAULT_CLIPS_PER_CATEGORY = 40
DEFAULT_CATEGORIES_PER_GROUP = 4


def tone_frequency(group_index: int, sub_index: int) -> float:
    """Distinct log-spaced frequency per (group, category) pair.

    Groups start 0.9 octaves apart at 300 Hz; categories sit 0.2 octaves
    apart inside the band, so between-group gaps dominate within-group gaps
    and even the lowest band spans more than one mel bin per category.
    """
    return 300.0 * (2.0 ** (0.9 * group_index + 0.2 * sub_index))


def make_tone_clip(
    freq_hz: float,
    rng: np.random.Generator,
    sample_rate: int = 44100,
    seconds: float = DEFAULT_CLIP_SECONDS,
    noise_db: float = -30.0,
    silence_head: float = 0.0,
) -> AudioClip:
    """One tone clip with random detune/level, light noise, and an optional
    leading silent gap (for exercising the crop modifier)."""
    n = int(round(sample_rate * seconds))
    t = np.arange(n) / sample_rate
    detune = 1.0 + rng.uniform(-0.01, 0.01)
    level = rng.uniform(0.5, 1.0)
    x = level * np.sin(2.0 * np.pi * freq_hz * detune * t)
    x += rng.normal(0.0, 10.0 ** (noise_db / 20.0), n)
    if silence_head > 0:
        gap = int(round(sample_rate * silence_head))
        x = np.concatenate([np.zeros(gap), x])
    peak = np.abs(x).max()
    if peak > 0.999:
        x = x / peak * 0.999
    return AudioClip(samples=x, sample_rate=sample_rate)


def write_tone_corpus(
    out_dir,
    seed: int = 0,
    categories_per_group: int = DEFAULT_CATEGORIES_PER_GROUP,
    clips_per_category: int = DEFAULT_CLIPS_PER_CATEGORY,
    seconds: float = DEFAULT_CLIP_SECONDS,
    sample_rate: int = 44100,
    vary_lengths: bool = False,
) -> Path:
    """Generate WAVs plus meta/esc50.csv under ``out_dir``.

    Category names come from the shipped taxonomy so the standard metadata
    path works unchanged. With ``vary_lengths`` clip durations spread over
    [0.6, 1.0] x ``seconds`` to exercise corpus-maximum cropping.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "meta").mkdir(parents=True, exist_ok=True)
    taxonomy = Taxonomy.default()
    rng = np.random.default_rng(seed)

    rows = ["filename,fold,target,category,esc10,src_file,take"]
    all_categories = sorted(taxonomy.categories)
    target_of = {c: i for i, c in enumerate(all_categories)}
    clip_index = 0
    for gi, group in enumerate(GroupLabel):
        cats = taxonomy.categories_in(group)[:categories_per_group]
        for si, cat in enumerate(cats):
            freq = tone_frequency(gi, si)
            for k in range(clips_per_category):
                dur = seconds
                if vary_lengths:
                    dur = seconds * rng.uniform(0.6, 1.0)
                clip = make_tone_clip(
                    freq, rng, sample_rate=sample_rate, seconds=dur
                )
                fold = k % 5 + 1
                name = f"{fold}-{100000 + clip_index}-A-{target_of[cat]}.wav"
                (out_dir / "audio" / name).write_bytes(encode_wav(clip))
                rows.append(f"{name},{fold},{target_of[cat]},{cat},False,synth,A")
                clip_index += 1
    (out_dir / "meta" / "esc50.csv").write_text("\n".join(rows) + "\n")
    return out_dir
