"""Deterministic synthetic speech-like corpora for desk-scale experiments.

Each synthetic "language" is a generative recipe: a fixed triple of
formant-like resonant frequencies, a language-specific amplitude-modulation
rate, and a noise floor. Utterances of 2-6 s are emitted as PCM16 WAV until
the per-language duration budget is met. Transcripts are nonsense words drawn
from a language-specific letter distribution, so the lexicon tooling has real
input to chew on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import IN_SET, OUT_OF_SET, LanguageLabel, Manifest, UtteranceRecord, write_wav_pcm16

ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class SynthSpec:
    n_langs_in: int = 7
    n_langs_out: int = 2
    minutes_per_lang: float = 1.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_langs_in < 1 or self.n_langs_out < 0:
            raise ValueError("need at least one in-set language and a non-negative out-of-set count")
        if self.minutes_per_lang <= 0:
            raise ValueError(f"minutes_per_lang must be positive, got {self.minutes_per_lang}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")


def language_recipe(index: int) -> dict:
    """Fixed per-language synthesis parameters (distinct across indices)."""
    return {
        "formants_hz": (280.0 + 70.0 * index, 1150.0 + 160.0 * index, 2600.0 + 200.0 * index),
        "am_rate_hz": 1.5 + 0.9 * index,
        "noise_floor": 0.01 + 0.005 * index,
    }


def _utterance(rng: np.random.Generator, recipe: dict, sample_rate: int) -> np.ndarray:
    dur = rng.uniform(2.0, 6.0)
    n = int(round(dur * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    for amp, freq in zip((0.5, 0.3, 0.2), recipe["formants_hz"]):
        x += amp * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    am = 1.0 + 0.5 * np.sin(2.0 * np.pi * recipe["am_rate_hz"] * t + rng.uniform(0.0, 2.0 * np.pi))
    x = 0.35 * x * am + recipe["noise_floor"] * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x *= 0.95 / peak
    return x


def _transcript(rng: np.random.Generator, letter_probs: np.ndarray) -> str:
    words = []
    for _ in range(int(rng.integers(3, 11))):
        length = int(rng.integers(2, 9))
        idx = rng.choice(len(ALPHABET), size=length, p=letter_probs)
        words.append("".join(ALPHABET[i] for i in idx))
    return " ".join(words)


def synth_corpus(spec: SynthSpec, seed: int, out_dir) -> Manifest:
    """Generate WAV files plus a manifest; bitwise reproducible for (spec, seed)."""
    out_dir = Path(out_dir)
    budget_seconds = spec.minutes_per_lang * 60.0
    records = []
    for k in range(spec.n_langs_in + spec.n_langs_out):
        role = IN_SET if k < spec.n_langs_in else OUT_OF_SET
        label = LanguageLabel(f"lang{k:02d}", role)
        recipe = language_recipe(k)
        rng = np.random.default_rng([seed, k])
        letter_probs = rng.random(len(ALPHABET)) ** 2 + 0.02
        letter_probs /= letter_probs.sum()
        cum = 0.0
        idx = 0
        while cum < budget_seconds:
            x = _utterance(rng, recipe, spec.sample_rate)
            uid = f"{label.name}_u{idx:04d}"
            path = out_dir / label.name / f"{uid}.wav"
            write_wav_pcm16(path, x, spec.sample_rate)
            duration = round(x.size / spec.sample_rate, 6)
            records.append(
                UtteranceRecord(
                    id=uid, path=str(path), language=label,
                    transcript=_transcript(rng, letter_probs), duration=duration,
                )
            )
            cum += duration
            idx += 1
    return Manifest(records)
