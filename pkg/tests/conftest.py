import struct

import numpy as np
import pytest

from openlid.corpus import LanguageLabel, Manifest, UtteranceRecord


def make_wav_bytes(samples=None, sample_rate=16000, n_samples=None, channels=1,
                   bits=16, audio_format=1, truncate=0):
    """Assemble RIFF/WAVE bytes; knobs exist to build broken files on purpose."""
    if samples is None:
        samples = np.zeros(n_samples if n_samples is not None else 16, dtype=np.int16)
    else:
        samples = np.asarray(samples, dtype=np.int16)
    payload = samples.astype("<i2").tobytes()
    data_size = len(payload)
    if truncate:
        payload = payload[:-truncate]
    body = b"fmt " + struct.pack(
        "<IHHIIHH", 16, audio_format, channels, sample_rate,
        sample_rate * channels * bits // 8, channels * bits // 8, bits,
    )
    body += b"data" + struct.pack("<I", data_size) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body


def record(uid, duration=1.0, lang="lang00", role="in_set", path=None,
           transcript="", split="unassigned"):
    return UtteranceRecord(
        id=uid, path=path or f"/corpus/{uid}.wav",
        language=LanguageLabel(lang, role), transcript=transcript,
        duration=duration, split=split,
    )


def manifest_of(durations, lang="lang00", role="in_set", prefix="u"):
    return Manifest(
        record(f"{prefix}{i:03d}", duration=d, lang=lang, role=role)
        for i, d in enumerate(durations)
    )


@pytest.fixture
def toy_manifest():
    return Manifest([
        record("u1", duration=1.0, transcript="hola mundo"),
        record("u2", duration=2.0, transcript="ba ba hola"),
        record("u3", duration=0.5, transcript="ab"),
    ])
