"""Corpus ingestion: WAV parsing, manifests, duration capping/splitting, data files.

A corpus is represented as a :class:`Manifest` of utterance records (one per
WAV file). Manifests are plain TSV on disk so they can be inspected and diffed.
The emission helpers write the classic acoustic/language data files
(``wav.scp``, ``text``, ``utt2spk``, ``corpus.txt``, lexicon files).
"""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CorruptFileError, FormatError, OpenLidError, UnsupportedEncodingError

log = logging.getLogger(__name__)

IN_SET = "in_set"
OUT_OF_SET = "out_of_set"
SPLITS = ("unassigned", "train", "test")

MANIFEST_COLUMNS = ("id", "path", "language", "role", "duration_seconds", "split", "transcript")


@dataclass(frozen=True)
class LanguageLabel:
    """A language name plus its open-set role."""

    name: str
    role: str = IN_SET

    def __post_init__(self):
        if self.role not in (IN_SET, OUT_OF_SET):
            raise ValueError(f"language role must be {IN_SET!r} or {OUT_OF_SET!r}, got {self.role!r}")
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"language name must be non-empty without whitespace: {self.name!r}")


@dataclass
class AudioClip:
    """Mono PCM audio normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("audio samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class UtteranceRecord:
    """One utterance: id, audio path, language, transcript, duration, split."""

    id: str
    path: str
    language: LanguageLabel
    transcript: str = ""
    duration: float = 0.0
    split: str = "unassigned"

    def __post_init__(self):
        if not self.id or any(c.isspace() for c in self.id):
            raise ValueError(f"utterance id must be non-empty without whitespace: {self.id!r}")
        if self.duration <= 0:
            raise ValueError(f"utterance {self.id}: duration must be > 0, got {self.duration}")
        if self.split not in SPLITS:
            raise ValueError(f"utterance {self.id}: unknown split {self.split!r}")
        if "\t" in self.transcript or "\n" in self.transcript:
            raise ValueError(f"utterance {self.id}: transcript may not contain tabs or newlines")


class Manifest:
    """Ordered collection of utterance records, sorted by id, ids unique."""

    def __init__(self, records: Iterable[UtteranceRecord] = ()):
        recs = sorted(records, key=lambda r: r.id)
        seen = set()
        for r in recs:
            if r.id in seen:
                raise OpenLidError(f"duplicate utterance id {r.id!r} in manifest")
            seen.add(r.id)
        self.records: list[UtteranceRecord] = recs

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    @property
    def languages(self) -> tuple[LanguageLabel, ...]:
        return tuple(sorted({r.language for r in self.records}, key=lambda l: l.name))

    def total_duration(self) -> float:
        return sum(r.duration for r in self.records)

    def subset(self, predicate) -> "Manifest":
        return Manifest(r for r in self.records if predicate(r))

    def save(self, path) -> Path:
        """Write the manifest as TSV (UTF-8, LF, durations at 6 decimal places)."""
        path = Path(path)
        lines = ["\t".join(MANIFEST_COLUMNS)]
        for r in self.records:
            lines.append(
                "\t".join(
                    (r.id, r.path, r.language.name, r.language.role,
                     f"{r.duration:.6f}", r.split, r.transcript)
                )
            )
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8", newline="\n") as fh:
            header = fh.readline().rstrip("\n")
            if tuple(header.split("\t")) != MANIFEST_COLUMNS:
                raise FormatError(f"{path}: unexpected manifest header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != len(MANIFEST_COLUMNS):
                    raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(parts)}")
                uid, upath, lang, role, dur, split, transcript = parts
                records.append(
                    UtteranceRecord(
                        id=uid, path=upath, language=LanguageLabel(lang, role),
                        transcript=transcript, duration=float(dur), split=split,
                    )
                )
        return cls(records)


# --- WAV I/O (RIFF/WAVE, PCM16 mono only) ---------------------------------


def parse_wav(data: bytes) -> AudioClip:
    """Decode a PCM16 mono RIFF/WAVE byte stream into an AudioClip.

    Raises FormatError for non-RIFF input, UnsupportedEncodingError for any
    encoding other than 16-bit mono linear PCM, CorruptFileError for a
    truncated data chunk.
    """
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE stream")
    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_start + 16 > len(data):
                raise CorruptFileError("fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", data, body_start)
        elif chunk_id == b"data":
            if fmt is None:
                raise FormatError("data chunk appears before fmt chunk")
            audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
            if audio_format != 1:
                raise UnsupportedEncodingError(f"audio_format={audio_format} (only PCM=1 supported)")
            if channels != 1:
                raise UnsupportedEncodingError(f"channels={channels} (only mono supported)")
            if bits != 16:
                raise UnsupportedEncodingError(f"bits_per_sample={bits} (only 16-bit supported)")
            if body_start + chunk_size > len(data):
                raise CorruptFileError(
                    f"data chunk declares {chunk_size} bytes but only {len(data) - body_start} remain"
                )
            if chunk_size % 2:
                raise CorruptFileError("data chunk has an odd byte count for 16-bit samples")
            raw = np.frombuffer(data, dtype="<i2", count=chunk_size // 2, offset=body_start)
            return AudioClip(raw.astype(np.float64) / 32768.0, sample_rate)
        # skip unknown chunks, honoring RIFF word alignment
        pos = body_start + chunk_size + (chunk_size % 2)
    raise FormatError("missing data chunk" if fmt is not None else "missing fmt chunk")


def read_wav(path) -> AudioClip:
    return parse_wav(Path(path).read_bytes())


def write_wav_pcm16(path, samples: np.ndarray, sample_rate: int) -> Path:
    """Write float samples in [-1, 1] as a canonical 44-byte-header PCM16 WAV."""
    path = Path(path)
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)
    return path


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear resampling to the canonical rate; identity when rates match."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if clip.samples.size == 0:
        return AudioClip(clip.samples, target_rate)
    if clip.sample_rate == target_rate:
        return clip
    n_out = int(round(clip.samples.size * target_rate / clip.sample_rate))
    t_in = np.arange(clip.samples.size) / clip.sample_rate
    t_out = np.arange(n_out) / target_rate
    return AudioClip(np.interp(t_out, t_in, clip.samples), target_rate)


# --- Directory scanning ----------------------------------------------------


@dataclass
class ScanResult:
    manifest: Manifest
    warnings: int = 0


def scan_corpus(root, language: LanguageLabel) -> ScanResult:
    """Build a manifest from every ``.wav`` under ``root``.

    Utterance id is the relative path with separators replaced by ``_`` and the
    extension dropped. Transcripts come from a per-file ``.txt`` sidecar or a
    ``transcripts.tsv`` (id TAB transcript) at the corpus root. Unreadable
    files are skipped and counted in ``ScanResult.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise OpenLidError(f"corpus root does not exist: {root}")

    tsv_transcripts: dict[str, str] = {}
    tsv_path = root / "transcripts.tsv"
    if tsv_path.is_file():
        for line in tsv_path.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            uid, _, transcript = line.partition("\t")
            tsv_transcripts[uid] = transcript

    records = []
    warnings = 0
    for wav_path in sorted(root.rglob("*.wav")):
        rel = wav_path.relative_to(root)
        uid = "_".join(rel.with_suffix("").parts)
        try:
            clip = read_wav(wav_path)
        except (OSError, FormatError) as exc:
            log.warning("skipping %s: %s", wav_path, exc)
            warnings += 1
            continue
        if clip.samples.size == 0:
            log.warning("skipping %s: empty data chunk", wav_path)
            warnings += 1
            continue
        txt_path = wav_path.with_suffix(".txt")
        if txt_path.is_file():
            transcript = txt_path.read_text(encoding="utf-8").strip()
        else:
            transcript = tsv_transcripts.get(uid, "")
        records.append(
            UtteranceRecord(
                id=uid, path=str(wav_path), language=language,
                transcript=transcript, duration=round(clip.duration, 6),
            )
        )
    return ScanResult(Manifest(records), warnings)


# --- Duration equalization and splitting -----------------------------------


def equalize_duration(manifests: Mapping[str, Manifest], cap_hours: float) -> dict[str, Manifest]:
    """Cap each language at ``cap_hours``, keeping records in ascending-id order.

    Records are taken greedily while the cumulative duration stays within the
    cap; no file is ever truncated mid-audio.
    """
    if cap_hours <= 0:
        raise ValueError(f"cap must be positive, got {cap_hours}")
    cap_seconds = cap_hours * 3600.0
    out = {}
    for name, manifest in manifests.items():
        if len(manifest) == 0:
            raise OpenLidError(f"language {name!r} has no records to equalize")
        kept, cum = [], 0.0
        for r in manifest:
            if cum + r.duration <= cap_seconds:
                kept.append(r)
                cum += r.duration
        if not kept:
            log.warning("language %s: no record fits under the %.2f h cap", name, cap_hours)
        out[name] = Manifest(kept)
    return out


def split_by_duration(manifest: Manifest, train_fraction: float) -> tuple[Manifest, Manifest]:
    """Split by cumulative duration: the record crossing the boundary joins train.

    The test side is never left empty: with >= 2 records at least the last
    record goes to test.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    if len(manifest) == 0:
        raise OpenLidError("cannot split an empty manifest")
    if len(manifest) == 1:
        raise OpenLidError("cannot split a single-record manifest into train and test")
    target = train_fraction * manifest.total_duration()
    cum = 0.0
    k = 0
    for r in manifest:
        if cum >= target:
            break
        cum += r.duration
        k += 1
    k = min(k, len(manifest) - 1)
    train = Manifest(replace(r, split="train") for r in manifest.records[:k])
    test = Manifest(replace(r, split="test") for r in manifest.records[k:])
    return train, test


# --- Acoustic / language data files ----------------------------------------


def _write_lines(path: Path, lines: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(line + "\n" for line in lines)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def emit_kaldi_dir(manifest: Manifest, out) -> list[Path]:
    """Write wav.scp, text, utt2spk, corpus.txt for a manifest (sorted by id)."""
    out = Path(out)
    written = [
        _write_lines(out / "wav.scp", [f"{r.id} {r.path}" for r in manifest]),
        _write_lines(out / "text", [f"{r.id} {r.transcript}" for r in manifest]),
        _write_lines(out / "utt2spk", [f"{r.id} {r.id}" for r in manifest]),
        _write_lines(out / "corpus.txt", [r.transcript for r in manifest]),
    ]
    return written


def top_words(transcripts: Iterable[str], n: int) -> list[str]:
    """The ``n`` most frequent whitespace tokens, ties broken lexicographically."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    counts = Counter()
    for line in transcripts:
        counts.update(line.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:n]]


def emit_lexicon(words: Sequence[str], out) -> list[Path]:
    """Write a graphemic lexicon plus phone inventories.

    Every word is transcribed as its individual letters; the silence entries
    ``<sil> sil`` and ``<unk> spn`` are always present.
    """
    if not words:
        raise ValueError("word list is empty")
    for w in words:
        if not w or any(c.isspace() for c in w):
            raise ValueError(f"word contains whitespace (upstream tokenization bug): {w!r}")
    out = Path(out)
    lexicon = ["<sil> sil", "<unk> spn"]
    letters = set()
    for w in words:
        chars = list(w)
        letters.update(chars)
        lexicon.append(f"{w} {' '.join(chars)}")
    return [
        _write_lines(out / "lexicon.txt", lexicon),
        _write_lines(out / "nonsilence_phones.txt", sorted(letters)),
        _write_lines(out / "silence_phones.txt", ["sil", "spn"]),
        _write_lines(out / "optional_silence.txt", ["sil"]),
    ]
