"""Deterministic synthetic speech corpus.

Every "utterance" is a concatenation of fixed-duration sinusoid chunks: the
chunk's base frequency encodes the text token id and the relative amplitude
of harmonics 2 and 3 encodes the speaker. This makes text recoverable from
audio by a matched filter, which serves as the intelligibility oracle for
the whole stack.
"""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16_000
TEXT_VOCAB_SIZE = 64
TOKEN_SECONDS = 0.16          # 8 feature frames at 50 Hz, 2 token frames at 12.5 Hz
TOKEN_SAMPLES = 2560          # TOKEN_SECONDS * SAMPLE_RATE
BASE_FREQ_HZ = 200.0
FREQ_STEP_HZ = 35.0
MIN_DIALOGUE_SPEAKERS = 2
MAX_SPEAKERS = 5
FUNDAMENTAL_AMP = 0.5

# (harmonic-2, harmonic-3) amplitude ratios relative to the fundamental.
SPEAKER_HARMONICS = {
    1: (0.00, 0.45),
    2: (0.45, 0.00),
    3: (0.30, 0.30),
    4: (0.55, 0.15),
    5: (0.15, 0.55),
}

MANIFEST_MAGIC = "duotts-corpus"
MANIFEST_VERSION = 1


class CorpusError(ValueError):
    """Invalid corpus parameters or malformed manifest data."""


@dataclass(frozen=True)
class SynthUtterance:
    utt_id: str
    speaker_id: int
    text: tuple[int, ...]
    audio: np.ndarray           # float32 mono at 16 kHz, values on the int16 grid
    duration_s: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SynthUtterance):
            return NotImplemented
        return (
            self.utt_id == other.utt_id
            and self.speaker_id == other.speaker_id
            and self.text == other.text
            and self.duration_s == other.duration_s
            and np.array_equal(self.audio, other.audio)
        )


@dataclass(frozen=True)
class DialogueSample:
    dialogue_id: str
    n_speakers: int
    turns: tuple[SynthUtterance, ...]


def token_frequency(token_id: int) -> float:
    """Base frequency of a text token's sinusoid chunk."""
    if not 0 <= token_id < TEXT_VOCAB_SIZE:
        raise CorpusError(f"token id {token_id} outside [0, {TEXT_VOCAB_SIZE})")
    return BASE_FREQ_HZ + FREQ_STEP_HZ * token_id


def _quantize_to_int16_grid(x: np.ndarray) -> np.ndarray:
    # Snapping to the 16-bit PCM grid makes WAV round-trips exact.
    ints = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    return (ints.astype(np.float32) / 32767.0).astype(np.float32)


def token_chunk(token_id: int, speaker_id: int) -> np.ndarray:
    """One 160 ms sinusoid chunk for (token, speaker), on the int16 grid."""
    if speaker_id not in SPEAKER_HARMONICS:
        raise CorpusError(f"speaker id {speaker_id} outside 1..{MAX_SPEAKERS}")
    f0 = token_frequency(token_id)
    t = np.arange(TOKEN_SAMPLES, dtype=np.float64) / SAMPLE_RATE
    r2, r3 = SPEAKER_HARMONICS[speaker_id]
    x = np.sin(2 * np.pi * f0 * t)
    x += r2 * np.sin(2 * np.pi * 2 * f0 * t)
    x += r3 * np.sin(2 * np.pi * 3 * f0 * t)
    return _quantize_to_int16_grid(FUNDAMENTAL_AMP * x)


def synth_audio(text: tuple[int, ...] | list[int], speaker_id: int) -> np.ndarray:
    """Render a token sequence to a waveform (deterministic, no RNG)."""
    if len(text) == 0:
        raise CorpusError("text must contain at least one token")
    return np.concatenate([token_chunk(tok, speaker_id) for tok in text])


def make_utterance(utt_id: str, speaker_id: int, text: tuple[int, ...]) -> SynthUtterance:
    audio = synth_audio(text, speaker_id)
    duration_s = len(text) * TOKEN_SECONDS
    assert len(audio) == round(duration_s * SAMPLE_RATE)
    return SynthUtterance(utt_id, speaker_id, text, audio, duration_s)


def gen_monologue(seed: int, n: int, max_tokens: int) -> list[SynthUtterance]:
    """Generate n single-speaker utterances with 1..max_tokens text tokens."""
    if n < 1 or max_tokens < 1:
        raise CorpusError("n and max_tokens must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        length = int(rng.integers(1, max_tokens + 1))
        text = tuple(int(t) for t in rng.integers(0, TEXT_VOCAB_SIZE, size=length))
        speaker = int(rng.integers(1, MAX_SPEAKERS + 1))
        out.append(make_utterance(f"m{seed}_{i:05d}", speaker, text))
    return out


def gen_dialogue(
    seed: int,
    n: int,
    n_speakers: int,
    turns_range: tuple[int, int],
    max_tokens: int = 8,
) -> list[DialogueSample]:
    """Generate n dialogues whose speaker set is exactly {1..n_speakers}."""
    if not MIN_DIALOGUE_SPEAKERS <= n_speakers <= MAX_SPEAKERS:
        raise CorpusError(
            f"n_speakers must be in {MIN_DIALOGUE_SPEAKERS}..{MAX_SPEAKERS}, got {n_speakers}")
    lo, hi = turns_range
    if not 1 <= lo <= hi:
        raise CorpusError(f"bad turns_range {turns_range}")
    rng = np.random.default_rng(seed)
    samples = []
    for d in range(n):
        n_turns = max(int(rng.integers(lo, hi + 1)), n_speakers)
        speakers = rng.integers(1, n_speakers + 1, size=n_turns)
        # Pin one turn per speaker so the sample covers {1..n_speakers}.
        anchor = rng.permutation(n_turns)[:n_speakers]
        speakers[anchor] = np.arange(1, n_speakers + 1)
        turns = []
        for t in range(n_turns):
            length = int(rng.integers(1, max_tokens + 1))
            text = tuple(int(x) for x in rng.integers(0, TEXT_VOCAB_SIZE, size=length))
            turns.append(make_utterance(f"d{seed}_{d:05d}.t{t:02d}", int(speakers[t]), text))
        samples.append(DialogueSample(f"d{seed}_{d:05d}", n_speakers, tuple(turns)))
    return samples


def matched_filter_decode(audio: np.ndarray) -> list[int]:
    """Recover text tokens from audio by quadrature correlation per chunk.

    Each complete 2560-sample chunk is correlated against all 64 candidate
    base frequencies; the argmax of correlation magnitude is the decoded
    token. Phase-invariant, so it tolerates resynthesized audio.
    """
    n_chunks = len(audio) // TOKEN_SAMPLES
    t = np.arange(TOKEN_SAMPLES, dtype=np.float64) / SAMPLE_RATE
    freqs = BASE_FREQ_HZ + FREQ_STEP_HZ * np.arange(TEXT_VOCAB_SIZE)
    # (64, 2560) complex exponential bank.
    bank = np.exp(-2j * np.pi * freqs[:, None] * t[None, :])
    tokens = []
    for c in range(n_chunks):
        chunk = audio[c * TOKEN_SAMPLES : (c + 1) * TOKEN_SAMPLES].astype(np.float64)
        scores = np.abs(bank @ chunk)
        tokens.append(int(np.argmax(scores)))
    return tokens


def token_accuracy(reference: tuple[int, ...] | list[int], decoded: list[int]) -> float:
    """Fraction of reference tokens recovered at the right position."""
    if len(reference) == 0:
        return 1.0
    hits = sum(1 for r, d in zip(reference, decoded) if r == d)
    return hits / len(reference)


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    ints = np.clip(np.round(audio * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(ints.tobytes())


def read_wav(path: str | Path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected 16-bit mono PCM")
        raw = w.readframes(w.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return (ints.astype(np.float32) / 32767.0).astype(np.float32)


def _utt_record(utt: SynthUtterance, wav_rel: str) -> str:
    rec = {
        "id": utt.utt_id,
        "wav_path": wav_rel,
        "speaker_id": utt.speaker_id,
        "text_token_ids": list(utt.text),
        "duration_s": utt.duration_s,
    }
    return json.dumps(rec)


def write_manifest(samples: list[SynthUtterance] | list[DialogueSample], path: str | Path) -> None:
    """Write utterances (or dialogue turns) as WAVs plus a JSONL manifest.

    WAV files land in a wav/ directory next to the manifest; the manifest
    records reference them by relative path.
    """
    path = Path(path)
    wav_dir = path.parent / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    if samples and isinstance(samples[0], DialogueSample):
        kind = "dialogue"
        flat: list[SynthUtterance] = [t for s in samples for t in s.turns]  # type: ignore[union-attr]
    else:
        kind = "monologue"
        flat = list(samples)  # type: ignore[assignment]

    lines = [json.dumps({"format": MANIFEST_MAGIC, "version": MANIFEST_VERSION,
                         "kind": kind, "count": len(flat)})]
    for utt in flat:
        wav_rel = f"wav/{utt.utt_id}.wav"
        write_wav(path.parent / wav_rel, utt.audio)
        lines.append(_utt_record(utt, wav_rel))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[SynthUtterance] | list[DialogueSample]:
    """Inverse of write_manifest; malformed lines report their line number."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}:1: bad header: {e}") from e
    if header.get("format") != MANIFEST_MAGIC:
        raise CorpusError(f"{path}:1: not a {MANIFEST_MAGIC} manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"{path}:1: unsupported version {header.get('version')}")

    utts: list[SynthUtterance] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            wav_path = path.parent / rec["wav_path"]
            if not wav_path.exists():
                raise CorpusError(f"{path}:{lineno}: missing WAV file {wav_path}")
            utts.append(SynthUtterance(
                utt_id=rec["id"],
                speaker_id=int(rec["speaker_id"]),
                text=tuple(int(t) for t in rec["text_token_ids"]),
                audio=read_wav(wav_path),
                duration_s=float(rec["duration_s"]),
            ))
        except CorpusError:
            raise
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise CorpusError(f"{path}:{lineno}: malformed record: {e}") from e

    if header["kind"] == "monologue":
        return utts

    # Dialogue turn ids look like "<dialogue_id>.tNN"; regroup in file order.
    groups: dict[str, list[SynthUtterance]] = {}
    order: list[str] = []
    for utt in utts:
        did = utt.utt_id.rsplit(".t", 1)[0]
        if did not in groups:
            groups[did] = []
            order.append(did)
        groups[did].append(utt)
    samples = []
    for did in order:
        turns = tuple(groups[did])
        n_speakers = max(t.speaker_id for t in turns)
        samples.append(DialogueSample(did, n_speakers, turns))
    return samples
