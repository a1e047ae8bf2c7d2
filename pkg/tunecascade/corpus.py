"""
Training corpus: track manifests, crops and prompt construction.

A manifest is a UTF-8 file with one tab-separated record per line:

    audio_path  title  artist  album  genre  year

Relative audio paths resolve against the manifest's directory. Blank lines
and lines starting with ``#`` are ignored. Prompts are built from the
metadata fields (shuffled, randomly dropped, randomly comma-joined) followed
by a chunk tag ``"k of N"`` naming which fixed crop of the track they cover.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .audio import Waveform, read_wav, wav_frames
from .errors import DataFormatError

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("audio_path", "title", "artist", "album", "genre", "year")


@dataclass
class PromptSpec:
    drop_prob: float = 0.1
    comma_prob: float = 0.5
    shuffle: bool = True


@dataclass
class TrackRecord:
    audio_path: Path
    title: str = ""
    artist: str = ""
    album: str = ""
    genre: str = ""
    year: str = ""
    chunk_total: int = 1

    @property
    def fields(self) -> List[str]:
        return [f for f in (self.title, self.artist, self.album, self.genre, self.year) if f]


class ManifestError(NamedTuple):
    line: int
    message: str


@dataclass
class Manifest:
    records: List[TrackRecord]
    errors: List[ManifestError] = field(default_factory=list)

    def report(self) -> str:
        return "\n".join(f"line {e.line}: {e.message}" for e in self.errors)


def chunk_count(length: int, crop_length: int) -> int:
    """Number of fixed crops covering ``length`` samples (the last one zero-padded)."""
    return max(1, math.ceil(length / crop_length))


def _pad_right(samples: np.ndarray, length: int) -> np.ndarray:
    if samples.shape[1] >= length:
        return samples
    return np.pad(samples, ((0, 0), (0, length - samples.shape[1])))


def crop_sampler(
    w: Waveform,
    length: int,
    mode: str,
    rng: Optional[np.random.Generator] = None,
    index: int = 0,
) -> Waveform:
    """
    One crop of ``length`` samples.

    ``mode="random"`` draws a uniform start offset from ``rng``;
    ``mode="fixed"`` takes the ``index``-th (0-based) non-overlapping chunk.
    Sources shorter than needed are zero-padded on the right.
    """
    if mode == "random":
        if rng is None:
            raise DataFormatError("random crops need a generator")
        samples = _pad_right(w.samples, length)
        start = int(rng.integers(0, samples.shape[1] - length + 1))
    elif mode == "fixed":
        total = chunk_count(w.length, length)
        if not 0 <= index < total:
            raise DataFormatError(f"chunk index {index} outside 0..{total - 1}")
        samples = _pad_right(w.samples, total * length)
        start = index * length
    else:
        raise DataFormatError(f"unknown crop mode '{mode}', expected 'random' or 'fixed'")
    return Waveform(samples[:, start : start + length], w.sample_rate)


def fixed_chunks(w: Waveform, length: int) -> List[Waveform]:
    return [crop_sampler(w, length, "fixed", index=i) for i in range(chunk_count(w.length, length))]


def build_prompt(
    rec: TrackRecord, chunk_index: int, spec: PromptSpec, rng: np.random.Generator
) -> str:
    """
    Text prompt for chunk ``chunk_index`` (1-based) of ``rec``.

    The chunk tag is never dropped and always comes last.
    """
    if not 1 <= chunk_index <= rec.chunk_total:
        raise DataFormatError(f"chunk {chunk_index} outside 1..{rec.chunk_total}")
    fields = rec.fields
    if spec.shuffle:
        fields = [fields[i] for i in rng.permutation(len(fields))]
    kept = [f for f in fields if rng.random() >= spec.drop_prob]
    sep = ", " if rng.random() < spec.comma_prob else " "
    return sep.join(kept + [f"{chunk_index} of {rec.chunk_total}"])


def _parse_line(text: str, base: Path, crop_length: Optional[int]) -> TrackRecord:
    parts = text.rstrip("\r\n").split("\t")
    if len(parts) > len(MANIFEST_FIELDS):
        raise DataFormatError(f"expected at most {len(MANIFEST_FIELDS)} tab-separated fields, got {len(parts)}")
    parts += [""] * (len(MANIFEST_FIELDS) - len(parts))
    path_text, title, artist, album, genre, year = (p.strip() for p in parts)
    if not path_text:
        raise DataFormatError("missing audio_path")
    path = Path(path_text)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise DataFormatError(f"audio file '{path}' not found")
    total = chunk_count(wav_frames(path), crop_length) if crop_length else 1
    return TrackRecord(path, title, artist, album, genre, year, chunk_total=total)


def load_manifest(path: Union[str, Path], crop_length: Optional[int] = None) -> Manifest:
    """
    Parse a manifest; malformed lines are reported, the rest still load.

    With ``crop_length`` each record's ``chunk_total`` is computed from the
    audio length.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataFormatError(f"cannot read manifest '{path}': {e}") from e

    manifest = Manifest(records=[])
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            manifest.records.append(_parse_line(line, path.parent, crop_length))
        except DataFormatError as e:
            logger.warning("%s:%d: %s", path, number, e)
            manifest.errors.append(ManifestError(number, str(e)))

    if not manifest.records:
        detail = f"\n{manifest.report()}" if manifest.errors else ""
        raise DataFormatError(f"manifest '{path}' has no usable records{detail}")
    logger.info("loaded %d records from %s (%d lines rejected)", len(manifest.records), path, len(manifest.errors))
    return manifest


class AudioCache:
    """Decoded waveforms by path, checked against the expected rate and channel count."""

    def __init__(self, sample_rate: Optional[int] = None, channels: Optional[int] = None):
        self.sample_rate = sample_rate
        self.channels = channels
        self._items: Dict[Path, Waveform] = {}

    def get(self, path: Path) -> Waveform:
        if path not in self._items:
            w = read_wav(path)
            if self.sample_rate is not None and w.sample_rate != self.sample_rate:
                raise DataFormatError(f"'{path}' has sample rate {w.sample_rate}, expected {self.sample_rate}")
            if self.channels is not None and w.channels != self.channels:
                raise DataFormatError(f"'{path}' has {w.channels} channels, expected {self.channels}")
            self._items[path] = w
        return self._items[path]

    def __len__(self) -> int:
        return len(self._items)


class Pair(NamedTuple):
    audio: Waveform
    prompt: Optional[str]
    record: TrackRecord
    chunk: int


def make_pairs(
    records: Sequence[TrackRecord],
    crop_length: int,
    stage: int,
    rng: np.random.Generator,
    spec: Optional[PromptSpec] = None,
    cache: Optional[AudioCache] = None,
) -> Iterator[Pair]:
    """
    Training pairs.

    Stage 2 walks every fixed chunk of every record once, in order, each with
    a prompt carrying its aligned "k of N" tag. Stage 1 yields an endless
    stream of random crops from uniformly chosen records, without prompts.
    """
    if not records:
        raise DataFormatError("no records to pair")
    spec = spec or PromptSpec()
    cache = cache or AudioCache()

    if stage == 2:
        for rec in records:
            w = cache.get(rec.audio_path)
            total = chunk_count(w.length, crop_length)
            if total != rec.chunk_total:
                rec = replace(rec, chunk_total=total)
            for k in range(1, total + 1):
                yield Pair(crop_sampler(w, crop_length, "fixed", index=k - 1), build_prompt(rec, k, spec, rng), rec, k)
    elif stage == 1:
        while True:
            rec = records[int(rng.integers(len(records)))]
            yield Pair(crop_sampler(cache.get(rec.audio_path), crop_length, "random", rng), None, rec, 0)
    else:
        raise DataFormatError(f"stage must be 1 or 2, got {stage}")
