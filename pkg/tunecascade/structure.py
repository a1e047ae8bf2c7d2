"""
Segment profiling of generated audio.

Files named ``<stem>_<k>_of_<N>.wav`` are grouped by segment ``k``. Each
segment reports the mean over files of the mean absolute amplitude, and the
mean over files of the variation, defined as the standard deviation of the
per-second RMS level.
"""

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .audio import Waveform, read_wav
from .errors import DataFormatError

logger = logging.getLogger(__name__)

SEGMENT_TAG = re.compile(r"_(\d+)_of_(\d+)$")
CSV_HEADER = ("segment", "files", "mean_abs", "rms_std")


@dataclass
class SegmentStats:
    segment: int
    files: int
    mean_abs: float
    rms_std: float


@dataclass
class StructureProfile:
    segments: List[SegmentStats]
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def parse_segment_tag(stem: str) -> Tuple[int, int]:
    match = SEGMENT_TAG.search(stem)
    if match is None:
        raise DataFormatError(f"no '_k_of_N' segment tag in '{stem}'")
    k, n = int(match.group(1)), int(match.group(2))
    if not 1 <= k <= n:
        raise DataFormatError(f"segment {k} of {n} is out of range")
    return k, n


def file_stats(w: Waveform) -> Tuple[float, float]:
    """(mean |x|, std of per-second RMS); audio shorter than a second is one window."""
    x = w.samples.astype(np.float64)
    mean_abs = float(np.mean(np.abs(x)))
    seconds = max(1, w.length // w.sample_rate)
    window = w.length // seconds
    frames = x[:, : seconds * window].reshape(w.channels, seconds, window)
    rms = np.sqrt(np.mean(frames**2, axis=(0, 2)))
    return mean_abs, float(np.std(rms))


def profile_directory(path: Union[str, Path]) -> StructureProfile:
    directory = Path(path)
    if not directory.is_dir():
        raise DataFormatError(f"'{directory}' is not a directory")

    per_segment: Dict[int, List[Tuple[float, float]]] = {}
    skipped: List[Tuple[str, str]] = []
    for wav in sorted(directory.glob("*.wav")):
        try:
            k, _ = parse_segment_tag(wav.stem)
            per_segment.setdefault(k, []).append(file_stats(read_wav(wav)))
        except DataFormatError as e:
            logger.warning("skipping %s: %s", wav.name, e)
            skipped.append((wav.name, str(e)))

    segments = [
        SegmentStats(
            segment=k,
            files=len(stats),
            mean_abs=float(np.mean([s[0] for s in stats])),
            rms_std=float(np.mean([s[1] for s in stats])),
        )
        for k, stats in sorted(per_segment.items())
    ]
    if not segments:
        raise DataFormatError(f"no tagged WAV files in '{directory}'")
    return StructureProfile(segments, skipped)


def format_table(profile: StructureProfile) -> str:
    lines = [
        "segment  files  mean|x|   std(per-second RMS)",
        "-------  -----  --------  -------------------",
    ]
    for s in profile.segments:
        lines.append(f"{s.segment:>7d}  {s.files:>5d}  {s.mean_abs:8.4f}  {s.rms_std:19.4f}")
    for name, reason in profile.skipped:
        lines.append(f"skipped {name}: {reason}")
    return "\n".join(lines)


def to_csv(profile: StructureProfile) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in profile.segments:
        writer.writerow([s.segment, s.files, f"{s.mean_abs:.6f}", f"{s.rms_std:.6f}"])
    return out.getvalue()
