"""
Generation and codec service over trained checkpoints.

Wraps the two stages behind file-level operations: prompt -> WAV, WAV ->
latent file, latent file -> WAV. Outputs are named by a hash of the request
when no path is given, and an existing output for the same request is reused.
"""

import hashlib
import json
import logging
import re
import time
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from .audio import Waveform, read_wav, write_wav
from .checkpoint import Checkpoint, Kind, open_checkpoint, save, stored_checksum
from .dmae import DmaeModel, decode, encode
from .errors import CheckpointError, DataFormatError, LatentMismatchError, UsageError
from .tcld import TcldModel, generate
from .train import load_stage1, load_stage2

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHUNK_TAG = re.compile(r"(\d+) of (\d+)\s*$")


def segment_suffix(prompt: str) -> str:
    """``"_k_of_N"`` for prompts ending in a chunk tag, otherwise empty."""
    match = CHUNK_TAG.search(prompt)
    if match is None:
        return ""
    return f"_{match.group(1)}_of_{match.group(2)}"


def apply_volume(samples: np.ndarray, volume: float = 1.0) -> np.ndarray:
    """Post-gain with clipping to [-1, 1]; a non-finite gain counts as 1."""
    gain = float(volume)
    if not np.isfinite(gain):
        gain = 1.0
    return np.clip(samples * gain, -1.0, 1.0)


class MusicService:
    """Text-to-music and codec operations for a pair of trained stages."""

    def __init__(
        self,
        stage1_path: PathLike,
        stage2_path: Optional[PathLike] = None,
        steps_gen: Optional[int] = None,
        steps_dec: Optional[int] = None,
        cfg_scale: Optional[float] = None,
        volume: float = 1.0,
        pcm16: bool = False,
        progress: bool = False,
    ):
        stage1_path, stage2_path = self._ensure_checkpoints(stage1_path, stage2_path)
        self.stage1_path = stage1_path
        self.stage2_path = stage2_path
        self.checksums = {
            "stage1": f"{stored_checksum(stage1_path):016x}",
            "stage2": f"{stored_checksum(stage2_path):016x}" if stage2_path else None,
        }
        self.dmae: DmaeModel = load_stage1(stage1_path)
        self.tcld: Optional[TcldModel] = load_stage2(stage2_path) if stage2_path else None

        sampling = (self.tcld or self.dmae).run_config.sampling
        self.steps_gen = steps_gen or sampling.steps_gen
        self.steps_dec = steps_dec or sampling.steps_dec
        self.cfg_scale = sampling.cfg_scale if cfg_scale is None else cfg_scale
        self.clamp = sampling.clamp_latent
        self.volume = float(volume)
        self.pcm16 = pcm16
        self.progress = progress

    def _ensure_checkpoints(self, stage1_path: PathLike, stage2_path: Optional[PathLike]):
        """Both checkpoint files must exist before any model is built."""
        for path in (stage1_path, stage2_path):
            if path is not None and not Path(path).is_file():
                raise CheckpointError(f"checkpoint '{path}' not found")
        return Path(stage1_path), Path(stage2_path) if stage2_path else None

    def get_data_hash(self, input_data: dict) -> str:
        """
        SHA-256 of the request dictionary, serialized with sorted keys.

        Parameters:
            input_data (dict): prompt, seed, step counts, guidance scale, checkpoints.

        Returns:
            str: the hex digest used as the output file stem.
        """
        data_str = json.dumps(input_data, sort_keys=True)
        return hashlib.sha256(data_str.encode("utf-8")).hexdigest()

    def _write(self, path: Path, samples: np.ndarray) -> Path:
        w = Waveform(apply_volume(samples, self.volume), self.dmae.sample_rate)
        path.parent.mkdir(parents=True, exist_ok=True)
        return write_wav(path, w, pcm16=self.pcm16)

    def text_to_music(self, prompt: str, output_file: PathLike, seed: int = 0) -> Dict[str, Any]:
        """Generate one clip for ``prompt`` and write it to ``output_file``."""
        if self.tcld is None:
            raise UsageError("generation needs a stage-2 checkpoint")
        began = time.perf_counter()
        with torch.no_grad():
            audio = generate(
                self.tcld,
                self.dmae,
                [prompt],
                seed=seed,
                steps_gen=self.steps_gen,
                steps_dec=self.steps_dec,
                scale=self.cfg_scale,
                clamp=self.clamp,
                progress=self.progress,
            )
        path = self._write(Path(output_file), audio[0].numpy())
        elapsed = time.perf_counter() - began
        logger.info("saved %s in %.2fs", path, elapsed)
        return {
            "output": str(path),
            "latent_shape": [self.tcld.latent_channels, self.tcld.latent_length],
            "steps_gen": self.steps_gen,
            "steps_dec": self.steps_dec,
            "elapsed": elapsed,
        }

    def generate_from_text(
        self, prompt: str, cache_dir: PathLike = ".", path: Optional[PathLike] = None, seed: int = 0
    ) -> Dict[str, Any]:
        input_data = {
            "prompt": prompt,
            "seed": seed,
            "steps_gen": self.steps_gen,
            "steps_dec": self.steps_dec,
            "cfg_scale": self.cfg_scale,
            "volume": self.volume,
            "pcm16": self.pcm16,
            "checkpoints": self.checksums,
        }
        if path is None:
            audio_path = Path(cache_dir) / f"{self.get_data_hash(input_data)[:16]}{segment_suffix(prompt)}.wav"
            if audio_path.exists():
                logger.info("reusing %s", audio_path)
                return {"input_text": prompt, "input_data": input_data, "original_audio": str(audio_path), "cached": True}
        else:
            audio_path = Path(path)
            audio_path = audio_path.with_name(audio_path.stem + segment_suffix(prompt) + audio_path.suffix)

        result = self.text_to_music(prompt, audio_path, seed)
        return {
            "input_text": prompt,
            "input_data": input_data,
            "original_audio": result["output"],
            "cached": False,
            **result,
        }

    def encode_file(self, wav_path: PathLike, latent_path: PathLike) -> Dict[str, Any]:
        """WAV -> latent container; input is zero-padded to the next valid length."""
        m = self.dmae
        w = read_wav(wav_path)
        if w.sample_rate != m.sample_rate or w.channels != m.channels:
            raise DataFormatError(
                f"'{wav_path}' is {w.channels} ch at {w.sample_rate} Hz, "
                f"model expects {m.channels} ch at {m.sample_rate} Hz"
            )
        unit = int(np.lcm(m.latent_hop, m.decoder.config.total_factor))
        padded = max(unit * -(-w.length // unit), unit * -(-m.n_fft // unit))
        samples = np.pad(w.samples, ((0, 0), (0, padded - w.length)))
        with torch.no_grad():
            z = encode(m, Waveform(samples, w.sample_rate))
        ckpt = Checkpoint(
            Kind.LATENT,
            meta={
                "original_length": w.length,
                "sample_rate": w.sample_rate,
                "channels": w.channels,
                "latent_channels": m.latent_channels,
                "latent_hop": m.latent_hop,
            },
        )
        ckpt.tensors["latent"] = z[0].numpy()
        save(ckpt, latent_path)
        return {"output": str(latent_path), "latent_shape": list(z.shape[1:]), "original_length": w.length}

    def decode_file(self, latent_path: PathLike, wav_path: PathLike, seed: int = 0) -> Dict[str, Any]:
        """Latent container -> WAV, trimmed to the length recorded at encode time."""
        m = self.dmae
        file = open_checkpoint(latent_path, Kind.LATENT)
        if "latent" not in file.table:
            raise CheckpointError(f"{latent_path}: no 'latent' tensor")
        shape = file.table["latent"][0]
        if len(shape) != 2 or shape[0] != m.latent_channels:
            raise LatentMismatchError(
                f"latent {shape} does not have the decoder's {m.latent_channels} channels"
            )
        z = torch.from_numpy(file.tensors()["latent"])[None]
        noise = torch.randn(
            (1, m.channels, z.shape[-1] * m.latent_hop), generator=torch.Generator().manual_seed(seed)
        )
        began = time.perf_counter()
        audio = decode(m, z, noise, self.steps_dec, self.progress)[0].numpy()
        length = int(file.meta.get("original_length", audio.shape[-1]))
        path = self._write(Path(wav_path), audio[:, :length])
        return {"output": str(path), "samples": length, "elapsed": time.perf_counter() - began}
