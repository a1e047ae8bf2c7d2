"""
Training loop shared by both stages: AdamW, power-warmup EMA, batch sources
and checkpoint persistence.

Everything random in a run comes from two generators seeded from the run
seed: a torch generator (noise levels, noise, conditioning dropout) and a
numpy generator (crops, prompts). Both are saved in checkpoints, so a
resumed run continues the exact loss trace of an uninterrupted one.
"""

import base64
import json
import logging
import time
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn
from tqdm import tqdm

from .checkpoint import Checkpoint, CheckpointFile, Kind, open_checkpoint, save
from .config import OptimConfig, RunConfig, config_from_container, config_to_container
from .corpus import (
    AudioCache,
    Pair,
    TrackRecord,
    build_prompt,
    chunk_count,
    crop_sampler,
    fixed_chunks,
    make_pairs,
)
from .dmae import DmaeModel, build_dmae, encode, train_step_stage1
from .errors import CheckpointError, NonFiniteGradientError, UsageError
from .layers import GradTape, ParamStore
from .tcld import TcldModel, build_tcld, train_step_stage2

logger = logging.getLogger(__name__)

__all__ = [
    "EmaShadow",
    "Trainer",
    "adamw_step",
    "chunk_count",
    "clip_gradients",
    "crop_sampler",
    "fixed_chunks",
    "load_stage1",
    "load_stage2",
    "make_optimizer",
]

StepFn = Callable[[nn.Module, Any, torch.Generator, GradTape], Tensor]
BatchSource = Callable[[np.random.Generator, int], Any]


def make_optimizer(params: ParamStore, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        list(params.values()),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def clip_gradients(params: ParamStore, max_norm: float, step: int = 0) -> float:
    """Global-norm clip; returns the pre-clip norm and warns whenever it bites."""
    norm = float(torch.nn.utils.clip_grad_norm_(list(params.values()), max_norm))
    if norm > max_norm:
        logger.warning("step %d: gradient norm %.4g clipped to %.4g", step, norm, max_norm)
    return norm


def adamw_step(
    optimizer: torch.optim.Optimizer,
    params: ParamStore,
    clip_norm: Optional[float] = None,
    step: int = 0,
) -> None:
    """
    Apply one AdamW update from the populated gradients, then clear them.

    Parameters without a gradient take a zero one so that decoupled weight
    decay reaches every parameter on every step.
    """
    for name, p in params.items():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.all(torch.isfinite(p.grad)):
            params.clear_grads()
            raise NonFiniteGradientError(name)
    if clip_norm:
        clip_gradients(params, clip_norm, step)
    optimizer.step()
    params.clear_grads()


class EmaShadow:
    """Exponential moving average of parameters with a power-law warmup of the decay."""

    def __init__(self, params: ParamStore, beta: float = 0.995, power: float = 0.7):
        self.beta = beta
        self.power = power
        self.shadow: Dict[str, Tensor] = params.snapshot()

    def decay(self, step: int) -> float:
        return min(self.beta, (1.0 - 1.0 / (step + 1)) ** self.power)

    @torch.no_grad()
    def update(self, params: ParamStore, step: int) -> float:
        if step < 1:
            raise UsageError(f"EMA steps start at 1, got {step}")
        decay = self.decay(step)
        for name, p in params.items():
            self.shadow[name].lerp_(p.detach(), 1.0 - decay)
        return decay

    def apply_to(self, params: ParamStore) -> None:
        """Overwrite ``params`` with the averaged values (for inference)."""
        params.load(self.shadow)


def _encode_rng(generator: torch.Generator, rng: np.random.Generator) -> Dict[str, str]:
    return {
        "torch": base64.b64encode(generator.get_state().numpy().tobytes()).decode("ascii"),
        "numpy": json.dumps(rng.bit_generator.state),
    }


def _restore_rng(state: Dict[str, str], generator: torch.Generator, rng: np.random.Generator) -> None:
    raw = np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()
    generator.set_state(torch.from_numpy(raw))
    rng.bit_generator.state = json.loads(state["numpy"])


class Stage1Batches:
    """Random crops of uniformly chosen records, stacked to [b, c, crop]."""

    def __init__(self, records: Sequence[TrackRecord], cfg: RunConfig, cache: Optional[AudioCache] = None):
        self.records = list(records)
        self.crop_length = cfg.stage1.crop_length
        self.cache = cache or AudioCache(cfg.audio.sample_rate, cfg.audio.channels)
        self._stream: Optional[Iterator[Pair]] = None
        self._rng: Optional[np.random.Generator] = None

    def __call__(self, rng: np.random.Generator, batch_size: int) -> Tensor:
        if self._stream is None or self._rng is not rng:
            self._stream, self._rng = make_pairs(self.records, self.crop_length, 1, rng, cache=self.cache), rng
        crops = [pair.audio.samples for pair in islice(self._stream, batch_size)]
        return torch.from_numpy(np.stack(crops).astype(np.float32))


class Stage2Batches:
    """
    (latents, prompts) batches over every fixed chunk of the corpus.

    Chunks are encoded once with the frozen stage-1 model; prompts are rebuilt
    on every draw so field dropout and joining vary across epochs.
    """

    def __init__(
        self,
        records: Sequence[TrackRecord],
        cfg: RunConfig,
        dmae: DmaeModel,
        cache: Optional[AudioCache] = None,
        encode_batch: int = 8,
    ):
        self.spec = cfg.prompt
        cache = cache or AudioCache(cfg.audio.sample_rate, cfg.audio.channels)
        rng = np.random.default_rng(cfg.seed)
        self.pairs: List[Pair] = list(make_pairs(records, cfg.stage2.crop_length, 2, rng, self.spec, cache))
        latents = []
        with torch.no_grad():
            for start in range(0, len(self.pairs), encode_batch):
                chunk = self.pairs[start : start + encode_batch]
                audio = torch.from_numpy(np.stack([p.audio.samples for p in chunk]).astype(np.float32))
                latents.append(encode(dmae, audio))
        self.latents = torch.cat(latents)
        logger.info("encoded %d chunks into latents %s", len(self.pairs), tuple(self.latents.shape[1:]))

    def __call__(self, rng: np.random.Generator, batch_size: int) -> Tuple[Tensor, List[str]]:
        index = rng.integers(len(self.pairs), size=batch_size)
        prompts = [build_prompt(self.pairs[i].record, self.pairs[i].chunk, self.spec, rng) for i in index]
        return self.latents[torch.from_numpy(index)], prompts


def stage1_step(model: nn.Module, batch: Tensor, generator: torch.Generator, tape: GradTape) -> Tensor:
    return train_step_stage1(model, batch, generator, tape)  # type: ignore[arg-type]


def stage2_step(
    model: nn.Module, batch: Tuple[Tensor, List[str]], generator: torch.Generator, tape: GradTape
) -> Tensor:
    latents, prompts = batch
    return train_step_stage2(model, latents, prompts, generator, tape)  # type: ignore[arg-type]


class Trainer:
    def __init__(
        self,
        model: nn.Module,
        kind: Kind,
        cfg: RunConfig,
        batches: BatchSource,
        step_fn: Optional[StepFn] = None,
        out_dir: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ):
        if kind not in (Kind.STAGE1, Kind.STAGE2):
            raise UsageError(f"cannot train a {kind.name.lower()} container")
        self.model = model.train()
        self.kind = kind
        self.cfg = cfg
        self.batches = batches
        self.step_fn = step_fn or (stage1_step if kind == Kind.STAGE1 else stage2_step)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress

        self.params = ParamStore.from_module(model)
        self.optimizer = make_optimizer(self.params, cfg.optim)
        self.ema = EmaShadow(self.params, cfg.ema.beta, cfg.ema.power)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.losses: List[float] = []

    @property
    def stem(self) -> str:
        return f"stage{int(self.kind)}"

    def train_step(self) -> float:
        self.step += 1
        batch = self.batches(self.rng, self.cfg.train.batch_size)
        tape = GradTape(self.params)
        loss = self.step_fn(self.model, batch, self.generator, tape)
        adamw_step(self.optimizer, self.params, self.cfg.optim.clip_norm, self.step)
        self.ema.update(self.params, self.step)
        value = float(loss)
        self.losses.append(value)
        logger.debug("step %d loss %.6g", self.step, value)
        return value

    def run(self, steps: Optional[int] = None, log: Optional[TextIO] = None) -> List[float]:
        """Train up to ``steps`` total steps, writing ``step<TAB>loss<TAB>wall_ms`` lines to ``log``."""
        target = self.cfg.train.steps if steps is None else steps
        every = self.cfg.train.checkpoint_every
        start = self.step
        for _ in tqdm(range(start, target), desc=self.stem, disable=not self.progress):
            began = time.perf_counter()
            loss = self.train_step()
            if log is not None:
                log.write(f"{self.step}\t{loss:.9g}\t{(time.perf_counter() - began) * 1000:.1f}\n")
                log.flush()
            if self.out_dir is not None and every and self.step % every == 0:
                self.save(self.out_dir / f"{self.stem}-{self.step:07d}.ckpt")
        if self.out_dir is not None and self.step > start:
            self.save(self.out_dir / f"{self.stem}.ckpt")
        done = self.step - start
        return self.losses[len(self.losses) - done :]

    def checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint(
            self.kind,
            meta={
                "config": config_to_container(self.cfg),
                "step": self.step,
                "rng": _encode_rng(self.generator, self.rng),
            },
        )
        state = self.optimizer.state_dict()["state"]
        for name, p in self.params.items():
            ckpt.tensors[f"param/{name}"] = p.detach().cpu().numpy()
        for name, value in self.ema.shadow.items():
            ckpt.tensors[f"ema/{name}"] = value.cpu().numpy()
        for index, name in enumerate(self.params):
            moments = state.get(index)
            if moments:
                ckpt.tensors[f"optim/{name}/exp_avg"] = moments["exp_avg"].cpu().numpy()
                ckpt.tensors[f"optim/{name}/exp_avg_sq"] = moments["exp_avg_sq"].cpu().numpy()
                ckpt.tensors[f"optim/{name}/step"] = np.asarray(float(moments["step"]), dtype=np.float32)
        return ckpt

    def save(self, path: Union[str, Path]) -> Path:
        return save(self.checkpoint(), path)

    def restore(self, ckpt: Union[Checkpoint, CheckpointFile]) -> None:
        """Continue from a checkpoint written by a trainer of the same kind."""
        if isinstance(ckpt, CheckpointFile):
            ckpt = ckpt.to_checkpoint()
        if ckpt.kind != self.kind:
            raise CheckpointError(f"cannot resume {self.stem} from a {ckpt.kind.name.lower()} checkpoint")
        to_tensor: Callable[[np.ndarray], Tensor] = torch.from_numpy
        self.params.load({n: to_tensor(v) for n, v in ckpt.subset("param/").items()})
        ema = ckpt.subset("ema/")
        for name in self.ema.shadow:
            self.ema.shadow[name] = to_tensor(ema[name]).clone()

        optim = ckpt.subset("optim/")
        state: Dict[int, Dict[str, Tensor]] = {}
        for index, name in enumerate(self.params):
            if f"{name}/exp_avg" in optim:
                state[index] = {
                    "step": torch.tensor(float(optim[f"{name}/step"])),
                    "exp_avg": to_tensor(optim[f"{name}/exp_avg"]),
                    "exp_avg_sq": to_tensor(optim[f"{name}/exp_avg_sq"]),
                }
        groups = self.optimizer.state_dict()["param_groups"]
        self.optimizer.load_state_dict({"state": state, "param_groups": groups})

        self.step = int(ckpt.meta["step"])
        _restore_rng(ckpt.meta["rng"], self.generator, self.rng)
        logger.info("resumed %s at step %d", self.stem, self.step)


def _load_model(path: Union[str, Path], kind: Kind, build: Callable[[RunConfig], nn.Module]) -> nn.Module:
    file = open_checkpoint(path, kind)
    cfg = config_from_container(file.meta.get("config"))
    model = build(cfg)
    shapes = {name: tuple(p.shape) for name, p in ParamStore.from_module(model).items()}
    prefix = "ema/" if any(n.startswith("ema/") for n in file.table) else "param/"
    file.check_shapes(shapes, prefix)
    tensors = file.tensors()
    ParamStore.from_module(model).load(
        {name: torch.from_numpy(tensors[prefix + name]) for name in shapes}
    )
    logger.info("loaded %s weights from %s (step %s)", prefix.rstrip("/"), path, file.meta.get("step"))
    return model.eval()


def load_stage1(path: Union[str, Path]) -> DmaeModel:
    """Stage-1 model for inference, with EMA weights when the checkpoint has them."""
    return _load_model(path, Kind.STAGE1, build_dmae)  # type: ignore[return-value]


def load_stage2(path: Union[str, Path]) -> TcldModel:
    return _load_model(path, Kind.STAGE2, build_tcld)  # type: ignore[return-value]
