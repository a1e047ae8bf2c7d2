import logging
from collections import OrderedDict

import numpy as np
import pytest
import torch
from scipy.stats import chi2
from torch import nn

from tunecascade.audio import Waveform
from tunecascade.checkpoint import Kind, load
from tunecascade.config import OptimConfig
from tunecascade.corpus import load_manifest
from tunecascade.dmae import build_dmae
from tunecascade.errors import DataFormatError, NonFiniteGradientError, UsageError
from tunecascade.layers import ParamStore
from tunecascade.train import (
    EmaShadow,
    Stage1Batches,
    Stage2Batches,
    Trainer,
    adamw_step,
    chunk_count,
    crop_sampler,
    fixed_chunks,
    load_stage1,
    make_optimizer,
)


def scalar_store(value: float) -> ParamStore:
    return ParamStore(OrderedDict(p=nn.Parameter(torch.tensor([value], dtype=torch.float64))))


class TestAdamW:
    def test_zero_gradient_without_decay_is_a_no_op(self):
        params = scalar_store(0.5)
        opt = make_optimizer(params, OptimConfig(weight_decay=0.0))
        params["p"].grad = torch.zeros(1, dtype=torch.float64)
        adamw_step(opt, params)
        assert params["p"].item() == 0.5

    def test_first_step_closed_form(self):
        cfg = OptimConfig(lr=1e-2, weight_decay=1e-3)
        params = scalar_store(0.5)
        opt = make_optimizer(params, cfg)
        g = 0.2
        params["p"].grad = torch.tensor([g], dtype=torch.float64)
        adamw_step(opt, params)
        expected = 0.5 * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * g / (abs(g) + cfg.eps)
        assert params["p"].item() == pytest.approx(expected, rel=1e-9)

    def test_missing_gradient_still_decays(self):
        cfg = OptimConfig()
        params = scalar_store(2.0)
        adamw_step(make_optimizer(params, cfg), params)
        assert params["p"].item() == pytest.approx(2.0 * (1 - cfg.lr * cfg.weight_decay), rel=1e-12)

    def test_gradients_are_cleared(self):
        params = scalar_store(1.0)
        params["p"].grad = torch.ones(1, dtype=torch.float64)
        adamw_step(make_optimizer(params, OptimConfig()), params)
        assert params["p"].grad is None

    def test_non_finite_gradient_is_named(self):
        params = scalar_store(1.0)
        opt = make_optimizer(params, OptimConfig())
        params["p"].grad = torch.tensor([float("inf")], dtype=torch.float64)
        with pytest.raises(NonFiniteGradientError, match="'p'"):
            adamw_step(opt, params)
        assert params["p"].item() == 1.0

    def test_clipping_warns(self, caplog):
        params = scalar_store(1.0)
        opt = make_optimizer(params, OptimConfig())
        params["p"].grad = torch.tensor([100.0], dtype=torch.float64)
        with caplog.at_level(logging.WARNING, logger="tunecascade.train"):
            adamw_step(opt, params, clip_norm=1.0, step=7)
        assert any("clipped" in r.getMessage() and "step 7" in r.getMessage() for r in caplog.records)


class TestEma:
    def test_fixed_point(self):
        params = scalar_store(0.25)
        ema = EmaShadow(params)
        for step in range(1, 11):
            ema.update(params, step)
        assert torch.equal(ema.shadow["p"], params["p"].detach())

    def test_decay_warmup(self):
        ema = EmaShadow(scalar_store(0.0), beta=0.995, power=0.7)
        assert ema.decay(1) == pytest.approx(0.5**0.7)
        assert ema.decay(1) == pytest.approx(0.6156, abs=1e-4)
        assert ema.decay(10**9) == 0.995

    def test_converges_to_constant_parameters(self):
        params = ParamStore(OrderedDict(w=nn.Parameter(torch.zeros(4, 3))))
        ema = EmaShadow(params)
        with torch.no_grad():
            params["w"].fill_(1.5)
        for step in range(1, 10_001):
            ema.update(params, step)
        assert torch.max(torch.abs(ema.shadow["w"] - 1.5)) < 1e-6

    def test_steps_start_at_one(self):
        params = scalar_store(0.0)
        with pytest.raises(UsageError):
            EmaShadow(params).update(params, 0)

    def test_apply_to(self):
        params = scalar_store(1.0)
        ema = EmaShadow(params)
        with torch.no_grad():
            params["p"].fill_(3.0)
        ema.apply_to(params)
        assert params["p"].item() == 1.0


class TestCrops:
    def ramp(self, length: int) -> Waveform:
        return Waveform(np.arange(length, dtype=np.float32)[None], 8000)

    def test_exact_length_is_identity(self):
        w = self.ramp(512)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(crop_sampler(w, 512, "random", rng).samples, w.samples)
        np.testing.assert_array_equal(crop_sampler(w, 512, "fixed").samples, w.samples)

    def test_fixed_chunks_tile_the_source(self):
        w = self.ramp(4 * 256)
        chunks = fixed_chunks(w, 256)
        assert len(chunks) == 4
        np.testing.assert_array_equal(np.concatenate([c.samples for c in chunks], axis=1), w.samples)

    def test_short_sources_are_zero_padded(self):
        w = self.ramp(100)
        crop = crop_sampler(w, 256, "fixed").samples
        np.testing.assert_array_equal(crop[0, :100], w.samples[0])
        assert not crop[0, 100:].any()
        assert crop_sampler(w, 256, "random", np.random.default_rng(0)).length == 256

    def test_chunk_count(self):
        assert chunk_count(1, 100) == 1
        assert chunk_count(200, 100) == 2
        assert chunk_count(201, 100) == 3

    def test_random_offsets_are_uniform(self):
        length, offsets = 64, 1600
        w = self.ramp(length + offsets - 1)
        rng = np.random.default_rng(42)
        starts = np.array([int(crop_sampler(w, length, "random", rng).samples[0, 0]) for _ in range(10_000)])
        assert starts.min() >= 0 and starts.max() <= offsets - 1
        counts = np.bincount(starts // 100, minlength=16)
        expected = len(starts) / 16
        statistic = float(np.sum((counts - expected) ** 2 / expected))
        assert statistic < chi2.ppf(0.999, 15)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(mode="sideways"), dict(mode="random"), dict(mode="fixed", index=5)],
    )
    def test_invalid_requests(self, kwargs):
        with pytest.raises(DataFormatError):
            crop_sampler(self.ramp(512), 256, **kwargs)


def noise_batches(rng: np.random.Generator, batch_size: int) -> torch.Tensor:
    return torch.from_numpy((rng.standard_normal((batch_size, 1, 2048)) * 0.3).astype(np.float32))


@pytest.fixture
def small(tiny):
    tiny.train.batch_size = 2
    tiny.train.checkpoint_every = 0
    return tiny


def stage1_trainer(cfg, **kwargs) -> Trainer:
    return Trainer(build_dmae(cfg, cfg.seed), Kind.STAGE1, cfg, noise_batches, **kwargs)


class TestTrainer:
    def test_loss_trace_is_deterministic(self, small):
        first = stage1_trainer(small).run(100)
        second = stage1_trainer(small).run(100)
        assert len(first) == 100
        assert first == second
        assert all(np.isfinite(first))

    def test_resume_continues_the_exact_trace(self, small, tmp_path):
        reference = stage1_trainer(small).run(10)

        interrupted = stage1_trainer(small)
        interrupted.run(5)
        path = interrupted.save(tmp_path / "stage1.ckpt")

        resumed = stage1_trainer(small)
        resumed.restore(load(path, Kind.STAGE1))
        assert resumed.step == 5
        assert resumed.run(10) == reference[5:]

    def test_run_writes_log_and_checkpoints(self, small, tmp_path):
        small.train.checkpoint_every = 2
        log = tmp_path / "loss.tsv"
        with open(log, "w", encoding="utf-8") as f:
            stage1_trainer(small, out_dir=tmp_path).run(4, f)
        lines = log.read_text(encoding="utf-8").splitlines()
        assert [line.split("\t")[0] for line in lines] == ["1", "2", "3", "4"]
        assert all(len(line.split("\t")) == 3 for line in lines)
        assert (tmp_path / "stage1-0000002.ckpt").is_file()
        assert (tmp_path / "stage1-0000004.ckpt").is_file()
        assert (tmp_path / "stage1.ckpt").is_file()

    def test_checkpoint_layout(self, small):
        trainer = stage1_trainer(small)
        trainer.run(1)
        ckpt = trainer.checkpoint()
        names = list(trainer.params)
        assert set(ckpt.subset("param/")) == set(names)
        assert set(ckpt.subset("ema/")) == set(names)
        optim = ckpt.subset("optim/")
        assert f"{names[0]}/exp_avg" in optim and f"{names[0]}/exp_avg_sq" in optim
        assert float(optim[f"{names[0]}/step"]) == 1.0
        assert ckpt.meta["step"] == 1
        assert set(ckpt.meta["rng"]) == {"torch", "numpy"}

    def test_inference_loads_ema_weights(self, small, tmp_path):
        trainer = stage1_trainer(small)
        trainer.run(3)
        model = load_stage1(trainer.save(tmp_path / "s1.ckpt"))
        for name, p in ParamStore.from_module(model).items():
            assert torch.equal(p.detach(), trainer.ema.shadow[name]), name

    def test_resume_rejects_other_kind(self, small, tmp_path):
        trainer = stage1_trainer(small)
        ckpt = trainer.checkpoint()
        ckpt.kind = Kind.STAGE2
        with pytest.raises(DataFormatError):
            trainer.restore(ckpt)

    def test_latent_kind_cannot_be_trained(self, small):
        with pytest.raises(UsageError):
            Trainer(build_dmae(small), Kind.LATENT, small, noise_batches)


class TestBatchSources:
    def test_stage1_batches(self, tiny, tone_corpus):
        records = load_manifest(tone_corpus(count=3), tiny.stage1.crop_length).records
        first = Stage1Batches(records, tiny)(np.random.default_rng(0), 4)
        second = Stage1Batches(records, tiny)(np.random.default_rng(0), 4)
        assert first.shape == (4, 1, tiny.stage1.crop_length)
        assert first.dtype == torch.float32
        assert torch.equal(first, second)

    def test_stage2_batches(self, tiny, tone_corpus):
        records = load_manifest(tone_corpus(count=2, seconds_of_crops=2), tiny.stage2.crop_length).records
        source = Stage2Batches(records, tiny, build_dmae(tiny))
        assert source.latents.shape == (4, 8, 128)
        latents, prompts = source(np.random.default_rng(0), 3)
        assert latents.shape == (3, 8, 128)
        assert len(prompts) == 3
        assert all(p.endswith(("1 of 2", "2 of 2")) for p in prompts)
