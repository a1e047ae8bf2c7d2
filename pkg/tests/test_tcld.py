import pytest
import torch

from tunecascade.diffusion import v_loss
from tunecascade.dmae import build_dmae, decode
from tunecascade.errors import LatentMismatchError, ShapeError, UsageError
from tunecascade.tcld import (
    TextEmbedding,
    ToyEmbedder,
    build_tcld,
    cfg_denoise,
    cfg_drop_mask,
    collate,
    generate,
    generate_latent,
    generation_noise,
    toy_embed,
    train_step_stage2,
)

PROMPTS = ["Egyptian Darbuka, Drums, 1 of 4", "Ambient pads 2 of 2"]


@pytest.fixture
def model(tiny):
    return build_tcld(tiny, seed=0)


@pytest.fixture
def latents(tiny):
    return torch.rand(2, 8, 128, generator=torch.Generator().manual_seed(0)) * 2 - 1


class TestEmbedding:
    def test_empty_prompt_is_the_null_row(self):
        e = toy_embed("", 16)
        assert e.tokens == 1 and e.mask.tolist() == [True]
        assert torch.equal(e.vectors[0], ToyEmbedder(16).table[ToyEmbedder.NULL_ROW])

    def test_byte_tokens(self):
        e = toy_embed("héllo", 16)
        assert e.tokens == len("héllo".encode("utf-8"))

    def test_deterministic_and_seeded(self):
        assert torch.equal(toy_embed("abc", 8).vectors, toy_embed("abc", 8).vectors)
        assert not torch.equal(toy_embed("abc", 8, seed=1).vectors, toy_embed("abc", 8).vectors)
        assert not torch.equal(toy_embed("abc", 8).vectors, toy_embed("abd", 8).vectors)

    def test_collate_pads_and_masks(self):
        context, mask = collate([toy_embed("ab", 4), toy_embed("abcd", 4)])
        assert context.shape == (2, 4, 4)
        assert mask.tolist() == [[True, True, False, False], [True] * 4]
        assert not context[0, 2:].any()

    def test_embedding_validation(self):
        with pytest.raises(ShapeError):
            TextEmbedding(torch.zeros(0, 4), torch.zeros(0, dtype=torch.bool))
        with pytest.raises(ShapeError):
            TextEmbedding(torch.zeros(2, 4), torch.ones(2))

    def test_embedder_width_must_match(self, tiny):
        with pytest.raises(ShapeError):
            build_tcld(tiny, embedder=ToyEmbedder(7))


class TestConditioningDropout:
    def test_drop_frequency(self):
        drop = cfg_drop_mask(10_000, 0.1, torch.Generator().manual_seed(0))
        assert abs(drop.float().mean().item() - 0.1) < 0.01

    def test_dropped_rows_use_the_null_embedding(self, model):
        cond = model.embed(PROMPTS)
        context, mask = model.drop_conditioning(cond, torch.tensor([True, False]))
        assert torch.equal(context[0, 0], model.null_embedding.detach())
        assert mask[0].tolist() == [True] + [False] * (mask.shape[1] - 1)
        assert torch.equal(context[1], cond[0][1])

    def test_full_dropout_ignores_prompts(self, model, latents):
        model.drop_prob = 1.0
        first = train_step_stage2(model, latents, PROMPTS, torch.Generator().manual_seed(1))
        second = train_step_stage2(model, latents, ["x", "completely different"], torch.Generator().manual_seed(1))
        torch.testing.assert_close(first, second)

        replay = torch.Generator().manual_seed(1)
        torch.rand(2, generator=replay)
        sigma = torch.rand(2, generator=replay)
        eps = torch.randn(latents.shape, generator=replay)
        with torch.no_grad():
            unconditional = v_loss(model.denoise, latents, eps, sigma, model.null_context(2))
        torch.testing.assert_close(first, unconditional)

    def test_loss_is_reproducible(self, tiny, latents):
        a = train_step_stage2(build_tcld(tiny, 2), latents, PROMPTS, torch.Generator().manual_seed(3))
        b = train_step_stage2(build_tcld(tiny, 2), latents, PROMPTS, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_embedder_stays_frozen(self, model, latents):
        table = model.embedder.table.clone()
        train_step_stage2(model, latents, PROMPTS, torch.Generator().manual_seed(4))
        assert not model.embedder.table.requires_grad
        assert torch.equal(model.embedder.table, table)
        assert not any("embedder" in name for name in model.params)

    def test_channel_mismatch(self, model):
        with pytest.raises(LatentMismatchError):
            train_step_stage2(model, torch.zeros(2, 4, 128), PROMPTS, torch.Generator())

    def test_prompt_count_mismatch(self, model, latents):
        with pytest.raises(ShapeError):
            train_step_stage2(model, latents, PROMPTS[:1], torch.Generator())


class TestGuidance:
    @pytest.fixture
    def trained(self, model, perturbed):
        """A model whose conditioning actually influences the output."""
        perturbed(model, scale=0.05)
        return model.double()

    @pytest.fixture
    def inputs(self, trained):
        g = torch.Generator().manual_seed(5)
        x = torch.randn(2, 8, 128, generator=g, dtype=torch.float64)
        sigma = torch.tensor([0.4, 0.9], dtype=torch.float64)
        return x, sigma, trained.embed(PROMPTS, torch.float64)

    def test_scale_one_is_conditional(self, trained, inputs):
        x, sigma, cond = inputs
        assert torch.equal(cfg_denoise(trained, x, sigma, cond, 1.0), trained.denoise(x, sigma, cond))

    def test_scale_zero_is_unconditional(self, trained, inputs):
        x, sigma, cond = inputs
        expected = trained.denoise(x, sigma, trained.null_context(2, dtype=torch.float64))
        assert torch.equal(cfg_denoise(trained, x, sigma, cond, 0.0), expected)

    @pytest.mark.parametrize("scale", [2.0, 3.0, 7.0])
    def test_affine_in_scale(self, trained, inputs, scale):
        x, sigma, cond = inputs
        v_u = trained.denoise(x, sigma, trained.null_context(2, dtype=torch.float64))
        v_c = trained.denoise(x, sigma, cond)
        torch.testing.assert_close(
            cfg_denoise(trained, x, sigma, cond, scale), v_u + scale * (v_c - v_u), atol=1e-10, rtol=0
        )

    def test_null_prompt_collapses_every_scale(self, trained, inputs):
        x, sigma, _ = inputs
        null = trained.null_context(2, dtype=torch.float64)
        v_u = trained.denoise(x, sigma, null)
        for scale in (0.0, 1.0, 3.0, 7.0):
            torch.testing.assert_close(cfg_denoise(trained, x, sigma, null, scale), v_u, atol=1e-12, rtol=0)

    def test_empty_prompt_is_unconditional(self, trained, inputs):
        x, sigma, _ = inputs
        empty = trained.embed(["", ""], torch.float64)
        v_u = trained.denoise(x, sigma, trained.null_context(2, dtype=torch.float64))
        for scale in (0.0, 1.0, 3.0):
            assert torch.equal(cfg_denoise(trained, x, sigma, empty, scale), v_u)

    def test_empty_prompt_in_a_mixed_batch(self, trained):
        context, mask = trained.embed(["", PROMPTS[0]], torch.float64)
        null_context, null_mask = trained.null_context(1, context.shape[1], torch.float64)
        assert torch.equal(context[0], null_context[0]) and torch.equal(mask[0], null_mask[0])
        expected, _ = trained.embed(PROMPTS[:1], torch.float64)
        assert torch.equal(context[1, : expected.shape[1]], expected[0])

    def test_negative_scale(self, trained, inputs):
        x, sigma, cond = inputs
        with pytest.raises(UsageError):
            cfg_denoise(trained, x, sigma, cond, -1.0)

    def test_scales_give_distinct_latents(self, trained):
        cond = trained.embed(PROMPTS[:1], torch.float64)
        noise = torch.randn(1, 8, 128, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        outputs = [generate_latent(trained, cond, noise, 3, scale) for scale in (1.0, 3.0, 7.0)]
        assert not torch.allclose(outputs[0], outputs[1])
        assert not torch.allclose(outputs[1], outputs[2])


class TestGenerate:
    def test_generate_latent_is_deterministic(self, model):
        cond = model.embed(PROMPTS)
        noise = torch.randn(2, 8, 128, generator=torch.Generator().manual_seed(7))
        assert torch.equal(generate_latent(model, cond, noise, 3), generate_latent(model, cond, noise, 3))

    def test_generate_equals_manual_composition(self, model, tiny):
        dmae = build_dmae(tiny, seed=0)
        audio = generate(model, dmae, PROMPTS[:1], seed=11, steps_gen=2, steps_dec=2)

        eps_g, eps_d = generation_noise(model, dmae, 1, 11)
        z = generate_latent(model, model.embed(PROMPTS[:1]), eps_g, 2).clamp(-1.0, 1.0)
        manual = decode(dmae, z, eps_d, 2)
        assert torch.equal(audio, manual)
        assert audio.shape == (1, 1, model.latent_length * tiny.stage1.compression * 8)

    def test_latent_channel_mismatch(self, model, tiny):
        dmae = build_dmae(tiny, seed=0)
        dmae.latent_channels = 4
        with pytest.raises(LatentMismatchError):
            generate(model, dmae, ["x"], steps_gen=1, steps_dec=1)
