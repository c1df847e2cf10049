import numpy as np
import pytest
import torch

from mathscribe.checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from mathscribe.gan import (
    ConditionalBatchNorm2d,
    Discriminator,
    EmptyBatch,
    GANModelConfig,
    Generator,
    NegativeLambda,
    NonDivisibleSpatialDims,
    SelfAttention2d,
    ShapeMismatch,
    combine_losses,
    hinge_d_loss,
    hinge_g_loss,
)
from oracles import attention_oracle, central_difference_grads, max_relative_error


class TestSelfAttention:
    def test_gamma_zero_is_identity_exactly(self):
        att = SelfAttention2d(8)
        x = torch.randn(3, 8, 5, 6)
        assert torch.equal(att(x), x)

    def test_single_position_softmax_is_one(self):
        att = SelfAttention2d(4)
        with torch.no_grad():
            att.gamma.fill_(0.7)
        x = torch.randn(2, 4, 1, 1)
        hx = att.h(x)
        assert torch.allclose(att(x), 0.7 * hx + x, atol=1e-6)

    def test_two_position_unit_projection_hand_case(self):
        att = SelfAttention2d(2, reduction=1).double()
        with torch.no_grad():
            att.f.weight.copy_(torch.eye(2).view(2, 2, 1, 1))
            att.g.weight.copy_(torch.eye(2).view(2, 2, 1, 1))
            att.h.weight.copy_(torch.eye(2).view(2, 2, 1, 1))
            att.gamma.fill_(1.0)
        x = torch.tensor([[[[0.5, -1.0]], [[2.0, 0.25]]]], dtype=torch.float64)  # (1,2,1,2)
        out = att(x)
        expected = attention_oracle(x[0].numpy(), np.eye(2), np.eye(2), np.eye(2), 1.0)
        assert np.abs(out[0].detach().numpy() - expected).max() < 1e-6

    def test_matches_oracle_random(self):
        torch.manual_seed(0)
        att = SelfAttention2d(4, reduction=2).double()
        with torch.no_grad():
            att.gamma.fill_(0.6)
        x = torch.randn(2, 4, 3, 2, dtype=torch.float64)
        out = att(x)
        for b in range(2):
            expected = attention_oracle(
                x[b].numpy(),
                att.f.weight.detach().numpy()[:, :, 0, 0],
                att.g.weight.detach().numpy()[:, :, 0, 0],
                att.h.weight.detach().numpy()[:, :, 0, 0],
                0.6,
            )
            assert np.abs(out[b].detach().numpy() - expected).max() < 1e-6

    def test_shape_mismatch(self):
        att = SelfAttention2d(4)
        with pytest.raises(ShapeMismatch):
            att(torch.randn(1, 3, 2, 2))

    def test_gamma_gate_blocks_projection_grads_at_init(self):
        att = SelfAttention2d(4)
        x = torch.randn(1, 4, 3, 3)
        probe = torch.randn_like(x)
        (att(x) * probe).sum().backward()
        assert torch.equal(att.h.weight.grad, torch.zeros_like(att.h.weight))
        assert torch.equal(att.f.weight.grad, torch.zeros_like(att.f.weight))
        assert torch.equal(att.g.weight.grad, torch.zeros_like(att.g.weight))
        assert att.gamma.grad is not None and float(att.gamma.grad.abs()) > 0


class TestGradients:
    def test_self_attention_params_match_central_differences(self):
        torch.manual_seed(1)
        att = SelfAttention2d(4, reduction=2).double()
        with torch.no_grad():
            att.gamma.fill_(0.3)
        x = torch.randn(2, 4, 3, 2, dtype=torch.float64)
        probe = torch.randn(2, 4, 3, 2, dtype=torch.float64)

        def loss_fn():
            return (att(x) * probe).sum()

        loss = loss_fn()
        att.zero_grad()
        loss.backward()
        params = {n: p for n, p in att.named_parameters()}
        numeric = central_difference_grads(loss_fn, params)
        for name, p in params.items():
            err = max_relative_error(p.grad.numpy(), numeric[name])
            assert err < 1e-3, f"{name}: rel err {err}"

    def test_conditional_batchnorm_projection_matches_central_differences(self):
        torch.manual_seed(2)
        cbn = ConditionalBatchNorm2d(3, cond_dim=4).double().train()
        x = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        cond = torch.randn(4, 4, dtype=torch.float64)
        probe = torch.randn_like(x)

        def loss_fn():
            return (cbn(x, cond) * probe).sum()

        cbn.zero_grad()
        loss_fn().backward()
        params = {n: p for n, p in cbn.named_parameters()}
        numeric = central_difference_grads(loss_fn, params)
        for name, p in params.items():
            err = max_relative_error(p.grad.numpy(), numeric[name])
            assert err < 1e-3, f"{name}: rel err {err}"


class TestGenerator:
    def test_resolution_identity_and_open_unit_range(self):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg).eval()
        rng = np.random.default_rng(0)
        for _ in range(4):
            h = 16 * int(rng.integers(1, 4))
            w = 16 * int(rng.integers(1, 5))
            x = torch.rand(1, 1, h, w)
            with torch.no_grad():
                y = gen(x, torch.randn(1, cfg.z_dim), torch.tensor([1]))
            assert y.shape == x.shape
            assert float(y.min()) > 0.0 and float(y.max()) < 1.0

    def test_non_divisible_dims_rejected(self):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg)
        with pytest.raises(NonDivisibleSpatialDims):
            gen(torch.rand(1, 1, 30, 32), torch.randn(1, cfg.z_dim), torch.tensor([0]))

    def test_z_shape_checked(self):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg)
        with pytest.raises(ShapeMismatch):
            gen(torch.rand(1, 1, 32, 32), torch.randn(1, cfg.z_dim + 1), torch.tensor([0]))

    def test_eval_forward_bit_deterministic(self):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg).eval()
        x = torch.rand(2, 1, 32, 48)
        z = torch.randn(2, cfg.z_dim)
        c = torch.tensor([0, 1])
        with torch.no_grad():
            a = gen(x, z, c)
            b = gen(x, z, c)
        assert torch.equal(a, b)

    def test_encoder_halves_decoder_doubles(self):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg)
        x = torch.rand(1, 1, 32, 64)
        h = x
        for block in gen.encoder:
            prev = h.shape
            h = block(h)
            assert h.shape[2] == prev[2] // 2 and h.shape[3] == prev[3] // 2
        cond = torch.cat([torch.randn(1, cfg.z_dim), gen.class_embed(torch.tensor([0]))], dim=1)
        for block in gen.decoder:
            prev = h.shape
            h = block(h, cond)
            assert h.shape[2] == prev[2] * 2 and h.shape[3] == prev[3] * 2


class TestDiscriminator:
    def test_zero_embedding_makes_score_class_independent(self):
        cfg = GANModelConfig.tiny()
        disc = Discriminator(cfg).eval()
        with torch.no_grad():
            disc.class_embed.weight.zero_()
        y = torch.rand(3, 1, 32, 32)
        with torch.no_grad():
            s0 = disc(y, torch.zeros(3, dtype=torch.long))
            s1 = disc(y, torch.ones(3, dtype=torch.long))
        assert torch.equal(s0, s1)

    def test_projection_decomposition(self):
        cfg = GANModelConfig.tiny()
        disc = Discriminator(cfg).eval()
        y = torch.rand(4, 1, 32, 48)
        c = torch.tensor([0, 1, 1, 0])
        with torch.no_grad():
            phi = disc.pooled_features(y)
            scores = disc(y, c)
            base = disc.psi(phi).squeeze(1)
            proj = (disc.class_embed(c) * phi).sum(dim=1)
        assert float((scores - base - proj).abs().max()) < 1e-5

    def test_score_difference_is_embedding_inner_product(self):
        cfg = GANModelConfig.tiny()
        disc = Discriminator(cfg).eval()
        y = torch.rand(2, 1, 32, 32)
        with torch.no_grad():
            phi = disc.pooled_features(y)
            d01 = disc(y, torch.zeros(2, dtype=torch.long)) - disc(y, torch.ones(2, dtype=torch.long))
            e = disc.class_embed.weight
            expected = ((e[0] - e[1]).unsqueeze(0) * phi).sum(dim=1)
        assert torch.allclose(d01, expected, atol=1e-5)

    def test_batch_equals_concatenated_singletons_in_eval(self):
        cfg = GANModelConfig.tiny()
        disc = Discriminator(cfg).eval()
        y = torch.rand(2, 1, 32, 32)
        c = torch.tensor([0, 1])
        with torch.no_grad():
            batch = disc(y, c)
            singles = torch.cat([disc(y[0:1], c[0:1]), disc(y[1:2], c[1:2])])
        assert torch.allclose(batch, singles, atol=1e-6)


class TestHingeLosses:
    def test_hand_values(self):
        assert abs(float(hinge_d_loss([1.0], [-1.0]))) < 1e-7
        assert abs(float(hinge_d_loss([0.0], [0.0])) - 2.0) < 1e-7
        assert abs(float(hinge_d_loss([-2.0], [3.0])) - 7.0) < 1e-7
        assert abs(float(hinge_g_loss([2.0])) + 2.0) < 1e-7

    def test_generator_symmetry(self):
        assert abs(float(hinge_g_loss([0.5, -0.5]))) < 1e-7

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            hinge_d_loss([], [1.0])
        with pytest.raises(EmptyBatch):
            hinge_g_loss([])

    def test_gradients_flow(self):
        fake = torch.tensor([0.2, -0.3], requires_grad=True)
        hinge_g_loss(fake).backward()
        assert torch.allclose(fake.grad, torch.tensor([-0.5, -0.5]))


class TestCombineLosses:
    @pytest.mark.parametrize(
        "lam,l_dt,l_gt", [(0.0, 1.0, 2.0), (1.0, 4.0, 5.0), (10.0, 31.0, 32.0)]
    )
    def test_table_rows(self, lam, l_dt, l_gt):
        out = combine_losses(1.0, 2.0, 3.0, lam)
        assert out.l_dt == l_dt and out.l_gt == l_gt

    def test_negative_lambda(self):
        with pytest.raises(NegativeLambda):
            combine_losses(1.0, 2.0, 3.0, -0.5)

    def test_identity_to_machine_precision(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            l_d, l_g, l_t = rng.normal(size=3)
            lam = float(rng.uniform(0, 10))
            out = combine_losses(l_d, l_g, l_t, lam)
            # exact in the computed form
            assert out.l_dt == out.l_d + out.lam * out.l_t
            assert out.l_gt == out.l_g + out.lam * out.l_t
            # and at machine precision in the subtracted form
            scale = max(1.0, abs(out.l_dt), abs(out.lam * out.l_t))
            assert abs((out.l_dt - out.l_d) - out.lam * out.l_t) <= 1e-12 * scale
            assert abs((out.l_gt - out.l_g) - out.lam * out.l_t) <= 1e-12 * scale


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = GANModelConfig.tiny()
        gen = Generator(cfg)
        path = tmp_path / "g.ckpt"
        save_checkpoint(path, kind="gan", config={"generator": cfg.to_dict()}, state={"generator": gen.state_dict()})
        payload = load_checkpoint(path, expected_kind="gan", expected_config={"generator": cfg.to_dict()})
        gen2 = Generator(cfg)
        gen2.load_state_dict(payload["state"]["generator"])
        for a, b in zip(gen.parameters(), gen2.parameters()):
            assert torch.equal(a, b)

    def test_kind_mismatch_fails_loudly(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, kind="gan", config={}, state={})
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(path, expected_kind="recognizer")

    def test_config_mismatch_fails_loudly(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, kind="gan", config={"widths": [8, 12]}, state={})
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(path, expected_kind="gan", expected_config={"widths": [32, 64]})
