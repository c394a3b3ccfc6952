import numpy as np
import pytest

from madiff.autodiff import Tensor
from madiff.data import Condition
from madiff.denoiser import (
    NetConfig,
    agent_attention,
    embed_timestep,
    forward,
    grad_check,
    init_params,
    param_count,
    predict_noise,
    sinusoidal_embedding,
)

TINY = NetConfig(obs_dim=4, n_agents=2, horizon_total=8, base_channels=8,
                 n_levels=2, n_heads=2, time_embed_dim=8, return_embed_dim=16)


def make_cond(cfg, null=False):
    mask = np.zeros((cfg.n_agents, cfg.horizon_total), dtype=bool)
    mask[:, 0] = True
    vals = np.zeros((cfg.n_agents, cfg.horizon_total, cfg.obs_dim),
                    dtype=np.float32)
    return Condition(return_values=np.float32(0.3), known_mask=mask,
                     known_values=vals, is_null=null)


class TestEmbedding:
    def test_sinusoid_base_pattern(self):
        np.testing.assert_allclose(sinusoidal_embedding([0], 4)[0],
                                   [0, 1, 0, 1], atol=1e-12)

    def test_deterministic(self):
        p = init_params(TINY, np.random.default_rng(0))
        a = embed_timestep(3, p, TINY)
        b = embed_timestep(3, p, TINY)
        np.testing.assert_array_equal(a, b)
        assert len(a) == TINY.return_embed_dim

    def test_distinct_steps_differ(self):
        p = init_params(TINY, np.random.default_rng(0))
        a, b = embed_timestep(1, p, TINY), embed_timestep(2, p, TINY)
        assert np.abs(a - b).max() > 0

    def test_rejects_k0(self):
        p = init_params(TINY, np.random.default_rng(0))
        with pytest.raises(ValueError):
            embed_timestep(0, p, TINY)


class TestAgentAttention:
    def test_single_agent_passthrough(self):
        p = init_params(TINY, np.random.default_rng(1))
        feats = np.random.default_rng(2).standard_normal((1, 8, 8)).astype(np.float32)
        fused, w = agent_attention(feats, p, level=0, n_heads=2,
                                   return_weights=True)
        np.testing.assert_allclose(w, 1.0, atol=1e-7)
        v = feats.transpose(0, 2, 1) @ p["attn0.v.w"].data + p["attn0.v.b"].data
        np.testing.assert_allclose(fused, v.transpose(0, 2, 1), atol=1e-6)

    def test_identical_agents_get_uniform_weights(self):
        cfg = NetConfig(obs_dim=4, n_agents=4, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=2)
        p = init_params(cfg, np.random.default_rng(3))
        one = np.random.default_rng(4).standard_normal((1, 8, 8)).astype(np.float32)
        feats = np.repeat(one, 4, axis=0)
        _, w = agent_attention(feats, p, level=0, n_heads=2, return_weights=True)
        np.testing.assert_allclose(w, 0.25, atol=1e-6)

    def test_matches_naive_loop(self):
        # direct per-position loop over the q/k/v formulas
        cfg = NetConfig(obs_dim=4, n_agents=3, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=2)
        p = init_params(cfg, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((3, 8, 8)).astype(np.float32)
        fused = agent_attention(feats, p, level=0, n_heads=2)

        wq, bq = p["attn0.q.w"].data, p["attn0.q.b"].data
        wk, bk = p["attn0.k.w"].data, p["attn0.k.b"].data
        wv, bv = p["attn0.v.w"].data, p["attn0.v.b"].data
        C, T, H = 8, 8, 2
        dh = C // H
        ref = np.zeros((3, C, T))
        for t in range(T):
            q = feats[:, :, t] @ wq + bq
            k = feats[:, :, t] @ wk + bk
            v = feats[:, :, t] @ wv + bv
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                ref[:, sl, t] = w @ v[:, sl]
        np.testing.assert_allclose(fused, ref, atol=1e-5)

    def test_weights_row_stochastic(self):
        cfg = NetConfig(obs_dim=4, n_agents=5, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=4)
        p = init_params(cfg, np.random.default_rng(7))
        feats = np.random.default_rng(8).standard_normal((2, 5, 8, 8)).astype(np.float32)
        _, w = agent_attention(feats, p, level=0, n_heads=4, return_weights=True)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        p = init_params(TINY, np.random.default_rng(1))
        with pytest.raises(ValueError):
            agent_attention(np.zeros((3, 8)), p)


class TestPredictNoise:
    def test_shape_contract(self):
        cfg = NetConfig(obs_dim=6, n_agents=3, horizon_total=24,
                        base_channels=16, n_levels=2, n_heads=4)
        p = init_params(cfg, np.random.default_rng(9))
        x = np.random.default_rng(10).standard_normal((3, 24, 6)).astype(np.float32)
        out = predict_noise(x, make_cond(cfg), 5, p, cfg)
        assert out.shape == (3, 24, 6)

    def test_no_attention_identical_agents_identical_outputs(self):
        cfg = NetConfig(obs_dim=4, n_agents=2, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=2, use_attention=False)
        p = init_params(cfg, np.random.default_rng(11))
        row = np.random.default_rng(12).standard_normal((1, 8, 4)).astype(np.float32)
        x = np.repeat(row, 2, axis=0)
        out = predict_noise(x, make_cond(cfg), 3, p, cfg)
        np.testing.assert_array_equal(out[0], out[1])

    def test_no_attention_blocks_cross_agent_flow(self):
        cfg = NetConfig(obs_dim=4, n_agents=3, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=2, use_attention=False)
        p = init_params(cfg, np.random.default_rng(13))
        rng = np.random.default_rng(14)
        x = rng.standard_normal((3, 8, 4)).astype(np.float32)
        base = predict_noise(x, make_cond(cfg), 4, p, cfg)
        x2 = x.copy()
        x2[1] += rng.standard_normal((8, 4)).astype(np.float32)
        pert = predict_noise(x2, make_cond(cfg), 4, p, cfg)
        np.testing.assert_array_equal(base[0], pert[0])
        np.testing.assert_array_equal(base[2], pert[2])
        assert np.abs(base[1] - pert[1]).max() > 0

    def test_attention_enables_cross_agent_flow(self):
        cfg = NetConfig(obs_dim=4, n_agents=3, horizon_total=8, base_channels=8,
                        n_levels=2, n_heads=2, use_attention=True)
        p = init_params(cfg, np.random.default_rng(13))
        rng = np.random.default_rng(14)
        x = rng.standard_normal((3, 8, 4)).astype(np.float32)
        base = predict_noise(x, make_cond(cfg), 4, p, cfg)
        x2 = x.copy()
        x2[1] += rng.standard_normal((8, 4)).astype(np.float32)
        pert = predict_noise(x2, make_cond(cfg), 4, p, cfg)
        assert np.abs(base[0] - pert[0]).max() > 0

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_permutation_equivariance(self, n):
        cfg = NetConfig(obs_dim=5, n_agents=n, horizon_total=16,
                        base_channels=16, n_levels=2, n_heads=4)
        p = init_params(cfg, np.random.default_rng(20 + n))
        rng = np.random.default_rng(30 + n)
        for _ in range(5):
            x = rng.standard_normal((1, n, 16, 5)).astype(np.float32)
            perm = rng.permutation(n)
            out = forward(p, cfg, Tensor(x), np.array([3]),
                          np.array([0.2], dtype=np.float32), np.array([0.0]))
            out_p = forward(p, cfg, Tensor(x[:, perm]), np.array([3]),
                            np.array([0.2], dtype=np.float32), np.array([0.0]))
            np.testing.assert_allclose(out_p.data, out.data[:, perm], atol=1e-5)

    def test_null_condition_bit_deterministic(self):
        p = init_params(TINY, np.random.default_rng(15))
        x = np.random.default_rng(16).standard_normal((2, 8, 4)).astype(np.float32)
        a = predict_noise(x, make_cond(TINY, null=True), 2, p, TINY)
        b = predict_noise(x, make_cond(TINY, null=True), 2, p, TINY)
        np.testing.assert_array_equal(a, b)

    def test_null_token_changes_output(self):
        p = init_params(TINY, np.random.default_rng(15))
        x = np.random.default_rng(16).standard_normal((2, 8, 4)).astype(np.float32)
        a = predict_noise(x, make_cond(TINY, null=False), 2, p, TINY)
        b = predict_noise(x, make_cond(TINY, null=True), 2, p, TINY)
        assert np.abs(a - b).max() > 0

    def test_share_unet_single_parameter_set(self):
        shared = init_params(TINY, np.random.default_rng(0))
        assert not any(k.startswith("unet0.") for k in shared)
        sep = init_params(
            NetConfig(**{**TINY.to_json(), "share_unet": False}),
            np.random.default_rng(0))
        assert any(k.startswith("unet0.") for k in sep)
        assert any(k.startswith("unet1.") for k in sep)
        # attention projections stay shared either way
        assert sum(k.startswith("attn0.") for k in sep) == \
            sum(k.startswith("attn0.") for k in shared)

    def test_per_agent_returns(self):
        cfg = NetConfig(**{**TINY.to_json(), "returns_per_agent": True})
        p = init_params(cfg, np.random.default_rng(17))
        x = np.random.default_rng(18).standard_normal((2, 8, 4)).astype(np.float32)
        cond = make_cond(cfg)
        cond.return_values = np.array([0.1, 0.9], dtype=np.float32)
        out = predict_noise(x, cond, 2, p, cfg)
        assert out.shape == (2, 8, 4)

    def test_shape_validation(self):
        p = init_params(TINY, np.random.default_rng(0))
        with pytest.raises(ValueError):
            predict_noise(np.zeros((2, 8, 5), dtype=np.float32),
                          make_cond(TINY), 1, p, TINY)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetConfig(obs_dim=4, n_agents=2, horizon_total=9,
                      base_channels=8, n_levels=2).validate()
        with pytest.raises(ValueError):
            NetConfig(obs_dim=4, n_agents=2, horizon_total=8,
                      base_channels=9, n_heads=2).validate()


class TestGradCheck:
    def _batch(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        B = 2
        x = rng.standard_normal((B, cfg.n_agents, cfg.horizon_total,
                                 cfg.obs_dim)).astype(np.float32)
        k = np.array([1, 3])
        y = np.array([0.1, -0.4], dtype=np.float32)
        null = np.array([0.0, 1.0])
        target = rng.standard_normal(x.shape).astype(np.float32)
        mask = np.ones((B, cfg.n_agents, cfg.horizon_total, 1), dtype=np.float32)
        mask[:, :, 0] = 0.0
        return (x, k, y, null, target, mask)

    def test_tiny_unet_with_attention(self):
        p = init_params(TINY, np.random.default_rng(40))
        assert param_count(p) <= 10_000
        err = grad_check(p, self._batch(TINY), TINY, n_samples=40,
                         rng=np.random.default_rng(41))
        assert err < 1e-3

    def test_linear_map_is_exact(self):
        # a pure linear head: y = x @ W, loss quadratic -> finite differences
        # are exact up to float error
        rng = np.random.default_rng(42)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        x = rng.standard_normal((8, 4))
        t = rng.standard_normal((8, 3))

        out = Tensor(x) @ w
        diff = out - Tensor(t)
        (diff * diff).sum().scale(1.0 / 24).backward()
        h = 1e-6
        worst = 0.0
        for idx in [(0, 0), (1, 2), (3, 1)]:
            orig = w.data[idx]
            w.data[idx] = orig + h
            fp = float((((x @ w.data) - t) ** 2).sum() / 24)
            w.data[idx] = orig - h
            fm = float((((x @ w.data) - t) ** 2).sum() / 24)
            w.data[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - w.grad[idx]) / (abs(num) + 1e-8))
        assert worst < 1e-6

    def test_zero_loss_batch_has_zero_gradients(self):
        p = init_params(TINY, np.random.default_rng(43))
        x, k, y, null, _, mask = self._batch(TINY)
        with np.errstate(all="ignore"):
            out = forward({n: Tensor(t.data.astype(np.float64), requires_grad=True)
                           for n, t in p.items()}, TINY, Tensor(x.astype(np.float64)),
                          k, y, null)
        # target equals the prediction by construction -> stationary point
        target = out.data.copy()
        p64 = {n: Tensor(t.data.astype(np.float64), requires_grad=True)
               for n, t in p.items()}
        out2 = forward(p64, TINY, Tensor(x.astype(np.float64)), k, y, null)
        diff = (out2 - Tensor(target)) * Tensor(mask.astype(np.float64))
        (diff * diff).sum().backward()
        for n, t in p64.items():
            if t.grad is not None:
                assert np.abs(t.grad).max() < 1e-8, n
