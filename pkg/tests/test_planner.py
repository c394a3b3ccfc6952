import json

import numpy as np
import pytest

from madiff import denoiser, invdyn
from madiff.data import Condition, NormStats
from madiff.denoiser import NetConfig
from madiff.envs import EnvConfig, SpreadToyEnv
from madiff.planner import (
    HistoryBuffer,
    _clamp_denoised,
    ModelBundle,
    PlanCache,
    PlanConfig,
    _CallCounter,
    act,
    condition_inpaint,
    rollout,
    sample_plan,
)
from madiff.schedule import (SamplerParams, build_schedule, denoise_step,
                             forward_noise, guided_epsilon, posterior_mean,
                             sample_initial)


from helpers import tiny_bundle


def cond_for(bundle, known_cols=1, seed=0, agents=None):
    cfg = bundle.net_cfg
    rng = np.random.default_rng(seed)
    mask = np.zeros((cfg.n_agents, cfg.horizon_total), dtype=bool)
    rows = range(cfg.n_agents) if agents is None else agents
    for i in rows:
        mask[i, :known_cols] = True
    vals = np.where(mask[:, :, None],
                    rng.uniform(-1, 1, (cfg.n_agents, cfg.horizon_total,
                                        cfg.obs_dim)), 0.0).astype(np.float32)
    return Condition(return_values=np.float32(0.4), known_mask=mask,
                     known_values=vals)


class TestConditionInpaint:
    def test_empty_mask_is_identity(self):
        rng = np.random.default_rng(0)
        tau = rng.standard_normal((2, 4, 3)).astype(np.float32)
        cond = Condition(return_values=np.float32(0),
                         known_mask=np.zeros((2, 4), bool),
                         known_values=np.zeros((2, 4, 3), np.float32))
        np.testing.assert_array_equal(condition_inpaint(tau, cond), tau)

    def test_full_mask_returns_values(self):
        rng = np.random.default_rng(1)
        tau = rng.standard_normal((2, 4, 3)).astype(np.float32)
        vals = rng.standard_normal((2, 4, 3)).astype(np.float32)
        cond = Condition(return_values=np.float32(0),
                         known_mask=np.ones((2, 4), bool), known_values=vals)
        np.testing.assert_array_equal(condition_inpaint(tau, cond), vals)

    def test_random_mask_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        tau = rng.standard_normal((3, 5, 2)).astype(np.float32)
        mask = rng.random((3, 5)) < 0.5
        vals = rng.standard_normal((3, 5, 2)).astype(np.float32)
        cond = Condition(return_values=np.float32(0), known_mask=mask,
                         known_values=vals)
        out = condition_inpaint(tau, cond)
        for i in range(3):
            for t in range(5):
                ref = vals[i, t] if mask[i, t] else tau[i, t]
                np.testing.assert_array_equal(out[i, t], ref)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        tau = rng.standard_normal((2, 4, 3)).astype(np.float32)
        mask = rng.random((2, 4)) < 0.5
        cond = Condition(return_values=np.float32(0), known_mask=mask,
                         known_values=rng.standard_normal((2, 4, 3)).astype(np.float32))
        once = condition_inpaint(tau, cond)
        np.testing.assert_array_equal(condition_inpaint(once, cond), once)

    def test_shape_mismatch(self):
        cond = Condition(return_values=np.float32(0),
                         known_mask=np.zeros((2, 5), bool),
                         known_values=np.zeros((2, 5, 3), np.float32))
        with pytest.raises(ValueError):
            condition_inpaint(np.zeros((2, 4, 3)), cond)


class TestSamplePlan:
    def test_known_entries_bit_exact(self):
        bundle = tiny_bundle()
        cond = cond_for(bundle, known_cols=2, seed=5)
        out = sample_plan(cond, bundle, SamplerParams(guidance_scale=1.2,
                                                      temperature_scale=0.5),
                          np.random.default_rng(6))
        np.testing.assert_array_equal(out[cond.known_mask],
                                      cond.known_values[cond.known_mask])
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_omega_zero_matches_unconditional_chain(self):
        bundle = tiny_bundle(seed=7)
        cond = cond_for(bundle, seed=8)
        sp = SamplerParams(guidance_scale=0.0, temperature_scale=0.3)
        got = sample_plan(cond, bundle, sp, np.random.default_rng(9))

        # reference chain calling only the null-conditioned predictor
        rng = np.random.default_rng(9)
        cfg = bundle.net_cfg
        x = sample_initial((1,) + (cfg.n_agents, cfg.horizon_total, cfg.obs_dim),
                           0.3, rng, dtype=np.float32)
        for k in range(bundle.sched.K, 0, -1):
            x = np.where(cond.known_mask[None, :, :, None], cond.known_values, x)
            eps = bundle.predict_eps(x, np.array([k]),
                                     np.array([0.4], dtype=np.float32),
                                     np.array([1.0]))
            eps = _clamp_denoised(x, k, eps, bundle.sched)
            mu = posterior_mean(x, k, eps, bundle.sched)
            if k > 1:
                z = rng.standard_normal(x.shape).astype(np.float32)
                mu = mu + 0.3 * float(bundle.sched.sigma[k - 1]) * z
            x = mu
        x = np.clip(x, -1, 1)
        ref = np.where(cond.known_mask[None, :, :, None], cond.known_values, x)[0]
        np.testing.assert_array_equal(got, ref.astype(np.float32))

    def test_omega_one_matches_conditional_chain(self):
        bundle = tiny_bundle(seed=10)
        cond = cond_for(bundle, seed=11)
        sp = SamplerParams(guidance_scale=1.0, temperature_scale=0.0)
        got = sample_plan(cond, bundle, sp, np.random.default_rng(12))

        x = np.zeros((1, 2, 8, 3), dtype=np.float32)
        for k in range(bundle.sched.K, 0, -1):
            x = np.where(cond.known_mask[None, :, :, None], cond.known_values, x)
            eps = bundle.predict_eps(x, np.array([k]),
                                     np.array([0.4], dtype=np.float32),
                                     np.array([0.0]))
            eps = _clamp_denoised(x, k, eps, bundle.sched)
            x = posterior_mean(x, k, eps, bundle.sched)
        x = np.clip(x, -1, 1)
        ref = np.where(cond.known_mask[None, :, :, None], cond.known_values, x)[0]
        np.testing.assert_array_equal(got, ref.astype(np.float32))

    def test_stub_inversion_recovers_target(self):
        # predictor returning the exact forward noise of a fixed tau0 makes
        # the deterministic chain land on tau0's free entries
        bundle = tiny_bundle(seed=13)
        cfg = bundle.net_cfg
        rng = np.random.default_rng(14)
        tau0 = rng.uniform(-0.9, 0.9, (cfg.n_agents, cfg.horizon_total,
                                       cfg.obs_dim)).astype(np.float32)

        class StubBundle(ModelBundle):
            def predict_eps(self, x, ks, y, null_mask):
                k = int(ks[0])
                ab = self.sched.alpha_bar_at(k)
                return ((x - np.sqrt(ab) * tau0[None]) /
                        np.sqrt(1.0 - ab)).astype(np.float32)

        stub = StubBundle(params=bundle.params, net_cfg=cfg,
                          inv_cfg=bundle.inv_cfg, stats=bundle.stats,
                          sched=bundle.sched)
        cond = cond_for(bundle, known_cols=1, seed=15)
        sp = SamplerParams(guidance_scale=1.0, temperature_scale=0.0)
        out = sample_plan(cond, stub, sp, np.random.default_rng(16))
        free = ~cond.known_mask
        assert np.abs(out[free] - tau0[free]).max() < 1e-4

    def test_ddim_chain_runs_and_pins_conditions(self):
        bundle = tiny_bundle(seed=17)
        cond = cond_for(bundle, known_cols=2, seed=18)
        sp = SamplerParams(sampler_kind="ddim", ddim_steps=6,
                           temperature_scale=0.5)
        out = sample_plan(cond, bundle, sp, np.random.default_rng(19))
        np.testing.assert_array_equal(out[cond.known_mask],
                                      cond.known_values[cond.known_mask])

    def test_decentralized_mask_generates_teammate_rows(self):
        bundle = tiny_bundle(seed=20)
        cond = cond_for(bundle, known_cols=3, seed=21, agents=[0])
        sp = SamplerParams(temperature_scale=0.0)
        out = sample_plan(cond, bundle, sp, np.random.default_rng(22))
        # ego rows pinned; teammate rows at history positions are generated
        np.testing.assert_array_equal(out[0, :3], cond.known_values[0, :3])
        assert np.abs(out[1, :3] - cond.known_values[1, :3]).max() > 0


class TestHistoryBuffer:
    def test_c0_window_is_current_only(self):
        h = HistoryBuffer(0)
        h.push(np.ones((2, 3)))
        win = h.window(np.full((2, 3), 2.0))
        assert win.shape == (1, 2, 3)
        np.testing.assert_array_equal(win[0], 2.0)

    def test_edge_padding_short_history(self):
        h = HistoryBuffer(3)
        h.push(np.full((1, 2), 5.0))
        win = h.window(np.zeros((1, 2)))
        assert win.shape == (4, 1, 2)
        np.testing.assert_array_equal(win[0], 5.0)
        np.testing.assert_array_equal(win[1], 5.0)
        np.testing.assert_array_equal(win[2], 5.0)
        np.testing.assert_array_equal(win[3], 0.0)

    def test_bounded_capacity(self):
        h = HistoryBuffer(2)
        for i in range(5):
            h.push(np.full((1, 1), float(i)))
        win = h.window(np.full((1, 1), 9.0))
        np.testing.assert_array_equal(win.ravel(), [3.0, 4.0, 9.0])


class TestAct:
    def test_single_agent_modes_coincide(self):
        bundle = tiny_bundle(n_agents=1, seed=23)
        obs = np.random.default_rng(24).uniform(-1, 1, (1, 3)).astype(np.float32)
        outs = {}
        for mode in ("centralized", "decentralized"):
            pc = PlanConfig(mode=mode, H=8, C=0,
                            sampler=SamplerParams(temperature_scale=0.4),
                            target_return=2.0)
            a, _ = act(obs, HistoryBuffer(0), bundle, pc,
                       np.random.default_rng(25))
            outs[mode] = a
        np.testing.assert_array_equal(outs["centralized"],
                                      outs["decentralized"])

    def test_predictor_pass_count_ancestral(self):
        # N * K * 2 rows per env step: N chains, K steps, two passes each
        bundle = tiny_bundle(n_agents=2, K=6, seed=26)
        pc = PlanConfig(mode="decentralized", H=8, C=0,
                        sampler=SamplerParams(guidance_scale=1.2,
                                              temperature_scale=0.0),
                        target_return=0.0)
        counter = _CallCounter()
        obs = np.zeros((2, 3), dtype=np.float32)
        act(obs, HistoryBuffer(0), bundle, pc, np.random.default_rng(27),
            counter=counter)
        assert counter.rows == 2 * 6 * 2

    def test_info_barrier_other_agents_observations(self):
        # perturbing teammate observations cannot change the ego action
        bundle = tiny_bundle(n_agents=3, seed=28)
        pc = PlanConfig(mode="decentralized", H=8, C=0,
                        sampler=SamplerParams(guidance_scale=1.2,
                                              temperature_scale=0.5),
                        target_return=1.0)
        rng_obs = np.random.default_rng(29)
        obs = rng_obs.uniform(-1, 1, (3, 3)).astype(np.float32)
        a1, _ = act(obs, HistoryBuffer(0), bundle, pc, np.random.default_rng(30))
        obs2 = obs.copy()
        obs2[1] = rng_obs.uniform(-1, 1, 3)
        obs2[2] = rng_obs.uniform(-1, 1, 3)
        a2, _ = act(obs2, HistoryBuffer(0), bundle, pc, np.random.default_rng(30))
        np.testing.assert_array_equal(a1[0], a2[0])

    def test_replan_cache(self):
        bundle = tiny_bundle(n_agents=2, K=4, seed=31)
        pc = PlanConfig(mode="centralized", H=8, C=0,
                        sampler=SamplerParams(temperature_scale=0.0),
                        target_return=0.0, replan_every=3)
        cache = PlanCache()
        counter = _CallCounter()
        obs = np.zeros((2, 3), dtype=np.float32)
        h = HistoryBuffer(0)
        rng = np.random.default_rng(32)
        act(obs, h, bundle, pc, rng, cache=cache, counter=counter)
        first = counter.calls
        act(obs, h, bundle, pc, rng, cache=cache, counter=counter)
        act(obs, h, bundle, pc, rng, cache=cache, counter=counter)
        assert counter.calls == first  # two cached steps, no new passes
        act(obs, h, bundle, pc, rng, cache=cache, counter=counter)
        assert counter.calls == 2 * first


class _StubEnv:
    """Reward stream independent of actions, with a known expectation."""

    def __init__(self, t_max=10):
        self.t_max = t_max
        self.rng = None
        self.t = 0

    def spawn(self):
        return _StubEnv(self.t_max)

    def reset(self, seed):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        return self.rng.uniform(-1, 1, (2, 3)).astype(np.float32)

    def step(self, actions):
        self.t += 1
        r = 0.5 + self.rng.normal(0.0, 0.2)
        return (self.rng.uniform(-1, 1, (2, 3)).astype(np.float32), r,
                self.t >= self.t_max)


class TestRollout:
    def test_zero_episodes_empty_report(self):
        bundle = tiny_bundle()
        pc = PlanConfig(mode="centralized", H=8, C=0,
                        sampler=SamplerParams(), target_return=0.0)
        rep = rollout(_StubEnv(), bundle, pc, episodes=0, seed=0)
        assert rep.episode_returns == []

    def test_seeded_reports_identical(self):
        bundle = tiny_bundle(K=6)
        pc = PlanConfig(mode="decentralized", H=8, C=0,
                        sampler=SamplerParams(sampler_kind="ddim",
                                              ddim_steps=3),
                        target_return=0.0)
        a = rollout(_StubEnv(), bundle, pc, episodes=3, seed=5, log_plans=True)
        b = rollout(_StubEnv(), bundle, pc, episodes=3, seed=5, log_plans=True)
        assert json.dumps(a.to_json_dict(omit_timing=True), sort_keys=True) == \
            json.dumps(b.to_json_dict(omit_timing=True), sort_keys=True)

    def test_mean_return_matches_env_expectation(self):
        # reward 0.5 +/- 0.2 per step over 10 steps -> mean 5.0
        bundle = tiny_bundle(K=4)
        pc = PlanConfig(mode="centralized", H=8, C=0,
                        sampler=SamplerParams(sampler_kind="ddim",
                                              ddim_steps=2),
                        target_return=0.0)
        rep = rollout(_StubEnv(), bundle, pc, episodes=200, seed=1)
        se = 0.2 * np.sqrt(10) / np.sqrt(200)
        assert abs(rep.mean_return - 5.0) < 5 * se

    def test_plan_final_log_shape(self):
        bundle = tiny_bundle(K=4)
        pc = PlanConfig(mode="decentralized", H=8, C=0,
                        sampler=SamplerParams(sampler_kind="ddim",
                                              ddim_steps=2),
                        target_return=0.0)
        rep = rollout(_StubEnv(t_max=4), bundle, pc, episodes=2, seed=2,
                      log_plans=True, log_full_plans=True)
        assert rep.plan_finals.shape == (2, 4, 2, 2, 3)
        assert rep.plans.shape == (2, 4, 2, 2, 8, 3)
        np.testing.assert_array_equal(rep.plans[:, :, :, :, -1, :],
                                      rep.plan_finals)

    def test_report_save_omit_timing(self, tmp_path):
        bundle = tiny_bundle(K=4)
        pc = PlanConfig(mode="centralized", H=8, C=0,
                        sampler=SamplerParams(sampler_kind="ddim",
                                              ddim_steps=2),
                        target_return=0.0)
        rep = rollout(_StubEnv(t_max=2), bundle, pc, episodes=1, seed=3)
        p1 = tmp_path / "with.json"
        p2 = tmp_path / "without.json"
        rep.save(p1)
        rep.save(p2, omit_timing=True)
        assert "timing" in json.loads(p1.read_text())
        assert "timing" not in json.loads(p2.read_text())

    def test_real_env_smoke(self):
        bundle = tiny_bundle(n_agents=3, obs_dim=14, W=8, K=4, seed=33)
        pc = PlanConfig(mode="decentralized", H=8, C=0,
                        sampler=SamplerParams(sampler_kind="ddim",
                                              ddim_steps=2),
                        target_return=-20.0)
        rep = rollout(SpreadToyEnv(EnvConfig()), bundle, pc, episodes=2, seed=4)
        assert len(rep.episode_returns) == 2
        assert np.isfinite(rep.episode_returns).all()


class TestPlanConfigValidation:
    def test_h_minimum(self):
        with pytest.raises(ValueError):
            PlanConfig(H=1).validate()

    def test_replan_bounds(self):
        with pytest.raises(ValueError):
            PlanConfig(H=8, replan_every=8).validate()

    def test_mode(self):
        with pytest.raises(ValueError):
            PlanConfig(mode="hierarchical").validate()
