import numpy as np
import pytest
import torch
from scipy import stats

from beliefsim.config import RunConfig
from beliefsim.errors import InvalidConfigError
from beliefsim.geco import GecoState
from beliefsim.rl import (
    AgentHeads,
    SyncRunner,
    act,
    build_agent,
    discounted_returns,
    pg_loss,
)
from beliefsim.simulation import predictive_loss, sample_overshoots


def rl_cfg(**kwargs) -> RunConfig:
    cfg = RunConfig()
    cfg.env.width = cfg.env.height = 4
    cfg.env.min_boxes = 1
    cfg.env.max_boxes = 2
    cfg.env.food_count = 1
    cfg.env.max_episode_steps = 24
    cfg.model.n_h = 16
    cfg.model.embed_dim = 8
    cfg.model.head = "deterministic"
    cfg.rl.enabled = True
    cfg.rl.num_envs = 2
    cfg.rl.unroll = 8
    cfg.sim.starts = 2
    cfg.sim.targets = 1
    cfg.sim.overshoot = 3
    for key, value in kwargs.items():
        cfg.set_key(key, value)
    return cfg


class TestAct:
    def test_uniform_logits_uniform_actions(self):
        heads = AgentHeads(8, 5)
        torch.nn.init.zeros_(heads.policy.weight)
        torch.nn.init.zeros_(heads.policy.bias)
        from beliefsim.belief import BeliefState
        b = BeliefState(h=torch.randn(1, 8), c=torch.zeros(1, 8))
        gen = torch.Generator().manual_seed(0)
        counts = np.zeros(5)
        for _ in range(20_000):
            a, _ = act(heads, b, gen)
            counts[int(a)] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_dominant_logit(self):
        heads = AgentHeads(8, 5)
        torch.nn.init.zeros_(heads.policy.weight)
        with torch.no_grad():
            heads.policy.bias.copy_(torch.tensor([0.0, 20.0, 0.0, 0.0, 0.0]))
        from beliefsim.belief import BeliefState
        b = BeliefState(h=torch.zeros(1, 8), c=torch.zeros(1, 8))
        gen = torch.Generator().manual_seed(0)
        hits = sum(int(act(heads, b, gen)[0]) == 1 for _ in range(5000))
        assert hits / 5000 > 0.999

    def test_reproducible(self):
        heads = AgentHeads(8, 5)
        from beliefsim.belief import BeliefState
        b = BeliefState(h=torch.randn(4, 8), c=torch.zeros(4, 8))
        seq1 = [act(heads, b, torch.Generator().manual_seed(3))[0] for _ in range(1)]
        seq2 = [act(heads, b, torch.Generator().manual_seed(3))[0] for _ in range(1)]
        assert all(torch.equal(a, b) for a, b in zip(seq1, seq2))


class TestReturnsAndLoss:
    def test_returns_match_recursion_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            B, T = 3, 7
            rewards = torch.tensor(rng.normal(size=(B, T)), dtype=torch.float64)
            dones = torch.tensor(rng.random((B, T)) < 0.2)
            bootstrap = torch.tensor(rng.normal(size=B), dtype=torch.float64)
            gamma = 0.9
            got = discounted_returns(rewards, dones, bootstrap, gamma)

            expected = torch.zeros_like(rewards)
            for b in range(B):
                G = float(bootstrap[b])
                for t in range(T - 1, -1, -1):
                    cont = 0.0 if bool(dones[b, t]) else 1.0
                    G = float(rewards[b, t]) + gamma * cont * G
                    expected[b, t] = G
            assert torch.allclose(got, expected, atol=1e-6)

    def test_gamma_zero_pure_immediate_reward(self):
        rewards = torch.rand(2, 5)
        dones = torch.zeros(2, 5, dtype=torch.bool)
        got = discounted_returns(rewards, dones, torch.ones(2), gamma=0.0)
        assert torch.allclose(got, rewards)

    def test_zero_rewards_zero_values(self):
        B, T, A = 2, 6, 5
        logits = torch.randn(B, T, A)
        values = torch.zeros(B, T)
        actions = torch.randint(0, A, (B, T))
        rewards = torch.zeros(B, T)
        dones = torch.zeros(B, T, dtype=torch.bool)
        total, parts = pg_loss(logits, values, actions, rewards, dones,
                               torch.zeros(B), gamma=0.9, entropy_cost=0.07)
        assert parts["policy_loss"] == 0.0
        assert parts["value_loss"] == 0.0
        log_probs = torch.log_softmax(logits, -1)
        entropy = -(log_probs.exp() * log_probs).sum(-1).sum(1).mean()
        assert torch.allclose(total, -0.07 * entropy, atol=1e-6)

    def test_gradient_isolation(self):
        # Value gradients see only the value term; policy gradients see only
        # the policy and entropy terms (the advantage is a constant).
        torch.manual_seed(0)
        B, T, A = 2, 4, 5
        logits = torch.randn(B, T, A, requires_grad=True)
        values = torch.randn(B, T, requires_grad=True)
        actions = torch.randint(0, A, (B, T))
        rewards = torch.rand(B, T)
        dones = torch.zeros(B, T, dtype=torch.bool)
        bootstrap = torch.randn(B)
        total, _ = pg_loss(logits, values, actions, rewards, dones, bootstrap,
                           gamma=0.9, entropy_cost=0.0)
        total.backward()
        returns = discounted_returns(rewards, dones, bootstrap, 0.9)
        # d(total)/d(values) = 0.5 * d(0.5 sum (G - V)^2)/dV = 0.5 (V - G),
        # averaged over the batch.
        expected_v = 0.5 * (values.detach() - returns) / B
        assert torch.allclose(values.grad, expected_v, atol=1e-6)
        # d(total)/d(logits) = advantage * (softmax - onehot) / B.
        adv = returns - values.detach()
        onehot = torch.nn.functional.one_hot(actions, A).float()
        expected_l = adv.unsqueeze(-1) * (torch.softmax(logits.detach(), -1) - onehot) / B
        assert torch.allclose(logits.grad, expected_l, atol=1e-6)

    def test_invalid_gamma(self):
        with pytest.raises(InvalidConfigError):
            pg_loss(torch.zeros(1, 2, 5), torch.zeros(1, 2),
                    torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2),
                    torch.zeros(1, 2, dtype=torch.bool), torch.zeros(1),
                    gamma=1.5, entropy_cost=0.0)


class TestAdditivity:
    def test_zero_model_weight_reproduces_baseline_gradient(self):
        cfg = rl_cfg()
        torch.manual_seed(0)
        bundle = build_agent(cfg)
        gen = torch.Generator().manual_seed(1)
        runner = SyncRunner(cfg, bundle, gen)
        batch = runner.collect(cfg.rl.unroll)

        def grads_of(loss):
            for p in bundle.parameters():
                p.grad = None
            loss.backward(retain_graph=True)
            return {id(p): (torch.zeros_like(p) if p.grad is None else p.grad.clone())
                    for p in bundle.parameters()}

        rl_only, _ = pg_loss(batch.logits, batch.values, batch.actions, batch.rewards,
                             batch.dones, batch.bootstrap_value, cfg.rl.gamma,
                             cfg.rl.entropy_cost)
        plan = sample_overshoots(cfg.rl.unroll, cfg.sim.overshoot, cfg.sim.starts,
                                 cfg.sim.targets, np.random.default_rng(0))
        model_loss, _ = predictive_loss(bundle.head, bundle.sim, batch.frames,
                                        batch.actions, batch.beliefs, plan,
                                        episode_ids=batch.episode_ids)
        g_baseline = grads_of(rl_only)
        g_zero = grads_of(rl_only + 0.0 * model_loss)
        g_active = grads_of(rl_only + 1.0 * model_loss)

        max_diff = max((a - g_zero[k]).abs().max().item()
                       for k, a in g_baseline.items())
        assert max_diff < 1e-7
        assert any((g_active[k] - g_baseline[k]).abs().max() > 1e-6
                   for k in g_baseline)

    def test_total_gradient_is_sum_of_parts(self):
        cfg = rl_cfg()
        torch.manual_seed(0)
        bundle = build_agent(cfg)
        runner = SyncRunner(cfg, bundle, torch.Generator().manual_seed(1))
        batch = runner.collect(cfg.rl.unroll)
        plan = sample_overshoots(cfg.rl.unroll, cfg.sim.overshoot, cfg.sim.starts,
                                 cfg.sim.targets, np.random.default_rng(0))
        rl_only, _ = pg_loss(batch.logits, batch.values, batch.actions, batch.rewards,
                             batch.dones, batch.bootstrap_value, cfg.rl.gamma,
                             cfg.rl.entropy_cost)
        model_loss, _ = predictive_loss(bundle.head, bundle.sim, batch.frames,
                                        batch.actions, batch.beliefs, plan,
                                        episode_ids=batch.episode_ids)

        params = list(bundle.parameters())

        def grads_of(loss):
            for p in params:
                p.grad = None
            loss.backward(retain_graph=True)
            return [torch.zeros_like(p) if p.grad is None else p.grad.clone()
                    for p in params]

        g_rl = grads_of(rl_only)
        g_model = grads_of(model_loss)
        g_total = grads_of(rl_only + 0.7 * model_loss)
        for gr, gm, gt in zip(g_rl, g_model, g_total):
            assert torch.allclose(gt, gr + 0.7 * gm, atol=1e-5)


class TestTrainLoopPlumbing:
    def test_smoke_run_and_checkpoint_roundtrip(self, tmp_path):
        from beliefsim.harness import MetricsWriter, load_checkpoint, read_metrics, save_checkpoint
        from beliefsim.rl import train_loop

        cfg = rl_cfg()
        cfg.rl.env_steps = 2 * 8 * 6  # 6 updates
        path = tmp_path / "metrics.jsonl"
        with MetricsWriter(path, cfg.run.seed) as metrics:
            result = train_loop(cfg, metrics=metrics)
        assert result["env_steps"] == cfg.rl.env_steps
        records = read_metrics(path)
        assert any(r["name"] == "rl_loss" for r in records)

        bundle = result["bundle"]
        ckpt = tmp_path / "ckpt.pt"
        modules = {"core": bundle.core, "heads": bundle.heads,
                   "sim": bundle.sim, "head": bundle.head}
        save_checkpoint(ckpt, modules, optimizer=result["optimizer"],
                        geco=result["geco"], extra={"env_steps": result["env_steps"]})

        cfg2 = rl_cfg()
        torch.manual_seed(123)  # fresh weights, then restored
        bundle2 = build_agent(cfg2)
        modules2 = {"core": bundle2.core, "heads": bundle2.heads,
                    "sim": bundle2.sim, "head": bundle2.head}
        payload = load_checkpoint(ckpt, modules2)
        for name in modules:
            sd1 = modules[name].state_dict()
            sd2 = modules2[name].state_dict()
            assert set(sd1) == set(sd2)
            for key in sd1:
                assert torch.equal(sd1[key], sd2[key]), (name, key)
        assert payload["extra"]["env_steps"] == cfg.rl.env_steps
        assert isinstance(payload["geco"], GecoState)

    def test_each_batch_is_fresh(self):
        cfg = rl_cfg()
        torch.manual_seed(0)
        bundle = build_agent(cfg)
        runner = SyncRunner(cfg, bundle, torch.Generator().manual_seed(1))
        b1 = runner.collect(4)
        steps_after_first = runner.env_steps
        b2 = runner.collect(4)
        assert runner.env_steps == steps_after_first + 4 * cfg.rl.num_envs
        assert not torch.equal(b1.frames, b2.frames)

    def test_requires_enabled_flag(self):
        from beliefsim.rl import train_loop

        cfg = rl_cfg()
        cfg.rl.enabled = False
        with pytest.raises(InvalidConfigError):
            train_loop(cfg)

    def test_memory_variant_rejected(self):
        cfg = rl_cfg()
        cfg.model.variant = "kanerva"
        with pytest.raises(InvalidConfigError):
            build_agent(cfg)
