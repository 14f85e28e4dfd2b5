import copy

import numpy as np
import torch

from beliefsim.belief import BeliefCore
from beliefsim.config import RunConfig
from beliefsim.data import collect_scripted_episode
from beliefsim.probes import (
    MapProbe,
    PoseProbe,
    build_probes,
    evaluate_probes,
    map_sse,
    probe_losses,
)


def tiny_cfg() -> RunConfig:
    cfg = RunConfig()
    cfg.env.width = cfg.env.height = 4
    cfg.env.min_boxes = 2
    cfg.env.max_boxes = 3
    cfg.model.n_h = 16
    cfg.model.embed_dim = 8
    cfg.data.episodes = 3
    cfg.data.heldout_episodes = 2
    cfg.data.episode_len = 12
    cfg.sim.unroll = 12
    cfg.probe.burn_in = 2
    cfg.probe.epochs = 2
    return cfg


def small_core(cfg):
    return BeliefCore(variant="plain", n_h=cfg.model.n_h,
                      embed_dim=cfg.model.embed_dim, frame_size=cfg.env.frame_size)


class TestChanceBaselines:
    def test_untrained_probe_near_chance(self):
        torch.manual_seed(0)
        P, O = 16, 8
        probe = PoseProbe(u_dim=32, num_positions=P, num_orientations=O)
        n = 4000
        u = torch.randn(n, 32)
        labels = torch.randint(0, P, (n,))
        with torch.no_grad():
            acc = (probe(u)[0].argmax(-1) == labels).float().mean().item()
        sigma = (1 / P * (1 - 1 / P) / n) ** 0.5
        assert abs(acc - 1 / P) < 4 * sigma + 1e-3

    def test_constant_decoder_equals_variance_sum(self):
        # The optimal constant predictor is the mean map; its SSE equals the
        # summed per-pixel variance of the dataset.
        rng = np.random.default_rng(0)
        maps = torch.tensor(rng.uniform(size=(40, 3, 8, 8)), dtype=torch.float32)
        mean_map = maps.mean(dim=0, keepdim=True)
        const_mse = map_sse(mean_map.expand_as(maps), maps).mean().item()
        variance_sum = maps.var(dim=0, unbiased=False).sum().item()
        assert abs(const_mse - variance_sum) < 1e-4


class TestGradientStop:
    def test_probe_training_leaves_model_untouched(self):
        cfg = tiny_cfg()
        core = small_core(cfg)
        probes = build_probes(core, 16, cfg.env.orientation_bins, cfg.env.map_size)
        before = copy.deepcopy(core.state_dict())

        x = torch.rand(4, 3, 32, 32)
        a = torch.randint(0, 5, (4,))
        b = core.update(core.initial_state(4), a, x)
        u = probes.reader(b)
        losses = probe_losses(probes, u, torch.randint(0, 16, (4,)),
                              torch.randint(0, 8, (4,)), torch.rand(4, 3, 32, 32))
        total = losses["pos_ce"] + losses["ori_ce"] + losses["map_mse_mean"]
        opt = torch.optim.Adam(probes.parameters(), lr=1e-2)
        opt.zero_grad()
        total.backward()
        opt.step()

        after = core.state_dict()
        for name in before:
            assert torch.equal(before[name], after[name]), name
        for p in core.parameters():
            assert p.grad is None or torch.equal(p.grad, torch.zeros_like(p))


class TestEvaluateProbes:
    def _data(self, n=64):
        torch.manual_seed(1)
        u = torch.randn(n, 24)
        pos = torch.randint(0, 16, (n,))
        ori = torch.randint(0, 8, (n,))
        maps = torch.rand(n, 3, 16, 16)
        return u, pos, ori, maps

    def test_deterministic(self):
        probes_kwargs = dict(num_positions=16, num_orientations=8)
        probe = build_probes(
            BeliefCore(variant="plain", n_h=12, embed_dim=8, frame_size=32),
            16, 8, map_size=16)
        u, pos, ori, maps = self._data()
        m1 = evaluate_probes(probe, u, pos, ori, maps, **probes_kwargs)
        m2 = evaluate_probes(probe, u, pos, ori, maps, **probes_kwargs)
        assert m1 == m2

    def test_chance_fields(self):
        probe = build_probes(
            BeliefCore(variant="plain", n_h=12, embed_dim=8, frame_size=32),
            16, 8, map_size=16)
        u, pos, ori, maps = self._data()
        metrics = evaluate_probes(probe, u, pos, ori, maps, 16, 8)
        assert metrics.position_chance == 1 / 16
        assert metrics.orientation_chance == 1 / 8
        assert metrics.map_mse >= 0 and metrics.map_constant_mse > 0

    def test_memorization_generalizes_worse(self):
        # Probes memorize noise beliefs on a train split; the disjoint
        # held-out split must score strictly worse.
        torch.manual_seed(2)
        n_train, n_eval = 96, 96
        u_train = torch.randn(n_train, 24)
        pos_train = torch.randint(0, 16, (n_train,))
        u_eval = torch.randn(n_eval, 24)
        pos_eval = torch.randint(0, 16, (n_eval,))
        probe = PoseProbe(24, 16, 8)
        opt = torch.optim.Adam(probe.parameters(), lr=5e-2)
        ori = torch.zeros(n_train, dtype=torch.long)
        for _ in range(400):
            logits, _ = probe(u_train)
            loss = torch.nn.functional.cross_entropy(logits, pos_train)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            train_acc = (probe(u_train)[0].argmax(-1) == pos_train).float().mean()
            eval_acc = (probe(u_eval)[0].argmax(-1) == pos_eval).float().mean()
        assert train_acc > 0.95
        assert eval_acc < train_acc


class TestHarnessProbePipeline:
    def test_fit_and_eval_runs(self):
        from beliefsim.harness import episode_tensors, eval_probes, fit_probes

        cfg = tiny_cfg()
        core = small_core(cfg)
        world_cfg = cfg.world_config()
        train_eps = [collect_scripted_episode(i, world_cfg, i + 10, cfg.data.episode_len)
                     for i in range(cfg.data.episodes)]
        heldout = [collect_scripted_episode(100 + i, world_cfg, i + 50,
                                            cfg.data.episode_len)
                   for i in range(cfg.data.heldout_episodes)]
        before = copy.deepcopy(core.state_dict())
        probes = fit_probes(cfg, core, train_eps)
        after = core.state_dict()
        for name in before:
            assert torch.equal(before[name], after[name])

        mean_map = episode_tensors(train_eps)["maps"].mean(dim=0, keepdim=True)
        metrics, per_step = eval_probes(cfg, core, probes, heldout,
                                        train_mean_map=mean_map)
        assert 0.0 <= metrics.position_accuracy <= 1.0
        assert len(per_step) == cfg.sim.unroll
        assert np.isfinite(per_step).all()

        metrics2, per_step2 = eval_probes(cfg, core, probes, heldout,
                                          train_mean_map=mean_map)
        assert metrics == metrics2
        assert np.array_equal(per_step, per_step2)
