import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefsim.belief import (
    BeliefCore,
    KanervaMemoryState,
    ProbeReader,
    SlotMemoryState,
    km_read,
    km_write,
    slot_read,
)
from beliefsim.errors import InvalidConfigError, InvalidStateError


def small_core(variant="plain", **kwargs):
    defaults = dict(n_h=16, embed_dim=8, frame_size=32, slot_dim=6, slot_reads=2,
                    slot_top_k=4, slot_capacity=32, kanerva_size=4, kanerva_dim=8,
                    kanerva_write_hidden=12)
    defaults.update(kwargs)
    return BeliefCore(variant=variant, **defaults)


def kanerva_posterior_oracle(R, U, sigma_n, w, z):
    """Brute-force joint-Gaussian conditioning over vec(M).

    M rows are jointly Gaussian with row covariance U (columns independent);
    the observation is z = w M + noise. Builds the full covariance of
    (vec(M), z) and conditions with generic Gaussian formulas.
    """
    K, D = R.shape
    C = np.kron(np.eye(D), U)                 # vec stacks columns of M
    A = np.kron(np.eye(D), w[None, :])        # z_d = w . M[:, d]
    mu = R.T.reshape(-1)                      # column-major vec
    S_zz = A @ C @ A.T + sigma_n**2 * np.eye(D)
    S_mz = C @ A.T
    gain = S_mz @ np.linalg.inv(S_zz)
    mu_post = mu + gain @ (z - A @ mu)
    C_post = C - gain @ S_mz.T
    R_post = mu_post.reshape(D, K).T
    # Row covariance: every DxD diagonal block of C_post equals U_post.
    U_post = C_post[:K, :K]
    return R_post, U_post


class TestKanervaRead:
    def test_orthonormal_rows_one_hot(self):
        R = torch.eye(4, 6)[:, :6]  # orthonormal rows in R^6
        z = R[2].clone()
        readout, w = km_read(R, z)
        assert torch.allclose(w, torch.tensor([0, 0, 1.0, 0]), atol=1e-5)
        assert torch.allclose(readout, z, atol=1e-5)

    def test_zero_memory(self):
        readout, w = km_read(torch.zeros(3, 5), torch.randn(5))
        assert torch.equal(readout, torch.zeros(5))

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            R = rng.normal(size=(4, 3))
            z = rng.normal(size=3)
            _, w = km_read(torch.tensor(R), torch.tensor(z))
            w_oracle = np.linalg.solve(R @ R.T + 1e-6 * np.eye(4), R @ z)
            assert np.abs(w.numpy() - w_oracle).max() < 1e-6


class TestKanervaWrite:
    def test_infinite_noise_no_update(self):
        torch.manual_seed(0)
        mem = KanervaMemoryState(R=torch.randn(3, 4, dtype=torch.float64),
                                 U=torch.eye(3, dtype=torch.float64),
                                 sigma_n=torch.tensor(1e8, dtype=torch.float64))
        new = km_write(mem, torch.randn(4, dtype=torch.float64))
        assert torch.allclose(new.R, mem.R, atol=1e-8)
        assert torch.allclose(new.U, mem.U, atol=1e-8)

    def test_against_joint_gaussian_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            K = int(rng.integers(2, 5))
            D = int(rng.integers(2, 5))
            R = rng.normal(size=(K, D))
            A = rng.normal(size=(K, K))
            U = A @ A.T + 0.1 * np.eye(K)
            sigma_n = float(rng.uniform(0.3, 2.0))
            z = rng.normal(size=D)

            mem = KanervaMemoryState(R=torch.tensor(R), U=torch.tensor(U),
                                     sigma_n=torch.tensor(sigma_n))
            new = km_write(mem, torch.tensor(z))
            _, w = km_read(torch.tensor(R), torch.tensor(z))
            R_oracle, U_oracle = kanerva_posterior_oracle(R, U, sigma_n,
                                                          w.numpy(), z)
            assert np.abs(new.R.numpy() - R_oracle).max() < 1e-6
            assert np.abs(new.U.numpy() - U_oracle).max() < 1e-6

    def test_repeated_write_shrinks_update(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            R = torch.tensor(rng.normal(size=(3, 4)))
            U = torch.eye(3, dtype=torch.float64)
            mem = KanervaMemoryState(R=R, U=U, sigma_n=torch.tensor(1.0, dtype=torch.float64))
            z = torch.tensor(rng.normal(size=4))
            once = km_write(mem, z)
            twice = km_write(once, z)
            step1 = (once.R - mem.R).norm()
            step2 = (twice.R - once.R).norm()
            assert step2 < step1

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_trace_contraction(self, seed):
        rng = np.random.default_rng(seed)
        K, D = 3, 4
        A = rng.normal(size=(K, K))
        mem = KanervaMemoryState(
            R=torch.tensor(rng.normal(size=(K, D))),
            U=torch.tensor(A @ A.T + 0.05 * np.eye(K)),
            sigma_n=torch.tensor(float(rng.uniform(0.2, 3.0))),
        )
        trace = float(torch.diagonal(mem.U).sum())
        for _ in range(4):
            mem = km_write(mem, torch.tensor(rng.normal(size=D)))
            new_trace = float(torch.diagonal(mem.U).sum())
            assert new_trace <= trace + 1e-10
            trace = new_trace

    def test_posterior_psd_and_symmetric(self):
        rng = np.random.default_rng(3)
        mem = KanervaMemoryState(
            R=torch.tensor(rng.normal(size=(4, 4))),
            U=torch.eye(4, dtype=torch.float64),
            sigma_n=torch.tensor(0.5, dtype=torch.float64),
        )
        for _ in range(6):
            mem = km_write(mem, torch.tensor(rng.normal(size=4)))
        U = mem.U.numpy()
        assert np.allclose(U, U.T)
        assert np.linalg.eigvalsh(U).min() > -1e-10


class TestSlotRead:
    def test_single_slot(self):
        slots = torch.randn(1, 1, 5)
        queries = torch.randn(1, 3, 5)
        readouts = slot_read(slots, queries)
        for head in range(3):
            assert torch.allclose(readouts[0, head], slots[0, 0])

    def test_orthogonal_slots_low_temperature(self):
        slots = torch.eye(4).unsqueeze(0)  # 4 orthogonal unit slots
        queries = slots[:, 2:3, :].clone()
        readouts = slot_read(slots, queries, temperature=0.01)
        assert torch.allclose(readouts[0, 0], slots[0, 2], atol=1e-4)

    def test_empty_memory_zero_readout(self):
        readouts = slot_read(torch.zeros(2, 0, 5), torch.randn(2, 3, 5))
        assert torch.equal(readouts, torch.zeros(2, 3, 5))

    def test_top_k_selection(self):
        # With top_k=1 and low temperature the best match wins outright.
        slots = torch.randn(1, 10, 4)
        queries = slots[:, 7:8, :] * 2.0
        readouts = slot_read(slots, queries, top_k=1, temperature=0.01)
        assert torch.allclose(readouts[0, 0], slots[0, 7], atol=1e-5)

    def test_exact_match_recovery(self):
        # Slot memory is lossless up to attention temperature.
        torch.manual_seed(4)
        slots = torch.nn.functional.normalize(torch.randn(1, 8, 16), dim=-1)
        for i in range(8):
            readout = slot_read(slots, slots[:, i : i + 1, :], temperature=0.005)
            assert torch.allclose(readout[0, 0], slots[0, i], atol=1e-3)


class TestBeliefCore:
    def _inputs(self, batch=2):
        return torch.randint(0, 5, (batch,)), torch.rand(batch, 3, 32, 32)

    def test_plain_matches_lstm_oracle(self):
        core = small_core()
        a, x = self._inputs()
        b0 = core.initial_state(2)
        b1 = core.update(b0, a, x)

        # Standalone recurrent-cell oracle from the raw weight matrices.
        e = core.encoder(x)
        onehot = torch.nn.functional.one_hot(a, 5).float()
        inp = torch.cat([e, onehot], dim=-1)
        cell = core.cell
        gates = inp @ cell.weight_ih.T + cell.bias_ih + b0.h @ cell.weight_hh.T + cell.bias_hh
        i, f, g, o = gates.chunk(4, dim=-1)
        c1 = torch.sigmoid(f) * b0.c + torch.sigmoid(i) * torch.tanh(g)
        h1 = torch.sigmoid(o) * torch.tanh(c1)
        assert torch.allclose(b1.h, h1, atol=1e-6)
        assert torch.allclose(b1.c, c1, atol=1e-6)

    def test_slot_count_equals_steps(self):
        core = small_core("slot")
        b = core.initial_state(2)
        a, x = self._inputs()
        for t in range(1, 5):
            b = core.update(b, a, x)
            assert isinstance(b.memory, SlotMemoryState)
            assert b.memory.count == t

    def test_slot_capacity_overflow(self):
        core = small_core("slot", slot_capacity=2)
        b = core.initial_state(1)
        a, x = self._inputs(1)
        b = core.update(b, a, x)
        b = core.update(b, a, x)
        with pytest.raises(InvalidConfigError):
            core.update(b, a, x)

    def test_kanerva_trace_contracts(self):
        core = small_core("kanerva")
        b = core.initial_state(2)
        a, x = self._inputs()
        trace = float(torch.diagonal(b.memory.U, dim1=-2, dim2=-1).sum())
        for _ in range(4):
            b = core.update(b, a, x)
            new_trace = float(torch.diagonal(b.memory.U, dim1=-2, dim2=-1).sum())
            assert new_trace <= trace + 1e-6
            trace = new_trace

    def test_deterministic(self):
        core = small_core("kanerva")
        a, x = self._inputs()
        b1 = core.update(core.initial_state(2), a, x)
        b2 = core.update(core.initial_state(2), a, x)
        assert torch.equal(b1.h, b2.h) and torch.equal(b1.memory.R, b2.memory.R)

    def test_variant_mismatch(self):
        plain = small_core("plain")
        slot = small_core("slot")
        with pytest.raises(InvalidStateError):
            plain.update(slot.initial_state(1), *self._inputs(1))

    def test_unknown_variant(self):
        with pytest.raises(InvalidConfigError):
            small_core("magic")


class TestProbeVector:
    def test_plain_length(self):
        core = BeliefCore(variant="plain", n_h=512, embed_dim=32, frame_size=32)
        reader = ProbeReader(core)
        b = core.initial_state(1)
        assert reader(b).shape == (1, 1024)

    def test_slot_length_full_scale(self):
        core = BeliefCore(variant="slot", n_h=512, embed_dim=32, frame_size=32,
                          slot_dim=200, slot_reads=3, slot_capacity=1350)
        reader = ProbeReader(core)
        b = core.initial_state(1)
        assert reader(b).shape == (1, 1024 + 3 * 200)

    def test_kanerva_length_full_scale(self):
        core = BeliefCore(variant="kanerva", n_h=512, embed_dim=32, frame_size=32,
                          kanerva_size=32, kanerva_dim=512)
        reader = ProbeReader(core, kanerva_probe_reads=4)
        b = core.initial_state(1)
        assert reader(b).shape == (1, 1024 + 4 * 512)

    @pytest.mark.parametrize("variant", ["plain", "slot", "kanerva"])
    def test_gradient_stop(self, variant):
        core = small_core(variant)
        reader = ProbeReader(core)
        decoder = torch.nn.Linear(reader.u_dim, 3)
        a = torch.randint(0, 5, (2,))
        x = torch.rand(2, 3, 32, 32)
        b = core.update(core.initial_state(2), a, x)
        loss = decoder(reader(b)).pow(2).sum()
        loss.backward()
        for name, p in core.named_parameters():
            assert p.grad is None or torch.equal(p.grad, torch.zeros_like(p)), name
        assert decoder.weight.grad.abs().sum() > 0
