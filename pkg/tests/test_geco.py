import math

import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefsim.geco import LAMBDA_MAX, GecoState, geco_loss, geco_update


class TestGecoLoss:
    def test_zero_lambda_is_pure_kl(self):
        state = GecoState(lam=0.0)
        kl = torch.tensor(1.7)
        assert torch.equal(geco_loss(kl, torch.tensor(5.0), state), kl)

    def test_constraint_exactly_met(self):
        for lam in (0.0, 1.0, 250.0):
            state = GecoState(lam=lam, kappa=1e-3)
            kl = torch.tensor(0.42, dtype=torch.float64)
            loss = geco_loss(kl, torch.tensor(1e-3, dtype=torch.float64), state)
            assert abs(float(loss) - 0.42) < 1e-12

    def test_formula(self):
        rng_vals = [(0.3, 0.01, 2.5, 1e-3), (1.2, 0.5, 7.0, 0.1), (0.0, 0.0, 0.0, 1.0)]
        for kl, recon, lam, kappa in rng_vals:
            state = GecoState(lam=lam, kappa=kappa)
            expected = kl + lam * (recon - kappa)
            got = float(geco_loss(torch.tensor(kl, dtype=torch.float64),
                                  torch.tensor(recon, dtype=torch.float64), state))
            assert abs(got - expected) < 1e-9

    def test_linear_in_recon_with_slope_lambda(self):
        state = GecoState(lam=3.5)
        l1 = float(geco_loss(torch.tensor(0.0, dtype=torch.float64),
                             torch.tensor(0.2, dtype=torch.float64), state))
        l2 = float(geco_loss(torch.tensor(0.0, dtype=torch.float64),
                             torch.tensor(0.7, dtype=torch.float64), state))
        assert abs((l2 - l1) / 0.5 - 3.5) < 1e-9

    def test_lambda_constant_for_gradients(self):
        state = GecoState(lam=2.0)
        recon = torch.tensor(0.5, requires_grad=True)
        kl = torch.tensor(1.0, requires_grad=True)
        geco_loss(kl, recon, state).backward()
        assert recon.grad.item() == 2.0 and kl.grad.item() == 1.0


class TestGecoUpdate:
    def test_violation_increases_lambda_until_clamp(self):
        state = GecoState(lam=1.0, kappa=1e-3, alpha=0.5, nu=0.5)
        prev = state.lam
        hit_clamp = False
        for _ in range(200):
            state = geco_update(state, 1.0)  # far above kappa
            assert state.lam >= prev or state.lam == LAMBDA_MAX
            prev = state.lam
            if state.lam == LAMBDA_MAX:
                hit_clamp = True
        assert hit_clamp

    def test_satisfaction_decays_lambda(self):
        state = GecoState(lam=10.0, kappa=0.1, alpha=0.5, nu=0.5)
        trace = [state.lam]
        for _ in range(300):
            state = geco_update(state, 0.0)
            trace.append(state.lam)
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert state.lam < 1e-4

    def test_infinite_kappa_drives_lambda_to_zero(self):
        state = GecoState(lam=1.0, kappa=math.inf, alpha=0.5, nu=0.5)
        for _ in range(10):
            state = geco_update(state, 0.5)
        assert state.lam == 0.0

    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=50),
           st.floats(0.0, 1000.0))
    @settings(max_examples=50, deadline=None)
    def test_lambda_always_clamped(self, errors, lam0):
        state = GecoState(lam=lam0, kappa=1e-3, alpha=0.9, nu=1.0)
        for err in errors:
            state = geco_update(state, err)
            assert 0.0 <= state.lam <= LAMBDA_MAX
            assert math.isfinite(state.c_ma)

    def test_moving_average_formula(self):
        state = GecoState(lam=1.0, kappa=0.1, alpha=0.75, nu=0.2, c_ma=0.0)
        new = geco_update(state, 0.5)
        assert abs(new.c_ma - 0.25 * (0.5 - 0.1)) < 1e-12
        assert abs(new.lam - min(math.exp(0.2 * new.c_ma), LAMBDA_MAX)) < 1e-12
