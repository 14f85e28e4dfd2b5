"""Predictive heads scored at overshoot targets.

Three interchangeable variants: a conditional recurrent canvas VAE
(generative), a deconvolutional regressor (deterministic), and a bilinear
scorer trained to pick the true future frame out of negatives
(contrastive). All expose `targets_loss` / `combine`, so the predictive
loss is head-agnostic.

Every head can be forced to ignore its conditioning input
(`zero_conditioning`), which reproduces the failure mode where the
generative loss carries no gradient into the belief state.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidConfigError, InvalidInputError, NumericFailureError
from .geco import GecoState, geco_loss
from .nets import FrameEncoder, GatedConvCell

LOGVAR_CLAMP = 7.0


def gaussian_kl(
    mu_q: torch.Tensor, logv_q: torch.Tensor, mu_p: torch.Tensor, logv_p: torch.Tensor
) -> torch.Tensor:
    """Elementwise KL(N(mu_q, e^logv_q) || N(mu_p, e^logv_p)), closed form."""
    return 0.5 * (
        logv_p - logv_q + (logv_q.exp() + (mu_q - mu_p) ** 2) / logv_p.exp() - 1.0
    )


@dataclass
class ContrastiveContext:
    """Per-batch frame embeddings for negative mining: [B, T, E]."""

    embeddings: torch.Tensor


class PredictiveHead(nn.Module):
    kind = "base"

    def __init__(self):
        super().__init__()
        self.zero_conditioning = False

    def _cond(self, cond: torch.Tensor) -> torch.Tensor:
        return cond * 0.0 if self.zero_conditioning else cond

    def prepare(self, frames: torch.Tensor):
        """Optional per-batch precomputation over all frames [B, T, 3, H, W]."""
        return None

    def targets_loss(self, x, cond, *, meta=None, ctx=None, generator=None) -> dict:
        raise NotImplementedError

    def combine(self, terms: dict, geco: GecoState | None = None) -> torch.Tensor:
        raise NotImplementedError


class ConvDraw(PredictiveHead):
    """Conditional recurrent canvas VAE with gated tanh-sigmoid recurrences.

    Runs `steps` refinement iterations. The encoder reads (x, canvas - x);
    the posterior is a diagonal Gaussian over a spatial latent; a separate
    recurrent prior network, driven only by the conditioning vector (and
    previous latents), defines p(z); the decoder updates the canvas
    additively. The conditioning recurrence is applied four times before
    the first prior is produced, and no step shares weights with another.
    The output variance is not modeled: reconstruction is scored as plain
    per-pixel squared error.
    """

    kind = "generative"

    def __init__(
        self,
        frame_size: int = 32,
        cond_dim: int = 1024,
        steps: int = 8,
        enc_hidden_ch: int = 16,
        enc_state_ch: int = 32,
        state_ch: int = 64,
        dec_hidden_ch: int = 32,
        latent_ch: int = 32,
        cond_ch: int = 32,
        prior_warmup: int = 4,
    ):
        super().__init__()
        if frame_size % 8 != 0:
            raise InvalidConfigError("frame_size must be divisible by 8")
        self.frame_size = frame_size
        self.cond_dim = cond_dim
        self.steps = steps
        self.latent_ch = latent_ch
        self.enc_state_ch = enc_state_ch
        self.state_ch = state_ch
        self.grid = frame_size // 8
        self.prior_warmup = prior_warmup

        self.cond_embed = nn.Linear(cond_dim, cond_ch)
        self.cond_ch = cond_ch

        def read_stack():
            # x concat error vector -> two stride-2 conv layers.
            return nn.Sequential(
                nn.Conv2d(6, enc_hidden_ch, 4, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(enc_hidden_ch, enc_hidden_ch, 4, stride=2, padding=1),
                nn.ReLU(),
            )

        def write_stack():
            return nn.Sequential(
                nn.ConvTranspose2d(state_ch, dec_hidden_ch, 4, stride=2, padding=1),
                nn.ReLU(),
                nn.ConvTranspose2d(dec_hidden_ch, dec_hidden_ch, 4, stride=2, padding=1),
                nn.ReLU(),
                nn.ConvTranspose2d(dec_hidden_ch, 3, 4, stride=2, padding=1),
            )

        n = steps
        self.read = nn.ModuleList([read_stack() for _ in range(n)])
        self.enc_cell = nn.ModuleList(
            [GatedConvCell(enc_hidden_ch, enc_state_ch, input_stride=2) for _ in range(n)]
        )
        self.posterior_conv = nn.ModuleList(
            [nn.Conv2d(enc_state_ch, 2 * latent_ch, 5, padding=2) for _ in range(n)]
        )
        self.prior_cell = nn.ModuleList(
            [GatedConvCell(cond_ch + latent_ch, state_ch) for _ in range(n)]
        )
        self.prior_conv = nn.ModuleList(
            [nn.Conv2d(state_ch, 2 * latent_ch, 5, padding=2) for _ in range(n)]
        )
        self.dec_cell = nn.ModuleList(
            [GatedConvCell(latent_ch, state_ch) for _ in range(n)]
        )
        self.write = nn.ModuleList([write_stack() for _ in range(n)])

    def _init_states(self, batch: int, dtype, device):
        g = self.grid
        zeros = lambda ch: torch.zeros(batch, ch, g, g, dtype=dtype, device=device)
        return zeros(self.enc_state_ch), zeros(self.state_ch), zeros(self.state_ch)

    def _cond_grid(self, cond: torch.Tensor) -> torch.Tensor:
        c = self.cond_embed(self._cond(cond))
        return c.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, self.grid, self.grid)

    def _warmup_prior(self, cond_grid: torch.Tensor, prior_state: torch.Tensor) -> torch.Tensor:
        z0 = torch.zeros(
            cond_grid.shape[0], self.latent_ch, self.grid, self.grid,
            dtype=cond_grid.dtype, device=cond_grid.device,
        )
        inp = torch.cat([cond_grid, z0], dim=1)
        for _ in range(self.prior_warmup):
            prior_state = self.prior_cell[0](inp, prior_state)
        return prior_state

    def elbo_terms(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        noise: list[torch.Tensor] | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-sample (recon_err, kl, canvas) for frames x [B, 3, H, W].

        recon_err is mean squared error per pixel; kl is the sum over all
        latent steps and dimensions. `noise` fixes the posterior-sampling
        draws (one [B, latent, g, g] tensor per step) for reproducibility.
        """
        if x.shape[-1] != self.frame_size or x.shape[1] != 3:
            raise InvalidInputError(
                f"expected [B, 3, {self.frame_size}, {self.frame_size}] frames, got {tuple(x.shape)}"
            )
        B, dtype, device = x.shape[0], x.dtype, x.device
        enc_s, dec_s, prior_s = self._init_states(B, dtype, device)
        cond_grid = self._cond_grid(cond)
        prior_s = self._warmup_prior(cond_grid, prior_s)
        canvas = torch.zeros_like(x)
        kl = torch.zeros(B, dtype=dtype, device=device)

        for k in range(self.steps):
            err = canvas - x
            r = self.read[k](torch.cat([x, err], dim=1))
            enc_s = self.enc_cell[k](r, enc_s)
            mu_q, logv_q = self.posterior_conv[k](enc_s).chunk(2, dim=1)
            mu_p, logv_p = self.prior_conv[k](prior_s).chunk(2, dim=1)
            logv_q = logv_q.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
            logv_p = logv_p.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
            if noise is not None:
                eps = noise[k]
            else:
                eps = torch.empty_like(mu_q).normal_(generator=generator)
            z = mu_q + (0.5 * logv_q).exp() * eps
            kl = kl + gaussian_kl(mu_q, logv_q, mu_p, logv_p).flatten(1).sum(dim=1)
            dec_s = self.dec_cell[k](z, dec_s)
            canvas = canvas + self.write[k](dec_s)
            if k + 1 < self.steps:
                prior_s = self.prior_cell[k + 1](torch.cat([cond_grid, z], dim=1), prior_s)

        recon = (x - canvas).pow(2).flatten(1).mean(dim=1)
        if not (torch.isfinite(recon).all() and torch.isfinite(kl).all()):
            raise NumericFailureError("non-finite value in generative head loss")
        return recon, kl, canvas

    def loss(
        self, x: torch.Tensor, cond: torch.Tensor, noise=None, generator=None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Batch-mean (recon_err, kl)."""
        recon, kl, _ = self.elbo_terms(x, cond, noise=noise, generator=generator)
        return recon.mean(), kl.mean()

    @torch.no_grad()
    def sample(self, cond: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Draw frames from the conditional prior; output clipped to [0, 1]."""
        B = cond.shape[0]
        dtype, device = cond.dtype, cond.device
        _, dec_s, prior_s = self._init_states(B, dtype, device)
        cond_grid = self._cond_grid(cond)
        prior_s = self._warmup_prior(cond_grid, prior_s)
        canvas = torch.zeros(B, 3, self.frame_size, self.frame_size, dtype=dtype, device=device)
        for k in range(self.steps):
            mu_p, logv_p = self.prior_conv[k](prior_s).chunk(2, dim=1)
            logv_p = logv_p.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
            eps = torch.empty_like(mu_p).normal_(generator=generator)
            z = mu_p + (0.5 * logv_p).exp() * eps
            dec_s = self.dec_cell[k](z, dec_s)
            canvas = canvas + self.write[k](dec_s)
            if k + 1 < self.steps:
                prior_s = self.prior_cell[k + 1](torch.cat([cond_grid, z], dim=1), prior_s)
        return canvas.clamp(0.0, 1.0)

    def targets_loss(self, x, cond, *, meta=None, ctx=None, generator=None) -> dict:
        recon, kl = self.loss(x, cond, generator=generator)
        return {"recon": recon, "kl": kl}

    def combine(self, terms: dict, geco: GecoState | None = None) -> torch.Tensor:
        if geco is None:
            return terms["kl"] + terms["recon"]
        return geco_loss(terms["kl"], terms["recon"], geco)


class DeterministicHead(PredictiveHead):
    """Deconvolutional regressor from the conditioning vector to a frame."""

    kind = "deterministic"

    def __init__(self, frame_size: int = 32, cond_dim: int = 1024,
                 base_ch: int = 64, hidden_ch: int = 32):
        super().__init__()
        if frame_size % 8 != 0:
            raise InvalidConfigError("frame_size must be divisible by 8")
        self.frame_size = frame_size
        self.grid = frame_size // 8
        self.base_ch = base_ch
        self.fc = nn.Linear(cond_dim, base_ch * self.grid * self.grid)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(base_ch, hidden_ch, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(hidden_ch, hidden_ch, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(hidden_ch, 3, 4, stride=2, padding=1),
        )

    def predict(self, cond: torch.Tensor) -> torch.Tensor:
        h = self.fc(self._cond(cond)).view(-1, self.base_ch, self.grid, self.grid)
        return self.deconv(torch.relu(h))

    def loss(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Mean squared error per pixel between the decoded frame and x."""
        return (self.predict(cond) - x).pow(2).mean()

    def targets_loss(self, x, cond, *, meta=None, ctx=None, generator=None) -> dict:
        return {"recon": self.loss(x, cond)}

    def combine(self, terms: dict, geco: GecoState | None = None) -> torch.Tensor:
        return terms["recon"]


class ContrastiveHead(PredictiveHead):
    """Bilinear scorer: pick the true future frame among negatives.

    Negatives come from other time steps of the same trajectory and from
    other elements of the mini-batch.
    """

    kind = "contrastive"

    def __init__(self, frame_size: int = 32, cond_dim: int = 1024,
                 embed_dim: int = 128, encoder_channels: tuple[int, int] = (16, 32),
                 traj_negatives: int = 8):
        super().__init__()
        self.encoder = FrameEncoder(frame_size, embed_dim, encoder_channels)
        self.bilinear = nn.Linear(cond_dim, embed_dim, bias=False)
        self.traj_negatives = traj_negatives

    def score(self, cond: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """cond [N, C] against emb [N, M, E] -> logits [N, M]."""
        return torch.einsum("ne,nme->nm", self.bilinear(self._cond(cond)), emb)

    def loss(self, x: torch.Tensor, cond: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
        """Cross-entropy with the true target at index 0.

        x is [N, 3, H, W], negatives is [N, M, 3, H, W], M >= 1.
        """
        if negatives.numel() == 0 or negatives.shape[1] < 1:
            raise InvalidConfigError("contrastive loss needs at least one negative")
        N, M = negatives.shape[:2]
        emb_pos = self.encoder(x).unsqueeze(1)
        emb_neg = self.encoder(negatives.flatten(0, 1)).view(N, M, -1)
        logits = self.score(cond, torch.cat([emb_pos, emb_neg], dim=1))
        target = torch.zeros(N, dtype=torch.long, device=x.device)
        return nn.functional.cross_entropy(logits, target)

    def prepare(self, frames: torch.Tensor) -> ContrastiveContext:
        B, T = frames.shape[:2]
        emb = self.encoder(frames.flatten(0, 1)).view(B, T, -1)
        return ContrastiveContext(embeddings=emb)

    def targets_loss(self, x, cond, *, meta=None, ctx=None, generator=None) -> dict:
        """Plan-target loss using cached embeddings.

        meta is (batch_idx [N], time_idx [N]) locating each target inside
        the [B, T] batch that `prepare` embedded.
        """
        if ctx is None or meta is None:
            raise InvalidConfigError("contrastive head needs prepare() context and target meta")
        emb = ctx.embeddings
        B, T, E = emb.shape
        b_idx, t_idx = meta
        N = b_idx.shape[0]
        device = emb.device

        pos = emb[b_idx, t_idx].unsqueeze(1)

        n_traj = min(self.traj_negatives, T - 1)
        if n_traj > 0:
            # Uniform over time steps != target: shift indices past t_idx.
            rand = torch.stack(
                [torch.randperm(T - 1, generator=generator, device=device)[:n_traj]
                 for _ in range(N)]
            )
            t_neg = rand + (rand >= t_idx.unsqueeze(1)).long()
            traj_negs = emb[b_idx.unsqueeze(1).expand(-1, n_traj), t_neg]
        else:
            traj_negs = emb.new_zeros(N, 0, E)

        if B > 1:
            # Same time step, every other batch element.
            others = torch.stack(
                [torch.cat([torch.arange(0, int(b)), torch.arange(int(b) + 1, B)]) for b in b_idx]
            ).to(device)
            batch_negs = emb[others, t_idx.unsqueeze(1).expand(-1, B - 1)]
        else:
            batch_negs = emb.new_zeros(N, 0, E)

        candidates = torch.cat([pos, traj_negs, batch_negs], dim=1)
        if candidates.shape[1] < 2:
            raise InvalidConfigError("contrastive loss needs at least one negative")
        logits = self.score(cond, candidates)
        target = torch.zeros(N, dtype=torch.long, device=device)
        return {"nce": nn.functional.cross_entropy(logits, target)}

    def combine(self, terms: dict, geco: GecoState | None = None) -> torch.Tensor:
        return terms["nce"]


def make_head(kind: str, frame_size: int, cond_dim: int, **kwargs) -> PredictiveHead:
    if kind == "generative":
        return ConvDraw(frame_size=frame_size, cond_dim=cond_dim, **kwargs)
    if kind == "deterministic":
        return DeterministicHead(frame_size=frame_size, cond_dim=cond_dim, **kwargs)
    if kind == "contrastive":
        return ContrastiveHead(frame_size=frame_size, cond_dim=cond_dim, **kwargs)
    raise InvalidConfigError(f"unknown head kind {kind!r}")
