"""Belief network: recurrent core with optional slot or Kanerva memory.

The belief state is the LSTM pair (h, c); memory variants add an external
store that is read before and written after every recurrent update. Probe
consumers see the state only through `ProbeReader`, which severs gradient
flow back into the belief machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .errors import InvalidConfigError, InvalidStateError
from .nets import FrameEncoder, one_hot_actions

VARIANTS = ("plain", "slot", "kanerva")


@dataclass
class SlotMemoryState:
    """One slot appended per elapsed step; batched as [B, T, D]."""

    slots: torch.Tensor
    capacity: int

    @property
    def count(self) -> int:
        return self.slots.shape[1]


@dataclass
class KanervaMemoryState:
    """Linear-Gaussian memory: row mean R [B, K, D], row covariance U [B, K, K]."""

    R: torch.Tensor
    U: torch.Tensor
    sigma_n: torch.Tensor  # scalar observation-noise std, > 0


MemoryState = SlotMemoryState | KanervaMemoryState


@dataclass
class BeliefState:
    h: torch.Tensor  # [B, N_h]
    c: torch.Tensor  # [B, N_h]
    memory: MemoryState | None = None

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]

    def detached(self) -> "BeliefState":
        mem = self.memory
        if isinstance(mem, SlotMemoryState):
            mem = replace(mem, slots=mem.slots.detach())
        elif isinstance(mem, KanervaMemoryState):
            mem = replace(mem, R=mem.R.detach(), U=mem.U.detach(), sigma_n=mem.sigma_n.detach())
        return BeliefState(self.h.detach(), self.c.detach(), mem)


def km_read(R: torch.Tensor, z: torch.Tensor, ridge: float = 1e-6) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares addressing: w = argmin ||w R - z||^2 (ridge-regularized).

    R is [B, K, D] (or [K, D]), z is [B, D] (or [D]). Returns (readout, w)
    with readout = w R.
    """
    squeeze = R.ndim == 2
    if squeeze:
        R, z = R.unsqueeze(0), z.unsqueeze(0)
    K = R.shape[1]
    gram = R @ R.mT + ridge * torch.eye(K, dtype=R.dtype, device=R.device)
    rhs = torch.einsum("bkd,bd->bk", R, z)
    w = torch.linalg.solve(gram, rhs.unsqueeze(-1)).squeeze(-1)
    readout = torch.einsum("bk,bkd->bd", w, R)
    if squeeze:
        return readout.squeeze(0), w.squeeze(0)
    return readout, w


def km_write(mem: KanervaMemoryState, z: torch.Tensor, ridge: float = 1e-6) -> KanervaMemoryState:
    """Bayesian posterior update of (R, U) after observing z = w M + noise.

    Addressing weights w come from km_read on z. The update contracts U:
    trace(U') <= trace(U) for every write.
    """
    squeeze = mem.R.ndim == 2
    R = mem.R.unsqueeze(0) if squeeze else mem.R
    U = mem.U.unsqueeze(0) if squeeze else mem.U
    zb = z.unsqueeze(0) if squeeze else z

    _, w = km_read(R, zb, ridge)
    Uw = torch.einsum("bkl,bl->bk", U, w)  # U w^T
    sigma2_z = torch.einsum("bk,bk->b", w, Uw) + mem.sigma_n**2  # [B]
    delta = zb - torch.einsum("bk,bkd->bd", w, R)
    R_new = R + Uw.unsqueeze(-1) * (delta / sigma2_z.unsqueeze(-1)).unsqueeze(1)
    U_new = U - Uw.unsqueeze(-1) * (Uw / sigma2_z.unsqueeze(-1)).unsqueeze(1)
    U_new = 0.5 * (U_new + U_new.mT)
    if squeeze:
        R_new, U_new = R_new.squeeze(0), U_new.squeeze(0)
    return KanervaMemoryState(R=R_new, U=U_new, sigma_n=mem.sigma_n)


def slot_read(
    slots: torch.Tensor,
    queries: torch.Tensor,
    top_k: int = 50,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Cosine attention over slots, softmax-weighted over the top_k matches.

    slots is [B, T, D], queries is [B, R, D]; returns readouts [B, R, D].
    Empty memory (T = 0) returns zeros by convention.
    """
    B, T, D = slots.shape
    R = queries.shape[1]
    if T == 0:
        return torch.zeros(B, R, D, dtype=slots.dtype, device=slots.device)
    s_norm = slots / slots.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    q_norm = queries / queries.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    scores = torch.einsum("brd,btd->brt", q_norm, s_norm) / temperature
    if T > top_k:
        vals, idx = scores.topk(top_k, dim=-1)
        weights = torch.softmax(vals, dim=-1)
        gathered = torch.gather(
            slots.unsqueeze(1).expand(B, R, T, D), 2, idx.unsqueeze(-1).expand(B, R, top_k, D)
        )
        return torch.einsum("brk,brkd->brd", weights, gathered)
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("brt,btd->brd", weights, slots)


class SlotMemoryModule(nn.Module):
    """Slot store plus its learned read/write projections."""

    def __init__(self, query_dim: int, write_dim: int, slot_dim: int,
                 num_reads: int = 3, top_k: int = 50, capacity: int = 512):
        super().__init__()
        self.slot_dim = slot_dim
        self.num_reads = num_reads
        self.top_k = top_k
        self.capacity = capacity
        self.read_proj = nn.Linear(query_dim, num_reads * slot_dim)
        self.write_proj = nn.Linear(write_dim, slot_dim)

    def initial_state(self, batch: int, dtype=None, device=None) -> SlotMemoryState:
        dtype = dtype or torch.get_default_dtype()
        return SlotMemoryState(
            slots=torch.zeros(batch, 0, self.slot_dim, dtype=dtype, device=device),
            capacity=self.capacity,
        )

    def read(self, mem: SlotMemoryState, query_input: torch.Tensor) -> torch.Tensor:
        queries = self.read_proj(query_input).view(-1, self.num_reads, self.slot_dim)
        readouts = slot_read(mem.slots, queries, top_k=self.top_k)
        return readouts.flatten(1)

    def write(self, mem: SlotMemoryState, write_input: torch.Tensor) -> SlotMemoryState:
        if mem.count >= mem.capacity:
            raise InvalidConfigError(
                f"slot memory overflow: capacity {mem.capacity} too small for this episode"
            )
        new = self.write_proj(write_input).unsqueeze(1)
        return SlotMemoryState(slots=torch.cat([mem.slots, new], dim=1), capacity=mem.capacity)


class KanervaMemoryModule(nn.Module):
    """Kanerva store plus its read (linear) and write (2-layer MLP) projections."""

    def __init__(self, query_dim: int, write_dim: int, size: int = 32, word_dim: int = 512,
                 write_hidden: int = 400, init_sigma_n: float = 1.0, ridge: float = 1e-6):
        super().__init__()
        self.size = size
        self.word_dim = word_dim
        self.ridge = ridge
        self.read_proj = nn.Linear(query_dim, word_dim)
        self.write_mlp = nn.Sequential(
            nn.Linear(write_dim, write_hidden), nn.Tanh(), nn.Linear(write_hidden, word_dim)
        )
        self.R_init = nn.Parameter(torch.randn(size, word_dim) * 0.05)
        self.log_sigma_n = nn.Parameter(torch.tensor(float(init_sigma_n)).log())

    def initial_state(self, batch: int, dtype=None, device=None) -> KanervaMemoryState:
        dtype = dtype or torch.get_default_dtype()
        R = self.R_init.to(dtype).unsqueeze(0).expand(batch, -1, -1)
        U = torch.eye(self.size, dtype=dtype, device=device).unsqueeze(0).expand(batch, -1, -1)
        return KanervaMemoryState(R=R.contiguous(), U=U.contiguous(),
                                  sigma_n=self.log_sigma_n.exp().to(dtype))

    def read(self, mem: KanervaMemoryState, query_input: torch.Tensor) -> torch.Tensor:
        z = self.read_proj(query_input)
        readout, _ = km_read(mem.R, z, self.ridge)
        return readout

    def write(self, mem: KanervaMemoryState, write_input: torch.Tensor) -> KanervaMemoryState:
        z = self.write_mlp(write_input)
        return km_write(replace(mem, sigma_n=self.log_sigma_n.exp().to(mem.R.dtype)), z, self.ridge)


class BeliefCore(nn.Module):
    """b_t = RNN(b_{t-1}, a_{t-1}, x_t), with optional external memory.

    Memory variants read with a query built from (h_{t-1}, a_{t-1}, e_t),
    feed the readout to the recurrent cell as extra input, then write a
    projection of (h_t, a_{t-1}, e_t) after the update.
    """

    def __init__(
        self,
        variant: str = "plain",
        n_h: int = 512,
        embed_dim: int = 256,
        num_actions: int = 5,
        frame_size: int = 32,
        encoder_channels: tuple[int, int] = (16, 32),
        slot_dim: int = 200,
        slot_reads: int = 3,
        slot_top_k: int = 50,
        slot_capacity: int = 512,
        kanerva_size: int = 32,
        kanerva_dim: int = 512,
        kanerva_write_hidden: int = 400,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise InvalidConfigError(f"unknown belief variant {variant!r}")
        self.variant = variant
        self.n_h = n_h
        self.num_actions = num_actions
        self.encoder = FrameEncoder(frame_size, embed_dim, encoder_channels)

        query_dim = n_h + num_actions + embed_dim
        write_dim = query_dim
        self.memory: SlotMemoryModule | KanervaMemoryModule | None = None
        read_size = 0
        if variant == "slot":
            self.memory = SlotMemoryModule(query_dim, write_dim, slot_dim,
                                           slot_reads, slot_top_k, slot_capacity)
            read_size = slot_reads * slot_dim
        elif variant == "kanerva":
            self.memory = KanervaMemoryModule(query_dim, write_dim, kanerva_size,
                                              kanerva_dim, kanerva_write_hidden)
            read_size = kanerva_dim
        self.read_size = read_size
        self.cell = nn.LSTMCell(embed_dim + num_actions + read_size, n_h)

    def initial_state(self, batch: int, dtype=None, device=None) -> BeliefState:
        dtype = dtype or torch.get_default_dtype()
        h = torch.zeros(batch, self.n_h, dtype=dtype, device=device)
        c = torch.zeros_like(h)
        mem = self.memory.initial_state(batch, dtype, device) if self.memory else None
        return BeliefState(h=h, c=c, memory=mem)

    def _check_state(self, b: BeliefState) -> None:
        has = b.memory is not None
        wants = self.memory is not None
        if has != wants or (
            has and isinstance(b.memory, SlotMemoryState) != (self.variant == "slot")
        ):
            raise InvalidStateError(
                f"belief state memory does not match configured variant {self.variant!r}"
            )

    def update(self, b_prev: BeliefState, a_prev: torch.Tensor, x: torch.Tensor) -> BeliefState:
        """One belief step. a_prev is [B] action ids, x is [B, 3, H, W]."""
        self._check_state(b_prev)
        e = self.encoder(x)
        a = one_hot_actions(a_prev, self.num_actions).to(e.dtype)
        inputs = [e, a]
        if self.memory is not None:
            query = torch.cat([b_prev.h, a, e], dim=-1)
            inputs.append(self.memory.read(b_prev.memory, query))
        h, c = self.cell(torch.cat(inputs, dim=-1), (b_prev.h, b_prev.c))
        mem = b_prev.memory
        if self.memory is not None:
            mem = self.memory.write(mem, torch.cat([h, a, e], dim=-1))
        return BeliefState(h=h, c=c, memory=mem)

    def reset_entries(self, b: BeliefState, mask: torch.Tensor) -> BeliefState:
        """Zero the rows of (h, c) where mask is true (episode boundaries)."""
        if self.memory is not None:
            raise InvalidConfigError("per-entry reset is only supported for the plain variant")
        keep = (~mask).to(b.h.dtype).unsqueeze(-1)
        return BeliefState(h=b.h * keep, c=b.c * keep, memory=None)


def belief_features(b: BeliefState) -> torch.Tensor:
    """concat(h, tanh(c)): the full recurrent state as a flat vector."""
    return torch.cat([b.h, torch.tanh(b.c)], dim=-1)


class ProbeReader(nn.Module):
    """Builds the probe vector u from a belief state, gradients severed.

    The slot variant adds reads queried by the (detached) belief through
    probe-owned projections; the Kanerva variant adds reads at a learned
    fixed set of read words. Parameters here belong to the probe apparatus
    and are trained by probe losses only.
    """

    def __init__(self, core: BeliefCore, kanerva_probe_reads: int = 4):
        super().__init__()
        self.variant = core.variant
        u_dim = 2 * core.n_h
        if core.variant == "slot":
            mem = core.memory
            self.num_reads = mem.num_reads
            self.top_k = mem.top_k
            self.slot_dim = mem.slot_dim
            self.query_proj = nn.Linear(u_dim, mem.num_reads * mem.slot_dim)
            u_dim += mem.num_reads * mem.slot_dim
        elif core.variant == "kanerva":
            mem = core.memory
            self.read_words = nn.Parameter(torch.randn(kanerva_probe_reads, mem.word_dim) * 0.1)
            self.ridge = mem.ridge
            u_dim += kanerva_probe_reads * mem.word_dim
        self.u_dim = u_dim

    def forward(self, b: BeliefState) -> torch.Tensor:
        h, c = b.h.detach(), b.c.detach()
        u = torch.cat([h, torch.tanh(c)], dim=-1)
        if self.variant == "slot":
            queries = self.query_proj(u).view(-1, self.num_reads, self.slot_dim)
            readouts = slot_read(b.memory.slots.detach(), queries, top_k=self.top_k)
            u = torch.cat([u, readouts.flatten(1)], dim=-1)
        elif self.variant == "kanerva":
            R = b.memory.R.detach()
            B = R.shape[0]
            reads = []
            for i in range(self.read_words.shape[0]):
                z = self.read_words[i].unsqueeze(0).expand(B, -1)
                readout, _ = km_read(R, z, self.ridge)
                reads.append(readout)
            u = torch.cat([u] + reads, dim=-1)
        return u
