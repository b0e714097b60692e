"""Desk-scale encoder and token-router shared decoder.

The decoder is a stack of pre-LN transformer layers (causal self-attention,
cross-attention to the encoded feature grid) whose feed-forward block is a
token router: three feed-forward experts (structured / detection /
recognition), one of which is selected per position by a fixed plan.
Stage-1 and stage-2 sequences use separate positional tables.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError
from .vocab import TokenCategory, TokenVocabulary

N_CATEGORIES = len(TokenCategory)
STAGE1, STAGE2 = 0, 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_factor: int = 4
    max_len_stage1: int = 64
    max_len_stage2: int = 48
    grid: int = 32
    channels: int = 17
    patch: int = 1
    n_enc_layers: int = 1
    # drop all-background patches from the memory (channel 0 of the grid is background)
    sparse_memory: bool = True
    # octaves of sin/cos position features shared by coordinate tokens and patches (0 disables)
    coord_freqs: int = 10
    # each cell's embedding also sees the cells within this Chebyshev radius (a conv-like stem)
    context: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.grid % self.patch:
            raise ContractError(f"grid={self.grid} not divisible by patch={self.patch}")

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_factor * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    w_structural: float = 4.0
    w_other: float = 1.0


@dataclass(frozen=True)
class RouterPlan:
    """Per-position expert category and structural/entity-tag flag for a target sequence."""
    categories: tuple[int, ...]
    tag_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.categories) != len(self.tag_mask):
            raise ContractError("plan categories and tag mask differ in length")

    def __len__(self):
        return len(self.categories)

    @classmethod
    def stage1(cls, targets: Sequence[int], vocab: TokenVocabulary) -> "RouterPlan":
        return cls(tuple([TokenCategory.STRUCTURED] * len(targets)), tuple(vocab.is_tag(t) for t in targets))

    @classmethod
    def stage2(cls, n_targets: int, n_polygon: int) -> "RouterPlan":
        """Targets are ``px py <polygon coords> <chars> </S>``."""
        cut = 2 + n_polygon
        cats = [TokenCategory.DETECTION if j < cut else TokenCategory.RECOGNITION for j in range(n_targets)]
        return cls(tuple(cats), tuple([False] * n_targets))


@dataclass
class Memory:
    """Encoded image tokens ``(B, M, d)`` and a key mask ``(B, M)`` (True = attend)."""
    states: torch.Tensor
    mask: Optional[torch.Tensor] = None

    def __getitem__(self, idx) -> "Memory":
        return Memory(self.states[idx], None if self.mask is None else self.mask[idx])

    @property
    def shape(self):
        return self.states.shape


def fourier_features(u: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``[sin(2^k pi u), cos(2^k pi u)]`` for k < n_freqs; ``u`` is a position in [0, 1]."""
    f = math.pi * 2.0 ** torch.arange(n_freqs, dtype=torch.float64)
    a = u.to(torch.float64)[..., None] * f
    return torch.cat([a.sin(), a.cos()], -1)


def _patch_cells(grid: int, patch: int, radius: int) -> torch.Tensor:
    """(n_patches, patch^2 * (2r+1)^2) flat indices into the grid zero-padded by ``radius``.

    Order per patch: cell (row-major inside the patch), then neighbour offset (row-major).
    """
    n, w, k = grid // patch, grid + 2 * radius, 2 * radius + 1
    pr, pc, a, b, i, j = torch.meshgrid(*(torch.arange(m) for m in (n, n, patch, patch, k, k)), indexing="ij")
    return ((pr * patch + a + i) * w + pc * patch + b + j).reshape(n * n, -1)


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, mem, causal: bool = False, key_mask=None):
        B, L, d = x.shape
        M = mem.shape[1]
        h = self.n_heads
        q = self.q(x).view(B, L, h, d // h).transpose(1, 2)
        k, v = self.kv(mem).view(B, M, 2, h, d // h).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            mask = torch.ones(L, M, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = att.softmax(-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, L, d))


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.mlp_hidden)

    def forward(self, x, key_mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask=key_mask)
        return x + self.ffn(self.ln2(x))


class TokenRouter(nn.Module):
    """Three category experts; each position passes through exactly one."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.experts = nn.ModuleList(FeedForward(d, hidden) for _ in range(N_CATEGORIES))

    def forward(self, x, categories):
        out = torch.zeros_like(x)
        for c, expert in enumerate(self.experts):
            sel = categories == c
            if sel.any():
                out[sel] = expert(x[sel])
        return out


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.ln3 = nn.LayerNorm(d)
        self.router = TokenRouter(d, cfg.mlp_hidden)

    def forward(self, x, mem, categories, key_mask=None):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, causal=True)
        x = x + self.cross_attn(self.ln2(x), mem, key_mask=key_mask)
        return x + self.router(self.ln3(x), categories)


class SpotModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: TokenVocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        n_side = cfg.grid // cfg.patch
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * cfg.channels * (2 * cfg.context + 1) ** 2, d)
        self.register_buffer("patch_cells", _patch_cells(cfg.grid, cfg.patch, cfg.context), persistent=False)
        self.row_pos = nn.Parameter(torch.zeros(n_side, d))
        self.col_pos = nn.Parameter(torch.zeros(n_side, d))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.tok_embed = nn.Embedding(vocab.size, d)
        self.pos_stage1 = nn.Parameter(torch.zeros(cfg.max_len_stage1, d))
        self.pos_stage2 = nn.Parameter(torch.zeros(cfg.max_len_stage2, d))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab.size)
        if cfg.coord_freqs:
            # coordinate bins and patch positions see the same features of normalized position,
            # so nearby bins share structure and a bin can be matched to the patches it covers
            nf = 2 * cfg.coord_freqs
            bins = (torch.arange(vocab.n_bins) + 0.5) / vocab.n_bins
            cells = (torch.arange(n_side) + 0.5) / n_side
            self.register_buffer("bin_feats", fourier_features(bins, cfg.coord_freqs).float(), persistent=False)
            self.register_buffer("cell_feats", fourier_features(cells, cfg.coord_freqs).float(), persistent=False)
            self.coord_in = nn.Linear(nf, d)
            self.coord_out = nn.Linear(nf, d)
            self.cell_x = nn.Linear(nf, d)
            self.cell_y = nn.Linear(nf, d)

    def init_parameters(self, seed: int) -> None:
        """Scaled uniform weights, zero biases, unit LayerNorm gains; deterministic in ``seed``."""
        g = torch.Generator().manual_seed(int(seed))

        def uniform_(p, bound):
            p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1).to(p.dtype) * bound)

        with torch.no_grad():
            for name, mod in self.named_modules():
                if isinstance(mod, nn.Linear):
                    uniform_(mod.weight, 1.0 / math.sqrt(mod.in_features))
                    if mod.bias is not None:
                        mod.bias.zero_()
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
            # std 0.02 tables
            for p in (self.tok_embed.weight, self.row_pos, self.col_pos, self.pos_stage1, self.pos_stage2):
                uniform_(p, 0.02 * math.sqrt(3))

    def encode(self, features: torch.Tensor) -> Memory:
        """``features``: (B, G, G, C) float grid -> memory of patch tokens.

        With ``sparse_memory`` only patches holding a non-background cell are
        kept (in raster order), padded to the batch maximum and masked.
        """
        B, G, _, C = features.shape
        p, r = self.cfg.patch, self.cfg.context
        n = G // p
        occupied = features[..., 1:].reshape(B, n, p, n, p, C - 1).abs().sum((2, 4, 5)).reshape(B, n * n) > 0
        row, col = self.row_pos, self.col_pos
        if self.cfg.coord_freqs:
            feats = self.cell_feats.to(row.dtype)
            row, col = row + self.cell_y(feats), col + self.cell_x(feats)
        pos = (row[:, None, :] + col[None, :, :]).reshape(n * n, -1)
        mask = None
        order = torch.arange(n * n).expand(B, -1)
        if self.cfg.sparse_memory:
            M = max(1, int(occupied.sum(1).max()))
            # stable sort puts occupied patches first without changing their order
            order = torch.sort((~occupied).to(torch.int8), dim=1, stable=True).indices[:, :M]
            mask = occupied.gather(1, order)
            mask[:, 0] = True  # an empty image still attends to one (background) patch
            pos = pos[order]
        # gather each kept patch's cells together with their context neighbourhoods
        padded = F.pad(features, (0, 0, r, r, r, r)).reshape(B, -1, C)
        cells = self.patch_cells[order]
        x = padded[torch.arange(B)[:, None, None], cells].reshape(B, order.shape[1], -1)
        x = self.patch_embed(x) + pos
        for layer in self.encoder:
            x = layer(x, mask)
        return Memory(self.enc_norm(x), mask)

    def decode(self, memory: Memory, ids: torch.Tensor, categories: torch.Tensor, role: int) -> torch.Tensor:
        """Logits (B, L, V) for token prefixes ``ids`` (B, L) routed by ``categories`` (B, L)."""
        if ids.shape != categories.shape:
            raise ContractError(f"plan shape {tuple(categories.shape)} does not match prefix {tuple(ids.shape)}")
        L = ids.shape[1]
        pos = self.pos_stage1 if role == STAGE1 else self.pos_stage2
        if L > pos.shape[0]:
            raise ContractError(f"prefix length {L} exceeds maximum {pos.shape[0]}")
        table = self.tok_embed.weight
        nb = self.vocab.n_bins
        if self.cfg.coord_freqs:
            table = torch.cat([table[:nb] + self.coord_in(self.bin_feats.to(table.dtype)), table[nb:]])
        x = F.embedding(ids, table) + pos[:L]
        if isinstance(memory, torch.Tensor):
            memory = Memory(memory)
        for layer in self.layers:
            x = layer(x, memory.states, categories, memory.mask)
        h = self.final_norm(x)
        w = self.head.weight
        if self.cfg.coord_freqs:
            w = torch.cat([w[:nb] + self.coord_out(self.bin_feats.to(w.dtype)), w[nb:]])
        return F.linear(h, w, self.head.bias)

    def forward(self, features, ids, categories, role: int = STAGE1, img_index=None):
        memory = self.encode(features)
        if img_index is not None:
            memory = memory[img_index]
        return self.decode(memory, ids, categories, role)


def build_model(cfg: ModelConfig, vocab: TokenVocabulary, seed: int = 0, dtype=torch.float32) -> SpotModel:
    model = SpotModel(cfg, vocab).to(dtype)
    model.init_parameters(seed)
    return model


def token_weights(tag_mask: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return torch.where(tag_mask, torch.tensor(weights.w_structural, dtype=torch.float64),
                       torch.tensor(weights.w_other, dtype=torch.float64))


def loss(logits: torch.Tensor, targets: torch.Tensor, weights: LossWeights, plan: RouterPlan, k: int) -> torch.Tensor:
    """Weighted NLL ``-sum_{j>=k} w_j log P(target_j | prefix)`` for one sequence.

    ``logits`` is (N, V) with row j predicting ``targets[j]``; ``w_j`` is the
    structural weight where ``plan`` flags a tag and the other weight elsewhere.
    """
    if logits.shape[0] != len(targets) or len(plan) != len(targets):
        raise ContractError("logits, targets and plan must be aligned")
    logp = logits.log_softmax(-1).gather(-1, targets.view(-1, 1)).squeeze(-1)
    w = token_weights(torch.tensor(plan.tag_mask, dtype=torch.bool), weights).to(logp.dtype)
    w[:k] = 0
    return -(w * logp).sum()


def batch_loss(logits: torch.Tensor, targets: torch.Tensor, weight: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum of weighted NLL over a padded batch (weight 0 on padding and prompts) and per-token NLL."""
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    nll = nll.view_as(targets)
    return (weight * nll).sum(), nll
