"""Body-part residual VQ-VAE: four part encoders, four residual quantizer stacks,
one shared whole-body decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .motiondata import PARTS, MotionSequence, PartMotion, PartitionScheme, four_part_partition


@dataclass
class RvqConfig:
    num_layers: int = 3          # base layer + residual layers
    codes_per_book: int = 32
    code_dim: int = 16
    downscale: int = 4
    quant_dropout: float = 0.2
    beta: float = 0.02
    ema_decay: float = 0.99
    reset_threshold: float = 1.0
    width: int = 128
    res_depth: int = 1
    lr: float = 2e-3
    warmup: int = 100
    feature_dim: int = 263

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.codes_per_book < 2:
            raise ValueError("codes_per_book must be >= 2")
        if not 0 <= self.quant_dropout < 1:
            raise ValueError("quant_dropout must be in [0, 1)")
        if self.downscale < 1 or self.downscale & (self.downscale - 1):
            raise ValueError("downscale must be a power of two")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")

    @classmethod
    def full_scale(cls) -> "RvqConfig":
        return cls(num_layers=6, codes_per_book=512, code_dim=128, width=512, lr=2e-4, warmup=2000)

    @property
    def mask_id(self) -> int:
        return self.codes_per_book


@dataclass
class LatentSeq:
    part: str
    vectors: np.ndarray  # n x d


@dataclass
class TokenGrid:
    """Codebook indices, shape (layers, 4, n).  ``mask_id`` (== K) marks a masked slot."""

    layers: np.ndarray
    mask_id: int

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.int64)
        if self.layers.ndim != 3 or self.layers.shape[1] != len(PARTS):
            raise ValueError(f"token grid must be (layers, 4, n), got {self.layers.shape}")
        if self.layers.min(initial=0) < 0 or self.layers.max(initial=0) > self.mask_id:
            raise ValueError("token ids out of range")

    @property
    def n(self) -> int:
        return self.layers.shape[2]

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def base(self) -> np.ndarray:
        return self.layers[0]

    def has_mask(self) -> bool:
        return bool((self.layers == self.mask_id).any())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.layers.copy(), self.mask_id)


def pad_to_multiple(frames: np.ndarray, k: int) -> np.ndarray:
    T = frames.shape[0]
    extra = (-T) % k
    if extra == 0:
        return frames
    return np.concatenate([frames, np.repeat(frames[-1:], extra, axis=0)], axis=0)


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=1)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class Encoder(nn.Module):
    def __init__(self, in_dim: int, width: int, code_dim: int, downs: int, depth: int):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv1d(in_dim, width, 3, padding=1), nn.ReLU()]
        for _ in range(downs):
            layers.append(nn.Conv1d(width, width, 4, stride=2, padding=1))
            layers.extend(ResBlock(width) for _ in range(depth))
        layers.append(nn.Conv1d(width, code_dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, T, D) -> (B, n, d)
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class Decoder(nn.Module):
    def __init__(self, in_dim: int, width: int, out_dim: int, ups: int, depth: int):
        super().__init__()
        layers: List[nn.Module] = [nn.Conv1d(in_dim, width, 3, padding=1), nn.ReLU()]
        for _ in range(ups):
            layers.extend(ResBlock(width) for _ in range(depth))
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv1d(width, width, 3, padding=1))
        layers += [nn.ReLU(), nn.Conv1d(width, out_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, n, 4d) -> (B, T, D)
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class Codebook(nn.Module):
    """K x d code table with EMA statistics; updated outside of autograd."""

    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        self.register_buffer("vectors", torch.zeros(num_codes, dim))
        self.register_buffer("ema_counts", torch.zeros(num_codes))
        self.register_buffer("ema_sums", torch.zeros(num_codes, dim))
        self.register_buffer("initialized", torch.zeros(()))

    @property
    def num_codes(self) -> int:
        return self.vectors.shape[0]

    @torch.no_grad()
    def init_from(self, x: torch.Tensor, gen: torch.Generator) -> None:
        self.vectors.copy_(_sample_rows(x, self.num_codes, gen))
        self.ema_sums.copy_(self.vectors)
        self.ema_counts.fill_(1.0)
        self.initialized.fill_(1.0)

    @torch.no_grad()
    def ema_update(self, x: torch.Tensor, idx: torch.Tensor, decay: float,
                   reset_threshold: float = 0.0, gen: Optional[torch.Generator] = None) -> int:
        """Move codes toward the mean of their assigned vectors; returns the number of resets."""
        onehot = F.one_hot(idx, self.num_codes).to(x.dtype)  # N x K
        counts = onehot.sum(0)
        sums = onehot.t() @ x
        self.ema_counts.mul_(decay).add_(counts, alpha=1 - decay)
        self.ema_sums.mul_(decay).add_(sums, alpha=1 - decay)
        used = self.ema_counts > 1e-12
        self.vectors[used] = self.ema_sums[used] / self.ema_counts[used, None]
        dead = self.ema_counts < reset_threshold
        n_dead = int(dead.sum())
        if n_dead and gen is not None:
            fresh = _sample_rows(x, self.num_codes, gen)
            self.vectors[dead] = fresh[dead]
            self.ema_sums[dead] = fresh[dead]
            self.ema_counts[dead] = 1.0
        return n_dead


def _sample_rows(x: torch.Tensor, k: int, gen: torch.Generator) -> torch.Tensor:
    if x.shape[0] < k:
        reps = math.ceil(k / x.shape[0])
        x = x.repeat(reps, 1)
        x = x + torch.randn(x.shape, generator=gen, dtype=x.dtype) * (0.01 / math.sqrt(x.shape[1]))
    perm = torch.randperm(x.shape[0], generator=gen)[:k]
    return x[perm].clone()


def _book_tensor(book) -> torch.Tensor:
    if isinstance(book, Codebook):
        return book.vectors
    return torch.as_tensor(np.asarray(book) if not torch.is_tensor(book) else book)


def nearest_codes(x: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Row-wise argmin of squared distance; ties go to the lowest index."""
    if vectors.shape[0] == 0:
        raise ValueError("empty codebook")
    d2 = ((x[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
    return torch.argmin(d2, dim=1)


def nearest_code(v, book) -> int:
    vectors = _book_tensor(book)
    v = torch.as_tensor(np.asarray(v) if not torch.is_tensor(v) else v, dtype=vectors.dtype)
    if not torch.isfinite(v).all():
        raise ValueError("non-finite query vector")
    return int(nearest_codes(v.reshape(1, -1), vectors)[0])


@dataclass
class RvqResult:
    tokens: torch.Tensor              # (layers, N), -1 for inactive layers
    quantized_sum: torch.Tensor       # (N, d)
    residual_final: torch.Tensor      # (N, d)
    residual_inputs: List[torch.Tensor] = field(default_factory=list)  # r^v per active layer
    quantized: List[torch.Tensor] = field(default_factory=list)        # b~^v per active layer


def quantize_residual(latent, books: Sequence, active_layers: Optional[int] = None) -> RvqResult:
    """r^0 = b;  b~^v = Q_v(r^v);  r^{v+1} = r^v - b~^v  over the first ``active_layers`` books."""
    if isinstance(latent, LatentSeq):
        latent = latent.vectors
    r = torch.as_tensor(latent) if not torch.is_tensor(latent) else latent
    L = len(books)
    active = L if active_layers is None else active_layers
    if not 1 <= active <= L:
        raise ValueError(f"active_layers must be in [1, {L}], got {active}")
    tokens = torch.full((L, r.shape[0]), -1, dtype=torch.long)
    total = torch.zeros_like(r)
    res_in, quant = [], []
    for v in range(active):
        vectors = _book_tensor(books[v]).to(r.dtype)
        if vectors.shape[1] != r.shape[1]:
            raise ValueError("codebook dimension mismatch")
        idx = nearest_codes(r.detach(), vectors)
        q = vectors[idx]
        tokens[v] = idx
        res_in.append(r)
        quant.append(q)
        total = total + q
        r = r - q
    return RvqResult(tokens, total, r, res_in, quant)


class SpamVQ(nn.Module):
    def __init__(self, cfg: RvqConfig, scheme: Optional[PartitionScheme] = None):
        super().__init__()
        self.cfg = cfg
        self.scheme = scheme or four_part_partition()
        downs = int(math.log2(cfg.downscale))
        self.encoders = nn.ModuleDict({
            p: Encoder(self.scheme.part_dim(p), cfg.width, cfg.code_dim, downs, cfg.res_depth)
            for p in PARTS})
        self.books = nn.ModuleDict({
            p: nn.ModuleList(Codebook(cfg.codes_per_book, cfg.code_dim) for _ in range(cfg.num_layers))
            for p in PARTS})
        self.decoder = Decoder(len(PARTS) * cfg.code_dim, cfg.width, cfg.feature_dim, downs, cfg.res_depth)
        for p in PARTS:
            self.register_buffer(f"idx_{p}", torch.tensor(self.scheme.indices(p), dtype=torch.long),
                                 persistent=False)

    def part_index(self, part: str) -> torch.Tensor:
        return getattr(self, f"idx_{part}")

    def encode(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        """(B, T, 263) with T divisible by downscale -> {part: (B, n, d)}."""
        return {p: self.encoders[p](x[..., self.part_index(p)]) for p in PARTS}

    def decode(self, latents: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(latents) != len(PARTS):
            raise ValueError(f"expected {len(PARTS)} part latents, got {len(latents)}")
        n = latents[0].shape[-2]
        if any(z.shape[-2] != n for z in latents):
            raise ValueError("part latents disagree on token count")
        return self.decoder(torch.cat(list(latents), dim=-1))

    def quantize(self, latents: Dict[str, torch.Tensor], active_layers: Optional[int] = None
                 ) -> Dict[str, RvqResult]:
        out = {}
        for p in PARTS:
            z = latents[p]
            B, n, d = z.shape
            res = quantize_residual(z.reshape(B * n, d), list(self.books[p]), active_layers)
            out[p] = res
        return out

    def forward(self, x: torch.Tensor, active_layers: Optional[int] = None):
        latents = self.encode(x)
        q = self.quantize(latents, active_layers)
        dec_in = []
        for p in PARTS:
            z = latents[p]
            qs = q[p].quantized_sum.reshape(z.shape)
            dec_in.append(z + (qs - z).detach())  # straight-through
        return self.decode(dec_in), latents, q

    @torch.no_grad()
    def code_vectors(self, part: str, layer: int, idx: torch.Tensor) -> torch.Tensor:
        return self.books[part][layer].vectors[idx]


def rvq_loss(m: torch.Tensor, m_hat: torch.Tensor, residual_inputs: Sequence[torch.Tensor],
             quantized: Sequence[torch.Tensor], beta: float) -> torch.Tensor:
    """Mean L1 reconstruction + beta * sum over (part, layer) of mean ||R - sg(B)||^2."""
    loss = F.l1_loss(m_hat, m)
    for r, b in zip(residual_inputs, quantized):
        loss = loss + beta * ((r - b.detach()) ** 2).mean()
    return loss


def _stack(batch: Sequence[MotionSequence], ds: int) -> torch.Tensor:
    if not batch:
        raise ValueError("empty batch")
    T = batch[0].T
    if any(m.T != T for m in batch):
        raise ValueError("batch clips must share T")
    return torch.from_numpy(np.stack([pad_to_multiple(m.frames, ds) for m in batch]))


class RvqTrainer:
    """Owns the optimizer and RNG for training a :class:`SpamVQ`.  Single writer."""

    def __init__(self, model: SpamVQ, seed: int = 0, lr: Optional[float] = None):
        self.model = model
        cfg = model.cfg
        self.opt = torch.optim.Adam(model.parameters(), lr=lr or cfg.lr, betas=(0.9, 0.99))
        warm = max(cfg.warmup, 1)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, lambda it: min(1.0, (it + 1) / warm))
        self.gen = torch.Generator().manual_seed(seed)
        self.steps = 0
        self.last_resets = 0

    @torch.no_grad()
    def _init_books(self, latents: Dict[str, torch.Tensor]) -> None:
        for p in PARTS:
            r = latents[p].reshape(-1, latents[p].shape[-1])
            for book in self.model.books[p]:
                if not book.initialized:
                    book.init_from(r, self.gen)
                r = r - book.vectors[nearest_codes(r, book.vectors)]

    def _active_layers(self) -> int:
        L = self.model.cfg.num_layers
        if float(torch.rand((), generator=self.gen)) < self.model.cfg.quant_dropout:
            return int(torch.randint(1, L + 1, (), generator=self.gen))
        return L

    def step(self, batch: Sequence[MotionSequence]) -> float:
        model, cfg = self.model, self.model.cfg
        model.train()
        x = _stack(batch, cfg.downscale)
        if not bool(model.books[PARTS[0]][0].initialized):
            with torch.no_grad():
                self._init_books(model.encode(x))
        active = self._active_layers()
        m_hat, latents, q = model(x, active)
        res_in = [r for p in PARTS for r in q[p].residual_inputs]
        quant = [b for p in PARTS for b in q[p].quantized]
        loss = rvq_loss(x, m_hat, res_in, quant, cfg.beta)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite RVQ loss at step {self.steps}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.sched.step()
        resets = 0
        for p in PARTS:
            for v in range(active):
                resets += model.books[p][v].ema_update(
                    q[p].residual_inputs[v].detach(), q[p].tokens[v], cfg.ema_decay,
                    cfg.reset_threshold, self.gen)
        self.last_resets = resets
        self.steps += 1
        return float(loss.detach())


def encode_part(pm: PartMotion, model: SpamVQ) -> LatentSeq:
    enc = model.encoders[pm.part]
    D = model.scheme.part_dim(pm.part)
    if pm.frames.ndim != 2 or pm.frames.shape[1] != D:
        raise ValueError(f"part {pm.part} expects {D} columns, got {pm.frames.shape}")
    x = torch.from_numpy(pad_to_multiple(np.asarray(pm.frames, np.float32), model.cfg.downscale))
    with torch.no_grad():
        z = enc(x[None].to(next(enc.parameters()).dtype))[0]
    return LatentSeq(pm.part, z.numpy())


def decode_whole(latents: Sequence[LatentSeq], model: SpamVQ, fps: float = 20.0) -> MotionSequence:
    if len(latents) != len(PARTS):
        raise ValueError(f"expected {len(PARTS)} latents, got {len(latents)}")
    by_part = {z.part: z for z in latents}
    if set(by_part) != set(PARTS):
        raise ValueError("latents must cover each body part exactly once")
    dtype = next(model.decoder.parameters()).dtype
    zs = [torch.as_tensor(by_part[p].vectors, dtype=dtype)[None] for p in PARTS]
    with torch.no_grad():
        out = model.decode(zs)[0]
    return MotionSequence(out.float().numpy(), fps)


def tokenize(m: MotionSequence, model: SpamVQ) -> TokenGrid:
    cfg = model.cfg
    x = torch.from_numpy(np.array(pad_to_multiple(m.frames, cfg.downscale)))[None]
    with torch.no_grad():
        latents = model.encode(x)
        q = model.quantize(latents)
    n = x.shape[1] // cfg.downscale
    grid = np.stack([q[p].tokens.numpy().reshape(cfg.num_layers, n) for p in PARTS], axis=1)
    return TokenGrid(grid, cfg.mask_id)


def embed_tokens(grid: TokenGrid, model: SpamVQ) -> List[LatentSeq]:
    if grid.has_mask():
        raise ValueError("cannot detokenize a grid containing MASK tokens")
    if grid.num_layers > model.cfg.num_layers:
        raise ValueError("grid has more layers than the model")
    out = []
    for pi, p in enumerate(PARTS):
        idx = torch.as_tensor(grid.layers[:, pi, :])
        z = sum(model.books[p][v].vectors[idx[v]] for v in range(grid.num_layers))
        out.append(LatentSeq(p, z.detach().numpy()))
    return out


def detokenize(grid: TokenGrid, model: SpamVQ, fps: float = 20.0, text: Optional[str] = None
               ) -> MotionSequence:
    m = decode_whole(embed_tokens(grid, model), model, fps)
    return MotionSequence(m.frames, fps, text)


def config_dict(cfg) -> dict:
    return asdict(cfg)
