"""Factorized space-time masked transformers over body-part token grids.

Each part row is prefixed by one text token (the part's local prompt embedding,
else the global one).  A layer applies spatial attention (across the four parts
at one time index, plus the query's own text token), then temporal attention
(along one part row, text token included), then a per-token feed-forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .motiondata import PARTS

NUM_PARTS = len(PARTS)


@dataclass
class GenConfig:
    layers: int = 2
    heads: int = 2
    model_dim: int = 32
    ff_mult: int = 4
    steps: int = 10
    cfg_base: float = 4.0
    cfg_res: float = 5.0
    text_dim: int = 32
    num_codes: int = 32           # K; the MASK id is K
    rvq_layers: int = 3           # V + 1
    max_tokens: int = 64
    cond_drop: float = 0.1
    lr: float = 1e-3
    warmup: int = 100

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @classmethod
    def full_scale(cls) -> "GenConfig":
        return cls(layers=9, heads=8, model_dim=512, text_dim=512, num_codes=512, rvq_layers=6,
                   lr=2e-4, warmup=2000)

    @property
    def mask_id(self) -> int:
        return self.num_codes


# ---------------------------------------------------------------- schedule / CFG

def gamma(tau: float) -> float:
    """cos(pi*tau/2), evaluated as sin(pi*(1-tau)/2) so both endpoints are exact."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return math.sin(math.pi * (1.0 - tau) / 2.0)


def mask_count(total: int, tau: float) -> int:
    if total < 0:
        raise ValueError("total must be >= 0")
    return min(total, max(0, math.ceil(total * gamma(tau) - 1e-9)))


def cfg_logits(cond, uncond, s: float):
    if cond.shape != uncond.shape:
        raise ValueError("conditional and unconditional logits differ in shape")
    return (1 + s) * cond - s * uncond


def temperature(step: int, steps: int) -> float:
    """Linear 1 -> 0 over steps 1..steps; the last step is greedy."""
    if steps == 1:
        return 0.0
    return 1.0 - (step - 1) / (steps - 1)


# ---------------------------------------------------------------- text

@dataclass
class TextBundle:
    global_: Optional[np.ndarray] = None
    locals: Dict[str, np.ndarray] = field(default_factory=dict)
    null: bool = False

    def __post_init__(self):
        for key, vec in self.locals.items():
            if key not in PARTS:
                raise ValueError(f"unknown part {key!r}")
        vecs = [v for v in [self.global_, *self.locals.values()] if v is not None]
        if vecs and len({len(v) for v in vecs}) != 1:
            raise ValueError("text embeddings disagree on length")
        if any(not np.isfinite(v).all() for v in vecs):
            raise ValueError("non-finite text embedding")
        if not vecs:
            self.null = True

    @classmethod
    def null_bundle(cls) -> "TextBundle":
        return cls(null=True)

    @classmethod
    def from_prompts(cls, embedder, prompt: str = "", local_prompts: Optional[Dict[str, str]] = None
                     ) -> "TextBundle":
        g = embed_text(prompt, embedder) if prompt else None
        locs = {p: embed_text(t, embedder) for p, t in (local_prompts or {}).items() if t}
        return cls(g, locs)

    def part_vectors(self, dim: int):
        """(4, dim) float32 rows and a (4,) bool array flagging rows that use the null token."""
        rows = np.zeros((NUM_PARTS, dim), np.float32)
        null = np.ones(NUM_PARTS, bool)
        if self.null:
            return rows, null
        for i, p in enumerate(PARTS):
            vec = self.locals.get(p, self.global_)
            if vec is not None:
                if len(vec) != dim:
                    raise ValueError(f"text embedding has length {len(vec)}, model expects {dim}")
                rows[i] = vec
                null[i] = False
        return rows, null


def embed_text(prompt: str, provider) -> np.ndarray:
    """Fixed-length embedding; the empty prompt is the all-zero null embedding."""
    if not prompt:
        return np.zeros(provider.dim, np.float32)
    return np.asarray(provider.embed(prompt), np.float32)


# ---------------------------------------------------------------- model

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, kv=None, mask=None):
        """x: (..., Lq, D); kv: (..., Lk, D) or None; mask: (Lq, Lk) bool, True = may attend."""
        kv = x if kv is None else kv
        D = x.shape[-1]
        h = self.heads
        w_q, w_k, w_v = self.qkv.weight.split(D)
        b_q, b_k, b_v = self.qkv.bias.split(D)
        q = F.linear(x, w_q, b_q)
        k = F.linear(kv, w_k, b_k)
        v = F.linear(kv, w_v, b_v)

        def split(t):
            return t.reshape(*t.shape[:-1], h, D // h).transpose(-2, -3)

        q, k, v = split(q), split(k), split(v)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // h)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        out = att.softmax(-1) @ v
        out = out.transpose(-2, -3).reshape(*x.shape[:-1], D)
        return self.proj(out)


class FactorizedLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.spatial = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.temporal = Attention(dim, heads)
        self.norm_f = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))
        # motion query (part p) sees the 4 motion tokens at its time index + text token p
        mask = torch.cat([torch.ones(NUM_PARTS, NUM_PARTS, dtype=torch.bool),
                          torch.eye(NUM_PARTS, dtype=torch.bool)], dim=1)
        self.register_buffer("spatial_mask", mask, persistent=False)

    def spatial_step(self, x):
        """x: (B, 4, 1+n, D); mixes only within a column (plus own-row text)."""
        h = self.norm_s(x)
        text = h[:, :, :1]                                     # (B, 4, 1, D)
        motion = h[:, :, 1:].permute(0, 2, 1, 3)               # (B, n, 4, D)
        text_kv = text.permute(0, 2, 1, 3).expand(-1, motion.shape[1], -1, -1)
        kv = torch.cat([motion, text_kv], dim=2)               # (B, n, 8, D)
        m_out = self.spatial(motion, kv, self.spatial_mask).permute(0, 2, 1, 3)
        t_out = self.spatial(text.permute(0, 2, 1, 3)).permute(0, 2, 1, 3)
        return x + torch.cat([t_out, m_out], dim=2)

    def temporal_step(self, x):
        return x + self.temporal(self.norm_t(x))

    def ff_step(self, x):
        return x + self.ff(self.norm_f(x))

    def forward(self, x, spatial: bool = True, temporal: bool = True):
        if spatial:
            x = self.spatial_step(x)
        if temporal:
            x = self.temporal_step(x)
        return self.ff_step(x)


class _Backbone(nn.Module):
    def __init__(self, cfg: GenConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.model_dim
        self.text_proj = nn.Linear(cfg.text_dim, D)
        self.null_text = nn.Parameter(torch.randn(D) * 0.02)
        self.pos = nn.Parameter(torch.randn(cfg.max_tokens + 1, D) * 0.02)
        self.part = nn.Parameter(torch.randn(NUM_PARTS, D) * 0.02)
        self.blocks = nn.ModuleList(FactorizedLayer(D, cfg.heads, cfg.ff_mult) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.num_codes)

    def text_tokens(self, texts: Sequence[TextBundle]) -> torch.Tensor:
        dtype = self.text_proj.weight.dtype
        rows, nulls = zip(*(t.part_vectors(self.cfg.text_dim) for t in texts))
        rows = torch.as_tensor(np.stack(rows), dtype=dtype)
        nulls = torch.as_tensor(np.stack(nulls))
        tok = self.text_proj(rows)
        return torch.where(nulls[..., None], self.null_text.expand_as(tok), tok)  # (B, 4, D)

    def run(self, motion_emb: torch.Tensor, texts: Sequence[TextBundle],
            spatial: bool = True, temporal: bool = True, return_hidden: bool = False):
        B, P, n, D = motion_emb.shape
        if n > self.cfg.max_tokens:
            raise ValueError(f"sequence of {n} tokens exceeds max_tokens={self.cfg.max_tokens}")
        if len(texts) != B:
            raise ValueError("need one TextBundle per batch element")
        x = torch.cat([self.text_tokens(texts)[:, :, None], motion_emb], dim=2)
        x = x + self.pos[: n + 1] + self.part[:, None, :]
        for blk in self.blocks:
            x = blk(x, spatial=spatial, temporal=temporal)
        if return_hidden:
            return x
        return self.head(self.norm(x[:, :, 1:]))  # (B, 4, n, K)


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens) if not torch.is_tensor(tokens) else tokens, dtype=torch.long)
    return t[None] if t.dim() == 2 else t


class BaseTransformer(_Backbone):
    def __init__(self, cfg: GenConfig):
        super().__init__(cfg)
        self.tok = nn.Embedding(cfg.num_codes + 1, cfg.model_dim)  # last row = MASK

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] != NUM_PARTS:
            raise ValueError(f"expected {NUM_PARTS} part rows, got shape {tuple(tokens.shape)}")
        if tokens.min() < 0 or tokens.max() > self.cfg.num_codes:
            raise ValueError("token ids out of range")
        return self.tok(tokens)

    def forward(self, tokens, texts: Sequence[TextBundle], **kw):
        return self.run(self.embed(_as_batch(tokens)), texts, **kw)


class ResidualTransformer(_Backbone):
    """Predicts layer j from the summed embeddings of layers 0..j-1 plus a layer-index embedding."""

    def __init__(self, cfg: GenConfig):
        super().__init__(cfg)
        V = cfg.rvq_layers - 1
        self.layer_tok = nn.ModuleList(nn.Embedding(cfg.num_codes, cfg.model_dim) for _ in range(V))
        self.layer_idx = nn.Parameter(torch.randn(max(V, 1), cfg.model_dim) * 0.02)

    @property
    def V(self) -> int:
        return self.cfg.rvq_layers - 1

    def embed(self, below: torch.Tensor, j: int) -> torch.Tensor:
        """below: (B, >=j, 4, n) tokens of layers 0..j-1."""
        if not 1 <= j <= self.V:
            raise ValueError(f"layer index j must be in [1, {self.V}], got {j}")
        if below.shape[1] < j:
            raise ValueError(f"need {j} layers below, got {below.shape[1]}")
        if below[:, :j].min() < 0 or below[:, :j].max() >= self.cfg.num_codes:
            raise ValueError("residual inputs must be complete codebook indices")
        emb = sum(self.layer_tok[l](below[:, l]) for l in range(j))
        return emb + self.layer_idx[j - 1]

    def forward(self, below, j: int, texts: Sequence[TextBundle], **kw):
        below = torch.as_tensor(np.asarray(below) if not torch.is_tensor(below) else below, dtype=torch.long)
        if below.dim() == 3:
            below = below[None]
        return self.run(self.embed(below, j), texts, **kw)


def base_forward(grid, text: TextBundle, model: BaseTransformer) -> np.ndarray:
    with torch.no_grad():
        return model(grid, [text])[0].float().numpy()


def residual_forward(tokens_below, text: TextBundle, j: int, model: ResidualTransformer) -> np.ndarray:
    with torch.no_grad():
        return model(tokens_below, j, [text])[0].float().numpy()


# ---------------------------------------------------------------- generation

def _guided(model, inp, text: TextBundle, s: float, j: Optional[int] = None) -> torch.Tensor:
    null = TextBundle.null_bundle()
    batch = torch.cat([inp, inp], 0)
    logits = model(batch, [text, null]) if j is None else model(batch, j, [text, null])
    return cfg_logits(logits[0], logits[1], s)


@torch.no_grad()
def generate_base(text: TextBundle, n: int, model: BaseTransformer, cfg: Optional[GenConfig] = None,
                  seed: int = 0, init: Optional[np.ndarray] = None) -> np.ndarray:
    """Iterative confidence-based unmasking.  ``init`` (4 x n, MASK where free) conditions on
    surviving tokens; positions decided at one step are never resampled later."""
    cfg = cfg or model.cfg
    K = model.cfg.num_codes
    tokens = (torch.full((NUM_PARTS, n), K, dtype=torch.long) if init is None
              else torch.as_tensor(np.array(init), dtype=torch.long))
    if tokens.shape != (NUM_PARTS, n):
        raise ValueError(f"init grid must be ({NUM_PARTS}, {n}), got {tuple(tokens.shape)}")
    gen = torch.Generator().manual_seed(seed)
    total = int((tokens == K).sum())
    if total == 0:
        return tokens.numpy()
    for k in range(1, cfg.steps + 1):
        tau = k / cfg.steps
        masked = tokens == K
        logits = _guided(model, tokens[None], text, cfg.cfg_base)
        u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype).clamp_(1e-20, 1.0)
        gumbel = -torch.log(-torch.log(u))
        temp = temperature(k, cfg.steps)
        sampled = (logits / temp + gumbel).argmax(-1) if temp > 0 else logits.argmax(-1)
        conf = logits.softmax(-1).gather(-1, sampled[..., None])[..., 0]
        remaining = mask_count(total, tau)
        n_unmask = int(masked.sum()) - remaining
        if n_unmask <= 0:
            continue
        flat_masked = masked.flatten().nonzero()[:, 0]
        order = torch.argsort(-conf.flatten()[flat_masked], stable=True)
        chosen = flat_masked[order[:n_unmask]]
        flat = tokens.flatten()
        flat[chosen] = sampled.flatten()[chosen]
        tokens = flat.reshape(NUM_PARTS, n)
    return tokens.numpy()


@torch.no_grad()
def generate_residuals(base, text: TextBundle, model: ResidualTransformer, cfg: Optional[GenConfig] = None,
                       prior: Optional[np.ndarray] = None, edit_mask: Optional[np.ndarray] = None
                       ) -> np.ndarray:
    """Fill layers 1..V greedily under CFG.  With ``prior`` (layers x 4 x n) and ``edit_mask``
    (4 x n), only masked positions are regenerated; the rest keep their prior tokens."""
    cfg = cfg or model.cfg
    base = np.asarray(base, dtype=np.int64)
    K = model.cfg.num_codes
    if (base == K).any():
        raise ValueError("base layer still contains MASK tokens")
    V = model.V
    grid = np.zeros((V + 1,) + base.shape, dtype=np.int64)
    if prior is not None:
        grid[:] = prior[: V + 1]
    grid[0] = base
    for j in range(1, V + 1):
        logits = _guided(model, torch.as_tensor(grid[:j])[None], text, cfg.cfg_res, j)
        pred = logits.argmax(-1).numpy()
        if edit_mask is None or prior is None:
            grid[j] = pred
        else:
            grid[j] = np.where(edit_mask, pred, grid[j])
    return grid


# ---------------------------------------------------------------- training

def _drop_texts(texts, drop) -> List[TextBundle]:
    return [TextBundle.null_bundle() if d else t for t, d in zip(texts, drop)]


def base_loss(model: BaseTransformer, tokens: torch.Tensor, texts: Sequence[TextBundle],
              mask: torch.Tensor, drop: Optional[Sequence[bool]] = None) -> torch.Tensor:
    """Mean NLL of the true tokens at masked positions (0 when nothing is masked)."""
    tokens = _as_batch(tokens)
    if drop is not None:
        texts = _drop_texts(texts, drop)
    inp = tokens.masked_fill(mask, model.cfg.num_codes)
    logits = model(inp, texts)
    if not mask.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], tokens[mask])


def residual_loss(model: ResidualTransformer, grids: torch.Tensor, texts: Sequence[TextBundle],
                  js: Sequence[int], drop: Optional[Sequence[bool]] = None) -> torch.Tensor:
    """Mean NLL of layer j_b over all positions, given layers below; grids: (B, L, 4, n)."""
    if drop is not None:
        texts = _drop_texts(texts, drop)
    total = 0.0
    for j in sorted(set(js)):
        sel = [b for b, jb in enumerate(js) if jb == j]
        logits = model(grids[sel], j, [texts[b] for b in sel])
        total = total + F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                        grids[sel, j].reshape(-1), reduction="sum")
    return total / (len(js) * grids.shape[-1] * grids.shape[-2])


def sample_training_mask(B: int, n: int, gen: torch.Generator) -> torch.Tensor:
    """Per element: tau ~ U[0,1), mask mask_count(4n, tau) positions uniformly at random."""
    mask = torch.zeros(B, NUM_PARTS * n, dtype=torch.bool)
    for b in range(B):
        tau = float(torch.rand((), generator=gen))
        c = mask_count(NUM_PARTS * n, tau)
        mask[b, torch.randperm(NUM_PARTS * n, generator=gen)[:c]] = True
    return mask.reshape(B, NUM_PARTS, n)


class _Trainer:
    def __init__(self, model, seed: int = 0, lr: Optional[float] = None):
        cfg = model.cfg
        self.model = model
        self.opt = torch.optim.AdamW(model.parameters(), lr=lr or cfg.lr, betas=(0.9, 0.99), weight_decay=0.0)
        warm = max(cfg.warmup, 1)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, lambda it: min(1.0, (it + 1) / warm))
        self.gen = torch.Generator().manual_seed(seed)
        self.steps = 0

    def _drop(self, B: int) -> List[bool]:
        return (torch.rand(B, generator=self.gen) < self.model.cfg.cond_drop).tolist()

    def _apply(self, loss: torch.Tensor) -> float:
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {self.steps}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.sched.step()
        self.steps += 1
        return float(loss.detach())


class BaseTrainer(_Trainer):
    def step(self, grids, texts: Sequence[TextBundle]) -> float:
        """grids: (B, 4, n) base-layer tokens or (B, L, 4, n) full grids."""
        self.model.train()
        g = torch.as_tensor(np.asarray(grids), dtype=torch.long)
        if g.dim() == 4:
            g = g[:, 0]
        mask = sample_training_mask(g.shape[0], g.shape[-1], self.gen)
        return self._apply(base_loss(self.model, g, texts, mask, self._drop(g.shape[0])))


class ResidualTrainer(_Trainer):
    def step(self, grids, texts: Sequence[TextBundle]) -> float:
        self.model.train()
        g = torch.as_tensor(np.asarray(grids), dtype=torch.long)
        V = self.model.V
        js = torch.randint(1, V + 1, (g.shape[0],), generator=self.gen).tolist()
        return self._apply(residual_loss(self.model, g, texts, js, self._drop(g.shape[0])))


@torch.no_grad()
def masked_token_accuracy(model: BaseTransformer, grids, texts: Sequence[TextBundle],
                          seed: int = 0, trials: int = 8) -> float:
    """Fraction of masked positions predicted correctly (argmax, conditional) under training masks."""
    model.eval()
    g = torch.as_tensor(np.asarray(grids), dtype=torch.long)
    if g.dim() == 4:
        g = g[:, 0]
    gen = torch.Generator().manual_seed(seed)
    hit = tot = 0
    for _ in range(trials):
        mask = sample_training_mask(g.shape[0], g.shape[-1], gen)
        logits = model(g.masked_fill(mask, model.cfg.num_codes), list(texts))
        hit += int((logits.argmax(-1)[mask] == g[mask]).sum())
        tot += int(mask.sum())
    return hit / max(tot, 1)
