"""Training-free editing in token space: in-betweening, body-part edits and blends."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple

import numpy as np

from .motiondata import PARTS
from .spamgen import (BaseTransformer, GenConfig, ResidualTransformer, TextBundle, generate_base,
                      generate_residuals)
from .spamvq import TokenGrid

DEFAULT_RHO = 0.15
DEFAULT_N_TRANS = 4
DEFAULT_N_CTX = 4


@dataclass
class EditRequest:
    kind: str
    text: TextBundle = field(default_factory=TextBundle.null_bundle)
    alpha: int = 0
    beta: int = 0
    parts: FrozenSet[str] = frozenset()
    rho: float = DEFAULT_RHO
    n_trans: int = DEFAULT_N_TRANS
    n_ctx: int = DEFAULT_N_CTX

    def __post_init__(self):
        if self.kind not in ("inbetween", "bodypart", "blend"):
            raise ValueError(f"unknown edit kind {self.kind!r}")
        self.parts = frozenset(self.parts)
        if self.kind == "inbetween" and self.alpha > self.beta:
            raise ValueError("alpha must not exceed beta")
        if self.kind == "bodypart":
            if not self.parts:
                raise ValueError("body-part edit needs at least one part")
            if not self.parts <= set(PARTS):
                raise ValueError(f"unknown parts {sorted(self.parts - set(PARTS))}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.n_trans < 0 or self.n_ctx < 0:
            raise ValueError("n_trans and n_ctx must be >= 0")


def frames_to_tokens(alpha: int, beta: int, downscale: int) -> Tuple[int, int]:
    """Smallest token span covering frames [alpha, beta)."""
    return alpha // downscale, math.ceil(beta / downscale)


def _regenerate(grid: TokenGrid, mask: np.ndarray, text: TextBundle, base_model: BaseTransformer,
                res_model: Optional[ResidualTransformer], cfg: Optional[GenConfig], seed: int) -> TokenGrid:
    """Mask ``mask`` (4 x n) at the base layer, refill it, then redo residual layers there."""
    if not mask.any():
        return grid.copy()
    K = grid.mask_id
    init = np.where(mask, K, grid.layers[0])
    base = generate_base(text, grid.n, base_model, cfg, seed=seed, init=init)
    layers = grid.layers.copy()
    layers[0] = base
    if res_model is not None and grid.num_layers > 1:
        layers = generate_residuals(base, text, res_model, cfg, prior=layers, edit_mask=mask)
        layers = layers[: grid.num_layers]
    return TokenGrid(layers, K)


def edit_inbetween(grid: TokenGrid, alpha: int, beta: int, text: TextBundle, base_model: BaseTransformer,
                   res_model: Optional[ResidualTransformer] = None, cfg: Optional[GenConfig] = None,
                   seed: int = 0) -> TokenGrid:
    """Regenerate token columns alpha:beta (token indices) across all four parts."""
    if not 0 <= alpha <= beta <= grid.n:
        raise ValueError(f"token range {alpha}:{beta} outside 0:{grid.n}")
    mask = np.zeros((len(PARTS), grid.n), bool)
    mask[:, alpha:beta] = True
    return _regenerate(grid, mask, text, base_model, res_model, cfg, seed)


def bodypart_mask(n: int, parts: Iterable[str], rho: float, seed: int) -> np.ndarray:
    """Rows in ``parts`` fully masked; other rows masked i.i.d. with probability rho."""
    parts = set(parts)
    if not parts:
        raise ValueError("body-part edit needs at least one part")
    if not parts <= set(PARTS):
        raise ValueError(f"unknown parts {sorted(parts - set(PARTS))}")
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must be in [0, 1)")
    draw = np.random.default_rng(seed).random((len(PARTS), n)) < rho
    rows = np.array([p in parts for p in PARTS])
    return np.where(rows[:, None], True, draw)


def edit_bodypart(grid: TokenGrid, parts: Iterable[str], text: TextBundle, base_model: BaseTransformer,
                  res_model: Optional[ResidualTransformer] = None, rho: float = DEFAULT_RHO,
                  cfg: Optional[GenConfig] = None, seed: int = 0) -> TokenGrid:
    mask = bodypart_mask(grid.n, parts, rho, seed)
    return _regenerate(grid, mask, text, base_model, res_model, cfg, seed)


def blend(grid_a: TokenGrid, grid_b: TokenGrid, text: TextBundle, base_model: BaseTransformer,
          res_model: Optional[ResidualTransformer] = None, n_trans: int = DEFAULT_N_TRANS,
          n_ctx: int = DEFAULT_N_CTX, cfg: Optional[GenConfig] = None, seed: int = 0) -> TokenGrid:
    """[A | transition | B], the transition generated from A's tail and B's head."""
    if grid_a.has_mask() or grid_b.has_mask():
        raise ValueError("blend inputs must be complete grids")
    if grid_a.num_layers != grid_b.num_layers or grid_a.mask_id != grid_b.mask_id:
        raise ValueError("blend inputs disagree on layer count or codebook size")
    if n_ctx > grid_a.n or n_ctx > grid_b.n:
        raise ValueError(f"context length {n_ctx} exceeds an input grid ({grid_a.n}, {grid_b.n})")
    if n_trans < 0 or n_ctx < 0:
        raise ValueError("n_trans and n_ctx must be >= 0")
    L, K = grid_a.num_layers, grid_a.mask_id
    if n_trans == 0:
        return TokenGrid(np.concatenate([grid_a.layers, grid_b.layers], axis=2), K)
    a_ctx = grid_a.layers[:, :, grid_a.n - n_ctx:]
    b_ctx = grid_b.layers[:, :, :n_ctx]
    filler = np.zeros((L, len(PARTS), n_trans), np.int64)
    window = TokenGrid(np.concatenate([a_ctx, filler, b_ctx], axis=2), K)
    mask = np.zeros((len(PARTS), window.n), bool)
    mask[:, n_ctx:n_ctx + n_trans] = True
    filled = _regenerate(window, mask, text, base_model, res_model, cfg, seed)
    trans = filled.layers[:, :, n_ctx:n_ctx + n_trans]
    return TokenGrid(np.concatenate([grid_a.layers, trans, grid_b.layers], axis=2), K)


def apply_edit(grid: TokenGrid, req: EditRequest, base_model: BaseTransformer,
               res_model: Optional[ResidualTransformer] = None, cfg: Optional[GenConfig] = None,
               seed: int = 0, other: Optional[TokenGrid] = None) -> TokenGrid:
    if req.kind == "inbetween":
        return edit_inbetween(grid, req.alpha, req.beta, req.text, base_model, res_model, cfg, seed)
    if req.kind == "bodypart":
        return edit_bodypart(grid, req.parts, req.text, base_model, res_model, req.rho, cfg, seed)
    if other is None:
        raise ValueError("blend needs a second grid")
    return blend(grid, other, req.text, base_model, res_model, req.n_trans, req.n_ctx, cfg, seed)
