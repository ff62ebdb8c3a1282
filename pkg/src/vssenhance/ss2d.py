"""2D selective scanning: unfold a feature grid along four traversal paths,
run a selective state-space scan over each, and merge the results back.

Directions and their orderings:

    LR: row-major, left to right then top to bottom
    TD: column-major, top to bottom then left to right
    RL: exact reversal of LR
    DT: exact reversal of TD

The merge scatters each processed sequence back through the inverse of its
traversal permutation and sums the four grids, so identity processing
returns exactly 4x the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .layers import Module, param
from .ssm import SelectiveHead, linear_recurrence
from .tensor import DimensionError, Tensor, _wrap, concat, gather_rows, matmul, softplus

DIRECTIONS = ("lr", "td", "rl", "dt")


@dataclass
class FeatureMap:
    """A (C, H, W) spatial feature grid."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError("FeatureMap expects (C, H, W) values")
        if self.height * self.width < 1:
            raise DimensionError("FeatureMap must contain at least one position")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class DirectionalSequences:
    """The four (L, C) unfoldings of one grid, L = H*W."""

    lr: Tensor
    td: Tensor
    rl: Tensor
    dt: Tensor
    height: int
    width: int

    def __iter__(self):
        return iter((self.lr, self.td, self.rl, self.dt))


@lru_cache(maxsize=128)
def traversal_permutations(H: int, W: int):
    """Sequence-index -> grid-index maps (and inverses) for each direction.

    ``perm[i]`` is the row-major grid position visited at sequence step i.
    """
    L = H * W
    lr = np.arange(L, dtype=np.intp)
    i = np.arange(L, dtype=np.intp)
    td = (i % H) * W + i // H  # step i visits column i//H, row i%H
    perms = {"lr": lr, "td": td, "rl": lr[::-1].copy(), "dt": td[::-1].copy()}
    invs = {k: np.argsort(v) for k, v in perms.items()}
    return perms, invs


def _tokens(f: FeatureMap) -> Tensor:
    """(C, H, W) -> row-major token matrix (L, C)."""
    C = f.channels
    return f.values.reshape(C, f.height * f.width).transpose(1, 0)


def _to_grid(tokens: Tensor, C: int, H: int, W: int) -> FeatureMap:
    return FeatureMap(tokens.transpose(1, 0).reshape(C, H, W))


def cross_scan(f: FeatureMap) -> DirectionalSequences:
    """Unfold the grid along the four traversal paths (values copied)."""
    perms, invs = traversal_permutations(f.height, f.width)
    tok = _tokens(f)
    seqs = {
        k: gather_rows(tok, perms[k], inverse=invs[k]) for k in DIRECTIONS
    }
    return DirectionalSequences(height=f.height, width=f.width, **seqs)


def cross_merge(seqs: DirectionalSequences) -> FeatureMap:
    """Scatter each sequence back through its inverse traversal and sum."""
    H, W = seqs.height, seqs.width
    L = H * W
    perms, invs = traversal_permutations(H, W)
    total = None
    for name, seq in zip(DIRECTIONS, seqs):
        seq = _wrap(seq)
        if seq.shape[0] != L:
            raise DimensionError(
                f"{name} sequence has length {seq.shape[0]}, the grid needs {L}"
            )
        back = gather_rows(seq, invs[name], inverse=perms[name])
        total = back if total is None else total + back
    C = total.shape[1]
    return _to_grid(total, C, H, W)


class SS2D(Module):
    """Four direction-specific selective heads over shared per-channel state.

    Each channel carries an independent state of size ``state_dim``; the four
    directions share the (negative, diagonal) state matrix and the skip
    coefficient but own their B/C/delta projections.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator):
        self.channels = channels
        self.state_dim = state_dim
        self.heads = [SelectiveHead.init(channels, state_dim, rng) for _ in DIRECTIONS]
        # log-magnitude parameterization keeps the diagonal strictly negative
        self.a_log = param(
            rng.uniform(np.log(0.5), np.log(8.0), size=(channels, state_dim))
        )
        self.skip = param(np.ones(channels))

    def __call__(self, f: FeatureMap) -> FeatureMap:
        return ss2d_forward(f, self)


def ss2d_forward(f: FeatureMap, weights: SS2D, mode: str = "auto") -> FeatureMap:
    """cross-scan -> per-direction selective scan -> cross-merge.

    All four directional recurrences run as one (L, 4*C*d) batch of lanes;
    per-channel state transitions are shared across directions while each
    direction's head supplies its own B/C/delta.
    """
    if f.channels != weights.channels:
        raise DimensionError(
            f"feature map has {f.channels} channels, SS2D expects {weights.channels}"
        )
    C, H, W = f.channels, f.height, f.width
    L = H * W
    d = weights.state_dim
    seqs = cross_scan(f)
    a_neg = -weights.a_log.exp()  # (C, d), strictly negative

    # batch the four directions: (L, 4, C) sequences, (L, 4, d) projections
    seq_all = concat([s.reshape(L, 1, C) for s in seqs], axis=1)
    b_all = concat([matmul(s, h.w_b).reshape(L, 1, d) for s, h in zip(seqs, weights.heads)], axis=1)
    c_all = concat([matmul(s, h.w_c).reshape(L, 1, d) for s, h in zip(seqs, weights.heads)], axis=1)
    delta_all = concat(
        [
            softplus(matmul(s, h.w_delta) + h.b_delta).reshape(L, 1, 1, 1)
            for s, h in zip(seqs, weights.heads)
        ],
        axis=1,
    )

    a_bar = (delta_all * a_neg.reshape(1, 1, C, d)).exp()  # (L, 4, C, d)
    b_scale = (a_bar - 1.0) / a_neg.reshape(1, 1, C, d)
    u = b_scale * b_all.reshape(L, 4, 1, d) * seq_all.reshape(L, 4, C, 1)

    h_all = linear_recurrence(
        a_bar.reshape(L, 4 * C * d), u.reshape(L, 4 * C * d), mode=mode
    ).reshape(L, 4, C, d)
    y_all = (h_all * c_all.reshape(L, 4, 1, d)).sum(axis=3)  # (L, 4, C)
    y_all = y_all + seq_all * weights.skip.reshape(1, 1, C)

    outputs = [y_all[:, r] for r in range(4)]
    return cross_merge(DirectionalSequences(*outputs, height=H, width=W))
