"""Block lower-triangular (causal) operators over a finite horizon.

A causal operator ``M`` with horizon ``T`` and block size ``p x q`` is stored as
an array ``blocks`` of shape ``(T, T, p, q)`` where ``blocks[k, j]`` is the block
``M^{k,j}``: block row ``k`` (time index) and delay ``j``. In the dense matrix the
block ``M^{k,j}`` sits at block column ``k - j``, so ``M^{k,0}`` is on the block
diagonal. Entries with ``j > k`` are identically zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when operand dimensions disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


def _causal_mask(T: int) -> np.ndarray:
    k = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return j <= k


@dataclass(frozen=True, eq=False)
class CausalOperator:
    """Element of the set of block lower-triangular matrices L^{T, p x q}."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim != 4 or b.shape[0] != b.shape[1]:
            raise DimensionError(f"blocks must have shape (T, T, p, q), got {b.shape}", axis="blocks")
        b[~_causal_mask(b.shape[0])] = 0.0
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def T(self) -> int:
        return self.blocks.shape[0]

    @property
    def p(self) -> int:
        return self.blocks.shape[2]

    @property
    def q(self) -> int:
        return self.blocks.shape[3]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.T * self.p, self.T * self.q)

    @classmethod
    def zeros(cls, T: int, p: int, q: int) -> "CausalOperator":
        return cls(np.zeros((T, T, p, q)))

    @classmethod
    def identity(cls, T: int, n: int) -> "CausalOperator":
        b = np.zeros((T, T, n, n))
        b[:, 0] = np.eye(n)
        return cls(b)

    @classmethod
    def block_diagonal(cls, diag_blocks) -> "CausalOperator":
        """Causal operator whose only nonzero blocks are ``M^{k,0} = diag_blocks[k]``."""
        d = np.asarray(diag_blocks, dtype=float)
        T = d.shape[0]
        b = np.zeros((T, T) + d.shape[1:])
        b[:, 0] = d
        return cls(b)

    @classmethod
    def from_dense(cls, M: np.ndarray, T: int, p: int, q: int, check: bool = True) -> "CausalOperator":
        M = np.asarray(M, dtype=float)
        if M.shape != (T * p, T * q):
            raise DimensionError(f"dense matrix has shape {M.shape}, expected {(T * p, T * q)}", axis="dense")
        grid = M.reshape(T, p, T, q).transpose(0, 2, 1, 3)  # [k, c]
        if check:
            above = np.arange(T)[None, :] > np.arange(T)[:, None]  # block column c > row k
            if np.any(grid[above] != 0.0):
                raise ValueError("dense matrix is not block lower-triangular")
        b = np.zeros((T, T, p, q))
        for k in range(T):
            for j in range(k + 1):
                b[k, j] = grid[k, k - j]
        return cls(b)

    def dense(self) -> np.ndarray:
        T, p, q = self.T, self.p, self.q
        out = np.zeros((T, T, p, q))
        for k in range(T):
            for j in range(k + 1):
                out[k, k - j] = self.blocks[k, j]
        return out.transpose(0, 2, 1, 3).reshape(T * p, T * q)

    def __add__(self, other: "CausalOperator") -> "CausalOperator":
        _check_same(self, other)
        return CausalOperator(self.blocks + other.blocks)

    def __sub__(self, other: "CausalOperator") -> "CausalOperator":
        _check_same(self, other)
        return CausalOperator(self.blocks - other.blocks)

    def __neg__(self) -> "CausalOperator":
        return CausalOperator(-self.blocks)


def _check_same(a: CausalOperator, b: CausalOperator) -> None:
    if a.T != b.T:
        raise DimensionError(f"horizon mismatch: {a.T} vs {b.T}", axis="T")
    if a.p != b.p:
        raise DimensionError(f"row block mismatch: {a.p} vs {b.p}", axis="p")
    if a.q != b.q:
        raise DimensionError(f"column block mismatch: {a.q} vs {b.q}", axis="q")


@dataclass(frozen=True, eq=False)
class BlockDiagonal:
    """``blkdiag(N_0, ..., N_{T-1})`` with square or rectangular blocks."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim != 3:
            raise DimensionError(f"blocks must have shape (T, r, s), got {b.shape}", axis="blocks")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def T(self) -> int:
        return self.blocks.shape[0]

    def dense(self) -> np.ndarray:
        T, r, s = self.blocks.shape
        out = np.zeros((T * r, T * s))
        for k in range(T):
            out[k * r:(k + 1) * r, k * s:(k + 1) * s] = self.blocks[k]
        return out


def apply(M: CausalOperator, w: np.ndarray) -> np.ndarray:
    """Return ``M w`` for a stacked vector ``w`` of length ``q*T``.

    Output block ``k`` is ``sum_{j<=k} M^{k,j} w_{k-j}``.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (M.T * M.q,):
        raise DimensionError(f"vector length {w.shape} does not match q*T = {M.T * M.q}", axis="q")
    W = w.reshape(M.T, M.q)
    out = np.zeros((M.T, M.p))
    for k in range(M.T):
        # w_{k-j} for j = 0..k is W[k::-1]
        out[k] = np.einsum("jpq,jq->p", M.blocks[k, :k + 1], W[k::-1])
    return out.reshape(-1)


def compose(A: CausalOperator, B: CausalOperator) -> CausalOperator:
    """Matrix product ``A B`` of two causal operators (again causal)."""
    if A.T != B.T:
        raise DimensionError(f"horizon mismatch: {A.T} vs {B.T}", axis="T")
    if A.q != B.p:
        raise DimensionError(f"inner block mismatch: {A.q} vs {B.p}", axis="inner")
    T = A.T
    out = np.zeros((T, T, A.p, B.q))
    # (AB)^{k,j} = sum_{l=0..j} A^{k,l} B^{k-l, j-l}
    for k in range(T):
        for j in range(k + 1):
            acc = np.zeros((A.p, B.q))
            for l in range(j + 1):
                acc += A.blocks[k, l] @ B.blocks[k - l, j - l]
            out[k, j] = acc
    return CausalOperator(out)


def shift_apply(N: BlockDiagonal, M: CausalOperator) -> CausalOperator:
    """Return ``Z N M`` with ``Z`` the block downshift.

    Block row ``k`` of the result is ``N_{k-1}`` times block row ``k-1`` of ``M``;
    row 0 is zero. In delay coordinates ``(ZNM)^{k,j} = N_{k-1} M^{k-1,j-1}``.
    """
    if N.T != M.T:
        raise DimensionError(f"horizon mismatch: {N.T} vs {M.T}", axis="T")
    if N.blocks.shape[2] != M.p:
        raise DimensionError(f"block mismatch: N has {N.blocks.shape[2]} columns, M has {M.p} rows", axis="inner")
    T = M.T
    out = np.zeros((T, T, N.blocks.shape[1], M.q))
    for k in range(1, T):
        out[k, 1:k + 1] = np.einsum("ab,jbc->jac", N.blocks[k - 1], M.blocks[k - 1, :k])
    return CausalOperator(out)


def block_row(M: CausalOperator, k: int) -> np.ndarray:
    """Dense block row ``M^k = [M^{k,k}, ..., M^{k,0}, 0, ..., 0]`` of shape ``(p, q*T)``.

    ``k = -1`` returns the zero row (the error at time 0 is zero).
    """
    T, p, q = M.T, M.p, M.q
    row = np.zeros((p, q * T))
    if k < 0:
        return row
    if k >= T:
        raise IndexError(f"block row {k} out of range for horizon {T}")
    for c in range(k + 1):
        row[:, c * q:(c + 1) * q] = M.blocks[k, k - c]
    return row


def transpose_row_action(c: np.ndarray, M: CausalOperator, k: int) -> np.ndarray:
    """Return ``c^T M^k`` (length ``q*T``); zero for ``k = -1``."""
    c = np.asarray(c, dtype=float)
    if c.shape != (M.p,):
        raise DimensionError(f"vector of length {c.shape} against block rows of size {M.p}", axis="p")
    return c @ block_row(M, k)


def stack_rows(Mx: CausalOperator, Mu: CausalOperator, k: int) -> np.ndarray:
    """Vertically stacked block row ``[Mx^k; Mu^k]``."""
    return np.vstack([block_row(Mx, k), block_row(Mu, k)])
