"""Block-sparse Jacobian of the force field, Gershgorin bounds and A*F products."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from cell_model import (
    CellPopulation,
    ForceLaw,
    NeighborList,
    PairGeometry,
    active_pairs,
    cubic_force,
    cubic_force_derivative,
)
from config import CBM_FD_EPS

logger = logging.getLogger(__name__)


class UndefinedDirectionError(ValueError):
    def __init__(self, r: float) -> None:
        self.r = r
        super().__init__(f"Pair block needs r > 0, got r={r!r}")


@dataclass(frozen=True)
class EigenEstimate:
    lambda_min_est: float
    lambda_max_est: float


@dataclass(frozen=True)
class BlockJacobian:
    """dF/dx for the free coordinates, stored as d x d blocks.

    ``pairs`` holds the in-range pairs (combined free+stationary indexing) and
    ``pair_blocks[p]`` the symmetric block A^ij of pair p. Blocks of
    free-stationary pairs only enter ``diag_blocks``.
    """

    dim: int
    n_free: int
    pairs: np.ndarray
    pair_blocks: np.ndarray
    diag_blocks: np.ndarray

    @property
    def n_equations(self) -> int:
        return self.dim * self.n_free

    def _free_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.pairs[:, 1] < self.n_free
        return self.pairs[mask, 0], self.pairs[mask, 1], self.pair_blocks[mask]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_equations,):
            raise ValueError(
                f"vector of length {self.n_equations} expected, got shape {v.shape}"
            )
        blocks_v = v.reshape(self.n_free, self.dim)
        out = np.einsum("nab,nb->na", self.diag_blocks, blocks_v)
        i, j, blocks = self._free_pairs()
        np.add.at(out, i, np.einsum("pab,pb->pa", blocks, blocks_v[j]))
        np.add.at(out, j, np.einsum("pab,pb->pa", blocks, blocks_v[i]))
        return out.reshape(-1)

    def block(self, i: int, j: int) -> np.ndarray:
        """Block (i, j) of the free-free matrix."""
        if i == j:
            return self.diag_blocks[i].copy()
        lo, hi = min(i, j), max(i, j)
        hit = np.flatnonzero((self.pairs[:, 0] == lo) & (self.pairs[:, 1] == hi))
        if hit.size == 0:
            return np.zeros((self.dim, self.dim))
        return self.pair_blocks[hit[0]].copy()

    def to_dense(self, max_cells: int = 64) -> np.ndarray:
        if self.n_free > max_cells:
            raise ValueError(
                f"dense Jacobian limited to {max_cells} cells, population has {self.n_free}"
            )
        d = self.dim
        dense = np.zeros((self.n_equations, self.n_equations))
        for i in range(self.n_free):
            dense[d * i : d * i + d, d * i : d * i + d] = self.diag_blocks[i]
        i_idx, j_idx, blocks = self._free_pairs()
        for i, j, block in zip(i_idx, j_idx, blocks):
            dense[d * i : d * i + d, d * j : d * j + d] = block
            dense[d * j : d * j + d, d * i : d * i + d] = block
        return dense


def _blocks(r_vec: np.ndarray, r: np.ndarray, law: ForceLaw) -> np.ndarray:
    dim = r_vec.shape[1]
    r_hat = r_vec / r[:, None]
    outer = np.einsum("pa,pb->pab", r_hat, r_hat)
    radial = np.asarray(cubic_force_derivative(r, law))[:, None, None]
    tangential = (np.asarray(cubic_force(r, law)) / r)[:, None, None]
    return outer * radial + (np.eye(dim) - outer) * tangential


def pair_block(geom: PairGeometry, law: ForceLaw) -> np.ndarray:
    if not geom.r > 0:
        raise UndefinedDirectionError(geom.r)
    r_vec = np.asarray(geom.r_vec, dtype=float).reshape(1, -1)
    return _blocks(r_vec, np.array([geom.r]), law)[0]


def assemble(pop: CellPopulation, law: ForceLaw, nl: NeighborList) -> BlockJacobian:
    i, j, r_vec, r = active_pairs(pop, law, nl)
    dim = pop.dim
    blocks = _blocks(r_vec, r, law) if r.size else np.zeros((0, dim, dim))
    diag = np.zeros((pop.n_free, dim, dim))
    j_free = j < pop.n_free
    np.add.at(diag, i, -blocks)
    np.add.at(diag, j[j_free], -blocks[j_free])
    pairs = np.stack((i, j), axis=1) if i.size else np.zeros((0, 2), dtype=np.int64)
    for arr in (pairs, blocks, diag):
        arr.flags.writeable = False
    return BlockJacobian(
        dim=dim, n_free=pop.n_free, pairs=pairs, pair_blocks=blocks, diag_blocks=diag
    )


def gershgorin_bounds(J: BlockJacobian) -> EigenEstimate:
    """Union of the intervals [xi_k - rho_k, xi_k + rho_k] over rows k = d*i + l."""
    if J.n_free == 0:
        return EigenEstimate(0.0, 0.0)
    xi = np.einsum("nll->nl", J.diag_blocks)
    rho = np.abs(J.diag_blocks).sum(axis=2) - np.abs(xi)
    i, j, blocks = J._free_pairs()
    row_sums = np.abs(blocks).sum(axis=2)
    np.add.at(rho, i, row_sums)
    np.add.at(rho, j, row_sums)
    return EigenEstimate(
        lambda_min_est=float((xi - rho).min()),
        lambda_max_est=float((xi + rho).max()),
    )


def gershgorin_min(J: BlockJacobian) -> float:
    return gershgorin_bounds(J).lambda_min_est


def jacobian_force_product(J: BlockJacobian, F: np.ndarray) -> np.ndarray:
    return J.matvec(F)


def fd_jacobian_force_product(
    F_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    F: np.ndarray,
    eps: float = CBM_FD_EPS,
) -> np.ndarray:
    """One-sided difference (F(x + eps F) - F(x)) / eps."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    return (F_fn(x + eps * F) - F) / eps
