"""Cell population state, the cubic pair force and total-force assembly."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from config import (
    CBM_INCLUDE_GA_OFFSET,
    CBM_MAX_DISTANCE,
    CBM_MU,
    CBM_NEIGHBOR_BIN_THRESHOLD,
    CBM_REST_LENGTH,
)

logger = logging.getLogger(__name__)

_STAMPS = itertools.count(1)


class ForceDomainError(ValueError):
    """Raised when a force-law function receives a negative or non-finite distance."""

    def __init__(self, r: float) -> None:
        self.r = r
        super().__init__(f"Force law evaluated outside its domain: r={r!r}")


class OverlappingCentersError(ValueError):
    """Raised when two interacting cells share a center."""

    def __init__(self, i: int, j: int) -> None:
        self.i = i
        self.j = j
        super().__init__(
            f"Cells {i} and {j} have coincident centers; pair direction is undefined"
        )


class PopulationError(ValueError):
    pass


@dataclass(frozen=True)
class ForceLaw:
    """Cubic pair force g(r) = mu (r - r_A)^2 (r - s) on [0, r_A], zero beyond."""

    mu: float = CBM_MU
    s: float = CBM_REST_LENGTH
    r_A: float = CBM_MAX_DISTANCE

    def __post_init__(self) -> None:
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValueError(f"mu must be positive, got {self.mu!r}")
        if not (0 < self.s < self.r_A < np.inf):
            raise ValueError(
                f"Force law needs 0 < s < r_A, got s={self.s!r} r_A={self.r_A!r}"
            )

    @property
    def skin(self) -> float:
        return self.r_A - self.s

    @property
    def g_a(self) -> float:
        """Constant potential G_A beyond the interaction distance."""
        return self.mu * self.skin**4 / 12.0


def _as_distance(r: float | np.ndarray) -> np.ndarray:
    arr = np.asarray(r, dtype=float)
    bad = ~np.isfinite(arr) | (arr < 0)
    if bad.any():
        raise ForceDomainError(float(arr[bad].flat[0]))
    return arr


def _unwrap(arr: np.ndarray, out: np.ndarray) -> float | np.ndarray:
    return float(out) if arr.ndim == 0 else out


def cubic_force(r: float | np.ndarray, law: ForceLaw) -> float | np.ndarray:
    arr = _as_distance(r)
    out = np.where(
        arr <= law.r_A, law.mu * (arr - law.r_A) ** 2 * (arr - law.s), 0.0
    )
    return _unwrap(arr, out)


def cubic_force_derivative(r: float | np.ndarray, law: ForceLaw) -> float | np.ndarray:
    # zero at and beyond r_A; the cubic law is C1 there, other laws may not be
    arr = _as_distance(r)
    out = np.where(
        arr < law.r_A,
        law.mu * (arr - law.r_A) * (3.0 * arr - 2.0 * law.s - law.r_A),
        0.0,
    )
    return _unwrap(arr, out)


def pair_potential(r: float | np.ndarray, law: ForceLaw) -> float | np.ndarray:
    """Antiderivative G of the cubic force with G(s) = 0 and G = G_A beyond r_A.

    With u = r - r_A and delta = r_A - s the primitive is
    H(u) = mu (u^4/4 + delta u^3/3), so G(r) = H(r - r_A) - H(-delta).
    """
    arr = _as_distance(r)
    delta = law.skin
    u = np.minimum(arr, law.r_A) - law.r_A
    h = law.mu * (u**4 / 4.0 + delta * u**3 / 3.0)
    out = h + law.g_a
    return _unwrap(arr, out)


@dataclass(frozen=True)
class CellPopulation:
    """Positions of free (mobile) and stationary cells.

    Arrays are stored read-only; position updates produce a new population via
    ``with_free_positions``. ``cell_ids`` label free cells and survive divisions.
    """

    free_positions: np.ndarray
    stationary_positions: np.ndarray
    cell_ids: np.ndarray
    next_cell_id: int

    def __post_init__(self) -> None:
        free = np.array(self.free_positions, dtype=float, ndmin=2)
        if free.size == 0:
            free = free.reshape(0, free.shape[-1] if free.ndim == 2 else 0)
        if free.ndim != 2:
            raise PopulationError(f"free positions must be (N, d), got {free.shape}")
        dim = free.shape[1]
        stationary = np.array(self.stationary_positions, dtype=float)
        if stationary.size == 0:
            stationary = stationary.reshape(0, dim)
        if stationary.ndim != 2 or stationary.shape[1] != dim:
            raise PopulationError(
                f"stationary positions must be (N0, {dim}), got {stationary.shape}"
            )
        if dim not in (1, 2, 3):
            raise PopulationError(f"dimension must be 1, 2 or 3, got {dim}")
        if not (np.isfinite(free).all() and np.isfinite(stationary).all()):
            raise PopulationError("cell coordinates must be finite")
        ids = np.array(self.cell_ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != free.shape[0]:
            raise PopulationError(
                f"{ids.shape[0]} cell ids given for {free.shape[0]} free cells"
            )
        if ids.size and int(self.next_cell_id) <= int(ids.max()):
            raise PopulationError("next_cell_id must exceed every assigned id")
        for arr in (free, stationary, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "free_positions", free)
        object.__setattr__(self, "stationary_positions", stationary)
        object.__setattr__(self, "cell_ids", ids)
        object.__setattr__(self, "next_cell_id", int(self.next_cell_id))

    @classmethod
    def from_positions(
        cls,
        free_positions: np.ndarray,
        stationary_positions: np.ndarray | None = None,
    ) -> CellPopulation:
        free = np.array(free_positions, dtype=float, ndmin=2)
        n = free.shape[0]
        if stationary_positions is None:
            stationary_positions = np.zeros((0, free.shape[1]))
        return cls(free, stationary_positions, np.arange(n), n)

    @property
    def dim(self) -> int:
        return int(self.free_positions.shape[1])

    @property
    def n_free(self) -> int:
        return int(self.free_positions.shape[0])

    @property
    def n_stationary(self) -> int:
        return int(self.stationary_positions.shape[0])

    @property
    def n_total(self) -> int:
        return self.n_free + self.n_stationary

    @property
    def flat(self) -> np.ndarray:
        """Free coordinates as a state vector of length dN (k = d*i + l)."""
        return self.free_positions.reshape(-1).copy()

    @property
    def all_positions(self) -> np.ndarray:
        """Free cells first, then stationary cells."""
        return np.vstack((self.free_positions, self.stationary_positions))

    def with_free_positions(self, x: np.ndarray) -> CellPopulation:
        return replace(
            self, free_positions=np.asarray(x, dtype=float).reshape(self.n_free, self.dim)
        )


@dataclass(frozen=True)
class PairGeometry:
    r_vec: np.ndarray
    r: float
    r_hat: np.ndarray | None

    @classmethod
    def between(cls, x_i: np.ndarray, x_j: np.ndarray) -> PairGeometry:
        r_vec = np.asarray(x_j, dtype=float) - np.asarray(x_i, dtype=float)
        r = float(np.linalg.norm(r_vec))
        return cls(r_vec=r_vec, r=r, r_hat=r_vec / r if r > 0 else None)


def pair_geometry(pop: CellPopulation, i: int, j: int) -> PairGeometry:
    """Geometry of the pair (i, j) over the combined free+stationary index."""
    pos = pop.all_positions
    return PairGeometry.between(pos[i], pos[j])


@dataclass(frozen=True)
class NeighborList:
    """Candidate interacting pairs (i < j) over free cells first, then stationary.

    Stationary-stationary pairs never act on a free cell and are left out.
    The list is complete for every configuration in which no cell moved more than
    ``skin / 2`` away from ``reference_positions``.
    """

    pairs: np.ndarray
    reference_positions: np.ndarray
    n_free: int
    r_A: float
    skin: float
    stamp: int

    @property
    def cutoff(self) -> float:
        return self.r_A + self.skin

    def __len__(self) -> int:
        return int(self.pairs.shape[0])


def _all_candidates(n_total: int) -> np.ndarray:
    i, j = np.triu_indices(n_total, k=1)
    return np.stack((i, j), axis=1)


def _binned_candidates(positions: np.ndarray, edge: float) -> np.ndarray:
    dim = positions.shape[1]
    keys = np.floor((positions - positions.min(axis=0)) / edge).astype(np.int64)
    bins: dict[tuple[int, ...], list[int]] = {}
    for idx, key in enumerate(map(tuple, keys)):
        bins.setdefault(key, []).append(idx)
    members = {key: np.asarray(value, dtype=np.int64) for key, value in bins.items()}

    chunks: list[np.ndarray] = [np.zeros((0, 2), dtype=np.int64)]
    offsets = list(itertools.product((-1, 0, 1), repeat=dim))
    for key, own in members.items():
        for offset in offsets:
            other = members.get(tuple(k + o for k, o in zip(key, offset)))
            if other is None:
                continue
            ii, jj = np.meshgrid(own, other, indexing="ij")
            ii = ii.ravel()
            jj = jj.ravel()
            keep = ii < jj
            chunks.append(np.stack((ii[keep], jj[keep]), axis=1))
    return np.concatenate(chunks)


def _pair_vectors(
    positions: np.ndarray, pairs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    r_vec = positions[pairs[:, 1]] - positions[pairs[:, 0]]
    r = np.sqrt(np.einsum("ij,ij->i", r_vec, r_vec))
    return r_vec, r


def build_neighbor_list(
    pop: CellPopulation,
    r_A: float,
    *,
    skin: float = 0.0,
    bin_threshold: int = CBM_NEIGHBOR_BIN_THRESHOLD,
) -> NeighborList:
    if skin < 0:
        raise ValueError(f"skin must be non-negative, got {skin!r}")
    positions = pop.all_positions
    cutoff = r_A + skin
    if pop.n_total >= bin_threshold:
        candidates = _binned_candidates(positions, cutoff)
    else:
        candidates = _all_candidates(pop.n_total)
    candidates = candidates[candidates[:, 0] < pop.n_free]
    _, r = _pair_vectors(positions, candidates)
    pairs = candidates[r < cutoff]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = np.ascontiguousarray(pairs[order], dtype=np.int64)
    pairs.flags.writeable = False
    positions.flags.writeable = False
    return NeighborList(
        pairs=pairs,
        reference_positions=positions,
        n_free=pop.n_free,
        r_A=r_A,
        skin=skin,
        stamp=next(_STAMPS),
    )


def needs_rebuild(nl: NeighborList, pop: CellPopulation) -> bool:
    positions = pop.all_positions
    if nl.reference_positions.shape != positions.shape or nl.n_free != pop.n_free:
        return True
    if positions.shape[0] == 0:
        return False
    shift = positions - nl.reference_positions
    moved = np.sqrt(np.einsum("ij,ij->i", shift, shift))
    return bool(moved.max() > nl.skin / 2.0)


def refresh_neighbor_list(nl: NeighborList, pop: CellPopulation) -> NeighborList:
    """Return ``nl`` if still complete for ``pop``, otherwise a rebuilt list."""
    if not needs_rebuild(nl, pop):
        return nl
    return build_neighbor_list(pop, nl.r_A, skin=nl.skin)


def active_pairs(
    pop: CellPopulation, law: ForceLaw, nl: NeighborList
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    r_vec, r = _pair_vectors(pop.all_positions, nl.pairs)
    active = r < law.r_A
    overlap = active & (r == 0.0)
    if overlap.any():
        k = int(np.flatnonzero(overlap)[0])
        raise OverlappingCentersError(int(nl.pairs[k, 0]), int(nl.pairs[k, 1]))
    pairs = nl.pairs[active]
    return pairs[:, 0], pairs[:, 1], r_vec[active], r[active]


def _accumulate(
    pop: CellPopulation,
    i: np.ndarray,
    j: np.ndarray,
    contrib: np.ndarray,
    row_mask: np.ndarray | None = None,
) -> np.ndarray:
    forces = np.zeros((pop.n_free, pop.dim))
    j_free = j < pop.n_free
    if row_mask is None:
        np.add.at(forces, i, contrib)
        np.add.at(forces, j[j_free], -contrib[j_free])
    else:
        on_i = row_mask[i]
        on_j = j_free & row_mask[np.minimum(j, pop.n_free - 1)]
        np.add.at(forces, i[on_i], contrib[on_i])
        np.add.at(forces, j[on_j], -contrib[on_j])
    return forces.reshape(-1)


def total_force(pop: CellPopulation, law: ForceLaw, nl: NeighborList) -> np.ndarray:
    """F_i = sum_j r_hat_ij g(r_ij) over free rows, as a flat vector of length dN."""
    i, j, r_vec, r = active_pairs(pop, law, nl)
    contrib = r_vec * (cubic_force(r, law) / r)[:, None]
    return _accumulate(pop, i, j, contrib)


def partial_force(
    pop: CellPopulation, law: ForceLaw, nl: NeighborList, cells: np.ndarray
) -> np.ndarray:
    """Force rows of the free cells selected by the boolean mask ``cells``.

    Rows outside the mask are zero. Selected rows are bitwise equal to the
    corresponding rows of ``total_force``.
    """
    cells = np.asarray(cells, dtype=bool)
    if cells.shape != (pop.n_free,):
        raise ValueError(f"cell mask must have shape ({pop.n_free},), got {cells.shape}")
    i, j, r_vec, r = active_pairs(pop, law, nl)
    touching = cells[i] | ((j < pop.n_free) & cells[np.minimum(j, pop.n_free - 1)])
    i, j, r_vec, r = i[touching], j[touching], r_vec[touching], r[touching]
    contrib = r_vec * (cubic_force(r, law) / r)[:, None]
    return _accumulate(pop, i, j, contrib, row_mask=cells)


def total_potential(
    pop: CellPopulation,
    law: ForceLaw,
    nl: NeighborList | None = None,
    *,
    include_ga_offset: bool = CBM_INCLUDE_GA_OFFSET,
) -> float:
    """Potential V whose negative gradient is ``total_force``.

    Free-free and free-stationary pairs each contribute G(r_ij) once. Pairs at or
    beyond r_A add G_A only when ``include_ga_offset`` is set.
    """
    if nl is None:
        nl = build_neighbor_list(pop, law.r_A)
    _, r = _pair_vectors(pop.all_positions, nl.pairs)
    active = r < law.r_A
    if np.any(active & (r == 0.0)):
        logger.warning("Coincident cell centers in potential evaluation")
    value = float(np.sum(pair_potential(r[active], law)))
    if include_ga_offset:
        n, n0 = pop.n_free, pop.n_stationary
        n_pairs = n * (n - 1) // 2 + n * n0
        value += (n_pairs - int(active.sum())) * law.g_a
    return value


def center_of_gravity(pop: CellPopulation) -> np.ndarray:
    if pop.n_free == 0:
        raise PopulationError("center of gravity needs at least one free cell")
    return pop.free_positions.mean(axis=0)
