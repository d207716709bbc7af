"""Small population and scenario builders shared by the tests."""

from __future__ import annotations

import numpy as np

from cell_model import CellPopulation, ForceLaw
from scenarios import DivisionEvent, SeededRng, apply_division, hcp_spheroid

TABLE_LAW = ForceLaw(mu=5.7, s=1.0, r_A=1.5)


def pair_at(r: float, direction: tuple[float, ...] = (1.0, 0.0, 0.0)) -> CellPopulation:
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    return CellPopulation.from_positions(np.vstack((0.5 * r * n, -0.5 * r * n)))


def random_cluster(n_cells: int, seed: int, *, box: float | None = None, dim: int = 3) -> CellPopulation:
    """Cells uniformly in a box, rejecting centers closer than 0.2."""
    gen = np.random.default_rng(seed)
    box = box if box is not None else max(1.0, n_cells ** (1.0 / dim))
    points: list[np.ndarray] = []
    while len(points) < n_cells:
        candidate = gen.uniform(0.0, box, size=dim)
        if all(np.linalg.norm(candidate - p) > 0.2 for p in points):
            points.append(candidate)
    return CellPopulation.from_positions(np.array(points))


def divided_lattice(n_per_dim: int, direction: tuple[float, ...] = (1.0, 0.0, 0.0)) -> CellPopulation:
    """Spheroid with its first cell divided along ``direction``."""
    lattice = hcp_spheroid(n_per_dim, 1.0)
    pop, _ = apply_division(lattice, DivisionEvent(0.0, target_id=0, direction=direction), SeededRng(0))
    return pop
