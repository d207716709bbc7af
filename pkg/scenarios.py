"""Initial configurations, cell-division mechanics and seeded randomness."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cell_model import CellPopulation, ForceLaw
from config import CBM_DIVISION_SEPARATION

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCENARIO_TYPES = ("two_cells", "division_in_spheroid", "linear_growth")


class ScenarioError(ValueError):
    pass


class SeededRng:
    """PCG64 stream (numpy ``Generator``); equal seeds give equal streams."""

    algorithm = "PCG64"

    def __init__(self, seed: int) -> None:
        if isinstance(seed, bool) or int(seed) != seed or seed < 0:
            raise ScenarioError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size: int) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))


@dataclass(frozen=True)
class DivisionEvent:
    """Division at ``time``; ``target_id``/``direction`` of None mean random."""

    time: float
    target_id: int | None = None
    direction: tuple[float, ...] | None = None
    r0: float = CBM_DIVISION_SEPARATION

    def __post_init__(self) -> None:
        if not math.isfinite(self.time):
            raise ScenarioError(f"event time must be finite, got {self.time!r}")
        if not self.r0 > 0:
            raise ScenarioError(f"daughter separation must be positive, got {self.r0!r}")
        if self.direction is not None:
            n = np.asarray(self.direction, dtype=float)
            norm = float(np.linalg.norm(n))
            if not norm > 0:
                raise ScenarioError("division direction must be non-zero")
            object.__setattr__(self, "direction", tuple(float(v) for v in n / norm))


@dataclass(frozen=True)
class Scenario:
    """A population, its division schedule and the end time.

    ``initial_events`` are divisions already applied to ``population`` at t0.
    ``kind`` and ``params`` are what the scenario was built from.
    """

    name: str
    population: CellPopulation
    T: float
    seed: int
    law: ForceLaw = field(default_factory=ForceLaw)
    events: tuple[DivisionEvent, ...] = ()
    t0: float = 0.0
    initial_events: tuple[DivisionEvent, ...] = ()
    kind: str = ""
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.T >= self.t0:
            raise ScenarioError(f"end time {self.T!r} precedes start time {self.t0!r}")
        previous = self.t0
        for event in self.events:
            if not (previous < event.time <= self.T):
                raise ScenarioError(
                    f"event times must increase strictly within ({self.t0}, {self.T}], "
                    f"got {event.time!r}"
                )
            previous = event.time
        for event in (*self.initial_events, *self.events):
            if not event.r0 < self.law.s:
                raise ScenarioError(
                    f"daughter separation {event.r0!r} must be below the rest length {self.law.s!r}"
                )


def random_unit_vector(rng: SeededRng, d: int) -> np.ndarray:
    """Normalized standard-normal draw: uniform on the unit sphere."""
    if d < 1:
        raise ScenarioError(f"dimension must be positive, got {d!r}")
    while True:
        v = rng.normal(d)
        norm = float(np.linalg.norm(v))
        if norm > 0.0:
            return v / norm


def apply_division(
    pop: CellPopulation, event: DivisionEvent, rng: SeededRng
) -> tuple[CellPopulation, tuple[int, int]]:
    """Replace the mother by daughters at x + dr and x - dr, ||dr|| = r0/2.

    The mother keeps her id and row; the second daughter is appended with
    ``pop.next_cell_id``. The random target is drawn before the random direction.
    """
    if pop.n_free == 0:
        raise ScenarioError("cannot divide in an empty population")
    if event.target_id is None:
        index = rng.integers(0, pop.n_free)
    else:
        hits = np.flatnonzero(pop.cell_ids == event.target_id)
        if hits.size == 0:
            raise ScenarioError(f"division target {event.target_id} is not a free cell")
        index = int(hits[0])
    if event.direction is None:
        n = random_unit_vector(rng, pop.dim)
    else:
        n = np.asarray(event.direction, dtype=float)
        if n.shape != (pop.dim,):
            raise ScenarioError(
                f"division direction has {n.shape[0]} components, population is {pop.dim}D"
            )
    delta = 0.5 * event.r0 * n
    mother = pop.free_positions[index]
    positions = np.vstack((pop.free_positions, mother - delta))
    positions[index] = mother + delta

    mother_id = int(pop.cell_ids[index])
    new_id = pop.next_cell_id
    divided = CellPopulation(
        free_positions=positions,
        stationary_positions=pop.stationary_positions,
        cell_ids=np.append(pop.cell_ids, new_id),
        next_cell_id=new_id + 1,
    )
    return divided, (mother_id, new_id)


def hcp_spheroid(n_per_dim: int, spacing: float = 1.0) -> CellPopulation:
    """n_per_dim**3 cells on a hexagonal close packed lattice."""
    if n_per_dim < 1:
        raise ScenarioError(f"n_per_dim must be >= 1, got {n_per_dim!r}")
    if not spacing > 0:
        raise ScenarioError(f"spacing must be positive, got {spacing!r}")
    idx = np.array(
        [(i, j, k) for k in range(n_per_dim) for j in range(n_per_dim) for i in range(n_per_dim)],
        dtype=float,
    )
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    half = spacing / 2.0
    positions = np.column_stack(
        (
            (2.0 * i + (j + k) % 2) * half,
            math.sqrt(3.0) * (j + (k % 2) / 3.0) * half,
            (2.0 * math.sqrt(6.0) / 3.0) * k * half,
        )
    )
    return CellPopulation.from_positions(positions)


def cartesian_chain(
    n_free: int, spacing: float, fixed_ends: bool, dim: int = 3
) -> CellPopulation:
    """Cells along the first axis; stationary cells at both ends when ``fixed_ends``."""
    if n_free < 1:
        raise ScenarioError(f"n_free must be >= 1, got {n_free!r}")
    free = np.zeros((n_free, dim))
    free[:, 0] = spacing * np.arange(1, n_free + 1)
    stationary = np.zeros((2 if fixed_ends else 0, dim))
    if fixed_ends:
        stationary[1, 0] = spacing * (n_free + 1)
    return CellPopulation.from_positions(free, stationary)


def two_cell_config(
    direction: Sequence[float] = (1.0, 0.0, 0.0),
    r0: float = CBM_DIVISION_SEPARATION,
    *,
    law: ForceLaw | None = None,
    T: float = 6.0,
    seed: int = 0,
) -> Scenario:
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    offset = 0.5 * r0 * n
    pop = CellPopulation.from_positions(np.vstack((offset, -offset)))
    return Scenario(
        name="two_cells",
        population=pop,
        T=T,
        seed=seed,
        law=law or ForceLaw(),
        kind="two_cells",
        params={"r0": r0, "direction": [float(v) for v in n]},
    )


def _middle_cell(pop: CellPopulation) -> int:
    shift = pop.free_positions - pop.free_positions.mean(axis=0)
    return int(np.argmin(np.einsum("ij,ij->i", shift, shift)))


def division_in_spheroid(
    n_per_dim: int,
    seed: int,
    *,
    r0: float = CBM_DIVISION_SEPARATION,
    law: ForceLaw | None = None,
    T: float = 6.0,
) -> Scenario:
    """Spheroid at rest whose middle cell divides, randomly oriented, at t=0."""
    law = law or ForceLaw()
    lattice = hcp_spheroid(n_per_dim, law.s)
    middle = _middle_cell(lattice)
    event = DivisionEvent(0.0, target_id=int(lattice.cell_ids[middle]), r0=r0)
    pop, _ = apply_division(lattice, event, SeededRng(seed))
    return Scenario(
        name=f"division_in_spheroid_{n_per_dim}",
        population=pop,
        T=T,
        seed=seed,
        law=law,
        initial_events=(event,),
        kind="division_in_spheroid",
        params={"n_per_dim": n_per_dim, "r0": r0},
    )


def linear_growth(
    n_init_per_dim: int,
    n_divisions: int,
    dt_div: float,
    seed: int,
    *,
    r0: float = CBM_DIVISION_SEPARATION,
    law: ForceLaw | None = None,
) -> Scenario:
    if n_divisions < 1:
        raise ScenarioError(f"n_divisions must be >= 1, got {n_divisions!r}")
    if not dt_div > 0:
        raise ScenarioError(f"dt_div must be positive, got {dt_div!r}")
    law = law or ForceLaw()
    events = tuple(DivisionEvent(i * dt_div, r0=r0) for i in range(1, n_divisions + 1))
    return Scenario(
        name=f"linear_growth_{n_init_per_dim}",
        population=hcp_spheroid(n_init_per_dim, law.s),
        T=n_divisions * dt_div,
        seed=seed,
        law=law,
        events=events,
        kind="linear_growth",
        params={"n_per_dim": n_init_per_dim, "n_divisions": n_divisions, "dt_div": dt_div, "r0": r0},
    )


def _require(doc: Mapping[str, object], key: str) -> object:
    if key not in doc:
        raise ScenarioError(f"scenario document is missing {key!r}")
    return doc[key]


def scenario_from_dict(doc: Mapping[str, object]) -> Scenario:
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario schema version {version!r}")
    kind = _require(doc, "type")
    if kind not in SCENARIO_TYPES:
        raise ScenarioError(f"unknown scenario type {kind!r}; expected one of {SCENARIO_TYPES}")
    force = doc.get("force") or {}
    if not isinstance(force, Mapping):
        raise ScenarioError("'force' must be an object with mu, s and rA")
    try:
        law = ForceLaw(
            mu=float(force.get("mu", ForceLaw.mu)),
            s=float(force.get("s", ForceLaw.s)),
            r_A=float(force.get("rA", ForceLaw.r_A)),
        )
        r0 = float(doc.get("r0", CBM_DIVISION_SEPARATION))
        seed = int(doc.get("seed", 0))
        if kind == "two_cells":
            return two_cell_config(
                doc.get("direction", (1.0, 0.0, 0.0)),
                r0,
                law=law,
                T=float(doc.get("T", 6.0)),
                seed=seed,
            )
        if kind == "division_in_spheroid":
            return division_in_spheroid(
                int(_require(doc, "n_per_dim")),
                seed,
                r0=r0,
                law=law,
                T=float(doc.get("T", 6.0)),
            )
        scenario = linear_growth(
            int(_require(doc, "n_per_dim")),
            int(_require(doc, "n_divisions")),
            float(_require(doc, "dt_div")),
            seed,
            r0=r0,
            law=law,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid {kind} scenario: {exc}") from exc
    if "T" in doc and float(doc["T"]) != scenario.T:
        raise ScenarioError(
            f"linear_growth ends at n_divisions * dt_div = {scenario.T}, document says T={doc['T']}"
        )
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict[str, object]:
    if scenario.kind not in SCENARIO_TYPES:
        raise ScenarioError(f"scenario {scenario.name!r} was not built from a known type")
    return {
        "schema_version": SCHEMA_VERSION,
        "type": scenario.kind,
        **scenario.params,
        "seed": scenario.seed,
        "T": scenario.T,
        "force": {"mu": scenario.law.mu, "s": scenario.law.s, "rA": scenario.law.r_A},
    }


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    return scenario_from_dict({**scenario_to_dict(scenario), "seed": seed})


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: scenario document must be a JSON object")
    scenario = scenario_from_dict(doc)
    logger.info(
        "Loaded scenario %s from %s: %s cells, %s events, T=%s",
        scenario.name,
        path,
        scenario.population.n_free,
        len(scenario.events),
        scenario.T,
    )
    return scenario


def save_scenario(scenario: Scenario, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path
