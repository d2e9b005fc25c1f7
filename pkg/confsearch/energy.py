from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from logging import getLogger
from pathlib import Path

import networkx as nx
import numpy as np

from confsearch.molmodel import MoleculeSpec, apply_torsions, torsion_path

logger = getLogger(__name__)

CLASH_DISTANCE = 1e-6
CLASH_ENERGY = 1e12
DEFAULT_CACHE_ENTRIES = 200_000


@dataclass(frozen=True)
class UffParams:
    """
    Lennard-Jones parameters of one UFF atom type.

    :param epsilon: Well depth [kcal/mol].
    :param sigma: Van der Waals bond length, the distance of the well minimum [Angstrom].
    """

    epsilon: float
    sigma: float

    def __post_init__(self):
        if not (self.epsilon > 0 and self.sigma > 0):
            raise ValueError(f"UFF parameters must be positive, got epsilon={self.epsilon}, sigma={self.sigma}")


@dataclass
class EvalCounter:
    count: int = 0

    def increment(self, n: int = 1) -> None:
        self.count += n


@dataclass(frozen=True)
class EnergyBreakdown:
    constant: float
    pair_terms: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.constant + sum(self.pair_terms.values())


@dataclass(frozen=True, eq=False)
class PairTable:
    """Eligible atom pairs with mixed parameters and the rigid-body pair (lower id first) each belongs to."""

    i: np.ndarray
    j: np.ndarray
    epsilon: np.ndarray
    sigma: np.ndarray
    scale: np.ndarray
    body_a: np.ndarray
    body_b: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


def load_uff_parameters(path: Path | None = None) -> dict[str, UffParams]:
    if path is None:
        text = resources.files("confsearch").joinpath("data/uff_vdw.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")

    table = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        uff_type, epsilon, sigma = line.split()
        table[uff_type] = UffParams(epsilon=float(epsilon), sigma=float(sigma))
    return table


def lj_pair(epsilon: float, sigma: float, r: float) -> float:
    """
    Lennard-Jones 6-12 potential with the well minimum ``-epsilon`` at ``r = sigma``.

    :param epsilon: Well depth [kcal/mol].
    :param sigma: Position of the minimum [Angstrom].
    :param r: Interatomic distance [Angstrom].
    :return: Pair energy [kcal/mol].
    """
    if r <= 0:
        raise ValueError(f"interatomic distance must be positive, got {r}")
    x = (sigma / r) ** 6
    return epsilon * (x * x - 2.0 * x)


def lj_energies(epsilon: np.ndarray, sigma: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vectorized :func:`lj_pair`; coincident atoms map to ``CLASH_ENERGY``."""
    r = np.asarray(r, dtype=float)
    clash = r < CLASH_DISTANCE
    x = (sigma / np.where(clash, 1.0, r)) ** 6
    energies = epsilon * (x * x - 2.0 * x)
    return np.where(clash, CLASH_ENERGY, np.minimum(energies, CLASH_ENERGY))


def build_pair_table(spec: MoleculeSpec, uff: dict[str, UffParams], scale_14: float = 1.0) -> PairTable:
    """
    Collect atom pairs that are at least three bonds apart.

    1-2 and 1-3 pairs are excluded, 1-4 pairs are weighted by ``scale_14`` and all others count fully.
    Parameters are mixed geometrically.
    """
    graph = spec.bond_graph
    atom_body = spec.rigid_bodies.atom_body
    eps = np.array([uff[a.uff_type].epsilon for a in spec.atoms])
    sig = np.array([uff[a.uff_type].sigma for a in spec.atoms])

    rows = []
    for i in range(spec.n_atoms):
        near = nx.single_source_shortest_path_length(graph, i, cutoff=3)
        for j in range(i + 1, spec.n_atoms):
            hops = near.get(j)
            if hops is not None and hops <= 2:
                continue
            scale = scale_14 if hops == 3 else 1.0
            if scale == 0.0:
                continue
            a, b = sorted((atom_body[i], atom_body[j]))
            rows.append((i, j, scale, a, b))

    if not rows:
        empty = np.zeros(0)
        index = empty.astype(int)
        return PairTable(index, index, empty, empty, empty, index, index)

    i, j, scale, a, b = (np.array(col) for col in zip(*rows))
    return PairTable(
        i=i.astype(int),
        j=j.astype(int),
        epsilon=np.sqrt(eps[i] * eps[j]),
        sigma=np.sqrt(sig[i] * sig[j]),
        scale=scale.astype(float),
        body_a=a.astype(int),
        body_b=b.astype(int),
    )


class EnergyModel:
    """
    Lennard-Jones energy of a molecule as a function of its torsion vector.

    Every energy that involves torsion-dependent geometry takes an :class:`EvalCounter`. Group energies are
    memoized on the torsions they depend on; a cache hit is not counted.

    :param spec: Molecule to evaluate.
    :param scale_14: Weight of pairs separated by exactly three bonds.
    :param uff: UFF parameter table, the bundled table by default.
    :param memoize: Cache group and body-pair energies.
    :param max_cache_entries: Least recently used energies are dropped beyond this many entries.
    """

    def __init__(
        self,
        spec: MoleculeSpec,
        scale_14: float = 1.0,
        uff: dict[str, UffParams] | None = None,
        memoize: bool = True,
        max_cache_entries: int = DEFAULT_CACHE_ENTRIES,
    ):
        self.spec = spec
        self.graph = spec.rigid_bodies
        self.scale_14 = scale_14
        self.memoize = memoize
        if max_cache_entries < 1:
            raise ValueError("max_cache_entries must be at least 1")
        self.max_cache_entries = max_cache_entries
        self.pairs = build_pair_table(spec, uff if uff is not None else load_uff_parameters(), scale_14)

        body_pairs: dict[tuple[int, int], list[int]] = {}
        for row, (a, b) in enumerate(zip(self.pairs.body_a, self.pairs.body_b)):
            body_pairs.setdefault((int(a), int(b)), []).append(row)
        self._body_pairs = {key: np.array(rows, dtype=int) for key, rows in body_pairs.items()}
        self._group_rows: dict[tuple, np.ndarray] = {}
        self._cache: OrderedDict[tuple, float] = OrderedDict()
        self._constant: float | None = None

    @property
    def n_torsions(self) -> int:
        return self.spec.n_torsions

    @property
    def n_atoms(self) -> int:
        return self.spec.n_atoms

    def __repr__(self):
        return self.__class__.__name__ + f"(spec={self.spec.name}, pairs={len(self.pairs)}, scale_14={self.scale_14})"

    def _pair_sum(self, positions: np.ndarray, rows: np.ndarray) -> float:
        if len(rows) == 0:
            return 0.0
        p = self.pairs
        r = np.linalg.norm(positions[p.i[rows]] - positions[p.j[rows]], axis=1)
        return float(np.sum(p.scale[rows] * lj_energies(p.epsilon[rows], p.sigma[rows], r)))

    def _assignment(self, t) -> Mapping[int, float]:
        if isinstance(t, Mapping):
            return t
        t = np.asarray(t, dtype=float).reshape(-1)
        if t.shape[0] != self.n_torsions:
            raise ValueError(f"torsion vector has length {t.shape[0]}, molecule has {self.n_torsions} torsions")
        return dict(enumerate(t.tolist()))

    def constant_energy(self) -> float:
        """Sum of all pairs inside a rigid body; these never change under rotation and are not counted."""
        if self._constant is None:
            rows = np.flatnonzero(self.pairs.body_a == self.pairs.body_b)
            self._constant = self._pair_sum(self.spec.positions, rows)
        return self._constant

    def total_energy(self, t, counter: EvalCounter) -> float:
        positions = apply_torsions(self.spec, t).positions
        counter.increment()
        return self._pair_sum(positions, np.arange(len(self.pairs)))

    def breakdown(self, t, counter: EvalCounter) -> EnergyBreakdown:
        """Per-body-pair split of one full evaluation; counted once."""
        positions = apply_torsions(self.spec, t).positions
        counter.increment()
        terms = {key: self._pair_sum(positions, rows) for key, rows in self._body_pairs.items() if key[0] != key[1]}
        return EnergyBreakdown(constant=self.constant_energy(), pair_terms=terms)

    def body_pair_energy(self, a: int, b: int, t_ab, counter: EvalCounter) -> float:
        """
        Energy U_ab of the pairs with one atom in body ``a`` and the other in body ``b``.

        :param t_ab: Mapping from torsion index to angle covering at least the torsions between ``a`` and ``b``,
            or a full torsion vector.
        """
        if a == b:
            raise ValueError("pairs inside a single rigid body belong to constant_energy")
        assignment = self._assignment(t_ab)
        missing = [i for i in torsion_path(self.graph, a, b) if i not in assignment]
        if missing:
            raise ValueError(f"incomplete torsion assignment, missing torsions {missing}")
        return self.group_energy(frozenset((a,)), frozenset((b,)), assignment, counter)

    def group_energy(
        self,
        left: frozenset[int],
        right: frozenset[int],
        t,
        counter: EvalCounter,
        include_left: bool = False,
        include_right: bool = False,
    ) -> float:
        """
        Cross-pair energy between two disjoint sets of rigid bodies.

        :param left: Body ids of the first set.
        :param right: Body ids of the second set.
        :param t: Torsion assignment (mapping or full vector) covering the subtree that spans both sets.
        :param counter: Incremented by one unless the value comes from the cache.
        :param include_left: Add the pairs between distinct bodies inside ``left``.
        :param include_right: Add the pairs between distinct bodies inside ``right``.
        """
        left, right = frozenset(left), frozenset(right)
        if left & right:
            raise ValueError(f"body sets overlap: {sorted(left & right)}")
        assignment = self._assignment(t)
        relevant = self.graph.steiner_torsions(left | right)
        missing = [i for i in relevant if i not in assignment]
        if missing:
            raise ValueError(f"incomplete torsion assignment, missing torsions {missing}")

        angles = tuple(round(float(assignment[i]), 6) % 360.0 for i in relevant)
        key = (left, right, include_left, include_right, angles)
        if self.memoize and key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]

        t_full = np.zeros(self.n_torsions)
        for i in relevant:
            t_full[i] = assignment[i]
        positions = apply_torsions(self.spec, t_full).positions
        counter.increment()
        value = self._pair_sum(positions, self._rows(left, right, include_left, include_right))

        if self.memoize:
            self._cache[key] = value
            if len(self._cache) > self.max_cache_entries:
                self._cache.popitem(last=False)
        return value

    def _rows(self, left: frozenset[int], right: frozenset[int], include_left: bool, include_right: bool) -> np.ndarray:
        key = (left, right, include_left, include_right)
        if key not in self._group_rows:
            selected = []
            for (a, b), rows in self._body_pairs.items():
                if a == b:
                    continue
                if (a in left and b in right) or (a in right and b in left):
                    selected.append(rows)
                elif include_left and a in left and b in left:
                    selected.append(rows)
                elif include_right and a in right and b in right:
                    selected.append(rows)
            self._group_rows[key] = np.concatenate(selected) if selected else np.zeros(0, dtype=int)
        return self._group_rows[key]

    def clear_cache(self) -> None:
        self._cache.clear()

    @property
    def cache_size(self) -> int:
        return len(self._cache)
