from dataclasses import dataclass, field
from functools import cached_property
from logging import getLogger
from typing import TYPE_CHECKING, Any

import numpy as np

from confsearch.energy import EnergyModel, EvalCounter

if TYPE_CHECKING:
    from confsearch.neighbourhoods import TorsionSubset

logger = getLogger(__name__)

LEVEL_TOLERANCE = 1e-6


class InfeasibleSampleError(ValueError):
    pass


@dataclass(frozen=True)
class Discretization:
    """
    The set of d torsion levels shared by all torsions.

    :param theta: Strictly increasing angles in [0, 360) [degrees].
    """

    theta: tuple[float, ...]

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if len(theta) < 2:
            raise ValueError("a discretization needs at least 2 levels")
        if np.any(theta < 0) or np.any(theta >= 360) or np.any(np.diff(theta) <= 0):
            raise ValueError("levels must be strictly increasing in [0, 360)")

    @staticmethod
    def uniform(d: int) -> "Discretization":
        return Discretization(theta=tuple(360.0 * k / d for k in range(d)))

    @property
    def d(self) -> int:
        return len(self.theta)

    def index_of(self, angle: float) -> int:
        gap = np.abs((np.asarray(self.theta) - angle + 180.0) % 360.0 - 180.0)
        k = int(np.argmin(gap))
        if gap[k] > LEVEL_TOLERANCE:
            raise ValueError(f"angle {angle} is not a level of the discretization")
        return k

    def random_vector(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.theta)[rng.integers(0, self.d, size=n)]


@dataclass(frozen=True)
class OneHotLayout:
    """
    Binary variable layout of a neighbourhood: one block of levels per torsion, blocks laid out contiguously.

    :param blocks: ``(torsion index, levels)`` pairs in variable order.
    """

    blocks: tuple[tuple[int, tuple[float, ...]], ...]

    def __post_init__(self):
        torsions = self.torsions
        if len(set(torsions)) != len(torsions):
            raise ValueError("a torsion appears in two blocks")
        for torsion, levels in self.blocks:
            if not levels:
                raise ValueError(f"torsion {torsion} has no levels")

    @property
    def torsions(self) -> tuple[int, ...]:
        return tuple(torsion for torsion, _ in self.blocks)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(levels) for _, levels in self.blocks)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]])) if self.blocks else ()

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def variable(self, block: int, level: int) -> int:
        return self.offsets[block] + level

    def choices(self, bits) -> tuple[int, ...]:
        """Selected level index per block; raises when a block is not one-hot."""
        bits = np.asarray(bits).reshape(-1)
        if bits.shape[0] != self.n:
            raise ValueError(f"bitstring has length {bits.shape[0]}, layout has {self.n} variables")
        selected = []
        for (torsion, _), start, size in zip(self.blocks, self.offsets, self.sizes):
            on = np.flatnonzero(bits[start : start + size])
            if len(on) != 1:
                raise InfeasibleSampleError(f"torsion {torsion} has {len(on)} levels selected")
            selected.append(int(on[0]))
        return tuple(selected)

    def is_feasible(self, bits) -> bool:
        try:
            self.choices(bits)
        except InfeasibleSampleError:
            return False
        return True

    def feasible_mask(self, X: np.ndarray) -> np.ndarray:
        """Row mask of one-hot feasible bitstrings in a batch."""
        X = np.asarray(X)
        mask = np.ones(X.shape[0], dtype=bool)
        for start, size in zip(self.offsets, self.sizes):
            mask &= X[:, start : start + size].sum(axis=1) == 1
        return mask


@dataclass(frozen=True, eq=False)
class QuboProblem:
    """
    Minimize ``offset + sum_i linear_i x_i + sum_{i<j} quadratic_ij x_i x_j`` over binary x.

    Neighbourhood QUBOs also carry the layout, the penalty and the raw penalty-free blocks
    (``unary[b][k]`` and ``pairwise[(b, c)][k, l]`` for blocks b < c) plus the frozen ``constant``.
    """

    n: int
    linear: np.ndarray
    quadratic: dict[tuple[int, int], float]
    offset: float = 0.0
    layout: OneHotLayout | None = None
    penalty: float = 0.0
    constant: float = 0.0
    unary: tuple[np.ndarray, ...] = ()
    pairwise: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.linear) != self.n:
            raise ValueError(f"expected {self.n} linear coefficients, got {len(self.linear)}")
        for i, j in self.quadratic:
            if not 0 <= i < j < self.n:
                raise ValueError(f"quadratic key {(i, j)} must satisfy 0 <= i < j < n")
        if not np.all(np.isfinite(self.linear)) or not all(np.isfinite(v) for v in self.quadratic.values()):
            raise ValueError("QUBO coefficients must be finite")

    @cached_property
    def matrix(self) -> np.ndarray:
        """Strictly upper-triangular dense coupling matrix."""
        Q = np.zeros((self.n, self.n))
        for (i, j), value in self.quadratic.items():
            Q[i, j] = value
        return Q

    @property
    def coefficient_range(self) -> float:
        values = np.concatenate([np.abs(self.linear), np.abs(list(self.quadratic.values()) or [0.0])])
        return float(values.max()) if values.size else 0.0


@dataclass(frozen=True, eq=False)
class IsingProblem:
    """Minimize ``offset + sum_i h_i s_i + sum_{i<j} J_ij s_i s_j`` over spins s in {-1, +1}."""

    h: np.ndarray
    J: dict[tuple[int, int], float]
    offset: float = 0.0

    @property
    def n(self) -> int:
        return len(self.h)

    @cached_property
    def matrix(self) -> np.ndarray:
        J = np.zeros((self.n, self.n))
        for (i, j), value in self.J.items():
            J[i, j] = value
        return J


def qubo_energy(q: QuboProblem, bits) -> float:
    x = np.asarray(bits, dtype=float).reshape(-1)
    if x.shape[0] != q.n:
        raise ValueError(f"bitstring has length {x.shape[0]}, QUBO has {q.n} variables")
    energy = q.offset + float(q.linear @ x)
    for (i, j), value in q.quadratic.items():
        energy += value * x[i] * x[j]
    return energy


def qubo_energies(q: QuboProblem, X: np.ndarray) -> np.ndarray:
    """QUBO energies of a batch of bitstrings, one per row."""
    X = np.asarray(X, dtype=float)
    return q.offset + X @ q.linear + np.sum((X @ q.matrix) * X, axis=1)


def ising_energy(problem: IsingProblem, spins) -> float:
    s = np.asarray(spins, dtype=float).reshape(-1)
    energy = problem.offset + float(problem.h @ s)
    for (i, j), value in problem.J.items():
        energy += value * s[i] * s[j]
    return energy


def qubo_to_ising(q: QuboProblem) -> IsingProblem:
    """Substitute ``x = (s + 1) / 2``."""
    h = np.asarray(q.linear, dtype=float) / 2.0
    J = {}
    offset = q.offset + float(np.sum(q.linear)) / 2.0
    for (i, j), value in q.quadratic.items():
        h[i] += value / 4.0
        h[j] += value / 4.0
        J[(i, j)] = value / 4.0
        offset += value / 4.0
    return IsingProblem(h=h, J=J, offset=offset)


def decode_bits(bits, layout: OneHotLayout, current) -> np.ndarray:
    """Replace the torsions of ``layout`` in ``current`` by their one-hot selected levels."""
    t = np.array(current, dtype=float)
    for (torsion, levels), k in zip(layout.blocks, layout.choices(bits)):
        t[torsion] = levels[k]
    return t


def encode_levels(layout: OneHotLayout, t) -> np.ndarray:
    """One-hot bitstring selecting the angles of ``t`` in each block."""
    bits = np.zeros(layout.n, dtype=np.int8)
    for (torsion, levels), start in zip(layout.blocks, layout.offsets):
        gap = np.abs((np.asarray(levels) - t[torsion] + 180.0) % 360.0 - 180.0)
        k = int(np.argmin(gap))
        if gap[k] > LEVEL_TOLERANCE:
            raise ValueError(f"angle {t[torsion]} of torsion {torsion} is not in its level set")
        bits[start + k] = 1
    return bits


def feasible_energy(q: QuboProblem, bits) -> float:
    """Penalty-free energy of a one-hot bitstring, summed from the raw coefficient blocks."""
    if q.layout is None:
        raise ValueError("QUBO has no one-hot layout")
    choice = q.layout.choices(bits)
    energy = q.constant + sum(float(block[k]) for block, k in zip(q.unary, choice))
    for (b, c), table in q.pairwise.items():
        energy += float(table[choice[b], choice[c]])
    return energy


def penalty_auto(coefficients: list[np.ndarray], m: int) -> float:
    """
    Penalty that makes every unconstrained minimum one-hot feasible.

    Expects block-normalized (non-negative) coefficients. Emptying a block saves at most ``m * range``, so any
    penalty above that keeps all blocks at exactly one selected level.
    """
    values = np.concatenate([np.ravel(c) for c in coefficients]) if coefficients else np.zeros(1)
    spread = float(values.max() - values.min())
    return max(2, m) * spread + 1.0


def build_neighbourhood_qubo(
    model: EnergyModel,
    current,
    subset: "TorsionSubset",
    layout: OneHotLayout,
    penalty: float | str,
    counter: EvalCounter,
) -> QuboProblem:
    """
    One-hot QUBO over the neighbourhood of ``current`` spanned by ``subset``.

    Unary blocks hold the energy between the star center and each leaf (plus the frozen energy inside the
    leaf, and inside the center for the first block); pairwise blocks hold the energy between two leaves.
    Every block is shifted by its minimum into the offset before the penalty is applied.

    :param model: Energy model of the molecule.
    :param current: Current torsion vector; torsions outside ``subset`` stay frozen at these values.
    :param subset: 2-torsion dependent subset with its contracted star.
    :param layout: Level sets, one block per torsion of ``subset``.
    :param penalty: ``"auto"`` or a fixed penalty coefficient [kcal/mol].
    :param counter: Energy-evaluation counter.
    """
    if set(layout.torsions) != set(subset.torsions):
        raise ValueError(f"layout torsions {layout.torsions} do not match subset {subset.torsions}")

    current = np.asarray(current, dtype=float)
    base = dict(enumerate(current.tolist()))
    leaf_of = dict(zip(subset.torsions, subset.leaves))
    leaves = [leaf_of[torsion] for torsion in layout.torsions]

    unary = []
    for b, (torsion, levels) in enumerate(layout.blocks):
        values = np.empty(len(levels))
        for k, angle in enumerate(levels):
            values[k] = model.group_energy(
                subset.center,
                leaves[b],
                {**base, torsion: angle},
                counter,
                include_left=b == 0,
                include_right=True,
            )
        unary.append(values)

    pairwise = {}
    for b, (torsion_b, levels_b) in enumerate(layout.blocks):
        for c in range(b + 1, len(layout.blocks)):
            torsion_c, levels_c = layout.blocks[c]
            table = np.empty((len(levels_b), len(levels_c)))
            for k, angle_b in enumerate(levels_b):
                for k2, angle_c in enumerate(levels_c):
                    table[k, k2] = model.group_energy(
                        leaves[b], leaves[c], {**base, torsion_b: angle_b, torsion_c: angle_c}, counter
                    )
            pairwise[(b, c)] = table

    constant = model.constant_energy()
    shifts = [float(u.min()) for u in unary] + [float(p.min()) for p in pairwise.values()]
    normalized = [u - u.min() for u in unary] + [p - p.min() for p in pairwise.values()]
    m = len(layout.blocks)
    p = penalty_auto(normalized, m) if penalty == "auto" else float(penalty)

    offsets = layout.offsets
    linear = np.concatenate([u - u.min() - p for u in unary]) if unary else np.zeros(0)
    quadratic: dict[tuple[int, int], float] = {}
    for b, size in enumerate(layout.sizes):
        for k in range(size):
            for k2 in range(k + 1, size):
                quadratic[(offsets[b] + k, offsets[b] + k2)] = 2.0 * p
    for (b, c), table in pairwise.items():
        shifted = table - table.min()
        for k in range(table.shape[0]):
            for k2 in range(table.shape[1]):
                quadratic[(offsets[b] + k, offsets[c] + k2)] = float(shifted[k, k2])

    logger.debug("Neighbourhood QUBO over torsions %s: n=%d, penalty=%.4g", layout.torsions, layout.n, p)
    return QuboProblem(
        n=layout.n,
        linear=linear,
        quadratic=quadratic,
        offset=constant + sum(shifts) + p * m,
        layout=layout,
        penalty=p,
        constant=constant,
        unary=tuple(unary),
        pairwise=pairwise,
    )


def qubo_to_document(q: QuboProblem) -> dict[str, Any]:
    return {
        "n": q.n,
        "linear": [float(v) for v in q.linear],
        "quadratic": [[int(i), int(j), float(v)] for (i, j), v in sorted(q.quadratic.items())],
        "offset": float(q.offset),
    }


def qubo_from_document(data: dict[str, Any]) -> QuboProblem:
    return QuboProblem(
        n=int(data["n"]),
        linear=np.asarray(data["linear"], dtype=float),
        quadratic={(int(i), int(j)): float(v) for i, j, v in data["quadratic"]},
        offset=float(data.get("offset", 0.0)),
    )


def random_qubo(n: int, rng: np.random.Generator, scale: float = 1.0) -> QuboProblem:
    """Dense QUBO with standard-normal coefficients, used for solver checks."""
    quadratic = {(i, j): float(scale * rng.normal()) for i in range(n) for j in range(i + 1, n)}
    return QuboProblem(n=n, linear=scale * rng.normal(size=n), quadratic=quadratic, offset=float(rng.normal()))
