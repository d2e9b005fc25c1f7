import itertools
import math
from collections import Counter
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from networkx.utils import UnionFind

from confsearch.encoding import Discretization, OneHotLayout
from confsearch.errors import ConfigurationError
from confsearch.molmodel import RigidBodyGraph

logger = getLogger(__name__)


class NeighbourhoodError(ConfigurationError):
    pass


class NeighbourhoodBudgetError(NeighbourhoodError):
    pass


def contracted_groups(forest: UnionFind) -> dict:
    """Members of each contracted vertex, keyed by its representative."""
    return {forest[next(iter(group))]: frozenset(group) for group in forest.to_sets()}


def _check_torsions(graph: RigidBodyGraph, subset) -> tuple[int, ...]:
    subset = tuple(sorted(set(int(i) for i in subset)))
    n = len(graph.torsions)
    for i in subset:
        if not 0 <= i < n:
            raise NeighbourhoodError(f"unknown torsion index {i}")
    return subset


def contract(graph: RigidBodyGraph, subset) -> UnionFind:
    """Merge the bodies joined by every torsion outside ``subset``."""
    keep = set(_check_torsions(graph, subset))
    forest = UnionFind(body.id for body in graph.bodies)
    for edge in graph.torsions:
        if edge.index not in keep:
            forest.union(edge.proximal_body, edge.distal_body)
    return forest


def _contracted_degrees(graph: RigidBodyGraph, subset: tuple[int, ...], forest: UnionFind) -> Counter:
    degree = Counter()
    for i in subset:
        edge = graph.torsions[i]
        degree[forest[edge.proximal_body]] += 1
        degree[forest[edge.distal_body]] += 1
    return degree


def is_two_torsion_dependent(graph: RigidBodyGraph, subset) -> bool:
    """True when contracting every torsion outside ``subset`` leaves a star: at most one vertex of degree > 1."""
    subset = _check_torsions(graph, subset)
    degree = _contracted_degrees(graph, subset, contract(graph, subset))
    return sum(1 for d in degree.values() if d > 1) <= 1


@dataclass(frozen=True)
class TorsionSubset:
    """
    A 2-torsion dependent set of torsions together with its contracted star.

    :param torsions: Sorted torsion indices.
    :param center: Bodies merged into the star center.
    :param leaves: Bodies merged into the leaf behind each torsion, aligned with ``torsions``.
    """

    torsions: tuple[int, ...]
    center: frozenset[int]
    leaves: tuple[frozenset[int], ...]

    def __len__(self) -> int:
        return len(self.torsions)

    @staticmethod
    def from_torsions(graph: RigidBodyGraph, torsions) -> "TorsionSubset":
        torsions = _check_torsions(graph, torsions)
        forest = contract(graph, torsions)
        degree = _contracted_degrees(graph, torsions, forest)
        hubs = [root for root, d in degree.items() if d > 1]
        if len(hubs) > 1:
            raise NeighbourhoodError(f"torsions {torsions} are not 2-torsion dependent")

        groups = contracted_groups(forest)
        if hubs:
            center = hubs[0]
        elif torsions:
            center = forest[graph.torsions[torsions[0]].proximal_body]
        else:
            center = forest[0]

        leaves = []
        for i in torsions:
            edge = graph.torsions[i]
            a, b = forest[edge.proximal_body], forest[edge.distal_body]
            leaves.append(groups[b if a == center else a])
        return TorsionSubset(torsions=torsions, center=groups[center], leaves=tuple(leaves))


def neighbourhood_change(graph: RigidBodyGraph, rng: np.random.Generator) -> TorsionSubset:
    """Greedy maximal 2-torsion dependent subset along a uniformly random ordering of the torsions."""
    subset: list[int] = []
    for i in rng.permutation(len(graph.torsions)):
        if is_two_torsion_dependent(graph, subset + [int(i)]):
            subset.append(int(i))
    return TorsionSubset.from_torsions(graph, subset)


def maximal_subsets(graph: RigidBodyGraph) -> set[frozenset[int]]:
    """All maximal 2-torsion dependent subsets, by running the greedy rule over every ordering."""
    found = set()
    for order in itertools.permutations(range(len(graph.torsions))):
        subset: list[int] = []
        for i in order:
            if is_two_torsion_dependent(graph, subset + [i]):
                subset.append(i)
        found.add(frozenset(subset))
    return found


def level_counts(m: int, s: int, d: int) -> list[int]:
    """
    Split the budget ``s`` over ``m`` torsions as evenly as possible, at most ``d`` levels each.

    The remainder, and any budget freed by the cap, goes to the lowest positions first.
    """
    if m < 1:
        return []
    if s < m:
        raise NeighbourhoodBudgetError(f"budget s={s} is smaller than the {m} torsions of the neighbourhood")
    sizes = [s // m + (1 if k < s % m else 0) for k in range(m)]
    surplus = sum(max(0, size - d) for size in sizes)
    sizes = [min(size, d) for size in sizes]
    while surplus > 0 and any(size < d for size in sizes):
        for k in range(m):
            if surplus > 0 and sizes[k] < d:
                sizes[k] += 1
                surplus -= 1
    return sizes


def allocate_levels(
    subset: TorsionSubset, s: int, theta: Discretization, current, rng: np.random.Generator
) -> OneHotLayout:
    """
    Pick the level set of every torsion in ``subset``.

    Each set holds the current level of its torsion plus distinct levels drawn uniformly from the rest of Θ.
    """
    sizes = level_counts(len(subset.torsions), s, theta.d)
    blocks = []
    for torsion, size in zip(subset.torsions, sizes):
        k_current = theta.index_of(current[torsion])
        others = np.array([k for k in range(theta.d) if k != k_current], dtype=int)
        extra = rng.choice(others, size=size - 1, replace=False) if size > 1 else np.zeros(0, dtype=int)
        levels = sorted([k_current, *extra.tolist()])
        blocks.append((torsion, tuple(theta.theta[k] for k in levels)))
    return OneHotLayout(blocks=tuple(blocks))


def neighbourhood_counts(layout: OneHotLayout) -> tuple[int, int]:
    """Neighbourhood size Π|Θ_i| and the number of energy evaluations needed for its QUBO coefficients."""
    sizes = layout.sizes
    pairs = sum(a * b for a, b in itertools.combinations(sizes, 2))
    return math.prod(sizes), pairs + sum(sizes)
