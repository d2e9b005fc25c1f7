from dataclasses import dataclass
from functools import cached_property
from logging import getLogger
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.spatial.transform import Rotation

logger = getLogger(__name__)

TorsionVector = tuple[float, ...]

CC_BOND = 1.54
CH_BOND = 1.09
TETRAHEDRAL = np.degrees(np.arccos(-1.0 / 3.0))


class MoleculeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    """
    A single atom of the input geometry.

    :param index: 0-based atom index.
    :param element: Chemical symbol.
    :param position: Cartesian coordinates [Angstrom].
    :param uff_type: UFF atom-type key, e.g. ``C_3``.
    """

    index: int
    element: str
    position: tuple[float, float, float]
    uff_type: str


@dataclass(frozen=True)
class RigidBody:
    id: int
    atom_indices: frozenset[int]


@dataclass(frozen=True)
class TorsionEdge:
    """
    A rotatable bond seen as an edge of the rigid-body tree.

    ``proximal_body``/``proximal_atom`` lie on the side of the root body (the body holding atom 0),
    ``distal_body``/``distal_atom`` on the far side.
    """

    index: int
    bond: tuple[int, int]
    proximal_body: int
    distal_body: int
    proximal_atom: int
    distal_atom: int


@dataclass(frozen=True)
class RigidBodyGraph:
    bodies: tuple[RigidBody, ...]
    torsions: tuple[TorsionEdge, ...]
    atom_body: tuple[int, ...]

    @cached_property
    def tree(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(body.id for body in self.bodies)
        for edge in self.torsions:
            graph.add_edge(edge.proximal_body, edge.distal_body, torsion=edge.index)
        return graph

    @cached_property
    def depth(self) -> dict[int, int]:
        return nx.single_source_shortest_path_length(self.tree, 0)

    def subtree_atoms(self, torsion: int) -> np.ndarray:
        """Atoms moved by a rotation about ``torsion``: everything beyond its distal body."""
        return self._subtree_atoms[torsion]

    @cached_property
    def _subtree_atoms(self) -> dict[int, np.ndarray]:
        directed = nx.bfs_tree(self.tree, 0)
        moving = {}
        for edge in self.torsions:
            bodies = nx.descendants(directed, edge.distal_body) | {edge.distal_body}
            atoms = sorted(a for b in bodies for a in self.bodies[b].atom_indices)
            moving[edge.index] = np.array(atoms, dtype=int)
        return moving

    def steiner_torsions(self, bodies: frozenset[int]) -> tuple[int, ...]:
        """Torsions on the minimal subtree spanning ``bodies``."""
        if len(bodies) < 2:
            return ()
        anchor = min(bodies)
        torsions = set()
        for body in bodies:
            torsions.update(torsion_path(self, anchor, body))
        return tuple(sorted(torsions))


@dataclass(frozen=True)
class MoleculeSpec:
    """
    Validated molecule description.

    :param atoms: Atoms in index order.
    :param bonds: Bonds as sorted atom-index pairs.
    :param rotatable: Bond indices of the torsions T_1..T_M in declaration order.
    :param name: Optional label used in reports.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[tuple[int, int], ...]
    rotatable: tuple[int, ...]
    name: str = "molecule"

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_torsions(self) -> int:
        return len(self.rotatable)

    @cached_property
    def positions(self) -> np.ndarray:
        positions = np.array([atom.position for atom in self.atoms], dtype=float).reshape(-1, 3)
        positions.setflags(write=False)
        return positions

    @cached_property
    def bond_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_atoms))
        graph.add_edges_from(self.bonds)
        return graph

    @cached_property
    def rigid_bodies(self) -> RigidBodyGraph:
        return partition_rigid_bodies(self)

    @cached_property
    def _rotation_plan(self) -> tuple[TorsionEdge, ...]:
        graph = self.rigid_bodies
        return tuple(sorted(graph.torsions, key=lambda e: (-graph.depth[e.distal_body], e.index)))

    def with_positions(self, positions: np.ndarray) -> "MoleculeSpec":
        atoms = tuple(
            Atom(index=a.index, element=a.element, position=tuple(float(x) for x in p), uff_type=a.uff_type)
            for a, p in zip(self.atoms, np.asarray(positions, dtype=float))
        )
        return MoleculeSpec(atoms=atoms, bonds=self.bonds, rotatable=self.rotatable, name=self.name)


@dataclass(frozen=True)
class Conformation:
    positions: np.ndarray


def element_of_uff_type(uff_type: str) -> str:
    """UFF keys start with the element symbol, padded with ``_`` when it has one letter."""
    return uff_type[:2].rstrip("_0123456789")


def parse_molecule(text: str, uff: dict | None = None, name: str = "molecule") -> MoleculeSpec:
    """
    Parse a molecule-spec document.

    :param text: Document with ``atom``, ``bond`` and ``torsion`` lines.
    :param uff: UFF parameter table used to validate atom types; the bundled table by default.
    :param name: Label stored on the returned spec.
    :return: Validated MoleculeSpec.
    """
    if uff is None:
        from confsearch.energy import load_uff_parameters

        uff = load_uff_parameters()

    atoms: dict[int, Atom] = {}
    bonds: list[tuple[int, int]] = []
    torsions: list[tuple[int, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        keyword = fields[0]
        try:
            if keyword == "atom":
                if len(fields) != 7:
                    raise MoleculeFormatError(f"line {lineno}: atom needs 6 fields")
                index = int(fields[1])
                element, uff_type = fields[2], fields[3]
                position = tuple(float(x) for x in fields[4:7])
                if not all(np.isfinite(position)):
                    raise MoleculeFormatError(f"line {lineno}: non-finite coordinate")
                if index in atoms:
                    raise MoleculeFormatError(f"line {lineno}: duplicate atom index {index}")
                if uff_type not in uff:
                    raise MoleculeFormatError(f"line {lineno}: unknown uff_type {uff_type!r}")
                if element_of_uff_type(uff_type) != element:
                    raise MoleculeFormatError(f"line {lineno}: unknown element {element!r} for uff_type {uff_type!r}")
                atoms[index] = Atom(index=index, element=element, position=position, uff_type=uff_type)
            elif keyword in ("bond", "torsion"):
                if len(fields) != 3:
                    raise MoleculeFormatError(f"line {lineno}: {keyword} needs 2 atom indices")
                i, j = int(fields[1]), int(fields[2])
                if i == j:
                    raise MoleculeFormatError(f"line {lineno}: {keyword} joins atom {i} to itself")
                (bonds if keyword == "bond" else torsions).append((min(i, j), max(i, j)))
            else:
                raise MoleculeFormatError(f"line {lineno}: unknown record {keyword!r}")
        except MoleculeFormatError:
            raise
        except ValueError as err:
            raise MoleculeFormatError(f"line {lineno}: {err}") from err

    if sorted(atoms) != list(range(len(atoms))):
        raise MoleculeFormatError("atom indices must be contiguous from 0")
    if len(set(bonds)) != len(bonds):
        raise MoleculeFormatError("duplicate bond")
    for bond in bonds:
        if bond[0] < 0 or bond[1] >= len(atoms):
            raise MoleculeFormatError(f"bond {bond} references a missing atom")

    bond_index = {bond: k for k, bond in enumerate(bonds)}
    rotatable = []
    for torsion in torsions:
        if torsion not in bond_index:
            raise MoleculeFormatError(f"torsion {torsion} is not declared as a bond")
        if bond_index[torsion] in rotatable:
            raise MoleculeFormatError(f"torsion {torsion} declared twice")
        rotatable.append(bond_index[torsion])

    spec = MoleculeSpec(
        atoms=tuple(atoms[i] for i in range(len(atoms))), bonds=tuple(bonds), rotatable=tuple(rotatable), name=name
    )
    validate_molecule(spec)
    return spec


def validate_molecule(spec: MoleculeSpec) -> None:
    graph = spec.bond_graph
    if spec.n_atoms == 0:
        raise MoleculeFormatError("molecule has no atoms")
    if not nx.is_connected(graph):
        raise MoleculeFormatError("disconnected bond graph")
    bridges = {tuple(sorted(edge)) for edge in nx.bridges(graph)}
    for k in spec.rotatable:
        if spec.bonds[k] not in bridges:
            raise MoleculeFormatError(f"rotatable bond on cycle: {spec.bonds[k]}")


def load_molecule(path: Path, uff: dict | None = None) -> MoleculeSpec:
    path = Path(path)
    logger.info("Reading molecule from %s", path)
    return parse_molecule(path.read_text(encoding="utf-8"), uff=uff, name=path.stem)


def format_molecule(spec: MoleculeSpec) -> str:
    lines = [f"# {spec.name}: {spec.n_atoms} atoms, {spec.n_torsions} torsions"]
    for atom in spec.atoms:
        x, y, z = atom.position
        lines.append(f"atom {atom.index} {atom.element} {atom.uff_type} {x:.10f} {y:.10f} {z:.10f}")
    for i, j in spec.bonds:
        lines.append(f"bond {i} {j}")
    for k in spec.rotatable:
        i, j = spec.bonds[k]
        lines.append(f"torsion {i} {j}")
    return "\n".join(lines) + "\n"


def write_molecule(spec: MoleculeSpec, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_molecule(spec), encoding="utf-8")


def partition_rigid_bodies(spec: MoleculeSpec) -> RigidBodyGraph:
    """
    Split the molecule at its rotatable bonds.

    Connected components of the bond graph without rotatable bonds become rigid bodies, numbered by their
    smallest atom index so that body 0 holds atom 0 and serves as the fixed root.
    """
    rotatable_bonds = {spec.bonds[k] for k in spec.rotatable}
    rigid = nx.Graph()
    rigid.add_nodes_from(range(spec.n_atoms))
    rigid.add_edges_from(bond for bond in spec.bonds if bond not in rotatable_bonds)

    components = sorted(nx.connected_components(rigid), key=min)
    bodies = tuple(RigidBody(id=b, atom_indices=frozenset(c)) for b, c in enumerate(components))
    atom_body = [0] * spec.n_atoms
    for body in bodies:
        for atom in body.atom_indices:
            atom_body[atom] = body.id

    tree = nx.Graph()
    tree.add_nodes_from(range(len(bodies)))
    tree.add_edges_from((atom_body[spec.bonds[k][0]], atom_body[spec.bonds[k][1]]) for k in spec.rotatable)
    depth = nx.single_source_shortest_path_length(tree, 0)

    torsions = []
    for index, k in enumerate(spec.rotatable):
        i, j = spec.bonds[k]
        if depth[atom_body[i]] > depth[atom_body[j]]:
            i, j = j, i
        torsions.append(
            TorsionEdge(
                index=index,
                bond=spec.bonds[k],
                proximal_body=atom_body[i],
                distal_body=atom_body[j],
                proximal_atom=i,
                distal_atom=j,
            )
        )

    return RigidBodyGraph(bodies=bodies, torsions=tuple(torsions), atom_body=tuple(atom_body))


def torsion_path(graph: RigidBodyGraph, a: int, b: int) -> list[int]:
    """Torsion indices on the tree path from body ``a`` to body ``b``, in path order."""
    for body in (a, b):
        if body not in graph.tree:
            raise ValueError(f"unknown rigid body {body}")
    if a == b:
        return []
    nodes = nx.shortest_path(graph.tree, a, b)
    return [graph.tree.edges[u, v]["torsion"] for u, v in zip(nodes[:-1], nodes[1:])]


def apply_torsions(spec: MoleculeSpec, t) -> Conformation:
    """
    Realize a torsion vector as Cartesian coordinates.

    Each torsion rotates the part of the molecule beyond its distal body by ``t[i]`` degrees, right-handed
    about the axis from the proximal to the distal bond atom. Deeper torsions are applied first so that every
    rotation axis is still at its input position when it is used.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.shape[0] != spec.n_torsions:
        raise ValueError(f"torsion vector has length {t.shape[0]}, molecule has {spec.n_torsions} torsions")

    positions = np.array(spec.positions)
    graph = spec.rigid_bodies
    for edge in spec._rotation_plan:
        angle = t[edge.index]
        if np.mod(angle, 360.0) == 0.0:
            continue
        origin = positions[edge.proximal_atom]
        axis = positions[edge.distal_atom] - origin
        axis = axis / np.linalg.norm(axis)
        rotation = Rotation.from_rotvec(axis * np.deg2rad(angle))
        moving = graph.subtree_atoms(edge.index)
        positions[moving] = rotation.apply(positions[moving] - origin) + origin
    return Conformation(positions=positions)


def _place(a: np.ndarray, b: np.ndarray, c: np.ndarray, bond: float, angle: float, dihedral: float) -> np.ndarray:
    """Position of d with |cd| = bond, angle bcd and dihedral abcd given in degrees."""
    angle, dihedral = np.deg2rad(angle), np.deg2rad(dihedral)
    bc = (c - b) / np.linalg.norm(c - b)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array(
        [-bond * np.cos(angle), bond * np.sin(angle) * np.cos(dihedral), bond * np.sin(angle) * np.sin(dihedral)]
    )
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def _zigzag(n: int) -> np.ndarray:
    chain = np.zeros((n, 3))
    chain[1] = [CC_BOND, 0.0, 0.0]
    if n > 2:
        theta = np.deg2rad(TETRAHEDRAL)
        chain[2] = chain[1] + CC_BOND * np.array([-np.cos(theta), np.sin(theta), 0.0])
    for k in range(3, n):
        chain[k] = _place(chain[k - 3], chain[k - 2], chain[k - 1], CC_BOND, TETRAHEDRAL, 180.0)
    return chain


class _Builder:
    def __init__(self, name: str):
        self.name = name
        self.atoms: list[Atom] = []
        self.bonds: list[tuple[int, int]] = []
        self.torsions: list[tuple[int, int]] = []

    def add_atom(self, element: str, uff_type: str, position: np.ndarray) -> int:
        index = len(self.atoms)
        self.atoms.append(Atom(index, element, tuple(float(x) for x in position), uff_type))
        return index

    def add_bond(self, i: int, j: int, rotatable: bool = False) -> None:
        self.bonds.append((min(i, j), max(i, j)))
        if rotatable:
            self.torsions.append((min(i, j), max(i, j)))

    def add_methylene_hydrogens(self, carbon: int, prev: np.ndarray, nxt: np.ndarray) -> None:
        c = np.array(self.atoms[carbon].position)
        for dihedral in (120.0, -120.0):
            h = self.add_atom("H", "H_", _place(nxt, prev, c, CH_BOND, TETRAHEDRAL, dihedral))
            self.add_bond(carbon, h)

    def add_methyl_hydrogens(self, carbon: int, neighbour: np.ndarray, beyond: np.ndarray) -> None:
        c = np.array(self.atoms[carbon].position)
        for dihedral in (60.0, 180.0, 300.0):
            h = self.add_atom("H", "H_", _place(beyond, neighbour, c, CH_BOND, TETRAHEDRAL, dihedral))
            self.add_bond(carbon, h)

    def build(self) -> MoleculeSpec:
        bond_index = {bond: k for k, bond in enumerate(self.bonds)}
        spec = MoleculeSpec(
            atoms=tuple(self.atoms),
            bonds=tuple(self.bonds),
            rotatable=tuple(bond_index[t] for t in self.torsions),
            name=self.name,
        )
        validate_molecule(spec)
        return spec


def generate_alkane(n_carbons: int) -> MoleculeSpec:
    """
    Idealized all-anti n-alkane with its n-3 internal C-C bonds declared rotatable.

    Carbons take indices 0..n-1, hydrogens follow.
    """
    if n_carbons < 2:
        raise ValueError("an alkane needs at least 2 carbons")

    # Virtual carbons at both ends serve as dihedral references for the terminal methyl groups.
    chain = _zigzag(n_carbons + 2)
    builder = _Builder(name=f"C{n_carbons}H{2 * n_carbons + 2}")
    for k in range(n_carbons):
        builder.add_atom("C", "C_3", chain[k + 1])
    for k in range(n_carbons - 1):
        builder.add_bond(k, k + 1, rotatable=1 <= k <= n_carbons - 3)

    for k in range(n_carbons):
        pos = k + 1
        if k == 0:
            builder.add_methyl_hydrogens(k, chain[pos + 1], chain[pos + 2])
        elif k == n_carbons - 1:
            builder.add_methyl_hydrogens(k, chain[pos - 1], chain[pos - 2])
        else:
            builder.add_methylene_hydrogens(k, chain[pos - 1], chain[pos + 1])

    return builder.build()


def generate_star(n_arms: int = 4, arm_carbons: int = 3) -> MoleculeSpec:
    """
    Hub carbon carrying ``n_arms`` straight alkyl arms of ``arm_carbons`` carbons each.

    The hub-to-arm bonds and every internal arm C-C bond except the terminal methyl bond are rotatable, so
    the rigid-body graph branches ``n_arms`` ways at the hub body. With ``arm_carbons=2`` it is a plain star.
    """
    if not 2 <= n_arms <= 4:
        raise ValueError("a tetrahedral hub carries 2 to 4 arms")
    if arm_carbons < 2:
        raise ValueError("arms need at least 2 carbons")

    directions = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3.0)
    builder = _Builder(name=f"star{n_arms}x{arm_carbons}")
    hub = builder.add_atom("C", "C_3", np.zeros(3))

    arms = []
    for arm in range(n_arms):
        chain = [np.zeros(3), CC_BOND * directions[arm]]
        reference = CC_BOND * directions[(arm + 1) % 4]
        for k in range(2, arm_carbons + 1):
            a = reference if k == 2 else chain[k - 3]
            chain.append(_place(a, chain[k - 2], chain[k - 1], CC_BOND, TETRAHEDRAL, 180.0))
        indices = [hub]
        for k in range(1, arm_carbons + 1):
            indices.append(builder.add_atom("C", "C_3", chain[k]))
            builder.add_bond(indices[k - 1], indices[k], rotatable=k < arm_carbons)
        arms.append((chain, indices))

    for arm in range(n_arms, 4):
        h = builder.add_atom("H", "H_", CH_BOND * directions[arm])
        builder.add_bond(hub, h)

    for chain, indices in arms:
        for k in range(1, arm_carbons):
            builder.add_methylene_hydrogens(indices[k], chain[k - 1], chain[k + 1])
        builder.add_methyl_hydrogens(indices[arm_carbons], chain[arm_carbons - 1], chain[arm_carbons - 2])

    return builder.build()
