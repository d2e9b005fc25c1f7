import itertools

import numpy as np
import pytest

from confsearch.encoding import (
    Discretization,
    InfeasibleSampleError,
    OneHotLayout,
    QuboProblem,
    build_neighbourhood_qubo,
    decode_bits,
    encode_levels,
    feasible_energy,
    ising_energy,
    penalty_auto,
    qubo_energies,
    qubo_energy,
    qubo_from_document,
    qubo_to_document,
    qubo_to_ising,
    random_qubo,
)
from confsearch.energy import EnergyModel, EvalCounter
from confsearch.neighbourhoods import TorsionSubset, allocate_levels, neighbourhood_change
from confsearch.solvers import solve_brute


def all_bitstrings(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)


def test_uniform_discretization():
    theta = Discretization.uniform(16)
    assert theta.d == 16
    assert theta.theta[1] == 22.5
    assert theta.index_of(382.5) == 1
    assert theta.index_of(-22.5) == 15
    with pytest.raises(ValueError):
        theta.index_of(10.0)
    with pytest.raises(ValueError):
        Discretization(theta=(0.0, 90.0, 90.0))
    with pytest.raises(ValueError):
        Discretization(theta=(0.0,))


def test_layout():
    layout = OneHotLayout(blocks=((3, (0.0, 120.0)), (1, (0.0, 90.0, 180.0))))
    assert layout.torsions == (3, 1)
    assert layout.sizes == (2, 3)
    assert layout.offsets == (0, 2)
    assert layout.n == 5
    assert layout.variable(1, 2) == 4
    with pytest.raises(ValueError):
        OneHotLayout(blocks=((0, (0.0,)), (0, (90.0,))))


def test_qubo_to_ising_example():
    q = QuboProblem(n=2, linear=np.array([-1.0, 2.0]), quadratic={(0, 1): 4.0})
    ising = qubo_to_ising(q)
    np.testing.assert_allclose(ising.h, [0.5, 2.0])
    assert ising.J == {(0, 1): 1.0}
    assert ising.offset == 1.5


def test_zero_qubo_maps_to_zero_ising():
    ising = qubo_to_ising(QuboProblem(n=3, linear=np.zeros(3), quadratic={}))
    np.testing.assert_array_equal(ising.h, np.zeros(3))
    assert ising.J == {}
    assert ising.offset == 0.0


def test_qubo_to_ising_preserves_energies(rng):
    for _ in range(50):
        q = random_qubo(int(rng.integers(1, 11)), rng)
        ising = qubo_to_ising(q)
        for bits in all_bitstrings(q.n):
            assert ising_energy(ising, 2 * bits - 1) == pytest.approx(qubo_energy(q, bits), abs=1e-12)


def test_qubo_energy(rng):
    q = random_qubo(6, rng)
    assert qubo_energy(q, np.zeros(6)) == q.offset
    X = all_bitstrings(6)
    np.testing.assert_allclose(qubo_energies(q, X), [qubo_energy(q, x) for x in X], atol=1e-12)
    with pytest.raises(ValueError):
        qubo_energy(q, np.zeros(5))


def test_qubo_problem_validation():
    with pytest.raises(ValueError):
        QuboProblem(n=2, linear=np.zeros(3), quadratic={})
    with pytest.raises(ValueError):
        QuboProblem(n=2, linear=np.zeros(2), quadratic={(1, 0): 1.0})
    with pytest.raises(ValueError):
        QuboProblem(n=2, linear=np.array([np.nan, 0.0]), quadratic={})


def test_decode_bits():
    layout = OneHotLayout(blocks=((0, (0.0, 120.0, 240.0)), (2, (60.0, 180.0))))
    current = np.array([0.0, 45.0, 60.0])
    np.testing.assert_array_equal(decode_bits([0, 0, 1, 0, 1], layout, current), [240.0, 45.0, 180.0])
    with pytest.raises(InfeasibleSampleError):
        decode_bits([0, 0, 0, 0, 0], layout, current)
    with pytest.raises(InfeasibleSampleError):
        decode_bits([1, 1, 0, 0, 1], layout, current)
    assert not layout.is_feasible([1, 0, 0, 1, 1])
    np.testing.assert_array_equal(encode_levels(layout, current), [1, 0, 0, 1, 0])


def test_document_round_trip(rng):
    q = random_qubo(5, rng)
    copy = qubo_from_document(qubo_to_document(q))
    X = all_bitstrings(5)
    np.testing.assert_allclose(qubo_energies(copy, X), qubo_energies(q, X))


def test_penalty_auto():
    blocks = [np.array([0.0, 1.5]), np.array([[0.0, 3.0], [0.5, 2.0]])]
    assert penalty_auto(blocks, 2) == 2 * 3.0 + 1.0
    assert penalty_auto(blocks, 5) == 5 * 3.0 + 1.0
    assert penalty_auto([], 1) == 1.0


def _pentane_qubo(pentane, levels):
    model = EnergyModel(pentane)
    graph = pentane.rigid_bodies
    subset = TorsionSubset.from_torsions(graph, (0, 1))
    layout = OneHotLayout(blocks=((0, levels), (1, levels)))
    counter = EvalCounter()
    return model, build_neighbourhood_qubo(model, np.zeros(2), subset, layout, "auto", counter), counter


def test_two_level_pair_is_faithful(pentane):
    model, q, _ = _pentane_qubo(pentane, (0.0, 120.0))
    assert q.n == 4
    X = all_bitstrings(4)
    energies = qubo_energies(q, X)
    feasible = q.layout.feasible_mask(X)
    assert feasible.sum() == 4
    best = int(np.argmin(energies))
    assert feasible[best]

    counter = EvalCounter()
    exact = [model.total_energy(decode_bits(x, q.layout, np.zeros(2)), counter) for x in X[feasible]]
    np.testing.assert_allclose(energies[feasible], exact, atol=1e-6)
    np.testing.assert_allclose([feasible_energy(q, x) for x in X[feasible]], exact, atol=1e-6)
    assert energies[best] == pytest.approx(min(exact), abs=1e-6)


def test_infeasible_bits_pay_the_penalty(pentane):
    _, q, _ = _pentane_qubo(pentane, (0.0, 120.0))
    floor = q.offset - q.penalty * len(q.layout.blocks)
    for x in all_bitstrings(4):
        violated = sum(x[start : start + size].sum() != 1 for start, size in zip(q.layout.offsets, q.layout.sizes))
        assert qubo_energy(q, x) >= floor + q.penalty * violated - 1e-9


def test_single_torsion_subset(butane):
    model = EnergyModel(butane)
    theta = Discretization.uniform(8)
    subset = TorsionSubset.from_torsions(butane.rigid_bodies, (0,))
    layout = OneHotLayout(blocks=((0, theta.theta),))
    q = build_neighbourhood_qubo(model, [0.0], subset, layout, "auto", EvalCounter())
    assert all(i // 8 == j // 8 for i, j in q.quadratic)
    assert q.pairwise == {}

    counter = EvalCounter()
    scan = [model.total_energy([angle], counter) for angle in theta.theta]
    values = [feasible_energy(q, row) for row in np.eye(8, dtype=np.int8)]
    np.testing.assert_allclose(values, scan, atol=1e-6)
    assert min(values) == pytest.approx(min(scan), abs=1e-6)


def test_cold_cache_evaluation_count(star):
    model = EnergyModel(star)
    theta = Discretization.uniform(16)
    subset = TorsionSubset.from_torsions(star.rigid_bodies, (0, 1, 2))
    layout = allocate_levels(subset, 12, theta, np.zeros(4), np.random.default_rng(0))
    assert layout.sizes == (4, 4, 4)
    counter = EvalCounter()
    build_neighbourhood_qubo(model, np.zeros(4), subset, layout, "auto", counter)
    assert counter.count == 3 * 16 + 12


def test_layout_must_match_subset(pentane):
    model = EnergyModel(pentane)
    subset = TorsionSubset.from_torsions(pentane.rigid_bodies, (0, 1))
    layout = OneHotLayout(blocks=((0, (0.0, 90.0)),))
    with pytest.raises(ValueError):
        build_neighbourhood_qubo(model, np.zeros(2), subset, layout, "auto", EvalCounter())


@pytest.mark.parametrize("molecule", ["pentane", "hexane", "star", "hinge"])
def test_auto_penalty_keeps_minimum_feasible(molecule, request):
    spec = request.getfixturevalue(molecule)
    model = EnergyModel(spec)
    theta = Discretization.uniform(16)
    rng = np.random.default_rng(7)
    for _ in range(25):
        current = theta.random_vector(spec.n_torsions, rng)
        subset = neighbourhood_change(spec.rigid_bodies, rng)
        s = int(rng.integers(len(subset), min(12, 16 * len(subset)) + 1))
        layout = allocate_levels(subset, s, theta, current, rng)
        q = build_neighbourhood_qubo(model, current, subset, layout, "auto", EvalCounter())
        result = solve_brute(q)
        assert layout.is_feasible(result.best_bits)
        assert result.best_energy == pytest.approx(feasible_energy(q, result.best_bits), abs=1e-6)


@pytest.mark.parametrize("molecule", ["pentane", "hexane", "spider", "hinge"])
def test_feasible_energies_equal_the_energy_model(molecule, request):
    spec = request.getfixturevalue(molecule)
    model = EnergyModel(spec)
    theta = Discretization.uniform(16)
    rng = np.random.default_rng(11)
    for _ in range(50):
        current = theta.random_vector(spec.n_torsions, rng)
        subset = neighbourhood_change(spec.rigid_bodies, rng)
        s = int(rng.integers(len(subset), min(12, 16 * len(subset)) + 1))
        layout = allocate_levels(subset, s, theta, current, rng)
        q = build_neighbourhood_qubo(model, current, subset, layout, "auto", EvalCounter())
        for choice in itertools.product(*(range(size) for size in layout.sizes)):
            bits = np.zeros(layout.n, dtype=np.int8)
            for start, k in zip(layout.offsets, choice):
                bits[start + k] = 1
            expected = model.total_energy(decode_bits(bits, layout, current), EvalCounter())
            assert qubo_energy(q, bits) == pytest.approx(expected, rel=1e-9, abs=1e-6)


def test_explicit_penalty(pentane):
    model = EnergyModel(pentane)
    subset = TorsionSubset.from_torsions(pentane.rigid_bodies, (0, 1))
    layout = OneHotLayout(blocks=((0, (0.0, 120.0)), (1, (0.0, 120.0))))
    q = build_neighbourhood_qubo(model, np.zeros(2), subset, layout, 250.0, EvalCounter())
    assert q.penalty == 250.0
    assert q.quadratic[(0, 1)] == 500.0
