import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlqls.errors import CapacityError, ContractViolation
from rlqls.ising import (
    InstanceSet,
    IsingProblem,
    TabuParams,
    annotate_instance_set,
    delta_energy,
    energy,
    generate_instance,
    gse_exhaustive,
    gse_tabu,
    load_instance_set,
    make_instance_set,
    random_config,
    save_instance_set,
)
from rlqls.seeding import substream

from conftest import seeded_config, seeded_problem


def two_spin_problem(j01=1.0, h=(0.0, 0.0)):
    couplings = np.array([[0.0, j01], [0.0, 0.0]])
    return IsingProblem(n=2, couplings=couplings, fields=np.array(h), id="two")


def decode(code: int, n: int) -> np.ndarray:
    bits = (code >> np.arange(n)) & 1
    return bits.astype(np.float64) * 2.0 - 1.0


def energy_reference(problem, config):
    """Straight-line O(n^2) double loop, independent of the production kernel."""
    total = 0.0
    for i in range(problem.n):
        for j in range(i + 1, problem.n):
            total += problem.couplings[i, j] * config[i] * config[j]
    for i in range(problem.n):
        total += problem.fields[i] * config[i]
    return total


class TestEnergy:
    def test_empty_hamiltonian(self):
        p = IsingProblem(n=3, couplings=np.zeros((3, 3)), fields=np.zeros(3), id="z")
        assert energy(p, np.array([1.0, -1.0, 1.0])) == 0.0

    def test_single_pair(self):
        p = two_spin_problem(j01=1.0)
        assert energy(p, np.array([1.0, 1.0])) == 1.0
        assert energy(p, np.array([1.0, -1.0])) == -1.0

    def test_matches_double_loop_oracle(self):
        p = generate_instance(8, substream(42, "gen"))
        all_up = np.ones(8)
        assert energy(p, all_up) == pytest.approx(energy_reference(p, all_up), abs=1e-12)

    def test_random_configs_match_oracle(self):
        p = seeded_problem(10)
        for k in range(20):
            c = seeded_config(10, seed=k)
            assert energy(p, c) == pytest.approx(energy_reference(p, c), abs=1e-10)

    def test_dimension_mismatch(self):
        p = two_spin_problem()
        with pytest.raises(ContractViolation):
            energy(p, np.ones(3))

    def test_spin_flip_symmetry_zero_fields(self):
        rng = substream(3, "sym")
        couplings = np.triu(rng.uniform(-1, 1, (6, 6)), k=1)
        p = IsingProblem(n=6, couplings=couplings, fields=np.zeros(6), id="sym")
        for k in range(25):
            c = random_config(6, rng)
            assert energy(p, c) == pytest.approx(energy(p, -c), abs=1e-12)


class TestDeltaEnergy:
    def test_empty_flip_set(self):
        p = seeded_problem(6)
        assert delta_energy(p, np.ones(6), set()) == 0.0

    def test_single_flip_two_spins(self):
        p = two_spin_problem(j01=1.0)
        assert delta_energy(p, np.array([1.0, 1.0]), {0}) == -2.0

    def test_thousand_random_flip_sets(self):
        rng = substream(99, "delta")
        problems = [seeded_problem(16, seed=s) for s in range(4)]
        for k in range(1000):
            p = problems[k % 4]
            c = random_config(16, rng)
            size = int(rng.integers(1, 6))
            flips = set(int(i) for i in rng.choice(16, size=size, replace=False))
            flipped = c.copy()
            for i in flips:
                flipped[i] = -flipped[i]
            expected = energy(p, flipped) - energy(p, c)
            assert abs(delta_energy(p, c, flips) - expected) <= 1e-9

    @given(
        n=st.integers(2, 10),
        seed=st.integers(0, 10_000),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_matches_energy_difference(self, n, seed, data):
        p = generate_instance(n, substream(seed, "hyp-gen"))
        c = random_config(n, substream(seed, "hyp-cfg"))
        flips = data.draw(st.sets(st.integers(0, n - 1)))
        flipped = c.copy()
        for i in flips:
            flipped[i] = -flipped[i]
        expected = energy(p, flipped) - energy(p, c)
        assert abs(delta_energy(p, c, flips) - expected) <= 1e-9

    def test_out_of_range(self):
        p = two_spin_problem()
        with pytest.raises(ContractViolation):
            delta_energy(p, np.ones(2), {5})

    def test_duplicate_flips(self):
        p = two_spin_problem()
        with pytest.raises(ContractViolation):
            delta_energy(p, np.ones(2), [0, 0])


class TestGenerate:
    def test_full_connectivity(self):
        p = generate_instance(4, substream(1, "g"))
        iu = np.triu_indices(4, 1)
        values = p.couplings[iu]
        assert values.size == 6
        assert p.fields.size == 4
        assert np.all(np.abs(values) < 1.0) and np.all(np.abs(p.fields) < 1.0)

    def test_determinism(self):
        a = generate_instance(7, substream(5, "d"))
        b = generate_instance(7, substream(5, "d"))
        assert np.array_equal(a.couplings, b.couplings)
        assert np.array_equal(a.fields, b.fields)
        assert a.id == b.id

    def test_coefficient_distribution(self):
        rng = substream(11, "dist")
        values = []
        for _ in range(25):
            p = generate_instance(20, rng)
            values.extend(p.couplings[np.triu_indices(20, 1)])
            values.extend(p.fields)
        values = np.array(values[:10_000])
        assert abs(values.mean()) < 0.02
        assert values.min() > -1.0 and values.max() < 1.0

    def test_too_small(self):
        with pytest.raises(ContractViolation):
            generate_instance(1, substream(0, "g"))


class TestGseExhaustive:
    def test_two_spins_antialigned(self):
        gse, config = gse_exhaustive(two_spin_problem(j01=1.0))
        assert gse == -1.0
        assert config[0] * config[1] == -1.0

    def test_single_spin_field(self):
        p = IsingProblem(n=1, couplings=np.zeros((1, 1)), fields=np.array([0.5]), id="s")
        gse, config = gse_exhaustive(p)
        assert gse == -0.5
        assert config[0] == -1.0

    def test_matches_enumeration_through_energy(self):
        p = seeded_problem(12)
        gse, config = gse_exhaustive(p)
        brute = min(energy(p, decode(code, 12)) for code in range(4096))
        assert gse == brute
        assert energy(p, config) == gse

    def test_lower_bounds_random_configs(self):
        p = seeded_problem(10)
        gse, _ = gse_exhaustive(p)
        rng = substream(17, "lb")
        for _ in range(1000):
            assert gse <= energy(p, random_config(10, rng)) + 1e-12

    def test_symmetry_speedup_matches(self):
        rng = substream(23, "symgse")
        couplings = np.triu(rng.uniform(-1, 1, (10, 10)), k=1)
        p = IsingProblem(n=10, couplings=couplings, fields=np.zeros(10), id="sym")
        full_e, full_c = gse_exhaustive(p, use_symmetry=False)
        half_e, half_c = gse_exhaustive(p, use_symmetry=True)
        assert half_e == full_e
        assert energy(p, half_c) == full_e

    def test_symmetry_requires_zero_fields(self):
        with pytest.raises(ContractViolation):
            gse_exhaustive(two_spin_problem(h=(0.1, 0.0)), use_symmetry=True)

    def test_capacity_error_names_tabu(self):
        p = IsingProblem(n=25, couplings=np.zeros((25, 25)), fields=np.zeros(25), id="big")
        with pytest.raises(CapacityError, match="gse_tabu"):
            gse_exhaustive(p)


class TestGseTabu:
    def test_separable_all_fields_positive(self):
        n = 9
        fields = np.linspace(0.2, 1.0, n)
        p = IsingProblem(n=n, couplings=np.zeros((n, n)), fields=fields, id="sep")
        gse, config = gse_tabu(p, rng=substream(2, "t"))
        assert np.all(config == -1.0)
        assert gse == pytest.approx(-fields.sum(), abs=1e-12)

    def test_never_below_exhaustive(self):
        for seed in range(20):
            p = seeded_problem(10, seed=seed)
            exact, _ = gse_exhaustive(p)
            found, config = gse_tabu(p, rng=substream(seed, "tb"))
            assert found >= exact - 1e-12
            assert energy(p, config) == found

    def test_usually_finds_optimum_n12(self):
        hits = 0
        for seed in range(20):
            p = seeded_problem(12, seed=seed + 500)
            exact, _ = gse_exhaustive(p)
            found, _ = gse_tabu(p, rng=substream(seed, "tb12"))
            hits += found == exact
        assert hits >= 18

    def test_deterministic_given_seed(self):
        p = seeded_problem(14)
        a = gse_tabu(p, rng=substream(4, "det"))
        b = gse_tabu(p, rng=substream(4, "det"))
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])

    def test_custom_params(self):
        p = seeded_problem(8)
        gse, _ = gse_tabu(p, TabuParams(tenure=5, iters_per_restart=100, restarts=3),
                          substream(0, "cp"))
        exact, _ = gse_exhaustive(p)
        assert gse >= exact - 1e-12


class TestInstanceSets:
    def test_regeneration_is_bit_identical(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        save_instance_set(a, make_instance_set(6, 5, 123, "train"))
        save_instance_set(b, make_instance_set(6, 5, 123, "train"))
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_exact(self, tmp_path):
        iset = annotate_instance_set(make_instance_set(8, 3, 9, "test"))
        path = tmp_path / "set.json"
        save_instance_set(path, iset)
        loaded = load_instance_set(path)
        assert loaded.seed == 9 and loaded.kind == "test"
        for orig, back in zip(iset.problems, loaded.problems):
            assert np.array_equal(orig.couplings, back.couplings)
            assert np.array_equal(orig.fields, back.fields)
            assert orig.gse_ref == back.gse_ref
            assert back.gse_provenance == "exhaustive"

    def test_schema_fields(self, tmp_path):
        import json

        path = tmp_path / "set.json"
        save_instance_set(path, make_instance_set(4, 2, 0, "train"))
        data = json.loads(path.read_text())
        assert set(data) == {"seed", "kind", "problems"}
        record = data["problems"][0]
        assert set(record) == {"id", "n", "couplings", "fields", "gse_ref", "gse_provenance"}
        pairs = [(i, j) for i, j, _ in record["couplings"]]
        assert pairs == sorted(pairs)
        assert len(pairs) == 6

    def test_unique_ids_enforced(self):
        p = seeded_problem(4)
        with pytest.raises(ContractViolation):
            InstanceSet(problems=[p, p], seed=0, kind="train")

    def test_annotate_tabu_provenance(self):
        iset = make_instance_set(6, 2, 3, "train")
        out = annotate_instance_set(iset, method="tabu", seed=1)
        assert all(p.gse_provenance == "tabu" for p in out.problems)
        exact = annotate_instance_set(iset, method="exhaustive")
        for t, e in zip(out.problems, exact.problems):
            assert t.gse_ref >= e.gse_ref - 1e-12


class TestProblemValidation:
    def test_rejects_lower_triangle(self):
        couplings = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ContractViolation):
            IsingProblem(n=2, couplings=couplings, fields=np.zeros(2), id="bad")

    def test_rejects_non_finite(self):
        couplings = np.array([[0.0, np.inf], [0.0, 0.0]])
        with pytest.raises(ContractViolation):
            IsingProblem(n=2, couplings=couplings, fields=np.zeros(2), id="bad")

    def test_immutable_arrays(self):
        p = seeded_problem(4)
        with pytest.raises(ValueError):
            p.couplings[0, 1] = 3.0
