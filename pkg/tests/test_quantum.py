import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, circuit_expectations, rel_err
from qhml.errors import ConfigurationError, ShapeError
from qhml.quantum import (
    CircuitConfig, Head, StateVector, apply_cnot, apply_gate, build_circuit, circuit_forward, circuit_gradient,
    circuit_vjp, expectation_z, init_state, measure, plan_from_dict, simulate,
)

CONFIGS_SMALL = [(n1, n2, n3, h) for n1 in (1, 2, 3) for n2 in (1, 2) for n3 in (1, 2) for h in ("multi", "single")]


class TestStateVector:
    @pytest.mark.parametrize("n", [1, 2, 8])
    def test_init_is_basis_zero(self, n):
        s = init_state(n)
        expected = np.zeros(1 << n)
        expected[0] = 1
        np.testing.assert_array_equal(s.amplitudes, expected)
        assert s.n_qubits == n
        assert s.norm_squared() == 1.0

    @pytest.mark.parametrize("n", [0, 25, -1, 2.5])
    def test_init_guard(self, n):
        with pytest.raises(ConfigurationError):
            init_state(n)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ShapeError):
            StateVector(np.ones(3))


class TestGates:
    def test_rx_pi_flips(self):
        s = apply_gate(init_state(1), "RX", 0, np.pi)
        np.testing.assert_allclose(s.amplitudes, [0, -1j], atol=1e-15)
        assert expectation_z(s, 0) == pytest.approx(-1.0, abs=1e-15)

    @pytest.mark.parametrize("lam", np.linspace(-7, 7, 11))
    def test_rz_keeps_z(self, lam):
        assert expectation_z(apply_gate(init_state(1), "RZ", 0, lam), 0) == pytest.approx(1.0, abs=1e-15)

    def test_rx_half_pi_equator(self):
        assert abs(expectation_z(apply_gate(init_state(1), "RX", 0, np.pi / 2), 0)) < 1e-12

    @pytest.mark.parametrize("theta", np.linspace(-4, 4, 9))
    def test_rx_cos(self, theta):
        assert expectation_z(apply_gate(init_state(1), "RX", 0, theta), 0) == pytest.approx(np.cos(theta), abs=1e-13)

    def test_rz_matrix_convention(self):
        s = apply_gate(apply_gate(init_state(1), "H", 0), "RZ", 0, 0.7)
        np.testing.assert_allclose(s.amplitudes, np.array([np.exp(-0.35j), np.exp(0.35j)]) / np.sqrt(2), atol=1e-15)

    def test_little_endian(self):
        s = apply_gate(init_state(3), "RX", 1, np.pi)
        assert np.argmax(np.abs(s.amplitudes)) == 0b010

    def test_bad_qubit_and_gate(self):
        with pytest.raises(IndexError):
            apply_gate(init_state(2), "H", 2)
        with pytest.raises(ValueError):
            apply_gate(init_state(2), "Y", 0)
        with pytest.raises(ValueError):
            apply_gate(init_state(2), "RZ", 0, np.nan)


class TestCnot:
    def basis(self, bits, n=2):
        amps = np.zeros(1 << n, dtype=complex)
        amps[bits] = 1
        return StateVector(amps)

    def test_truth_table(self):
        # |10> means qubit 1 (control) set: index 0b10
        assert np.argmax(np.abs(apply_cnot(self.basis(0b10), 1, 0).amplitudes)) == 0b11
        assert np.argmax(np.abs(apply_cnot(self.basis(0b00), 1, 0).amplitudes)) == 0b00

    def test_bell(self):
        s = apply_gate(init_state(2), "H", 1)
        apply_cnot(s, 1, 0)
        np.testing.assert_allclose(s.amplitudes, [1 / np.sqrt(2), 0, 0, 1 / np.sqrt(2)], atol=1e-15)

    def test_same_qubit(self):
        with pytest.raises(ValueError):
            apply_cnot(init_state(2), 1, 1)


class TestBuildCircuit:
    def test_counts_4_2_1(self):
        plan = build_circuit(CircuitConfig(4, 2, 1, Head.MULTI))
        assert plan.gate_counts() == {"H": 4, "RZ": 8, "RX": 4, "CNOT": 4}
        assert plan.measured == (0, 1, 2, 3)

    def test_smallest(self):
        plan = build_circuit(CircuitConfig(1, 1, 1, Head.SINGLE))
        assert [op.gate for op in plan.ops] == ["H", "RZ", "RX"]
        assert plan.n_outputs == 1

    def test_largest_slots(self):
        plan = build_circuit(CircuitConfig(8, 4, 4))
        assert (plan.n_inputs, plan.n_params) == (32, 32)

    def test_single_head_chain(self):
        plan = build_circuit(CircuitConfig(3, 1, 1, Head.SINGLE))
        assert [op.qubits for op in plan.ops[-2:]] == [(2, 1), (1, 0)]

    def test_json_round_trip(self):
        plan = build_circuit(CircuitConfig(3, 2, 2, Head.SINGLE))
        assert plan_from_dict(json.loads(plan.to_json())) == plan

    @pytest.mark.parametrize("bad", [(0, 1, 1), (1, 0, 1), (1, 1, -2), (25, 1, 1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigurationError):
            CircuitConfig(*bad)


class TestForward:
    @pytest.mark.parametrize("phi,theta,expected", [(0, 0, 0), (np.pi / 2, np.pi / 2, 1)])
    def test_one_qubit_closed_form(self, phi, theta, expected):
        plan = build_circuit(CircuitConfig(1, 1, 1))
        assert circuit_forward(plan, [phi], [theta])[0] == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("cfg", [(2, 2, 1), (4, 2, 1), (3, 1, 3)])
    def test_zero_angles_multi_zero(self, cfg):
        plan = build_circuit(CircuitConfig(*cfg))
        np.testing.assert_allclose(circuit_forward(plan, np.zeros(plan.n_inputs), np.zeros(plan.n_params)), 0, atol=1e-15)

    @pytest.mark.parametrize("cfg", CONFIGS_SMALL)
    def test_matches_dense_oracle(self, cfg, rng):
        n1, n2, n3, head = cfg
        plan = build_circuit(CircuitConfig(n1, n2, n3, Head(head)))
        for _ in range(5):
            x = rng.uniform(-2 * np.pi, 2 * np.pi, plan.n_inputs)
            t = rng.uniform(-2 * np.pi, 2 * np.pi, plan.n_params)
            np.testing.assert_allclose(circuit_forward(plan, x, t), circuit_expectations(n1, n2, n3, head, x, t), atol=1e-12)

    def test_batch_matches_rows(self, rng):
        plan = build_circuit(CircuitConfig(3, 2, 2))
        x = rng.normal(size=(6, plan.n_inputs))
        t = rng.normal(size=plan.n_params)
        batch = circuit_forward(plan, x, t)
        for i in range(6):
            np.testing.assert_allclose(batch[i], circuit_forward(plan, x[i], t), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(measure(plan, simulate(plan, x, t)), batch)

    def test_head_equivalence_n1_1(self, rng):
        x, t = rng.normal(size=2), rng.normal(size=3)
        a = circuit_forward(build_circuit(CircuitConfig(1, 2, 3, Head.MULTI)), x, t)
        b = circuit_forward(build_circuit(CircuitConfig(1, 2, 3, Head.SINGLE)), x, t)
        np.testing.assert_array_equal(a, b)

    def test_shape_errors(self):
        plan = build_circuit(CircuitConfig(2, 1, 1))
        with pytest.raises(ShapeError):
            circuit_forward(plan, [0.0], [0.0, 0.0])
        with pytest.raises(ShapeError):
            circuit_forward(plan, [0.0, 0.0], [0.0])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.sampled_from(["multi", "single"]),
           st.integers(0, 2**32 - 1))
    def test_range_and_periodicity(self, n1, n2, n3, head, seed):
        r = np.random.default_rng(seed)
        plan = build_circuit(CircuitConfig(n1, n2, n3, Head(head)))
        x = r.uniform(-50, 50, plan.n_inputs)
        t = r.uniform(-50, 50, plan.n_params)
        out = circuit_forward(plan, x, t)
        assert np.all(np.abs(out) <= 1 + 1e-12)
        i = r.integers(plan.n_inputs)
        x2 = x.copy()
        x2[i] += 2 * np.pi
        np.testing.assert_allclose(circuit_forward(plan, x2, t), out, atol=1e-10)


class TestGradients:
    def test_rx_gradient_values(self):
        plan = build_circuit(CircuitConfig(1, 1, 1))
        # H then RZ(pi/2) puts the state on +y; RX(theta) then gives <Z> = sin(theta)
        assert circuit_gradient(plan, [np.pi / 2], [0.0]).params[0, 0] == pytest.approx(1.0, abs=1e-14)
        assert circuit_gradient(plan, [np.pi / 2], [np.pi / 2]).params[0, 0] == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("cfg", [(1, 1, 1, "multi"), (2, 2, 1, "multi"), (3, 1, 2, "single"), (4, 2, 1, "single")])
    def test_parameter_shift_vs_fd(self, cfg, rng):
        n1, n2, n3, head = cfg
        plan = build_circuit(CircuitConfig(n1, n2, n3, Head(head)))
        x = rng.uniform(-np.pi, np.pi, plan.n_inputs)
        t = rng.uniform(-np.pi, np.pi, plan.n_params)
        jac = circuit_gradient(plan, x, t)
        for o in range(plan.n_outputs):
            fd_x = central_diff(lambda v: circuit_expectations(n1, n2, n3, head, v, t)[o], x)
            fd_t = central_diff(lambda v: circuit_expectations(n1, n2, n3, head, x, v)[o], t)
            assert rel_err(jac.inputs[o], fd_x) < 1e-6
            assert rel_err(jac.params[o], fd_t) < 1e-6

    @pytest.mark.parametrize("head", [Head.MULTI, Head.SINGLE])
    def test_adjoint_matches_parameter_shift(self, head, rng):
        plan = build_circuit(CircuitConfig(3, 2, 2, head))
        x = rng.normal(size=(5, plan.n_inputs))
        t = rng.normal(size=plan.n_params)
        g = rng.normal(size=(5, plan.n_outputs))
        gx, gp = circuit_vjp(plan, x, t, g)
        jac = circuit_gradient(plan, x, t)
        np.testing.assert_allclose(gx, np.einsum("bo,boi->bi", g, jac.inputs), atol=1e-12)
        np.testing.assert_allclose(gp, np.einsum("bo,boi->i", g, jac.params), atol=1e-12)

    def test_vjp_shape_check(self):
        plan = build_circuit(CircuitConfig(2, 1, 1))
        with pytest.raises(ShapeError):
            circuit_vjp(plan, np.zeros((3, 2)), np.zeros(2), np.zeros((3, 1)))
