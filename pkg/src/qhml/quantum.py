"""Noiseless dense statevector simulation of the layered re-uploading circuit.

Amplitudes live in a flat complex128 array indexed by the basis-state integer,
little-endian: qubit 0 is the least significant bit. Every kernel accepts a
leading batch axis, so a whole minibatch of samples is simulated with the same
gate sequence in one pass; a single :class:`StateVector` is the batch-of-one case.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ShapeError

MAX_QUBITS = 24
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


class StateVector:
    """Mutable n-qubit pure state."""

    def __init__(self, amplitudes):
        amps = np.asarray(amplitudes, dtype=np.complex128).reshape(-1)
        n = amps.size.bit_length() - 1
        if amps.size < 2 or amps.size != 1 << n:
            raise ShapeError(f"amplitude count {amps.size} is not a power of two >= 2")
        self.amplitudes = amps
        self.n_qubits = n

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy())

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def __repr__(self) -> str:
        return f"StateVector(n_qubits={self.n_qubits})"


def init_state(n_qubits: int) -> StateVector:
    """Return |0...0> on ``n_qubits`` qubits."""
    if not isinstance(n_qubits, (int, np.integer)) or not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigurationError(f"n_qubits must be an integer in [1, {MAX_QUBITS}], got {n_qubits!r}")
    amps = np.zeros(1 << int(n_qubits), dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(amps)


# ---------------------------------------------------------------------------
# batched kernels: ``amps`` has shape (batch, 2**n) and is modified in place
# ---------------------------------------------------------------------------

def _halves(amps: np.ndarray, qubit: int):
    view = amps.reshape(amps.shape[0], -1, 2, 1 << qubit)
    return view[:, :, 0, :], view[:, :, 1, :]


def _angle(angle, batch: int) -> np.ndarray:
    a = np.asarray(angle, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1, 1)
    if a.shape != (batch,):
        raise ShapeError(f"per-sample angle has shape {a.shape}, expected ({batch},)")
    return a.reshape(batch, 1, 1)


def _kernel_h(amps, qubit):
    a0, a1 = _halves(amps, qubit)
    s = a0 + a1
    a1 -= a0
    a1 *= -_INV_SQRT2
    s *= _INV_SQRT2
    a0[...] = s


def _kernel_rz(amps, qubit, angle):
    a0, a1 = _halves(amps, qubit)
    phase = np.exp(-0.5j * _angle(angle, amps.shape[0]))
    a0 *= phase
    a1 *= phase.conj()


def _kernel_rx(amps, qubit, angle):
    a0, a1 = _halves(amps, qubit)
    half = 0.5 * _angle(angle, amps.shape[0])
    c, s = np.cos(half), -1j * np.sin(half)
    new0 = c * a0 + s * a1
    a1 *= c
    a1 += s * a0
    a0[...] = new0


@lru_cache(maxsize=None)
def _cnot_perm(n_qubits: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << n_qubits)
    return np.where((idx >> control) & 1, idx ^ (1 << target), idx)


def _kernel_cnot(amps, control, target, n_qubits):
    amps[...] = amps[:, _cnot_perm(n_qubits, control, target)]


@lru_cache(maxsize=None)
def _z_signs(n_qubits: int) -> np.ndarray:
    """(2**n, n) matrix of Z eigenvalues: +1 where qubit is 0, -1 where 1."""
    idx = np.arange(1 << n_qubits)[:, None]
    bits = (idx >> np.arange(n_qubits)[None, :]) & 1
    return (1 - 2 * bits).astype(np.float64)


def _check_qubit(qubit, n_qubits):
    if not 0 <= qubit < n_qubits:
        raise IndexError(f"qubit {qubit} out of range for {n_qubits} qubits")


def apply_gate(state: StateVector, gate: str, qubit: int, angle: float | None = None) -> StateVector:
    """Apply H, RZ(angle) or RX(angle) to ``qubit`` in place and return the state."""
    _check_qubit(qubit, state.n_qubits)
    amps = state.amplitudes.reshape(1, -1)
    name = gate.upper()
    if name == "H":
        _kernel_h(amps, qubit)
        return state
    if name not in ("RZ", "RX"):
        raise ValueError(f"unknown gate {gate!r}")
    if angle is None or not np.isfinite(angle):
        raise ValueError(f"{name} needs a finite angle, got {angle!r}")
    (_kernel_rz if name == "RZ" else _kernel_rx)(amps, qubit, float(angle))
    return state


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    if control == target:
        raise ValueError("CNOT control and target must differ")
    _check_qubit(control, state.n_qubits)
    _check_qubit(target, state.n_qubits)
    _kernel_cnot(state.amplitudes.reshape(1, -1), control, target, state.n_qubits)
    return state


def expectation_z(state: StateVector, qubit: int) -> float:
    _check_qubit(qubit, state.n_qubits)
    probs = np.abs(state.amplitudes) ** 2
    return float(probs @ _z_signs(state.n_qubits)[:, qubit])


# ---------------------------------------------------------------------------
# circuit layout
# ---------------------------------------------------------------------------

class Head(str, enum.Enum):
    MULTI = "multi"
    SINGLE = "single"


@dataclass(frozen=True)
class CircuitConfig:
    n1: int
    n2: int
    n3: int
    head: Head = Head.MULTI

    def __post_init__(self):
        for name in ("n1", "n2", "n3"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.n1 > MAX_QUBITS:
            raise ConfigurationError(f"n1={self.n1} exceeds the {MAX_QUBITS}-qubit guard")
        object.__setattr__(self, "head", Head(self.head))

    @property
    def n_inputs(self) -> int:
        return self.n1 * self.n2

    @property
    def n_params(self) -> int:
        return self.n1 * self.n3

    @property
    def n_outputs(self) -> int:
        return self.n1 if self.head is Head.MULTI else 1


@dataclass(frozen=True)
class Op:
    gate: str
    qubits: tuple[int, ...]
    source: str | None = None  # "input" | "param" for rotation slots
    index: int | None = None

    def to_dict(self) -> dict:
        d = {"gate": self.gate, "qubits": list(self.qubits)}
        if self.source is not None:
            d["slot"] = {"source": self.source, "index": self.index}
        return d


@dataclass(frozen=True)
class CircuitPlan:
    config: CircuitConfig
    ops: tuple[Op, ...]
    measured: tuple[int, ...]
    input_ops: tuple[int, ...] = field(repr=False, default=())
    param_ops: tuple[int, ...] = field(repr=False, default=())

    @property
    def n_qubits(self) -> int:
        return self.config.n1

    @property
    def n_inputs(self) -> int:
        return self.config.n_inputs

    @property
    def n_params(self) -> int:
        return self.config.n_params

    @property
    def n_outputs(self) -> int:
        return len(self.measured)

    def gate_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for op in self.ops:
            counts[op.gate] = counts.get(op.gate, 0) + 1
        return counts

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "config": {"n1": cfg.n1, "n2": cfg.n2, "n3": cfg.n3, "head": cfg.head.value},
            "ops": [op.to_dict() for op in self.ops],
            "measure_z": list(self.measured),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def build_circuit(config: CircuitConfig) -> CircuitPlan:
    """Lay out the encoding, variational and measurement layers.

    Encoding: one H wall, then for each of the n2 repetitions an RZ on every
    qubit fed by its own input slot ``j*n1 + i``. Variational: for each of the
    n3 repetitions an RX wall on parameter slots ``k*n1 + i`` followed by a CNOT
    ring i -> i+1 (mod n1), omitted for one qubit. The single-measurement head
    folds qubits into qubit 0 with CNOT(i -> i-1) for i = n1-1 .. 1.
    """
    n1, n2, n3 = config.n1, config.n2, config.n3
    ops: list[Op] = [Op("H", (q,)) for q in range(n1)]
    for j in range(n2):
        ops.extend(Op("RZ", (q,), "input", j * n1 + q) for q in range(n1))
    for k in range(n3):
        ops.extend(Op("RX", (q,), "param", k * n1 + q) for q in range(n1))
        if n1 > 1:
            ops.extend(Op("CNOT", (q, (q + 1) % n1)) for q in range(n1))
    if config.head is Head.SINGLE:
        ops.extend(Op("CNOT", (q, q - 1)) for q in range(n1 - 1, 0, -1))
        measured = (0,)
    else:
        measured = tuple(range(n1))
    input_ops = tuple(i for i, op in enumerate(ops) if op.source == "input")
    param_ops = tuple(i for i, op in enumerate(ops) if op.source == "param")
    return CircuitPlan(config, tuple(ops), measured, input_ops, param_ops)


def plan_from_dict(d: dict) -> CircuitPlan:
    c = d["config"]
    return build_circuit(CircuitConfig(c["n1"], c["n2"], c["n3"], Head(c["head"])))


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _as_batch(plan: CircuitPlan, inputs, params):
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    p = np.asarray(params, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != plan.n_inputs:
        raise ShapeError(f"inputs have shape {np.shape(inputs)}, expected (..., {plan.n_inputs})")
    if p.size != plan.n_params:
        raise ShapeError(f"params have {p.size} entries, expected {plan.n_params}")
    return x, p, single


def _op_angle(op: Op, x: np.ndarray, p: np.ndarray):
    return x[:, op.index] if op.source == "input" else p[op.index]


def _apply_op(amps, op: Op, n, angle=None):
    if op.gate == "H":
        _kernel_h(amps, op.qubits[0])
    elif op.gate == "RZ":
        _kernel_rz(amps, op.qubits[0], angle)
    elif op.gate == "RX":
        _kernel_rx(amps, op.qubits[0], angle)
    else:
        _kernel_cnot(amps, op.qubits[0], op.qubits[1], n)


def _simulate(plan: CircuitPlan, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    n = plan.n_qubits
    amps = np.zeros((x.shape[0], 1 << n), dtype=np.complex128)
    amps[:, 0] = 1.0
    for op in plan.ops:
        _apply_op(amps, op, n, _op_angle(op, x, p) if op.source else None)
    return amps


def _measure(plan: CircuitPlan, amps: np.ndarray) -> np.ndarray:
    probs = amps.real**2 + amps.imag**2
    return probs @ _z_signs(plan.n_qubits)[:, list(plan.measured)]


def measure(plan: CircuitPlan, state) -> np.ndarray:
    """Z expectations of the measured qubits for amplitudes from :func:`simulate`."""
    amps = np.asarray(state)
    out = _measure(plan, np.atleast_2d(amps))
    return out[0] if amps.ndim == 1 else out


def simulate(plan: CircuitPlan, inputs, params) -> np.ndarray:
    """Final amplitudes, shape (2**n1,) for 1-D inputs or (batch, 2**n1)."""
    x, p, single = _as_batch(plan, inputs, params)
    amps = _simulate(plan, x, p)
    return amps[0] if single else amps


def circuit_forward(plan: CircuitPlan, inputs, params) -> np.ndarray:
    """Exact Z expectations of the measured qubits.

    ``inputs`` is one angle vector of length n1*n2 or a (batch, n1*n2) matrix;
    ``params`` holds the n1*n3 RX angles shared by the whole batch.
    """
    x, p, single = _as_batch(plan, inputs, params)
    out = _measure(plan, _simulate(plan, x, p))
    return out[0] if single else out


class CircuitGradient(NamedTuple):
    inputs: np.ndarray  # (..., n_outputs, n_inputs)
    params: np.ndarray  # (..., n_outputs, n_params)


def circuit_gradient(plan: CircuitPlan, inputs, params) -> CircuitGradient:
    """Jacobian of every output w.r.t. every angle slot by the parameter-shift rule."""
    x, p, single = _as_batch(plan, inputs, params)
    shift = np.pi / 2
    jac_x = np.empty((x.shape[0], plan.n_outputs, plan.n_inputs))
    jac_p = np.empty((x.shape[0], plan.n_outputs, plan.n_params))
    for i in range(plan.n_inputs):
        xp, xm = x.copy(), x.copy()
        xp[:, i] += shift
        xm[:, i] -= shift
        jac_x[:, :, i] = 0.5 * (_measure(plan, _simulate(plan, xp, p)) - _measure(plan, _simulate(plan, xm, p)))
    for i in range(plan.n_params):
        pp, pm = p.copy(), p.copy()
        pp[i] += shift
        pm[i] -= shift
        jac_p[:, :, i] = 0.5 * (_measure(plan, _simulate(plan, x, pp)) - _measure(plan, _simulate(plan, x, pm)))
    if single:
        return CircuitGradient(jac_x[0], jac_p[0])
    return CircuitGradient(jac_x, jac_p)


def circuit_vjp(plan: CircuitPlan, inputs, params, upstream, final_state=None):
    """Vector-Jacobian product by adjoint back-propagation through the gates.

    Given ``upstream`` = dL/d(outputs) with shape (batch, n_outputs), returns
    ``(dL/d inputs (batch, n_inputs), dL/d params (n_params,))`` where the
    parameter gradient is summed over the batch. Agrees with contracting
    :func:`circuit_gradient` against ``upstream`` but costs about three forward
    passes regardless of the slot count.
    """
    x, p, _ = _as_batch(plan, inputs, params)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != (x.shape[0], plan.n_outputs):
        raise ShapeError(f"upstream has shape {g.shape}, expected ({x.shape[0]}, {plan.n_outputs})")
    n = plan.n_qubits
    signs = _z_signs(n)
    psi = _simulate(plan, x, p) if final_state is None else np.array(np.atleast_2d(final_state), dtype=np.complex128)
    lam = psi * (g @ signs[:, list(plan.measured)].T)
    grad_x = np.zeros((x.shape[0], plan.n_inputs))
    grad_p = np.zeros(plan.n_params)
    for op in reversed(plan.ops):
        if op.source is not None:
            q = op.qubits[0]
            if op.gate == "RZ":
                overlap = np.sum(lam.conj() * psi * signs[:, q], axis=1)
            else:
                flipped = psi.reshape(psi.shape[0], -1, 2, 1 << q)[:, :, ::-1, :].reshape(psi.shape)
                overlap = np.sum(lam.conj() * flipped, axis=1)
            # d<O>/dangle = Im <lam| G |psi> for U = exp(-i angle G / 2)
            if op.source == "input":
                grad_x[:, op.index] = overlap.imag
            else:
                grad_p[op.index] = overlap.imag.sum()
            inverse = -_op_angle(op, x, p)
            _apply_op(psi, op, n, inverse)
            _apply_op(lam, op, n, inverse)
        else:
            # H and CNOT are self-inverse
            _apply_op(psi, op, n)
            _apply_op(lam, op, n)
    return grad_x, grad_p
