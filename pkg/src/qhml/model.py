"""Encoder -> interface normalization -> circuit -> head, with hand-written backprop.

The classical encoder is Linear -> BatchNorm -> SiLU -> Linear -> BatchNorm ->
SiLU -> Linear. Its output feeds the rotation angles of the circuit after
normalization. Gradients flow backwards layer by layer; the circuit contributes
its vector-Jacobian product from :func:`qhml.quantum.circuit_vjp`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BatchSizeError, ConfigurationError, ShapeError
from .normalization import Kind, NormalizationSpec, layernorm_backward, normalize, normalize_grad
from .quantum import CircuitConfig, Head, build_circuit, circuit_vjp, measure, simulate

CHECKPOINT_FORMAT = "qhml-checkpoint/1"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class ModelKind(str, enum.Enum):
    HYBRID = "hybrid"
    CLASSIC = "classic"


def sigmoid(x):
    # tanh form: stable for large |x| and cheaper than scipy's expit here
    t = np.tanh(0.5 * x)
    t *= 0.5
    t += 0.5
    return t


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_grad(x, sig=None):
    """Derivative of SiLU; ``sig`` reuses an already computed ``sigmoid(x)``."""
    s = sigmoid(x) if sig is None else sig
    return s * (1.0 + x * (1.0 - s))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    circuit: CircuitConfig
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec.gradual_tanh)
    kind: ModelKind = ModelKind.HYBRID
    hidden1: int = 512
    hidden2: int = 128

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be positive, got {self.input_dim}")
        if self.normalization.kind is Kind.LAYERNORM and self.output_dim < 2:
            raise ConfigurationError("layer normalization needs an embedding of at least 2")

    @property
    def output_dim(self) -> int:
        return self.circuit.n_inputs

    def to_dict(self) -> dict:
        c = self.circuit
        return {
            "input_dim": self.input_dim,
            "circuit": {"n1": c.n1, "n2": c.n2, "n3": c.n3, "head": c.head.value},
            "normalization": self.normalization.to_dict(),
            "kind": self.kind.value,
            "hidden1": self.hidden1,
            "hidden2": self.hidden2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        c = d["circuit"]
        return cls(
            input_dim=d["input_dim"],
            circuit=CircuitConfig(c["n1"], c["n2"], c["n3"], Head(c["head"])),
            normalization=NormalizationSpec.from_dict(d["normalization"]),
            kind=ModelKind(d.get("kind", "hybrid")),
            hidden1=d.get("hidden1", 512),
            hidden2=d.get("hidden2", 128),
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable arrays in their stable flattening order."""
    h1, h2, out = config.hidden1, config.hidden2, config.output_dim
    shapes = {
        "enc.l1.W": (config.input_dim, h1), "enc.l1.b": (h1,),
        "enc.bn1.gamma": (h1,), "enc.bn1.beta": (h1,),
        "enc.l2.W": (h1, h2), "enc.l2.b": (h2,),
        "enc.bn2.gamma": (h2,), "enc.bn2.beta": (h2,),
        "enc.l3.W": (h2, out), "enc.l3.b": (out,),
    }
    if config.kind is ModelKind.CLASSIC:
        shapes["head.W"] = (out,)
        shapes["head.b"] = (1,)
        return shapes
    if config.normalization.kind is Kind.LAYERNORM:
        shapes["norm.gamma"] = (out,)
        shapes["norm.beta"] = (out,)
    shapes["circuit.theta"] = (config.circuit.n_params,)
    if config.circuit.head is Head.MULTI:
        shapes["head.W"] = (config.circuit.n1,)
        shapes["head.b"] = (1,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    """Fan-in uniform init for linear layers, thetas uniform in [-pi, pi]."""
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape)
        elif name == "circuit.theta":
            params[name] = rng.uniform(-np.pi, np.pi, shape)
        else:
            layer = name.rsplit(".", 1)[0]
            fan_in = parameter_shapes(config)[layer + ".W"][0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    buffers = {
        "enc.bn1.running_mean": np.zeros(config.hidden1), "enc.bn1.running_var": np.ones(config.hidden1),
        "enc.bn2.running_mean": np.zeros(config.hidden2), "enc.bn2.running_var": np.ones(config.hidden2),
    }
    return params, buffers


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    if train:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, train), (new_mean, new_var)


def _batchnorm_backward(dy, gamma, cache):
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def encoder_forward(config: ModelConfig, params: dict, buffers: dict, batch, mode=Mode.EVAL):
    """Embed a (batch, genes) matrix into (batch, n1*n2) encoder outputs.

    Returns ``(embedding, cache)``. In train mode the cache carries the updated
    running statistics under ``"buffers"``; the caller decides whether to commit them.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"batch has shape {x.shape}, expected (n, {config.input_dim})")
    train = Mode(mode) is Mode.TRAIN
    if train and x.shape[0] < 2:
        raise BatchSizeError("train-mode batch normalization needs at least 2 samples")
    cache = {"x": x}
    new_buffers = {}
    h = x
    for i in (1, 2):
        pre = h @ params[f"enc.l{i}.W"] + params[f"enc.l{i}.b"]
        bn, cache[f"bn{i}"], (rm, rv) = _batchnorm_forward(
            pre, params[f"enc.bn{i}.gamma"], params[f"enc.bn{i}.beta"],
            buffers[f"enc.bn{i}.running_mean"], buffers[f"enc.bn{i}.running_var"], train,
        )
        new_buffers[f"enc.bn{i}.running_mean"] = rm
        new_buffers[f"enc.bn{i}.running_var"] = rv
        cache[f"bn{i}_out"] = bn
        cache[f"sig{i}"] = sig = sigmoid(bn)
        h = bn * sig
        cache[f"h{i}"] = h
    out = h @ params["enc.l3.W"] + params["enc.l3.b"]
    cache["buffers"] = new_buffers
    return out, cache


def encoder_backward(params: dict, cache: dict, dout) -> dict:
    grads = {}
    grads["enc.l3.W"] = cache["h2"].T @ dout
    grads["enc.l3.b"] = dout.sum(axis=0)
    dh = dout @ params["enc.l3.W"].T
    for i in (2, 1):
        dbn = dh * silu_grad(cache[f"bn{i}_out"], cache[f"sig{i}"])
        dpre, grads[f"enc.bn{i}.gamma"], grads[f"enc.bn{i}.beta"] = _batchnorm_backward(
            dbn, params[f"enc.bn{i}.gamma"], cache[f"bn{i}"]
        )
        below = cache["h1"] if i == 2 else cache["x"]
        grads[f"enc.l{i}.W"] = below.T @ dpre
        grads[f"enc.l{i}.b"] = dpre.sum(axis=0)
        if i > 1:
            dh = dpre @ params[f"enc.l{i}.W"].T
    return grads


class HybridModel:
    """A model configuration plus its trainable parameters and batch-norm buffers."""

    def __init__(self, config: ModelConfig, params: dict | None = None, buffers: dict | None = None, seed=0,
                 meta: dict | None = None):
        self.config = config
        self.meta = dict(meta or {})
        if params is None or buffers is None:
            init_p, init_b = init_params(config, np.random.default_rng(seed))
            params = init_p if params is None else params
            buffers = init_b if buffers is None else buffers
        shapes = parameter_shapes(config)
        if list(params) != list(shapes):
            params = {name: params[name] for name in shapes}
        for name, shape in shapes.items():
            if np.shape(params[name]) != shape:
                raise ShapeError(f"{name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in buffers.items()}
        self.plan = build_circuit(config.circuit) if config.kind is ModelKind.HYBRID else None

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.params.values()])

    def unflatten(self, vector) -> dict:
        out, pos = {}, 0
        for name, value in self.params.items():
            out[name] = np.asarray(vector[pos:pos + value.size], dtype=np.float64).reshape(value.shape)
            pos += value.size
        return out

    def copy(self) -> "HybridModel":
        return HybridModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            meta=self.meta,
        )

    # -- forward / backward -------------------------------------------------

    def normalized_embedding(self, phi):
        p = self.params
        return normalize(self.config.normalization, phi, p.get("norm.gamma"), p.get("norm.beta"))

    def forward(self, batch, mode=Mode.EVAL):
        """Predictions of shape (batch,) and the cache needed by :meth:`backward`."""
        phi, cache = encoder_forward(self.config, self.params, self.buffers, batch, mode)
        p = self.params
        cache["phi"] = phi
        if self.config.kind is ModelKind.CLASSIC:
            return phi @ p["head.W"] + p["head.b"][0], cache
        angles = self.normalized_embedding(phi)
        state = simulate(self.plan, angles, p["circuit.theta"])
        expectations = measure(self.plan, state)
        cache.update(angles=angles, state=state, expectations=expectations)
        if self.config.circuit.head is Head.MULTI:
            pred = expectations @ p["head.W"] + p["head.b"][0]
        else:
            pred = expectations[:, 0].copy()
        return pred, cache

    def backward(self, cache, dpred) -> dict:
        """Gradients of a scalar loss given dL/d(predictions)."""
        p = self.params
        dpred = np.asarray(dpred, dtype=np.float64).reshape(-1)
        grads = {}
        if self.config.kind is ModelKind.CLASSIC:
            grads["head.W"] = cache["phi"].T @ dpred
            grads["head.b"] = np.array([dpred.sum()])
            dphi = np.outer(dpred, p["head.W"])
        else:
            if self.config.circuit.head is Head.MULTI:
                grads["head.W"] = cache["expectations"].T @ dpred
                grads["head.b"] = np.array([dpred.sum()])
                dexp = np.outer(dpred, p["head.W"])
            else:
                dexp = dpred[:, None]
            dangles, grads["circuit.theta"] = circuit_vjp(
                self.plan, cache["angles"], p["circuit.theta"], dexp, final_state=cache["state"]
            )
            spec = self.config.normalization
            if spec.kind is Kind.LAYERNORM:
                dphi, grads["norm.gamma"], grads["norm.beta"] = layernorm_backward(
                    cache["phi"], dangles, p["norm.gamma"]
                )
            else:
                dphi = dangles * normalize_grad(spec, cache["phi"])
        grads.update(encoder_backward(p, cache, dphi))
        return {name: grads[name] for name in p}

    def embed(self, batch):
        """Eval-mode (phi, phi') pairs: encoder outputs before and after normalization."""
        phi, _ = encoder_forward(self.config, self.params, self.buffers, batch, Mode.EVAL)
        if self.config.kind is ModelKind.CLASSIC:
            return phi, phi.copy()
        return phi, self.normalized_embedding(phi)

    def predict(self, batch) -> np.ndarray:
        return self.forward(batch, Mode.EVAL)[0]

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "config": self.config.to_dict(),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "buffers": {k: v.tolist() for k, v in self.buffers.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HybridModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"unsupported checkpoint format {d.get('format')!r}")
        config = ModelConfig.from_dict(d["config"])
        params = {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()}
        buffers = {k: np.array(v, dtype=np.float64) for k, v in d["buffers"].items()}
        return cls(config, params, buffers, meta=d.get("meta"))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "HybridModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_forward(model: HybridModel, batch, mode=Mode.EVAL) -> np.ndarray:
    """Predictions without touching the model's running statistics."""
    return model.forward(batch, mode)[0]
