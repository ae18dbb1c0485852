"""Classical-to-quantum interface normalizations and the response-label transform.

Four interface maps are supported: identity, layer normalization with a
learnable affine, ``(pi/2) * tanh(phi)`` and the gradual tanh
``r * tanh(phi / a)``. A large ``a`` flattens the slope near zero so encoder
outputs are not pushed against the +-r boundary, and ``r <= pi`` keeps every
rotation angle inside one period.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DegenerateDataError

LAYERNORM_EPS = 1e-5


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    LAYERNORM = "layernorm"
    TANH = "tanh"
    GRADUAL_TANH = "gradual_tanh"


_ANGLE_RE = re.compile(r"^\s*([0-9.eE+-]*)\s*\*?\s*(pi)?\s*(?:/\s*([0-9.eE+-]+))?\s*$")


def parse_angle(value) -> float:
    """Read a float or an expression such as ``"pi/2"``, ``"3pi/4"``, ``"8*pi"``."""
    if isinstance(value, (int, float)):
        return float(value)
    m = _ANGLE_RE.match(str(value))
    if not m or not (m.group(1) or m.group(2)):
        raise ConfigurationError(f"cannot parse angle {value!r}")
    coef = float(m.group(1)) if m.group(1) else 1.0
    result = coef * (math.pi if m.group(2) else 1.0)
    if m.group(3):
        result /= float(m.group(3))
    return result


@dataclass(frozen=True)
class NormalizationSpec:
    kind: Kind
    a: float = 1.0
    r: float = math.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.GRADUAL_TANH:
            a, r = parse_angle(self.a), parse_angle(self.r)
            if not (a > 0 and r > 0 and math.isfinite(a) and math.isfinite(r)):
                raise ConfigurationError(f"gradual tanh needs a > 0 and r > 0, got a={a}, r={r}")
        else:
            a, r = 1.0, math.pi / 2
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls):
        return cls(Kind.IDENTITY)

    @classmethod
    def layernorm(cls):
        return cls(Kind.LAYERNORM)

    @classmethod
    def tanh(cls):
        return cls(Kind.TANH)

    @classmethod
    def gradual_tanh(cls, a=20.0, r=math.pi / 2):
        return cls(Kind.GRADUAL_TANH, a, r)

    @property
    def bounded(self) -> bool:
        return self.kind in (Kind.TANH, Kind.GRADUAL_TANH)

    def to_dict(self) -> dict:
        if self.kind is Kind.GRADUAL_TANH:
            return {"kind": self.kind.value, "a": self.a, "r": self.r}
        return {"kind": self.kind.value}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        kind = Kind(d["kind"])
        if kind is Kind.GRADUAL_TANH:
            return cls(kind, d.get("a", 20.0), d.get("r", math.pi / 2))
        return cls(kind)


def _check_finite(phi):
    x = np.asarray(phi, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("normalization input contains non-finite values")
    return x


def layernorm(phi, gamma=None, beta=None, eps=LAYERNORM_EPS):
    """Layer normalization over the last axis with optional affine ``gamma``, ``beta``."""
    x = _check_finite(phi)
    if x.shape[-1] < 2:
        raise ConfigurationError("layer normalization needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        xhat = xhat * gamma
    if beta is not None:
        xhat = xhat + beta
    return xhat


def layernorm_backward(phi, dout, gamma=None, eps=LAYERNORM_EPS):
    """Return (d phi, d gamma, d beta) for upstream ``dout``; rows are independent."""
    x = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    g = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv_std
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma if gamma is not None else g
    dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx.reshape(np.shape(phi)), dgamma, dbeta


def normalize(spec: NormalizationSpec, phi, gamma=None, beta=None) -> np.ndarray:
    """Map encoder outputs to rotation angles.

    >>> float(normalize(NormalizationSpec.gradual_tanh(20, math.pi / 2), [20.0])[0])  # doctest: +ELLIPSIS
    1.19630...
    """
    x = _check_finite(phi)
    kind = spec.kind
    if kind is Kind.IDENTITY:
        return x.copy()
    if kind is Kind.LAYERNORM:
        return layernorm(x, gamma, beta)
    if kind is Kind.TANH:
        return (math.pi / 2) * np.tanh(x)
    # tanh rounds to exactly 1 for |x/a| > ~19; keep the open interval (-r, r)
    bound = np.nextafter(spec.r, 0.0)
    return np.clip(spec.r * np.tanh(x / spec.a), -bound, bound)


def normalize_grad(spec: NormalizationSpec, phi, gamma=None) -> np.ndarray:
    """Derivative of :func:`normalize`.

    Elementwise for the pointwise maps. For layer normalization of a single
    vector the full (d, d) Jacobian ``d out_i / d phi_j`` is returned; a batch
    of vectors gives a (batch, d, d) stack.
    """
    x = _check_finite(phi)
    kind = spec.kind
    if kind is Kind.IDENTITY:
        return np.ones_like(x)
    if kind is Kind.TANH:
        return (math.pi / 2) / np.cosh(x) ** 2
    if kind is Kind.GRADUAL_TANH:
        return (spec.r / spec.a) / np.cosh(x / spec.a) ** 2
    xs = np.atleast_2d(x)
    d = xs.shape[-1]
    jac = np.empty((xs.shape[0], d, d))
    eye = np.eye(d)
    for i in range(d):
        jac[:, i, :] = layernorm_backward(xs, np.broadcast_to(eye[i], xs.shape), gamma)[0]
    return jac[0] if x.ndim == 1 else jac


# ---------------------------------------------------------------------------
# response labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelNormalizer:
    """tanh-squashed z-score of log(IC50), fitted on training rows only."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateDataError(f"label std must be positive, got {self.std}")

    def transform(self, log_ic50) -> np.ndarray:
        return transform_labels(self, log_ic50)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


def fit_label_normalizer(train_log_ic50) -> LabelNormalizer:
    y = _check_finite(train_log_ic50).reshape(-1)
    if y.size < 2:
        raise DegenerateDataError("need at least 2 training labels")
    std = float(y.std())  # population convention
    if std == 0.0:
        raise DegenerateDataError("training labels are constant")
    return LabelNormalizer(float(y.mean()), std)


def transform_labels(norm: LabelNormalizer, log_ic50) -> np.ndarray:
    return np.tanh((np.asarray(log_ic50, dtype=np.float64) - norm.mean) / norm.std)
