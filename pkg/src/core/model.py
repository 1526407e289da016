"""
Multilayer perceptron patch classifier with hand-derived backpropagation,
an Adam optimizer and JSON checkpoints.

Weights are stored as (fan_out, fan_in) matrices; a batch of features is a
(B, d) matrix and each layer computes ``a @ W.T + b``. Hidden layers use
ReLU, the single output unit uses the logistic sigmoid. Everything is
float64.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from config.settings import ADAM_CONFIG
from src.core.exceptions import DataIOError, NumericError, ShapeError
from src.models.pydantic_models import FrameworkConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mil-mlp-checkpoint"
CHECKPOINT_VERSION = 1

# keeps sigmoid outputs strictly inside (0, 1)
_P_MIN = np.finfo(np.float64).tiny
_P_MAX = np.nextafter(1.0, 0.0)


@dataclass
class ModelParams:
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams(
            layer_dims=tuple(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            layer_dims=tuple(self.layer_dims),
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
        )

    def arrays(self) -> List[np.ndarray]:
        """Weights and biases interleaved layer by layer (W1, b1, W2, b2, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of dims and every parameter."""
        if tuple(self.layer_dims) != tuple(other.layer_dims):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), t=0)

    def copy(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), t=self.t)


def validate_layer_dims(layer_dims: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ShapeError(f"layer_dims needs an input and an output dimension, got {list(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"layer_dims entries must be positive, got {list(dims)}")
    if dims[-1] != 1:
        raise ShapeError(f"final layer dimension must be 1, got {dims[-1]}")
    return dims


def build_layer_dims(input_dim: int, hidden_dims: Sequence[int]) -> Tuple[int, ...]:
    return validate_layer_dims([input_dim, *hidden_dims, 1])


def init_mlp(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = validate_layer_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return ModelParams(layer_dims=dims, weights=weights, biases=biases)


def _check_features(params: ModelParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"features of shape {x.shape} do not match model input dimension {params.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("features contain non-finite values")
    return x


def _forward_pass(params: ModelParams, x: np.ndarray):
    activations = [x]
    pre_activations = []
    a = x
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        if layer < params.n_layers - 1:
            a = np.maximum(z, 0.0)
        else:
            a = np.clip(expit(z), _P_MIN, _P_MAX)
        activations.append(a)
    return activations, pre_activations


def forward(params: ModelParams, features) -> np.ndarray:
    x = _check_features(params, features)
    activations, _ = _forward_pass(params, x)
    return activations[-1][:, 0]


def backward(params: ModelParams, features, grad_wrt_pred) -> ModelParams:
    """Gradients of sum_i grad_wrt_pred[i] * pred[i] with respect to every parameter."""
    x = _check_features(params, features)
    upstream = np.asarray(grad_wrt_pred, dtype=np.float64)
    if upstream.shape != (x.shape[0],):
        raise ShapeError(f"gradient of shape {upstream.shape} does not match batch of {x.shape[0]}")

    activations, pre_activations = _forward_pass(params, x)
    grads = params.zeros_like()
    p = activations[-1]
    dz = upstream[:, None] * p * (1.0 - p)
    for layer in range(params.n_layers - 1, -1, -1):
        grads.weights[layer] = dz.T @ activations[layer]
        grads.biases[layer] = dz.sum(axis=0)
        if layer > 0:
            da = dz @ params.weights[layer]
            dz = da * (pre_activations[layer - 1] > 0.0)
    return grads


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_CONFIG["beta1"],
    beta2: float = ADAM_CONFIG["beta2"],
    epsilon: float = ADAM_CONFIG["epsilon"],
) -> Tuple[ModelParams, AdamState]:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if tuple(grads.layer_dims) != tuple(params.layer_dims):
        raise ShapeError("gradient shapes do not match parameters")
    if not grads.is_finite():
        raise NumericError("non-finite gradients")

    new_params = params.copy()
    new_state = state.copy()
    new_state.t += 1

    # bias corrections computed once per step
    bc1 = 1.0 - beta1 ** new_state.t
    bc2 = 1.0 - beta2 ** new_state.t
    step_size = lr / bc1

    for theta, g, m, v in zip(new_params.arrays(), grads.arrays(), new_state.m.arrays(), new_state.v.arrays()):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= step_size * m / (np.sqrt(v / bc2) + epsilon)
    return new_params, new_state


@dataclass
class Checkpoint:
    params: ModelParams
    state: AdamState
    framework: Optional[FrameworkConfig] = None


def _params_payload(params: ModelParams) -> dict:
    return {
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def _params_from_payload(layer_dims: Tuple[int, ...], payload: dict) -> ModelParams:
    params = ModelParams(
        layer_dims=layer_dims,
        weights=[np.array(w, dtype=np.float64).reshape(out, fan_in)
                 for w, fan_in, out in zip(payload["weights"], layer_dims[:-1], layer_dims[1:])],
        biases=[np.array(b, dtype=np.float64).reshape(out) for b, out in zip(payload["biases"], layer_dims[1:])],
    )
    if len(params.weights) != len(layer_dims) - 1:
        raise DataIOError("checkpoint layer count does not match layer_dims")
    return params


def save_checkpoint(path, params: ModelParams, state: AdamState, framework: Optional[FrameworkConfig] = None) -> Path:
    if not params.is_finite():
        raise NumericError("refusing to checkpoint non-finite parameters")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(params.layer_dims),
        "framework": framework.model_dump() if framework is not None else None,
        "params": _params_payload(params),
        "adam": {"t": state.t, "m": _params_payload(state.m), "v": _params_payload(state.v)},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, allow_nan=False)
        fh.write("\n")
    logger.info(f"Checkpoint written to {path} (adam step {state.t})")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as e:
        raise DataIOError(f"checkpoint not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataIOError(f"{path} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    try:
        dims = validate_layer_dims(payload["layer_dims"])
        params = _params_from_payload(dims, payload["params"])
        adam = payload["adam"]
        state = AdamState(
            m=_params_from_payload(dims, adam["m"]),
            v=_params_from_payload(dims, adam["v"]),
            t=int(adam["t"]),
        )
        framework = FrameworkConfig(**payload["framework"]) if payload.get("framework") else None
    except (KeyError, ValueError, TypeError) as e:
        # pydantic ValidationError is a ValueError
        raise DataIOError(f"malformed checkpoint {path}: {e}") from e
    return Checkpoint(params=params, state=state, framework=framework)
