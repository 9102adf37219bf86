"""Small feed-forward scorer with hand-written backprop and Adam.

The network maps a feature vector to one real-valued logit through a stack
of fully connected hidden layers. The activation output of the last hidden
layer is exposed as the *penultimate representation*, which the contrastive
regularizer consumes.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch ``X`` of
shape ``(n, fan_in)`` is propagated as ``X @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_FORMAT = "progrisk.encoder"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    hidden_dims: tuple = (32, 16)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def layer_dims(self) -> List[int]:
        return [int(self.input_dim), *self.hidden_dims, 1]

    def to_dict(self) -> dict:
        return {
            "input_dim": int(self.input_dim),
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "seed": int(self.seed),
        }


@dataclass
class EncoderModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    config: EncoderConfig

    def copy(self) -> "EncoderModel":
        return EncoderModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.config)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat_params(self, flat: np.ndarray) -> "EncoderModel":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(flat[pos:pos + b.size].reshape(b.shape).copy())
            pos += b.size
        return EncoderModel(weights, biases, self.config)

    def equals(self, other: "EncoderModel") -> bool:
        """Bitwise equality of configuration and every parameter."""
        if self.config != other.config:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))


@dataclass
class ForwardTrace:
    """Everything ``backward`` needs, plus the two outputs callers care about.

    ``inputs[k]`` is the input of layer ``k`` and ``preacts[k]`` its affine
    output. For a 1-D input the logit is a float and the penultimate vector is
    1-D; for a batch they carry a leading row axis.
    """

    logit: object
    penultimate: np.ndarray
    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    batched: bool


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    first_moment: Optional[Gradients] = None
    second_moment: Optional[Gradients] = None

    @classmethod
    def for_model(cls, model: EncoderModel, **hyper) -> "AdamState":
        zeros = Gradients([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])
        zeros2 = Gradients([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])
        return cls(first_moment=zeros, second_moment=zeros2, **hyper)


def init_kaiming(config: EncoderConfig) -> EncoderModel:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(int(config.seed))
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderModel(weights, biases, config)


def zero_model(config: EncoderConfig) -> EncoderModel:
    dims = config.layer_dims
    return EncoderModel(
        [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros(b) for b in dims[1:]],
        config,
    )


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(float)
    return 1.0 - a * a


def forward(model: EncoderModel, x) -> ForwardTrace:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != model.config.input_dim:
        raise ValueError(f"expected input of width {model.config.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    a = x if batched else x[None, :]
    inputs, preacts = [], []
    n_layers = len(model.weights)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = z if k == n_layers - 1 else _activate(z, model.config.activation)
    logit = a[:, 0]
    penultimate = inputs[-1]
    if not batched:
        return ForwardTrace(float(logit[0]), penultimate[0], inputs, preacts, False)
    return ForwardTrace(logit, penultimate, inputs, preacts, True)


def backward(model: EncoderModel, trace: ForwardTrace, dL_dlogit, dL_dpenultimate=None) -> Gradients:
    """Parameter gradients of a loss that touches the logit and the penultimate layer.

    ``dL_dlogit`` has one entry per row of the traced batch (a scalar for a
    single input). ``dL_dpenultimate`` is optional; it adds the loss's direct
    dependence on the last hidden activation.
    """
    n_rows = trace.inputs[0].shape[0]
    dlogit = np.asarray(dL_dlogit, dtype=float).reshape(-1)
    if dlogit.size != n_rows:
        raise ValueError(f"dL_dlogit has {dlogit.size} entries for {n_rows} traced rows")
    width = model.config.hidden_dims[-1]
    if dL_dpenultimate is not None:
        dpen = np.asarray(dL_dpenultimate, dtype=float).reshape(n_rows, -1)
        if dpen.shape[1] != width:
            raise ValueError(f"dL_dpenultimate width {dpen.shape[1]} != penultimate width {width}")
    else:
        dpen = None

    n_layers = len(model.weights)
    gw: List[np.ndarray] = [None] * n_layers
    gb: List[np.ndarray] = [None] * n_layers
    delta = dlogit[:, None]
    for k in range(n_layers - 1, -1, -1):
        a_in = trace.inputs[k]
        gw[k] = a_in.T @ delta
        gb[k] = delta.sum(axis=0)
        if k == 0:
            break
        da = delta @ model.weights[k].T
        if k == n_layers - 1 and dpen is not None:
            da = da + dpen
        delta = da * _activate_grad(trace.preacts[k - 1], a_in, model.config.activation)
    return Gradients(gw, gb)


def adam_step(state: AdamState, model: EncoderModel, grads: Gradients):
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay shrinks weight matrices only (``p -= lr * wd * p``); biases
    are not decayed. Returns ``(new_model, new_state)``; inputs are untouched.
    """
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
    if state.first_moment is None:
        state = AdamState.for_model(model, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                    eps=state.eps, weight_decay=state.weight_decay, step=state.step)
    for g, p in zip(grads.weights + grads.biases, model.weights + model.biases):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def update(p, g, m, v, decay):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_p = p - step
        if decay and state.weight_decay:
            new_p = new_p - state.lr * state.weight_decay * p
        return new_p, m, v

    new_w, new_b, m_w, m_b, v_w, v_b = [], [], [], [], [], []
    for p, g, m, v in zip(model.weights, grads.weights, state.first_moment.weights, state.second_moment.weights):
        p2, m2, v2 = update(p, g, m, v, True)
        new_w.append(p2), m_w.append(m2), v_w.append(v2)
    for p, g, m, v in zip(model.biases, grads.biases, state.first_moment.biases, state.second_moment.biases):
        p2, m2, v2 = update(p, g, m, v, False)
        new_b.append(p2), m_b.append(m2), v_b.append(v2)

    new_state = replace(state, step=t, first_moment=Gradients(m_w, m_b), second_moment=Gradients(v_w, v_b))
    return EncoderModel(new_w, new_b, model.config), new_state


# -- checkpoints ------------------------------------------------------------

def model_to_dict(model: EncoderModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(data: dict) -> EncoderModel:
    cfg = data["config"]
    config = EncoderConfig(
        input_dim=cfg["input_dim"], hidden_dims=tuple(cfg["hidden_dims"]),
        activation=cfg["activation"], seed=cfg["seed"],
    )
    weights = [np.asarray(w, dtype=float).reshape(a, b)
               for w, a, b in zip(data["weights"], config.layer_dims[:-1], config.layer_dims[1:])]
    biases = [np.asarray(b, dtype=float).reshape(-1) for b in data["biases"]]
    model = EncoderModel(weights, biases, config)
    for w, b, n_out in zip(model.weights, model.biases, config.layer_dims[1:]):
        if b.shape != (n_out,) or not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("checkpoint parameters are malformed")
    return model


def dumps_checkpoint(models: dict, extra: Optional[dict] = None) -> str:
    """Serialise named models (``{"f": model, "g": model}``) to JSON text.

    Floats are written with ``repr`` precision, so a round trip is exact and
    the bytes depend only on the parameter values.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "models": {name: model_to_dict(m) for name, m in sorted(models.items())},
    }
    if extra:
        payload["meta"] = extra
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def loads_checkpoint(text: str) -> dict:
    payload = json.loads(text)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an encoder checkpoint (format={payload.get('format')!r})")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return {name: model_from_dict(d) for name, d in payload["models"].items()}


def save_checkpoint(path, models: dict, extra: Optional[dict] = None) -> None:
    Path(path).write_text(dumps_checkpoint(models, extra), encoding="utf-8")


def load_checkpoint(path) -> dict:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
