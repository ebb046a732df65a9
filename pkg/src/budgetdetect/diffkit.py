"""Small reverse-mode compute kernel: named flat parameters, a stacked
LSTM with backprop through time, output heads, Gaussian log-density,
softmax cross-entropy, and Adam.

Everything runs on float64 numpy arrays. Parameters live in one
name -> array mapping so gradients, optimizer moments, and checkpoints
share a single layout. Gate packing order inside the fused LSTM weight
matrices is input, forget, candidate, output.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"BDCKPT01"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss -log softmax(logits)[label] and its gradient in the logits."""
    ls = log_softmax(logits)
    grad = softmax(logits)
    grad = grad.copy()
    grad[label] -= 1.0
    return float(-ls[label]), grad


def gaussian_logpdf(x: float, mean: float, variance: float) -> tuple[float, float]:
    """Log-density of N(mean, variance) at x and its derivative in the mean."""
    if variance <= 0.0:
        raise ValueError("variance must be positive")
    diff = x - mean
    logp = -0.5 * math.log(2.0 * math.pi * variance) - diff * diff / (2.0 * variance)
    return logp, diff / variance


@dataclass(frozen=True)
class NetConfig:
    """Shape description of the policy network: stacked LSTM plus three
    linear heads (location pair, class logits, next-frame scalar)."""

    input_dim: int
    hidden_size: int = 64
    num_layers: int = 2
    num_classes: int = 4  # includes background at index 0

    def __post_init__(self) -> None:
        if min(self.input_dim, self.hidden_size, self.num_layers, self.num_classes) < 1:
            raise ValueError("all network dimensions must be positive")


def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    in_dim = config.input_dim
    gates = 4 * config.hidden_size
    for layer in range(config.num_layers):
        shapes[f"lstm{layer}_W"] = (in_dim, gates)
        shapes[f"lstm{layer}_U"] = (config.hidden_size, gates)
        shapes[f"lstm{layer}_b"] = (gates,)
        in_dim = config.hidden_size
    shapes["loc_W"] = (config.hidden_size, 2)
    shapes["loc_b"] = (2,)
    shapes["cls_W"] = (config.hidden_size, config.num_classes)
    shapes["cls_b"] = (config.num_classes,)
    shapes["xi_W"] = (config.hidden_size, 1)
    shapes["xi_b"] = (1,)
    return shapes


@dataclass
class ParamSet:
    config: NetConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def init_params(config: NetConfig, rng: np.random.Generator) -> ParamSet:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, forget-gate bias +1."""
    arrays: dict[str, np.ndarray] = {}
    hidden = config.hidden_size
    for name, shape in param_shapes(config).items():
        if name.endswith("_b"):
            arr = np.zeros(shape)
            if name.startswith("lstm"):
                arr[hidden : 2 * hidden] = 1.0
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        arrays[name] = arr
    return ParamSet(config, arrays)


@dataclass
class GradTape:
    """Accumulated gradients, shape-matched to a ParamSet."""

    arrays: dict[str, np.ndarray]
    count: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "GradTape":
        return cls({k: np.zeros_like(v) for k, v in params.arrays.items()})

    def zero_(self) -> None:
        for v in self.arrays.values():
            v[...] = 0.0
        self.count = 0

    def add_(self, other: "GradTape", scale: float = 1.0) -> None:
        for k, v in self.arrays.items():
            v += scale * other.arrays[k]
        self.count += other.count

    def scale_(self, factor: float) -> None:
        for v in self.arrays.values():
            v *= factor

    def global_norm(self) -> float:
        return math.sqrt(sum(float((v * v).sum()) for v in self.arrays.values()))

    def clip_global_norm_(self, max_norm: float) -> float:
        norm = self.global_norm()
        if norm > max_norm > 0.0:
            self.scale_(max_norm / norm)
        return norm

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


# --------------------------------------------------------------------
# LSTM forward / backward
# --------------------------------------------------------------------

LstmState = list[tuple[np.ndarray, np.ndarray]]  # (h, c) per layer


def zero_state(config: NetConfig) -> LstmState:
    return [
        (np.zeros(config.hidden_size), np.zeros(config.hidden_size))
        for _ in range(config.num_layers)
    ]


@dataclass
class LstmStepCache:
    # per layer: (inp, h_prev, c_prev, i, f, g, o, tanh_c_new)
    layers: list[tuple[np.ndarray, ...]]


def lstm_step(
    params: ParamSet, x: np.ndarray, state: LstmState
) -> tuple[LstmState, LstmStepCache]:
    """One time step through the stacked LSTM."""
    config = params.config
    x = np.asarray(x, dtype=float)
    if x.shape != (config.input_dim,):
        raise ValueError(
            f"input has shape {x.shape}, expected ({config.input_dim},)"
        )
    if not np.isfinite(x).all():
        raise ValueError("non-finite LSTM input")
    hidden = config.hidden_size
    inp = x
    new_state: LstmState = []
    caches: list[tuple[np.ndarray, ...]] = []
    for layer in range(config.num_layers):
        h_prev, c_prev = state[layer]
        z = (
            inp @ params.arrays[f"lstm{layer}_W"]
            + h_prev @ params.arrays[f"lstm{layer}_U"]
            + params.arrays[f"lstm{layer}_b"]
        )
        i = sigmoid(z[:hidden])
        f = sigmoid(z[hidden : 2 * hidden])
        g = np.tanh(z[2 * hidden : 3 * hidden])
        o = sigmoid(z[3 * hidden :])
        c_new = f * c_prev + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        caches.append((inp, h_prev, c_prev, i, f, g, o, tanh_c))
        new_state.append((h_new, c_new))
        inp = h_new
    return new_state, LstmStepCache(caches)


def lstm_forward(
    params: ParamSet, xs: list[np.ndarray], state: LstmState | None = None
) -> tuple[list[np.ndarray], list[LstmStepCache], LstmState]:
    """Run a whole input sequence; returns top-layer hidden states, the
    per-step caches needed by the backward pass, and the final state."""
    if state is None:
        state = zero_state(params.config)
    hs: list[np.ndarray] = []
    caches: list[LstmStepCache] = []
    for x in xs:
        state, cache = lstm_step(params, x, state)
        hs.append(state[-1][0])
        caches.append(cache)
    return hs, caches, state


def lstm_backward(
    params: ParamSet,
    caches: list[LstmStepCache],
    d_hidden: list[np.ndarray],
    tape: GradTape,
) -> list[np.ndarray]:
    """Exact reverse-mode pass through time.

    ``d_hidden[t]`` is the gradient arriving at the top-layer hidden
    output of step t. Parameter gradients are accumulated into ``tape``;
    the gradients with respect to each input vector are returned.
    """
    if len(caches) != len(d_hidden):
        raise ValueError("cache and gradient sequences have mismatched lengths")
    config = params.config
    hidden = config.hidden_size
    layers = config.num_layers
    dh_carry = [np.zeros(hidden) for _ in range(layers)]
    dc_carry = [np.zeros(hidden) for _ in range(layers)]
    dx: list[np.ndarray] = [np.zeros(0)] * len(caches)
    for t in range(len(caches) - 1, -1, -1):
        d_from_above: np.ndarray | None = None
        for layer in range(layers - 1, -1, -1):
            inp, h_prev, c_prev, i, f, g, o, tanh_c = caches[t].layers[layer]
            dh = dh_carry[layer].copy()
            if layer == layers - 1:
                dh += d_hidden[t]
            if d_from_above is not None:
                dh += d_from_above
            do = dh * tanh_c
            dct = dh * o * (1.0 - tanh_c * tanh_c) + dc_carry[layer]
            di = dct * g
            df = dct * c_prev
            dg = dct * i
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ]
            )
            tape.arrays[f"lstm{layer}_W"] += np.outer(inp, dz)
            tape.arrays[f"lstm{layer}_U"] += np.outer(h_prev, dz)
            tape.arrays[f"lstm{layer}_b"] += dz
            d_from_above = params.arrays[f"lstm{layer}_W"] @ dz
            dh_carry[layer] = params.arrays[f"lstm{layer}_U"] @ dz
            dc_carry[layer] = dct * f
        assert d_from_above is not None
        dx[t] = d_from_above
    tape.count += 1
    return dx


# --------------------------------------------------------------------
# Output heads
# --------------------------------------------------------------------


@dataclass
class HeadOutputs:
    loc_raw: np.ndarray  # (2,) pre-sigmoid (center, width)
    center: float
    width: float
    cls_logits: np.ndarray
    class_probs: np.ndarray
    xi_raw: float
    xi_mean: float


def heads_forward(params: ParamSet, h: np.ndarray) -> HeadOutputs:
    """Location (center, width) and next-frame mean through sigmoids,
    class logits through softmax."""
    loc_raw = h @ params.arrays["loc_W"] + params.arrays["loc_b"]
    center, width = sigmoid(loc_raw)
    logits = h @ params.arrays["cls_W"] + params.arrays["cls_b"]
    xi_raw = float((h @ params.arrays["xi_W"])[0] + params.arrays["xi_b"][0])
    return HeadOutputs(
        loc_raw=loc_raw,
        center=float(center),
        width=float(width),
        cls_logits=logits,
        class_probs=softmax(logits),
        xi_raw=xi_raw,
        xi_mean=float(sigmoid(xi_raw)),
    )


@dataclass
class HeadSeeds:
    """Gradients arriving at the raw head outputs (pre-sigmoid location
    and next-frame values, class logits)."""

    d_loc_raw: np.ndarray
    d_logits: np.ndarray
    d_xi_raw: float

    @classmethod
    def zeros(cls, num_classes: int) -> "HeadSeeds":
        return cls(np.zeros(2), np.zeros(num_classes), 0.0)


def heads_backward(
    params: ParamSet, h: np.ndarray, seeds: HeadSeeds, tape: GradTape
) -> np.ndarray:
    """Accumulate head parameter gradients; returns the gradient in h."""
    tape.arrays["loc_W"] += np.outer(h, seeds.d_loc_raw)
    tape.arrays["loc_b"] += seeds.d_loc_raw
    tape.arrays["cls_W"] += np.outer(h, seeds.d_logits)
    tape.arrays["cls_b"] += seeds.d_logits
    tape.arrays["xi_W"][:, 0] += h * seeds.d_xi_raw
    tape.arrays["xi_b"][0] += seeds.d_xi_raw
    return (
        params.arrays["loc_W"] @ seeds.d_loc_raw
        + params.arrays["cls_W"] @ seeds.d_logits
        + params.arrays["xi_W"][:, 0] * seeds.d_xi_raw
    )


# --------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_init_arrays(arrays: dict[str, np.ndarray], learning_rate: float = 1e-3, **kwargs) -> AdamState:
    state = AdamState(learning_rate=learning_rate, **kwargs)
    state.m = {k: np.zeros_like(a) for k, a in arrays.items()}
    state.v = {k: np.zeros_like(a) for k, a in arrays.items()}
    return state


def adam_init(params: ParamSet, learning_rate: float = 1e-3, **kwargs) -> AdamState:
    return adam_init_arrays(params.arrays, learning_rate, **kwargs)


def adam_update(
    arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> bool:
    """One in-place Adam update on a name -> array mapping. Non-finite
    gradients reject the update and return False; values are left
    untouched."""
    if not all(np.isfinite(g).all() for g in grads.values()):
        return False
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        arrays[name] -= (
            state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        )
    return True


def adam_step(params: ParamSet, tape: GradTape, state: AdamState) -> bool:
    """Adam update for a ParamSet/GradTape pair."""
    return adam_update(params.arrays, tape.arrays, state)


# --------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic "BDCKPT01"
#   4 bytes   uint32 header length in bytes
#   N bytes   UTF-8 JSON header:
#               {"config": {input_dim, hidden_size, num_layers, num_classes},
#                "extra": {...caller metadata...},
#                "arrays": [{"name": str, "shape": [ints]}, ...]}
#   payload   for each manifest entry, in order: C-contiguous float64
#             little-endian raw bytes
# --------------------------------------------------------------------


def save_checkpoint(params: ParamSet, path: str, extra: dict | None = None) -> None:
    header = {
        "config": {
            "input_dim": params.config.input_dim,
            "hidden_size": params.config.hidden_size,
            "num_layers": params.config.num_layers,
            "num_classes": params.config.num_classes,
        },
        "extra": extra or {},
        "arrays": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in params.arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in params.arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = NetConfig(**header["config"])
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)
            )
    params = ParamSet(config, arrays)
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise ValueError(f"checkpoint array {name} missing or misshaped")
    return params, header["extra"]
