"""Small tanh MLPs, categorical / diagonal-Gaussian policy heads, and their KLs.

Parameters are plain numpy arrays.  Forward passes accept either arrays or
``autodiff.Tensor`` leaves, so the same code serves rollouts (no graph) and
loss evaluation (graph recorded for ``backward``).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, parameters

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer transition")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != self.layer_sizes[k : k + 2] or b.shape != (self.layer_sizes[k + 1],):
                raise ValueError(f"layer {k} has shapes {W.shape}, {b.shape}")


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal((max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


def init_mlp(layer_sizes: Sequence[int], rng, hidden_gain=1.0, out_gain=1.0) -> MlpParams:
    rng = np.random.default_rng(rng)
    n = len(layer_sizes) - 1
    weights = [
        orthogonal(rng, (layer_sizes[k], layer_sizes[k + 1]), out_gain if k == n - 1 else hidden_gain)
        for k in range(n)
    ]
    biases = [np.zeros(layer_sizes[k + 1]) for k in range(n)]
    return MlpParams(tuple(layer_sizes), weights, biases)


def mlp_apply(weights, biases, x):
    """tanh MLP on a 2-D batch; linear output layer."""
    h = Tensor(x) if isinstance(weights[0], Tensor) else x
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if k < last:
            h = h.tanh() if isinstance(h, Tensor) else np.tanh(h)
    return h


# --------------------------------------------------------------------------
# Distributions


@dataclass
class Categorical:
    logits: Tensor

    @property
    def log_probs(self) -> Tensor:
        return self.logits.log_softmax()

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logits.log_softmax().data)


@dataclass
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def categorical(logits) -> Categorical:
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("logits must be finite")
    return Categorical(logits)


def diag_gaussian(mean, log_std) -> DiagGaussian:
    mean, log_std = as_tensor(mean), as_tensor(log_std)
    return DiagGaussian(mean, log_std.clip(LOG_STD_MIN, LOG_STD_MAX))


def log_prob(dist, action) -> Tensor:
    """Log probability (categorical) or log density (Gaussian) of ``action``."""
    if isinstance(dist, Categorical):
        action = np.asarray(action)
        k = dist.logits.shape[-1]
        if not np.issubdtype(action.dtype, np.integer) or np.any((action < 0) | (action >= k)):
            raise ValueError(f"action index out of range for {k} categories")
        return dist.log_probs.take_last(action)
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1:] != dist.mean.shape[-1:]:
        raise ValueError("action dimension does not match the distribution")
    z = (action - dist.mean) * (-dist.log_std).exp()
    per_dim = z * z * (-0.5) - dist.log_std - 0.5 * _LOG_2PI
    return per_dim.sum(axis=-1)


def kl_closed_form(p, q) -> Tensor:
    """KL(p || q) per batch row."""
    if isinstance(p, Categorical) and isinstance(q, Categorical):
        lp, lq = p.log_probs, q.log_probs
        return (lp.exp() * (lp - lq)).sum(axis=-1)
    if isinstance(p, DiagGaussian) and isinstance(q, DiagGaussian):
        var_ratio = ((p.log_std - q.log_std) * 2.0).exp()
        diff = (p.mean - q.mean) * (-q.log_std).exp()
        per_dim = (var_ratio + diff * diff - 1.0) * 0.5 - (p.log_std - q.log_std)
        return per_dim.sum(axis=-1)
    raise TypeError("KL needs two distributions of the same family")


def entropy(dist) -> np.ndarray:
    if isinstance(dist, Categorical):
        lp = dist.log_probs.data
        return -(np.exp(lp) * lp).sum(-1)
    ls = np.broadcast_to(dist.log_std.data, dist.mean.shape)
    return (ls + 0.5 * (1.0 + _LOG_2PI)).sum(-1)


def noise_shape(dist) -> tuple:
    """Shape of the base noise ``sample_from_noise`` consumes."""
    if isinstance(dist, Categorical):
        return dist.logits.shape[:-1]
    return dist.mean.shape


def sample_from_noise(dist, noise: np.ndarray):
    """Inverse-CDF draw from uniform noise (categorical) or reparameterized normal noise."""
    if isinstance(dist, Categorical):
        cdf = np.cumsum(dist.probs, axis=-1)
        return np.minimum((np.asarray(noise)[..., None] > cdf).sum(-1), cdf.shape[-1] - 1)
    return dist.mean.data + np.exp(dist.log_std.data) * noise


def sample(dist, rng: np.random.Generator):
    if isinstance(dist, Categorical):
        return sample_from_noise(dist, rng.random(noise_shape(dist)))
    return sample_from_noise(dist, rng.standard_normal(noise_shape(dist)))


# --------------------------------------------------------------------------
# Policy and value networks


@dataclass
class PolicyParams:
    """MLP body plus head; ``log_std`` is state independent (Gaussian only)."""

    mlp: MlpParams
    kind: str
    log_std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "gaussian"):
            raise ValueError(f"unknown policy head {self.kind!r}")
        if (self.kind == "gaussian") != (self.log_std is not None):
            raise ValueError("log_std is required for, and only for, Gaussian heads")

    @property
    def obs_dim(self) -> int:
        return self.mlp.layer_sizes[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.mlp.weights, self.mlp.biases):
            out += [W, b]
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def with_arrays(self, arrays) -> "PolicyParams":
        arrays = [np.asarray(a.data if isinstance(a, Tensor) else a) for a in arrays]
        n = len(self.mlp.weights)
        mlp = MlpParams(self.mlp.layer_sizes, arrays[0 : 2 * n : 2], arrays[1 : 2 * n : 2])
        return PolicyParams(mlp, self.kind, arrays[2 * n] if self.kind == "gaussian" else None)

    def flat(self) -> np.ndarray:
        return flatten(self.arrays())

    def unflatten(self, vec: np.ndarray) -> "PolicyParams":
        return self.with_arrays(unflatten(vec, self.arrays()))


def init_policy(obs_dim, action_spec, rng, hidden=(64, 64), log_std_init=0.0) -> PolicyParams:
    """``action_spec`` is ``("discrete", k)`` or ``("continuous", dim)``."""
    kind, size = action_spec
    mlp = init_mlp((obs_dim, *hidden, size), rng, hidden_gain=1.0, out_gain=0.01)
    if kind == "discrete":
        return PolicyParams(mlp, "categorical")
    return PolicyParams(mlp, "gaussian", np.full(size, float(log_std_init)))


def _as_batch(x, dim: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise ValueError(f"expected input dimension {dim}, got shape {x.shape}")
    return x2, single


def _squeeze(t: Tensor, single: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if single else t


def policy_forward(params: PolicyParams, observation, arrays=None):
    """Distribution over actions; pass ``arrays`` (Tensor leaves) to record a graph."""
    x, single = _as_batch(observation, params.obs_dim)
    arrays = params.arrays() if arrays is None else arrays
    n = len(params.mlp.weights)
    out = as_tensor(mlp_apply(arrays[0 : 2 * n : 2], arrays[1 : 2 * n : 2], x))
    if params.kind == "categorical":
        return categorical(_squeeze(out, single))
    log_std = as_tensor(arrays[2 * n])
    return diag_gaussian(_squeeze(out, single), log_std)


def init_value(state_dim, rng, hidden=(64, 64)) -> MlpParams:
    return init_mlp((state_dim, *hidden, 1), rng, hidden_gain=1.0, out_gain=1.0)


def value_arrays(params: MlpParams) -> list[np.ndarray]:
    out = []
    for W, b in zip(params.weights, params.biases):
        out += [W, b]
    return out


def value_with_arrays(params: MlpParams, arrays) -> MlpParams:
    arrays = [np.asarray(a.data if isinstance(a, Tensor) else a) for a in arrays]
    return MlpParams(params.layer_sizes, arrays[0::2], arrays[1::2], params.activation)


def value_forward(params: MlpParams, global_state, arrays=None):
    """Scalar value per state; a Tensor when ``arrays`` are graph leaves."""
    x, single = _as_batch(global_state, params.layer_sizes[0])
    arrays = value_arrays(params) if arrays is None else arrays
    out = mlp_apply(arrays[0::2], arrays[1::2], x)
    if isinstance(out, Tensor):
        return out.reshape(()) if single else out.reshape(-1)
    return float(out[0, 0]) if single else out[:, 0]


# --------------------------------------------------------------------------
# Gradients and flat vectors


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like) -> list[np.ndarray]:
    out, i = [], 0
    for a in like:
        out.append(np.array(vec[i : i + a.size]).reshape(a.shape))
        i += a.size
    if i != len(vec):
        raise ValueError(f"vector has {len(vec)} entries, parameters need {i}")
    return out


def backward(loss: Tensor, leaves: Sequence[Tensor]) -> np.ndarray:
    """Gradient of scalar ``loss`` w.r.t. ``leaves``, flattened in leaf order."""
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    return flatten([np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves])


def loss_and_grad(loss_fn, arrays):
    """``loss_fn(leaves) -> Tensor``; returns ``(value, flat gradient)``."""
    leaves = parameters(arrays)
    loss = loss_fn(leaves)
    return loss.item(), backward(loss, leaves)


# --------------------------------------------------------------------------
# Checkpoints


def save_arrays(path, named: dict[str, list[np.ndarray]], meta: dict | None = None) -> None:
    """Store named array lists with a JSON header describing every shape."""
    header = {"meta": meta or {}, "groups": {k: [list(a.shape) for a in v] for k, v in named.items()}}
    payload = {f"{k}__{i}": np.asarray(a, dtype=np.float64) for k, v in named.items() for i, a in enumerate(v)}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **payload)
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path) -> tuple[dict[str, list[np.ndarray]], dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        named = {
            k: [z[f"{k}__{i}"].reshape(shape) for i, shape in enumerate(shapes)]
            for k, shapes in header["groups"].items()
        }
    return named, header["meta"]


def save_policy(path, params: PolicyParams) -> None:
    save_arrays(
        path,
        {"policy": params.arrays()},
        {"layer_sizes": list(params.mlp.layer_sizes), "kind": params.kind},
    )


def load_policy(path) -> PolicyParams:
    named, meta = load_arrays(path)
    arrays = named["policy"]
    sizes = tuple(meta["layer_sizes"])
    n = len(sizes) - 1
    mlp = MlpParams(sizes, arrays[0 : 2 * n : 2], arrays[1 : 2 * n : 2])
    return PolicyParams(mlp, meta["kind"], arrays[2 * n] if meta["kind"] == "gaussian" else None)
