"""Small dense networks with hand-written backpropagation.

Three fixed architectures are provided:

* :class:`CommNetPolicy` - shared encoder, ``L`` communication blocks that see
  each agent's hidden state next to the mean of the other agents' states, and a
  shared 7-way output head per agent.
* :class:`DnnPolicy` - the same depth without communication; one instance per
  agent.
* :class:`Critic` - joint observations and one-hot joint actions to a scalar.

Weights are stored ``[out, in]``; batches are row-major, so a layer computes
``x @ W.T + b``. Every network caches its last forward pass so ``backward`` can
reuse the activations.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class NumericFault(FloatingPointError):
    pass


class LifecycleError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis; masked-out entries get probability 0."""
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def init_params(shapes: list[tuple[int, int]], seed: int, dtype=np.float64) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases for layers of ``(out, in)`` shape."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_out, fan_in in shapes:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def encode(weight: np.ndarray, bias: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Encoder pre-activation for one or many observations."""
    if obs.shape[-1] != weight.shape[1]:
        raise ShapeError(f"observation length {obs.shape[-1]} != encoder input {weight.shape[1]}")
    return obs @ weight.T + bias


def comm_mean(hidden: np.ndarray, m: int | None = None) -> np.ndarray:
    """Mean of the other agents' hidden states.

    ``hidden`` has agents on axis -2. With ``m`` given, returns agent ``m``'s
    communication vector, otherwise all of them.
    """
    n = hidden.shape[-2]
    if n < 2:
        raise ValueError("communication needs at least two agents")
    # Sum only the other agents, so M = 2 returns the neighbour's state bit for bit.
    others = 1.0 - np.eye(n, dtype=hidden.dtype)
    c = np.matmul(others, hidden) / (n - 1)
    return c if m is None else c[..., m, :]


def comm_mean_backward(dc: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the hidden states given the gradient w.r.t. every ``comm_mean`` output.

    Each agent's state feeds every other agent's mean with weight ``1/(M-1)``
    and never its own.
    """
    n = dc.shape[-2]
    return np.matmul(1.0 - np.eye(n, dtype=dc.dtype), dc) / (n - 1)


def _check_finite(x: np.ndarray, layer: int, name: str) -> None:
    if not np.isfinite(x).all():
        raise NumericFault(f"{name}: non-finite activation at layer {layer}")


class Network:
    """Parameter bookkeeping shared by the concrete architectures."""

    kind = "network"

    def __init__(self, shapes: list[tuple[int, int]], seed: int = 0, dtype=np.float64):
        self.shapes = [tuple(s) for s in shapes]
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = init_params(self.shapes, seed, self.dtype)
        self._cache = None

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[2 * i], self.params[2 * i + 1]

    @property
    def n_layers(self) -> int:
        return len(self.shapes)

    def copy(self) -> "Network":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        other._cache = None
        return other

    def load_params(self, params: list[np.ndarray]) -> None:
        if len(params) != len(self.params) or any(a.shape != b.shape for a, b in zip(params, self.params)):
            raise ShapeError("parameter shapes do not match this network")
        self.params = [np.array(p, dtype=self.dtype) for p in params]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def spec(self) -> dict:
        return {"kind": self.kind, "shapes": [list(s) for s in self.shapes], "seed": self.seed, **self._extra_spec()}

    def _extra_spec(self) -> dict:
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise LifecycleError("backward() called without a preceding forward()")
        cache, self._cache = self._cache, None
        return cache

    def _mlp_forward(self, x: np.ndarray, first: int, last: int, relu_last: bool = False) -> np.ndarray:
        """Dense layers ``first..last-1``, ReLU between them; appends to the cache."""
        for i in range(first, last):
            w, b = self.layer(i)
            z = x @ w.T + b
            _check_finite(z, i, self.kind)
            self._cache.append((x, z))
            x = relu(z) if (i < last - 1 or relu_last) else z
        return x

    def _mlp_backward(self, grads: list, dx: np.ndarray, first: int, last: int, relu_last: bool = False) -> np.ndarray:
        for i in reversed(range(first, last)):
            x, z = self._cache_layers[i]
            if i < last - 1 or relu_last:
                dx = dx * (z > 0)
            w, _ = self.layer(i)
            grads[2 * i] = dx.T @ x
            grads[2 * i + 1] = dx.sum(axis=0)
            dx = dx @ w
        return dx


class CommNetPolicy(Network):
    kind = "commnet"

    def __init__(self, obs_len: int, n_agents: int, n_actions: int = 7, hidden: int = 64, blocks: int = 6,
                 seed: int = 0, dtype=np.float64):
        if n_agents < 2:
            raise ValueError("CommNet needs at least two agents")
        self.obs_len, self.n_agents, self.n_actions = obs_len, n_agents, n_actions
        self.hidden, self.blocks = hidden, blocks
        shapes = [(hidden, obs_len)] + [(hidden, 2 * hidden)] * blocks + [(n_actions, hidden)]
        super().__init__(shapes, seed, dtype)

    def _extra_spec(self) -> dict:
        return {"obs_len": self.obs_len, "n_agents": self.n_agents, "n_actions": self.n_actions,
                "hidden": self.hidden, "blocks": self.blocks}

    def logits(self, obs: np.ndarray) -> np.ndarray:
        """``obs`` is ``[M, D]`` or ``[B, M, D]``; returns logits of matching leading shape."""
        single = obs.ndim == 2
        if single:
            obs = obs[None]
        b, m, d = obs.shape
        if m != self.n_agents or d != self.obs_len:
            raise ShapeError(f"expected [*, {self.n_agents}, {self.obs_len}] observations, got {obs.shape}")
        self._cache = []
        w, bias = self.layer(0)
        x = obs.reshape(b * m, d).astype(self.dtype, copy=False)
        z = encode(w, bias, x)
        _check_finite(z, 0, self.kind)
        self._cache.append((x, z))
        h = relu(z)
        for layer in range(1, self.blocks + 1):
            hb = h.reshape(b, m, self.hidden)
            inp = np.concatenate([hb, comm_mean(hb)], axis=-1).reshape(b * m, 2 * self.hidden)
            w, bias = self.layer(layer)
            z = inp @ w.T + bias
            _check_finite(z, layer, self.kind)
            self._cache.append((inp, z))
            h = relu(z)
        out = self._mlp_forward(h, self.blocks + 1, self.blocks + 2)
        self._shape = (b, m)
        out = out.reshape(b, m, self.n_actions)
        return out[0] if single else out

    def forward(self, obs: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Per-agent action probabilities."""
        return softmax(self.logits(obs), mask)

    def backward(self, dlogits: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given the gradient of a scalar w.r.t. the last logits."""
        self._cache_layers = self._take_cache()
        b, m = self._shape
        grads: list = [None] * len(self.params)
        dlogits = np.asarray(dlogits, dtype=self.dtype).reshape(b * m, self.n_actions)
        dh = self._mlp_backward(grads, dlogits, self.blocks + 1, self.blocks + 2)
        for layer in range(self.blocks, 0, -1):
            inp, z = self._cache_layers[layer]
            dz = dh * (z > 0)
            w, _ = self.layer(layer)
            grads[2 * layer] = dz.T @ inp
            grads[2 * layer + 1] = dz.sum(axis=0)
            dinp = (dz @ w).reshape(b, m, 2 * self.hidden)
            dc = dinp[..., self.hidden:]
            dhb = dinp[..., : self.hidden] + comm_mean_backward(dc)
            dh = dhb.reshape(b * m, self.hidden)
        self._mlp_backward(grads, dh, 0, 1, relu_last=True)
        self._cache_layers = None
        return grads


class DnnPolicy(Network):
    """Per-agent network with no communication; outputs 7 scores."""

    kind = "dnn"

    def __init__(self, obs_len: int, n_actions: int = 7, hidden: int = 64, blocks: int = 6,
                 seed: int = 0, dtype=np.float64):
        self.obs_len, self.n_actions, self.hidden, self.blocks = obs_len, n_actions, hidden, blocks
        shapes = [(hidden, obs_len)] + [(hidden, hidden)] * blocks + [(n_actions, hidden)]
        super().__init__(shapes, seed, dtype)

    def _extra_spec(self) -> dict:
        return {"obs_len": self.obs_len, "n_actions": self.n_actions, "hidden": self.hidden, "blocks": self.blocks}

    def logits(self, obs: np.ndarray) -> np.ndarray:
        if obs.shape[-1] != self.obs_len:
            raise ShapeError(f"expected observation length {self.obs_len}, got {obs.shape[-1]}")
        single = obs.ndim == 1
        x = obs[None] if single else obs
        self._cache = []
        out = self._mlp_forward(x.astype(self.dtype, copy=False), 0, self.n_layers)
        return out[0] if single else out

    def forward(self, obs: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return softmax(self.logits(obs), mask)

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        self._cache_layers = self._take_cache()
        grads: list = [None] * len(self.params)
        self._mlp_backward(grads, np.atleast_2d(np.asarray(dout, dtype=self.dtype)), 0, self.n_layers)
        self._cache_layers = None
        return grads


class Critic(Network):
    kind = "critic"

    def __init__(self, obs_len: int, n_agents: int, n_actions: int = 7, hidden: int = 64, layers: int = 6,
                 seed: int = 0, dtype=np.float64):
        self.obs_len, self.n_agents, self.n_actions = obs_len, n_agents, n_actions
        self.hidden, self.hidden_layers = hidden, layers
        in_len = n_agents * (obs_len + n_actions)
        shapes = [(hidden, in_len)] + [(hidden, hidden)] * (layers - 1) + [(1, hidden)]
        super().__init__(shapes, seed, dtype)

    def _extra_spec(self) -> dict:
        return {"obs_len": self.obs_len, "n_agents": self.n_agents, "n_actions": self.n_actions,
                "hidden": self.hidden, "layers": self.hidden_layers}

    def joint_input(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Concatenate ``[B, M, D]`` observations with one-hot ``[B, M]`` action ids."""
        b = obs.shape[0]
        onehot = np.zeros((b, self.n_agents, self.n_actions), dtype=self.dtype)
        np.put_along_axis(onehot, actions[..., None].astype(np.intp), 1.0, axis=-1)
        return np.concatenate([obs.reshape(b, -1).astype(self.dtype, copy=False), onehot.reshape(b, -1)], axis=1)

    def forward(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Q values, shape ``[B]`` (or a scalar for a single unbatched sample)."""
        single = obs.ndim == 2
        if single:
            obs, actions = obs[None], np.asarray(actions)[None]
        if obs.shape[1:] != (self.n_agents, self.obs_len) or actions.shape != obs.shape[:2]:
            raise ShapeError(f"critic expects [B, {self.n_agents}, {self.obs_len}] and [B, {self.n_agents}]")
        return self.forward_raw(self.joint_input(obs, np.asarray(actions)), single)

    def forward_raw(self, x: np.ndarray, single: bool = False):
        if x.shape[-1] != self.shapes[0][1]:
            raise ShapeError(f"critic input length {x.shape[-1]} != {self.shapes[0][1]}")
        self._cache = []
        q = self._mlp_forward(x, 0, self.n_layers)[:, 0]
        return q[0] if single else q

    def backward(self, dq: np.ndarray) -> list[np.ndarray]:
        self._cache_layers = self._take_cache()
        grads: list = [None] * len(self.params)
        self._mlp_backward(grads, np.reshape(dq, (-1, 1)).astype(self.dtype), 0, self.n_layers)
        self._cache_layers = None
        return grads


class Adam:
    """Bias-corrected Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(self.m):
            raise ShapeError("parameter list does not match optimizer state")
        for g in grads:
            if not np.isfinite(g).all():
                raise NumericFault("non-finite gradient passed to Adam")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


_KINDS = {"commnet": CommNetPolicy, "dnn": DnnPolicy, "critic": Critic}


def build(spec: dict, dtype=np.float64) -> Network:
    kind = spec["kind"]
    kwargs = {k: v for k, v in spec.items() if k not in ("kind", "shapes", "seed")}
    net = _KINDS[kind](seed=spec["seed"], dtype=dtype, **kwargs)
    if [list(s) for s in net.shapes] != [list(s) for s in spec["shapes"]]:
        raise ShapeError(f"shape spec in checkpoint does not match a {kind} network")
    return net


def save_checkpoint(path: str | Path, nets: dict[str, Network], meta: dict | None = None) -> Path:
    """Write named networks to one ``.npz`` file with a JSON header."""
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "nets": {k: n.spec() for k, n in nets.items()}}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, net in nets.items():
        for i, p in enumerate(net.params):
            arrays[f"{name}/{i}"] = p
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect: dict[str, dict] | None = None, dtype=np.float64):
    """Returns ``(nets, meta)``. ``expect`` maps names to specs the file must match."""
    with np.load(Path(path)) as data:
        try:
            header = json.loads(bytes(data["__header__"]).decode())
        except KeyError as exc:
            raise ShapeError(f"{path}: not a checkpoint (missing header)") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, spec in header["nets"].items():
            if expect is not None and name in expect:
                want = {k: v for k, v in expect[name].items() if k != "seed"}
                have = {k: v for k, v in spec.items() if k != "seed"}
                if want != have:
                    raise ShapeError(f"{path}: network {name!r} has shape spec {have}, expected {want}")
            net = build(spec, dtype)
            params = [data[f"{name}/{i}"] for i in range(len(net.params))]
            net.load_params(params)
            nets[name] = net
    if expect is not None:
        missing = set(expect) - set(nets)
        if missing:
            raise ShapeError(f"{path}: missing networks {sorted(missing)}")
    return nets, header["meta"]
