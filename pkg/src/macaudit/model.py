"""Multi-branch attribute classifier: a shared trunk and one branch per attribute.

Every hidden layer is dense -> batch-norm -> ReLU -> inverted dropout. Each
branch ends in a dense softmax head. The hidden layers of all branches have
identical sizes, so their parameters are stored stacked along a leading head
axis; the first branch layer of all heads runs as a single wide matmul.

Parameter names::

    trunk.{i}.{W,b,gamma,beta}     W: (fan_in, fan_out)
    branch.{j}.{W,b,gamma,beta}    W: (n_heads, fan_in, fan_out)
    head.{h}.{W,b}                 W: (fan_in, n_out[h])

Batch-norm running statistics live in ``model.buffers`` under the same prefix
with ``.mean`` and ``.var`` suffixes.
"""
from __future__ import annotations

import copy
import enum
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, ShapeError
from .numeric import DTYPE, RngStream

MAGIC = b"MACB"
FORMAT_VERSION = 1


class ForwardMode(enum.Enum):
    TRAIN = "train"  # dropout on, batch statistics
    INFER = "infer"  # dropout off, running statistics
    MC_DROPOUT = "mc_dropout"  # dropout on, running statistics


@dataclass(frozen=True)
class MacSpec:
    n_in: int
    heads: tuple = ()
    trunk_sizes: tuple = (512,)
    branch_sizes: tuple = (512,)
    p_drop: float = 0.5
    regularize_heads: bool = False
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple((str(n), int(k)) for n, k in self.heads))
        object.__setattr__(self, "trunk_sizes", tuple(int(s) for s in self.trunk_sizes))
        object.__setattr__(self, "branch_sizes", tuple(int(s) for s in self.branch_sizes))
        if self.n_in < 1:
            raise ConfigError("n_in must be positive")
        if not self.heads:
            raise ConfigError("at least one head is required")
        if len({n for n, _ in self.heads}) != len(self.heads):
            raise ConfigError("head names must be unique")
        if any(k < 2 for _, k in self.heads):
            raise ConfigError("every head needs n_out >= 2")
        if any(s < 1 for s in self.trunk_sizes + self.branch_sizes):
            raise ConfigError("layer sizes must be positive")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")

    @property
    def head_names(self) -> list[str]:
        return [n for n, _ in self.heads]

    def to_json(self) -> str:
        d = asdict(self)
        d["heads"] = [list(h) for h in self.heads]
        d["trunk_sizes"] = list(self.trunk_sizes)
        d["branch_sizes"] = list(self.branch_sizes)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MacSpec":
        d = json.loads(text)
        d["heads"] = tuple(tuple(h) for h in d["heads"])
        return cls(**d)


@dataclass
class _LayerCache:
    inp: np.ndarray
    xhat: np.ndarray | None = None
    invstd: np.ndarray | None = None
    gate: np.ndarray | None = None  # ReLU and dropout mask folded together, carries the 1/(1-p) scale
    relu: bool = True


@dataclass
class Cache:
    """Intermediates of one forward pass, consumed by :meth:`MacModel.backward`."""

    mode: ForwardMode
    version: int
    trunk: list = field(default_factory=list)
    branch: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _glorot(rng: RngStream, shape) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class MacModel:
    def __init__(self, spec: MacSpec, params: dict, buffers: dict):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.version = 0

    # layout ---------------------------------------------------------------

    @staticmethod
    def layout(spec: MacSpec) -> tuple[list, list]:
        """Names and shapes of trainable parameters and buffers, in canonical order."""
        params, buffers = [], []
        H = len(spec.heads)
        width = spec.n_in
        for i, size in enumerate(spec.trunk_sizes):
            p = f"trunk.{i}"
            params += [(f"{p}.W", (width, size)), (f"{p}.b", (size,)), (f"{p}.gamma", (size,)), (f"{p}.beta", (size,))]
            buffers += [(f"{p}.mean", (size,)), (f"{p}.var", (size,))]
            width = size
        for j, size in enumerate(spec.branch_sizes):
            p = f"branch.{j}"
            params += [(f"{p}.W", (H, width, size)), (f"{p}.b", (H, size)), (f"{p}.gamma", (H, size)), (f"{p}.beta", (H, size))]
            buffers += [(f"{p}.mean", (H, size)), (f"{p}.var", (H, size))]
            width = size
        for h, (_, n_out) in enumerate(spec.heads):
            p = f"head.{h}"
            params += [(f"{p}.W", (width, n_out)), (f"{p}.b", (n_out,))]
            if spec.regularize_heads:
                params += [(f"{p}.gamma", (n_out,)), (f"{p}.beta", (n_out,))]
                buffers += [(f"{p}.mean", (n_out,)), (f"{p}.var", (n_out,))]
        return params, buffers

    def param_names(self) -> list[str]:
        return list(self.params)

    def branch_weight(self, head: int | str, layer: int) -> np.ndarray:
        """Weight matrix of one head's branch; ``layer == len(branch_sizes)`` is the softmax layer."""
        h = head if isinstance(head, int) else self.spec.head_names.index(head)
        if layer == len(self.spec.branch_sizes):
            return self.params[f"head.{h}.W"]
        return self.params[f"branch.{layer}.W"][h]

    def set_params(self, new: dict) -> None:
        for name, value in new.items():
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name] = np.asarray(value, dtype=DTYPE)
        self.version += 1

    def copy(self) -> "MacModel":
        m = MacModel(self.spec, copy.deepcopy(self.params), copy.deepcopy(self.buffers))
        m.version = self.version
        return m

    # forward --------------------------------------------------------------
    #
    # Activations are always 2-D. A branch layer's output for all heads is one
    # wide (n, n_heads * size) matrix; head k owns columns k*size:(k+1)*size.

    def _flat(self, name) -> np.ndarray:
        return self.params[name].reshape(-1)

    def _dense(self, prefix, inp) -> np.ndarray:
        W = self.params[f"{prefix}.W"]
        if W.ndim == 2:
            return inp @ W
        H, n_in, n_out = W.shape
        if prefix == "branch.0":
            # every head reads the same trunk output
            return inp @ W.transpose(1, 0, 2).reshape(n_in, H * n_out)
        z = np.empty((inp.shape[0], H * n_out))
        for h in range(H):
            z[:, h * n_out:(h + 1) * n_out] = inp[:, h * n_in:(h + 1) * n_in] @ W[h]
        return z

    def _hidden(self, prefix, inp, mode, rng, relu=True):
        spec = self.spec
        B = self.buffers
        gamma = self._flat(f"{prefix}.gamma")
        beta = self._flat(f"{prefix}.beta")
        bias = self._flat(f"{prefix}.b")
        shape = B[f"{prefix}.mean"].shape
        z = self._dense(prefix, inp)
        if mode is ForwardMode.TRAIN:
            # the dense bias cancels under batch statistics; it only shifts the running mean
            mu = z.mean(axis=0)
            z -= mu
            var = np.mean(z * z, axis=0)
            mom = spec.bn_momentum
            B[f"{prefix}.mean"] = mom * B[f"{prefix}.mean"] + (1.0 - mom) * (mu + bias).reshape(shape)
            B[f"{prefix}.var"] = mom * B[f"{prefix}.var"] + (1.0 - mom) * var.reshape(shape)
            invstd = 1.0 / np.sqrt(var + spec.bn_eps)
            z *= invstd
            xhat = z
            y = gamma * xhat
            y += beta
        else:
            # running statistics: batch-norm is a fixed affine map, and the
            # inverted-dropout scale commutes with ReLU, so fold both into it
            dropout = mode is ForwardMode.MC_DROPOUT and spec.p_drop > 0.0
            scale = gamma / np.sqrt(B[f"{prefix}.var"].reshape(-1) + spec.bn_eps)
            shift = beta + (bias - B[f"{prefix}.mean"].reshape(-1)) * scale
            if dropout:
                scale = scale / (1.0 - spec.p_drop)
                shift = shift / (1.0 - spec.p_drop)
            z *= scale
            z += shift
            if relu:
                np.maximum(z, 0.0, out=z)
            if dropout:
                z *= rng.keep_mask(z.shape, spec.p_drop)
            return z, _LayerCache(inp, relu=relu)
        gate = y > 0 if relu else None
        if spec.p_drop > 0.0:
            keep = rng.keep_mask(y.shape, spec.p_drop)
            gate = keep if gate is None else np.logical_and(gate, keep, out=keep)
            gate = gate * (1.0 / (1.0 - spec.p_drop))
        out = y * gate if gate is not None else y
        return out, _LayerCache(inp, xhat, invstd, gate, relu)

    def _head_input(self, h, k):
        if not self.spec.branch_sizes:
            return h
        w = self.spec.branch_sizes[-1]
        return h[:, k * w:(k + 1) * w]

    def forward(self, x, mode: ForwardMode = ForwardMode.INFER, rng: RngStream | None = None):
        """Per-head softmax outputs (each ``n_b x n_out``) and the cache for :meth:`backward`."""
        spec = self.spec
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != spec.n_in:
            raise ShapeError(f"batch shape {x.shape} does not match n_in={spec.n_in}")
        if mode is ForwardMode.TRAIN and x.shape[0] < 2:
            raise ShapeError("TRAIN mode needs at least 2 samples for batch statistics")
        if mode is not ForwardMode.INFER and spec.p_drop > 0.0 and rng is None:
            raise ConfigError(f"{mode.name} forward needs an RngStream")
        cache = Cache(mode, self.version)
        h = x
        for i in range(len(spec.trunk_sizes)):
            h, c = self._hidden(f"trunk.{i}", h, mode, rng)
            cache.trunk.append(c)
        for j in range(len(spec.branch_sizes)):
            h, c = self._hidden(f"branch.{j}", h, mode, rng)
            cache.branch.append(c)
        outputs = []
        for k in range(len(spec.heads)):
            inp = self._head_input(h, k)
            if spec.regularize_heads:
                z, c = self._hidden(f"head.{k}", inp, mode, rng, relu=False)
            else:
                z = inp @ self.params[f"head.{k}.W"] + self.params[f"head.{k}.b"]
                c = _LayerCache(inp, relu=False)
            cache.heads.append(c)
            outputs.append(_softmax(z))
        cache.outputs = outputs
        return outputs, cache

    def predict(self, x) -> list[np.ndarray]:
        return self.forward(x, ForwardMode.INFER)[0]

    # backward -------------------------------------------------------------

    def _hidden_backward(self, prefix, c: _LayerCache, dout, mode, grads, need_input=True):
        if mode is not ForwardMode.TRAIN:
            raise ConsistencyError("backward needs a cache from a TRAIN-mode forward")
        shape = self.params[f"{prefix}.gamma"].shape
        dy = dout * c.gate if c.gate is not None else dout
        n = dy.shape[0]
        dbeta = dy.sum(axis=0)
        dgamma = (dy * c.xhat).sum(axis=0)
        grads[f"{prefix}.gamma"] = dgamma.reshape(shape)
        grads[f"{prefix}.beta"] = dbeta.reshape(shape)
        dz = c.xhat * (dgamma / n)
        np.subtract(dy, dz, out=dz)
        dz -= dbeta / n
        dz *= self._flat(f"{prefix}.gamma") * c.invstd
        return self._dense_backward(prefix, c.inp, dz, grads, need_input)

    def _dense_backward(self, prefix, inp, dz, grads, need_input=True):
        W = self.params[f"{prefix}.W"]
        grads[f"{prefix}.b"] = dz.sum(axis=0).reshape(self.params[f"{prefix}.b"].shape)
        if W.ndim == 2:
            grads[f"{prefix}.W"] = inp.T @ dz
            return dz @ W.T if need_input else None
        H, n_in, n_out = W.shape
        if prefix == "branch.0":
            grads[f"{prefix}.W"] = np.ascontiguousarray((inp.T @ dz).reshape(n_in, H, n_out).transpose(1, 0, 2))
            if not need_input:
                return None
            return dz @ W.transpose(1, 0, 2).reshape(n_in, H * n_out).T
        dW = np.empty_like(W)
        dinp = np.empty((dz.shape[0], H * n_in))
        for h in range(H):
            a = inp[:, h * n_in:(h + 1) * n_in]
            d = dz[:, h * n_out:(h + 1) * n_out]
            dW[h] = a.T @ d
            dinp[:, h * n_in:(h + 1) * n_in] = d @ W[h].T
        grads[f"{prefix}.W"] = dW
        return dinp

    def backward(self, cache: Cache, upstream) -> dict:
        """Gradients of ``sum_h <upstream[h], outputs[h]>`` w.r.t. every trainable parameter.

        ``upstream[h]`` is the gradient with respect to head ``h``'s softmax output.
        """
        spec = self.spec
        if cache.version != self.version:
            raise ConsistencyError(
                f"cache was built at parameter version {cache.version}, model is at {self.version}"
            )
        if len(upstream) != len(spec.heads):
            raise ShapeError(f"expected {len(spec.heads)} upstream gradients, got {len(upstream)}")
        grads: dict = {}
        dh_heads = []
        for k, (p, g) in enumerate(zip(cache.outputs, upstream)):
            g = np.asarray(g, dtype=DTYPE)
            if g.shape != p.shape:
                raise ShapeError(f"head {k}: upstream shape {g.shape} != output shape {p.shape}")
            dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
            c = cache.heads[k]
            if spec.regularize_heads:
                dh_heads.append(self._hidden_backward(f"head.{k}", c, dz, cache.mode, grads))
            else:
                dh_heads.append(self._dense_backward(f"head.{k}", c.inp, dz, grads))
        if spec.branch_sizes:
            dh = np.concatenate(dh_heads, axis=1)
        else:
            dh = np.sum(dh_heads, axis=0)
        # the gradient with respect to the network input is never needed
        first = ("trunk", 0) if spec.trunk_sizes else ("branch", 0)
        for j in reversed(range(len(spec.branch_sizes))):
            dh = self._hidden_backward(f"branch.{j}", cache.branch[j], dh, cache.mode, grads, ("branch", j) != first)
        for i in reversed(range(len(spec.trunk_sizes))):
            dh = self._hidden_backward(f"trunk.{i}", cache.trunk[i], dh, cache.mode, grads, ("trunk", i) != first)
        return {name: grads[name] for name in self.params}


def build_mac(spec: MacSpec, rng: RngStream) -> MacModel:
    """Fresh model: uniform fan-based weights, zero biases, identity batch-norm."""
    param_layout, buffer_layout = MacModel.layout(spec)
    params = {}
    for name, shape in param_layout:
        kind = name.rsplit(".", 1)[1]
        if kind == "W":
            params[name] = _glorot(rng.split(name), shape)
        elif kind == "gamma":
            params[name] = np.ones(shape, dtype=DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=DTYPE)
    buffers = {
        name: (np.ones(shape, dtype=DTYPE) if name.endswith(".var") else np.zeros(shape, dtype=DTYPE))
        for name, shape in buffer_layout
    }
    return MacModel(spec, params, buffers)


# serialization ----------------------------------------------------------------

_HEADER = struct.Struct("<4sHI")


def serialize(model: MacModel) -> bytes:
    """``MACB``, u16 version, u32 spec length, spec JSON, float64 LE blocks, u32 CRC32."""
    spec_bytes = model.spec.to_json().encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(spec_bytes)), spec_bytes]
    param_layout, buffer_layout = MacModel.layout(model.spec)
    for name, _ in param_layout:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    for name, _ in buffer_layout:
        parts.append(np.ascontiguousarray(model.buffers[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> MacModel:
    if len(data) < _HEADER.size + 4:
        raise FormatError("truncated model stream")
    magic, version, spec_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch: model stream is corrupt or truncated")
    off = _HEADER.size
    try:
        spec = MacSpec.from_json(body[off:off + spec_len].decode("utf-8"))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"unreadable spec block: {exc}") from None
    off += spec_len
    param_layout, buffer_layout = MacModel.layout(spec)
    expected = off + 8 * sum(int(np.prod(s)) for _, s in param_layout + buffer_layout)
    if len(body) != expected:
        raise FormatError(f"payload size {len(body)} does not match spec (expected {expected})")
    arrays = {}
    for name, shape in param_layout + buffer_layout:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * n
    params = {n: arrays[n] for n, _ in param_layout}
    buffers = {n: arrays[n] for n, _ in buffer_layout}
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in {name}")
    return MacModel(spec, params, buffers)


def save_model(model: MacModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> MacModel:
    try:
        with open(path, "rb") as fh:
            return deserialize(fh.read())
    except FileNotFoundError:
        raise FormatError(f"model file not found: {path}") from None
