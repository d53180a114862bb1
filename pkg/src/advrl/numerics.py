"""Dense arrays, a small layer stack with reverse-mode gradients, and optimizers.

Tensors are plain ``numpy.ndarray`` objects. Frames use the (H, W, C) layout
and batches prepend an N axis, so a network consumes (N, H, W, C) arrays.
Parameters are stored as float32 by default; every forward and backward pass
runs in float64 so reductions accumulate in 64-bit.

Gradients are computed layer by layer from the activations recorded on a
:class:`GradientTape` during :meth:`LayerStack.forward`.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence, Union

import numpy as np

Tensor = np.ndarray


class NumericsError(RuntimeError):
    """Raised on shape mismatches, non-finite values or tape misuse."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: int
    stride: int = 1
    kind: str = "conv2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise NumericsError(f"Conv2D expects (H, W, C) input, got {tuple(in_shape)}")
        h, w, _ = in_shape
        if h < self.kernel or w < self.kernel:
            raise NumericsError(f"kernel {self.kernel} larger than input {h}x{w}")
        # no padding
        return ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1, self.filters)


@dataclass(frozen=True)
class Dense:
    out: int
    kind: str = "dense"

    def output_shape(self, in_shape):
        return (self.out,)


@dataclass(frozen=True)
class ReLU:
    kind: str = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)


LayerSpec = Union[Conv2D, Dense, ReLU]
_KINDS = {"conv2d": Conv2D, "dense": Dense, "relu": ReLU}


def layer_from_dict(d: Mapping) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise NumericsError(f"unknown layer kind {kind!r}") from None
    return cls(**d)


def layer_to_dict(layer: LayerSpec) -> dict:
    return asdict(layer)


def desk_layers(n_actions: int) -> list[LayerSpec]:
    """Small conv net for 21x21 frames.

    The second kernel is 4 wide so the receptive fields tile the whole frame
    (21 -> 10 -> 4); with 3x3/stride-2 twice the last two rows and columns are never seen.
    """
    return [Conv2D(8, 3, 2), ReLU(), Conv2D(16, 4, 2), ReLU(), Dense(64), ReLU(), Dense(n_actions)]


def atari_layers(n_actions: int) -> list[LayerSpec]:
    """The full-size stack for 84x84 inputs."""
    return [
        Conv2D(32, 8, 4), ReLU(),
        Conv2D(64, 4, 2), ReLU(),
        Conv2D(64, 3, 1), ReLU(),
        Dense(512), ReLU(),
        Dense(n_actions),
    ]


def mlp_layers(hidden: Sequence[int], n_actions: int) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    for h in hidden:
        layers += [Dense(h), ReLU()]
    layers.append(Dense(n_actions))
    return layers


# ---------------------------------------------------------------------------
# Conv helpers (NHWC, no padding)
# ---------------------------------------------------------------------------


def _im2col(x: Tensor, k: int, s: int) -> Tensor:
    n, h, w, c = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    return cols.reshape(n, ho, wo, k * k * c)


def _col2im(dcols: Tensor, x_shape, k: int, s: int) -> Tensor:
    n, h, w, c = x_shape
    _, ho, wo, _ = dcols.shape
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    return dx


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class GradientTape:
    """Activations cached by one forward pass; consumed by exactly one backward pass."""

    def __init__(self, net_id: int, caches: list, single: bool):
        self.net_id = net_id
        self.caches = caches
        self.single = single
        self.consumed = False


class LayerStack:
    """An ordered stack of Conv2D / Dense / ReLU layers with named parameters.

    ``params`` maps ``"<layer index>.weight"`` / ``"<layer index>.bias"`` to arrays.
    Conv weights have shape (k, k, C_in, filters); dense weights (in, out).
    Dense layers flatten whatever arrives, so a conv output feeds a dense layer directly.
    """

    def __init__(self, input_shape, layers: Sequence[LayerSpec], params=None, dtype=np.float32):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        self.params: dict[str, Tensor] = {}
        if params is not None:
            expected = self.param_shapes()
            if set(params) != set(expected):
                raise NumericsError(f"parameter names {sorted(params)} != {sorted(expected)}")
            for name, arr in params.items():
                arr = np.asarray(arr)
                if arr.shape != expected[name]:
                    raise NumericsError(f"{name}: shape {arr.shape} != {expected[name]}")
                self.params[name] = np.array(arr, dtype=self.dtype)

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, input_shape, layers, rng: np.random.Generator, dtype=np.float32) -> "LayerStack":
        """He-normal weights, zero biases."""
        net = cls(input_shape, layers, dtype=dtype)
        for name, shape in net.param_shapes().items():
            if name.endswith(".bias"):
                net.params[name] = np.zeros(shape, dtype=net.dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                net.params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(net.dtype)
        return net

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            in_shape = self.shapes[i]
            if isinstance(layer, Conv2D):
                shapes[f"{i}.weight"] = (layer.kernel, layer.kernel, in_shape[2], layer.filters)
                shapes[f"{i}.bias"] = (layer.filters,)
            elif isinstance(layer, Dense):
                shapes[f"{i}.weight"] = (int(np.prod(in_shape)), layer.out)
                shapes[f"{i}.bias"] = (layer.out,)
        return shapes

    @property
    def n_outputs(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "LayerStack":
        return copy.deepcopy(self)

    def same_architecture(self, other: "LayerStack") -> bool:
        return self.input_shape == other.input_shape and self.layers == other.layers

    def load_params_from(self, other: "LayerStack") -> None:
        if not self.same_architecture(other):
            raise NumericsError("architecture mismatch")
        for name, arr in other.params.items():
            self.params[name] = arr.copy()

    # -- passes ------------------------------------------------------------

    def _batched(self, x: Tensor) -> tuple[Tensor, bool]:
        x = np.asarray(x)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] == self.input_shape:
            return x, False
        raise NumericsError(f"input shape {x.shape} does not match network input {self.input_shape}")

    def forward(self, x: Tensor, record: bool = True):
        """Evaluate the stack.

        Accepts a single input of ``input_shape`` or a batch with a leading axis.
        Returns ``(output, tape)``; the tape is ``None`` when ``record`` is false.
        """
        xb, single = self._batched(x)
        h = xb.astype(np.float64)
        caches = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                w = self.params[f"{i}.weight"].astype(np.float64)
                b = self.params[f"{i}.bias"].astype(np.float64)
                cols = _im2col(h, layer.kernel, layer.stride)
                caches.append((h.shape, cols))
                h = cols @ w.reshape(-1, layer.filters) + b
            elif isinstance(layer, Dense):
                w = self.params[f"{i}.weight"].astype(np.float64)
                b = self.params[f"{i}.bias"].astype(np.float64)
                flat = h.reshape(h.shape[0], -1)
                caches.append((h.shape, flat))
                h = flat @ w + b
            else:
                mask = h > 0
                caches.append(mask)
                h = h * mask
        check_finite(h, "network output")
        out = h[0] if single else h
        tape = GradientTape(id(self), caches, single) if record else None
        return out, tape

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x, record=False)[0]

    def backward(self, tape: GradientTape, loss_grad: Tensor, params: bool = True, inputs: bool = True):
        """Propagate ``loss_grad`` (dL/d output) back through the stack.

        Returns ``(param_grads, input_grad)``; either may be ``None`` if not requested.
        """
        if tape is None or tape.net_id != id(self):
            raise NumericsError("tape was not produced by this network")
        if tape.consumed:
            raise NumericsError("gradient tape already used; run forward again")
        tape.consumed = True
        g = np.asarray(loss_grad, dtype=np.float64)
        if tape.single:
            g = g[None]
        check_finite(g, "loss gradient")
        grads: dict[str, Tensor] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            cache = tape.caches[i]
            need_input = inputs or i > 0
            if isinstance(layer, Conv2D):
                x_shape, cols = cache
                w = self.params[f"{i}.weight"].astype(np.float64)
                g2 = g.reshape(-1, layer.filters)
                if params:
                    grads[f"{i}.weight"] = (cols.reshape(-1, cols.shape[-1]).T @ g2).reshape(w.shape)
                    grads[f"{i}.bias"] = g2.sum(axis=0)
                if need_input:
                    dcols = g @ w.reshape(-1, layer.filters).T
                    g = _col2im(dcols, x_shape, layer.kernel, layer.stride)
            elif isinstance(layer, Dense):
                x_shape, flat = cache
                w = self.params[f"{i}.weight"].astype(np.float64)
                if params:
                    grads[f"{i}.weight"] = flat.T @ g
                    grads[f"{i}.bias"] = g.sum(axis=0)
                if need_input:
                    g = (g @ w.T).reshape(x_shape)
            else:
                g = g * cache
        input_grad = None
        if inputs:
            input_grad = g[0] if tape.single else g
        return (grads if params else None), input_grad

    def backward_params(self, tape: GradientTape, loss_grad: Tensor) -> dict[str, Tensor]:
        return self.backward(tape, loss_grad, params=True, inputs=False)[0]

    def backward_input(self, tape: GradientTape, loss_grad: Tensor) -> Tensor:
        return self.backward(tape, loss_grad, params=False, inputs=True)[1]

    # -- misc --------------------------------------------------------------

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(layer) for layer in self.layers],
            "dtype": self.dtype.name,
        }


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    kind = "sgd"

    def __init__(self):
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: Mapping[str, Tensor], lr: float) -> None:
        for g in grads.values():
            check_finite(g, "gradient")
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise NumericsError(f"{name}: gradient shape {g.shape} != {p.shape}")
            params[name] = (p - lr * g).astype(p.dtype)

    def state(self) -> dict[str, Tensor]:
        return {}

    def load_state(self, t: int, arrays: Mapping[str, Tensor]) -> None:
        self.t = t


class Adam:
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}

    def step(self, params: dict[str, Tensor], grads: Mapping[str, Tensor], lr: float) -> None:
        for g in grads.values():
            check_finite(g, "gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise NumericsError(f"{name}: gradient shape {g.shape} != {p.shape}")
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p - update).astype(p.dtype)

    def state(self) -> dict[str, Tensor]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: Mapping[str, Tensor]) -> None:
        self.t = t
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            slot, name = key.split("/", 1)
            getattr(self, slot)[name] = np.array(arr, dtype=np.float64)


def make_optimizer(kind: str):
    if kind == "adam":
        return Adam()
    if kind == "sgd":
        return SGD()
    raise ValueError(f"unknown optimizer {kind!r}")


def sgd_adam_step(params, grads, optimizer, learning_rate: float) -> None:
    optimizer.step(params, grads, learning_rate)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"ADVRLCKP"
FORMAT_VERSION = 1


def _pack_arrays(arrays: Mapping[str, Tensor], index: list, buf: io.BytesIO) -> None:
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "nbytes": arr.nbytes})
        buf.write(arr.tobytes())


def dumps_checkpoint(net: LayerStack, optimizer=None, seed: int | None = None, meta: Mapping | None = None) -> bytes:
    """Serialize a network (plus optional optimizer state) to bytes.

    Layout: magic, uint32 version, uint64 header length, JSON header, raw array bytes
    in header order. Output depends only on the contents, so equal inputs give equal bytes.
    """
    body = io.BytesIO()
    params_index: list = []
    _pack_arrays(net.params, params_index, body)
    opt_index: list = []
    opt_header = None
    if optimizer is not None:
        _pack_arrays(optimizer.state(), opt_index, body)
        opt_header = {"kind": optimizer.kind, "t": optimizer.t}
    header = {
        "network": net.describe(),
        "params": params_index,
        "optimizer": opt_header,
        "optimizer_arrays": opt_index,
        "seed": seed,
        "meta": dict(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + body.getvalue()


def loads_checkpoint(data: bytes):
    """Inverse of :func:`dumps_checkpoint`. Returns ``(net, optimizer_or_None, seed, meta)``."""
    if data[:8] != MAGIC or len(data) < 20:
        raise NumericsError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise NumericsError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise NumericsError("corrupt checkpoint header") from None
    offset = 20 + hlen

    def unpack(index):
        nonlocal offset
        out = {}
        for entry in index:
            n = entry["nbytes"]
            if offset + n > len(data):
                raise NumericsError("truncated checkpoint")
            arr = np.frombuffer(data[offset:offset + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            out[entry["name"]] = arr.copy()
            offset += n
        return out

    params = unpack(header["params"])
    desc = header["network"]
    layers = [layer_from_dict(d) for d in desc["layers"]]
    net = LayerStack(desc["input_shape"], layers, params=params, dtype=np.dtype(desc["dtype"]))
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = make_optimizer(header["optimizer"]["kind"])
        optimizer.load_state(header["optimizer"]["t"], unpack(header["optimizer_arrays"]))
    if offset != len(data):
        raise NumericsError("trailing bytes in checkpoint")
    return net, optimizer, header["seed"], header["meta"]


def save_checkpoint(path, net, optimizer=None, seed=None, meta=None) -> None:
    with open(path, "wb") as f:
        f.write(dumps_checkpoint(net, optimizer, seed, meta))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads_checkpoint(f.read())
