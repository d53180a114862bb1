"""Shared builders and brute-force oracles for the test suite."""

import numpy as np

from advrl.numerics import Conv2D, Dense, LayerStack, ReLU


def random_small_net(seed: int, dtype=np.float64) -> LayerStack:
    """A random conv(+conv)+dense stack on a small input, cheap enough for finite differences."""
    rng = np.random.default_rng(seed)
    size = int(rng.integers(7, 11))
    channels = int(rng.integers(1, 3))
    layers = [Conv2D(int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(1, 3))), ReLU()]
    if rng.random() < 0.5:
        layers += [Conv2D(int(rng.integers(2, 4)), 2, 1), ReLU()]
    layers += [Dense(int(rng.integers(4, 9))), ReLU(), Dense(int(rng.integers(2, 5)))]
    net = LayerStack.build((size, size, channels), layers, rng, dtype=dtype)
    # non-zero biases so bias gradients are exercised away from the init point
    for name in net.params:
        if name.endswith(".bias"):
            net.params[name] = rng.normal(0, 0.1, net.params[name].shape).astype(dtype)
    return net


def loop_forward(net: LayerStack, x: np.ndarray) -> np.ndarray:
    """Plain-loop evaluation of a single input, independent of the vectorized path."""
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            w = net.params[f"{i}.weight"].astype(np.float64)
            b = net.params[f"{i}.bias"].astype(np.float64)
            H, W, C = h.shape
            k, s = layer.kernel, layer.stride
            oh, ow = (H - k) // s + 1, (W - k) // s + 1
            out = np.zeros((oh, ow, layer.filters))
            for r in range(oh):
                for c in range(ow):
                    for f in range(layer.filters):
                        acc = b[f]
                        for dr in range(k):
                            for dc in range(k):
                                for ch in range(C):
                                    acc += h[r * s + dr, c * s + dc, ch] * w[dr, dc, ch, f]
                        out[r, c, f] = acc
            h = out
        elif isinstance(layer, Dense):
            w = net.params[f"{i}.weight"].astype(np.float64)
            b = net.params[f"{i}.bias"].astype(np.float64)
            flat = h.reshape(-1)
            h = np.array([sum(flat[j] * w[j, o] for j in range(flat.size)) + b[o] for o in range(layer.out)])
        else:
            h = np.where(h > 0, h, 0.0)
    return h


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def fd_param_grads(net: LayerStack, x, c, h=1e-3) -> dict:
    """Central differences of L = sum(c * net(x)) for every parameter entry."""
    out = {}
    for name, p in net.params.items():
        g = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = float(np.sum(c * net(x)))
            p[idx] = old - h
            down = float(np.sum(c * net(x)))
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def fd_input_grad(net: LayerStack, x, c, h=1e-3) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = float(np.sum(c * net(x)))
        x[idx] = old - h
        down = float(np.sum(c * net(x)))
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def analytic_grads(net: LayerStack, x, c):
    out, tape = net.forward(x)
    return net.backward(tape, c)


def kink_margin(net: LayerStack, x) -> float:
    """Smallest |pre-activation| feeding any ReLU; finite differences are only valid away from kinks."""
    h = np.asarray(x, dtype=np.float64)[None]
    margin = np.inf
    for i, layer in enumerate(net.layers):
        sub = LayerStack(h.shape[1:], [layer], params={k.replace(f"{i}.", "0."): v for k, v in net.params.items()
                                                        if k.startswith(f"{i}.")}, dtype=np.float64)
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(h).min()))
        h = sub(h)
    return margin


def fd_case(seed: int, min_margin: float = 0.02):
    """Seeded (net, x, c) whose ReLU pre-activations all sit at least ``min_margin`` from zero."""
    rng = np.random.default_rng(seed + 50)
    while True:
        net = random_small_net(int(rng.integers(2**31)))
        x = rng.random(net.input_shape)
        if kink_margin(net, x) >= min_margin:
            return net, x, rng.normal(size=net.n_outputs)
