"""Tiny static-graph network library with hand-written adjoints.

A :class:`Net` is an immutable list of nodes over a fixed layer vocabulary
(3x3 conv, dense, relu, sigmoid, softmax, 2x2 average pool, global average
pool, nearest 2x upsample, add). Node 0 is the input. Activations are NCHW
(or NC after global pooling) float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import read_tft_bundle, write_tft_bundle

PARAM_OPS = ("conv", "dense")
UNARY_OPS = ("relu", "sigmoid", "softmax", "avgpool", "gap", "upsample")


class StaleTapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: tuple[tuple[str, int], ...] = ()

    def attr(self, key):
        return dict(self.attrs)[key]


class Net:
    def __init__(self, nodes, outputs, in_channels, params=None, seed=0):
        self.nodes = tuple(nodes)
        self.outputs = tuple(outputs)
        self.in_channels = in_channels
        self.version = 0
        rng = np.random.default_rng(seed)
        if params is None:
            params = {}
            for i, nd in enumerate(self.nodes):
                if nd.op in PARAM_OPS:
                    params.update(_init_params(i, nd, rng))
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        for i, nd in enumerate(self.nodes):
            if nd.op in PARAM_OPS:
                for key, shape in _param_shapes(i, nd).items():
                    if self.params[key].shape != shape:
                        raise ValueError(f"{key}: expected {shape}, got {self.params[key].shape}")
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "Net":
        return Net(self.nodes, self.outputs, self.in_channels, params=self.params)

    def topology(self) -> str:
        lines = [f"in_channels {self.in_channels}",
                 "outputs " + " ".join(map(str, self.outputs))]
        for nd in self.nodes:
            attrs = " ".join(f"{k}={v}" for k, v in nd.attrs)
            lines.append(f"node {nd.op} {','.join(map(str, nd.inputs)) or '-'} {attrs}".rstrip())
        return "\n".join(lines)

    def same_topology(self, other: "Net") -> bool:
        return self.topology() == other.topology()

    def __call__(self, x):
        return net_forward(self, x)[0]


def _param_shapes(i, nd):
    if nd.op == "conv":
        return {f"{i}.W": (nd.attr("cout"), nd.attr("cin"), 3, 3), f"{i}.b": (nd.attr("cout"),)}
    return {f"{i}.W": (nd.attr("dout"), nd.attr("din")), f"{i}.b": (nd.attr("dout"),)}


def _init_params(i, nd, rng):
    shapes = _param_shapes(i, nd)
    wshape = shapes[f"{i}.W"]
    fan_in = int(np.prod(wshape[1:]))
    limit = np.sqrt(6.0 / fan_in) * dict(nd.attrs).get("init_milli", 1000) / 1000.0
    return {f"{i}.W": rng.uniform(-limit, limit, size=wshape),
            f"{i}.b": np.zeros(shapes[f"{i}.b"])}


class NetBuilder:
    """Incrementally declare nodes; ``build`` freezes the topology."""

    def __init__(self, in_channels: int):
        self.in_channels = in_channels
        self.nodes = [Node("input", ())]
        self.channels = [in_channels]

    def _add(self, op, inputs, channels, **attrs):
        self.nodes.append(Node(op, tuple(inputs), tuple(sorted(attrs.items()))))
        self.channels.append(channels)
        return len(self.nodes) - 1

    @property
    def input(self):
        return 0

    def conv(self, h, cout, stride=1):
        return self._add("conv", [h], cout, cin=self.channels[h], cout=cout, stride=stride)

    def dense(self, h, dout, init_scale=1.0):
        return self._add("dense", [h], dout, din=self.channels[h], dout=dout,
                         init_milli=int(round(init_scale * 1000)))

    def relu(self, h):
        return self._add("relu", [h], self.channels[h])

    def sigmoid(self, h):
        return self._add("sigmoid", [h], self.channels[h])

    def softmax(self, h):
        return self._add("softmax", [h], self.channels[h])

    def avgpool(self, h):
        return self._add("avgpool", [h], self.channels[h])

    def gap(self, h):
        return self._add("gap", [h], self.channels[h])

    def upsample(self, h):
        return self._add("upsample", [h], self.channels[h])

    def add(self, a, b):
        if self.channels[a] != self.channels[b]:
            raise ValueError("add: channel mismatch")
        return self._add("add", [a, b], self.channels[a])

    def build(self, outputs, seed=0) -> Net:
        outs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
        return Net(self.nodes, outs, self.in_channels, seed=seed)


@dataclass
class Tape:
    version: int
    values: list
    aux: dict = field(default_factory=dict)


# -- forward ---------------------------------------------------------------

def _im2col(x, stride):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    B, C, H, W = x.shape
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    cols = np.empty((B, C, 9, Ho, Wo))
    for di in range(3):
        for dj in range(3):
            cols[:, :, 3 * di + dj] = xp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride]
    return cols.reshape(B, C * 9, Ho * Wo), (Ho, Wo)


def _col2im(dcols, shape, stride, out_hw):
    B, C, H, W = shape
    Ho, Wo = out_hw
    dcols = dcols.reshape(B, C, 9, Ho, Wo)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += dcols[:, :, 3 * di + dj]
    return dxp[:, :, 1:-1, 1:-1]


def net_forward(net: Net, x):
    """Run the graph; returns (output, tape). Multi-head nets return a tuple."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[1] != net.in_channels:
        raise ValueError(f"input channels {x.shape[1:2]} do not match net ({net.in_channels})")
    vals = [x]
    aux = {}
    for i, nd in enumerate(net.nodes[1:], start=1):
        a = vals[nd.inputs[0]]
        if nd.op == "conv":
            if a.ndim != 4:
                raise ValueError("conv expects NCHW input")
            W, b = net.params[f"{i}.W"], net.params[f"{i}.b"]
            cols, hw = _im2col(a, nd.attr("stride"))
            out = np.matmul(W.reshape(W.shape[0], -1), cols) + b[:, None]
            aux[i] = (cols, hw)
            y = out.reshape(a.shape[0], W.shape[0], *hw)
        elif nd.op == "dense":
            if a.ndim != 2 or a.shape[1] != nd.attr("din"):
                raise ValueError(f"dense expects (B, {nd.attr('din')}) input, got {a.shape}")
            y = a @ net.params[f"{i}.W"].T + net.params[f"{i}.b"]
        elif nd.op == "relu":
            y = np.maximum(a, 0.0)
        elif nd.op == "sigmoid":
            y = 0.5 * (1.0 + np.tanh(0.5 * a))
        elif nd.op == "softmax":
            e = np.exp(a - a.max(axis=1, keepdims=True))
            y = e / e.sum(axis=1, keepdims=True)
        elif nd.op == "avgpool":
            B, C, H, W = a.shape
            y = a.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
        elif nd.op == "gap":
            y = a.mean(axis=(2, 3))
        elif nd.op == "upsample":
            y = a.repeat(2, axis=2).repeat(2, axis=3)
        elif nd.op == "add":
            y = a + vals[nd.inputs[1]]
        else:
            raise ValueError(f"unknown op {nd.op}")
        vals.append(y)
    outs = tuple(vals[o] for o in net.outputs)
    tape = Tape(net.version, vals, aux)
    return (outs[0] if len(outs) == 1 else outs), tape


# -- backward --------------------------------------------------------------

def net_backward(net: Net, tape: Tape, grad_output, accumulate: bool = True):
    """Reverse pass for ``sum(output * grad_output)``.

    Returns ``(param_grads, input_grad)``; with ``accumulate`` the parameter
    gradients are also added into ``net.grads``. ``grad_output`` may hold
    ``None`` entries for heads that do not contribute.
    """
    if tape.version != net.version:
        raise StaleTapeError("tape was recorded before the last parameter update")
    gouts = grad_output if len(net.outputs) > 1 else (grad_output,)
    vals = tape.values
    grads = [None] * len(vals)

    def push(j, g):
        grads[j] = g if grads[j] is None else grads[j] + g

    for o, g in zip(net.outputs, gouts):
        if g is not None:
            push(o, np.asarray(g, dtype=float))
    pgrads = {}
    for i in range(len(net.nodes) - 1, 0, -1):
        nd = net.nodes[i]
        g = grads[i]
        if g is None:
            if nd.op in PARAM_OPS:
                pgrads[f"{i}.W"] = np.zeros_like(net.params[f"{i}.W"])
                pgrads[f"{i}.b"] = np.zeros_like(net.params[f"{i}.b"])
            continue
        a = vals[nd.inputs[0]]
        y = vals[i]
        if nd.op == "conv":
            W = net.params[f"{i}.W"]
            cols, hw = tape.aux[i]
            g2 = g.reshape(g.shape[0], g.shape[1], -1)
            pgrads[f"{i}.W"] = np.einsum("bop,bkp->ok", g2, cols).reshape(W.shape)
            pgrads[f"{i}.b"] = g2.sum(axis=(0, 2))
            dcols = np.matmul(W.reshape(W.shape[0], -1).T, g2)
            push(nd.inputs[0], _col2im(dcols, a.shape, nd.attr("stride"), hw))
        elif nd.op == "dense":
            pgrads[f"{i}.W"] = g.T @ a
            pgrads[f"{i}.b"] = g.sum(axis=0)
            push(nd.inputs[0], g @ net.params[f"{i}.W"])
        elif nd.op == "relu":
            push(nd.inputs[0], g * (a > 0))
        elif nd.op == "sigmoid":
            push(nd.inputs[0], g * y * (1.0 - y))
        elif nd.op == "softmax":
            push(nd.inputs[0], y * (g - (g * y).sum(axis=1, keepdims=True)))
        elif nd.op == "avgpool":
            push(nd.inputs[0], 0.25 * g.repeat(2, axis=2).repeat(2, axis=3))
        elif nd.op == "gap":
            H, W = a.shape[2:]
            push(nd.inputs[0], np.broadcast_to(g[:, :, None, None] / (H * W), a.shape).copy())
        elif nd.op == "upsample":
            B, C, H, W = g.shape
            push(nd.inputs[0], g.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5)))
        elif nd.op == "add":
            push(nd.inputs[0], g)
            push(nd.inputs[1], g)
    if accumulate:
        for k, v in pgrads.items():
            net.grads[k] += v
    gin = grads[0] if grads[0] is not None else np.zeros_like(vals[0])
    return pgrads, gin


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(net: Net, state: AdamState) -> Net:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in net.params.items():
        g = net.grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.zero_grad()
    net.version += 1
    return net


def grads_finite(net: Net) -> bool:
    return all(np.all(np.isfinite(g)) for g in net.grads.values())


# -- checkpoints -----------------------------------------------------------

def save_net(path, net: Net, extra_header: str = "") -> None:
    header = net.topology()
    if extra_header:
        header += "\n" + extra_header
    write_tft_bundle(path, dict(net.params), header=header)


def load_net(path) -> tuple[Net, str]:
    header, tensors = read_tft_bundle(path)
    nodes, outputs, cin, extra = [], None, None, []
    for line in header.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "in_channels":
            cin = int(parts[1])
        elif parts[0] == "outputs":
            outputs = [int(p) for p in parts[1:]]
        elif parts[0] == "node":
            op = parts[1]
            inputs = () if parts[2] == "-" else tuple(int(p) for p in parts[2].split(","))
            attrs = tuple((k, int(v)) for k, v in (kv.split("=") for kv in parts[3:]))
            nodes.append(Node(op, inputs, attrs))
        else:
            extra.append(line)
    if cin is None or outputs is None:
        raise ValueError("checkpoint header is missing topology")
    return Net(nodes, outputs, cin, params=tensors), "\n".join(extra)


# -- standard architectures ------------------------------------------------

def feature_extractor(b: NetBuilder, widths=(16, 32, 64, 64)) -> int:
    h = b.input
    for w in widths:
        h = b.relu(b.conv(h, w, stride=2))
    return b.gap(h)


def policy_net(in_channels: int, n_cont: int, seed: int = 0, widths=(16, 32, 64, 64)) -> Net:
    """Shared conv trunk with a 2-way softmax stop head and a sigmoid parameter head."""
    b = NetBuilder(in_channels)
    feat = feature_extractor(b, widths)
    h1 = b.relu(b.dense(feat, 64))
    stop = b.softmax(b.dense(h1, 2, init_scale=0.01))
    h2 = b.relu(b.dense(feat, 64))
    cont = b.sigmoid(b.dense(h2, n_cont, init_scale=0.01))
    return b.build([stop, cont], seed=seed)


def value_net(in_channels: int, seed: int = 0, widths=(16, 32, 64, 64)) -> Net:
    b = NetBuilder(in_channels)
    feat = feature_extractor(b, widths)
    h = b.relu(b.dense(feat, 64))
    return b.build(b.dense(h, 1), seed=seed)


def micro_unet(seed: int = 0, widths=(16, 32)) -> Net:
    """Two-scale residual U-Net body: (image, sigma plane) -> residual."""
    w1, w2 = widths
    b = NetBuilder(2)
    e1 = b.relu(b.conv(b.input, w1))
    e1 = b.relu(b.conv(e1, w1))
    d = b.avgpool(e1)
    m = b.relu(b.conv(d, w2))
    m = b.relu(b.conv(m, w2))
    u = b.upsample(b.conv(m, w1))
    s = b.add(u, e1)
    s = b.relu(b.conv(s, w1))
    return b.build(b.conv(s, 1), seed=seed)
