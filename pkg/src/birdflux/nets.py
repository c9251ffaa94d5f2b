"""Neural building blocks on top of :mod:`birdflux.autodiff`.

Parameters live in a flat ``{name: array}`` dictionary. The blocks below only
hold names and sizes; their ``__call__`` takes a mapping of names to autodiff
nodes so the same block runs on leaves (training) or constants (inference).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(P, name, n_rows):
    b = P[name]
    return ad.expand(b, (n_rows, b.value.shape[0]))


def _check_width(block, x, width):
    if x.value.ndim != 2 or x.value.shape[1] != width:
        raise ad.ShapeError(f"{block}: expected input of width {width}, got shape {x.value.shape}")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> ad.Node:
    """Inverted dropout; identity in eval mode or at rate 0."""
    x = ad.as_node(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.value.shape) >= rate
    return ad.mul(x, keep / (1.0 - rate))


@dataclass(frozen=True)
class MLP:
    """Affine layers with ReLU in between and a linear output layer."""

    prefix: str
    sizes: tuple  # (n_in, hidden..., n_out)

    def init(self, rng: np.random.Generator) -> dict:
        P = {}
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            P[f"{self.prefix}.W{k}"] = uniform_init(rng, a, (a, b))
            P[f"{self.prefix}.b{k}"] = np.zeros(b)
        return P

    def __call__(self, P, x, dropout_rate=0.0, training=False, rng=None) -> ad.Node:
        x = ad.as_node(x)
        _check_width(f"mlp {self.prefix}", x, self.sizes[0])
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            x = ad.add(ad.matmul(x, P[f"{self.prefix}.W{k}"]), _bias(P, f"{self.prefix}.b{k}", x.value.shape[0]))
            if k < n_layers - 1:
                x = ad.relu(x)
                x = dropout(x, dropout_rate, training, rng)
        return x


def mlp_forward(P, block: MLP, x, **kw) -> ad.Node:
    return block(P, x, **kw)


@dataclass(frozen=True)
class LSTMCell:
    """Single-layer LSTM cell; gate blocks ordered input, forget, candidate, output."""

    prefix: str
    n_in: int
    n_hidden: int

    def init(self, rng: np.random.Generator) -> dict:
        H = self.n_hidden
        return {
            f"{self.prefix}.Wx": uniform_init(rng, self.n_in, (self.n_in, 4 * H)),
            f"{self.prefix}.Wh": uniform_init(rng, H, (H, 4 * H)),
            f"{self.prefix}.b": np.zeros(4 * H),
        }

    def __call__(self, P, x, h, c):
        x, h, c = ad.as_node(x), ad.as_node(h), ad.as_node(c)
        _check_width(f"lstm {self.prefix}", x, self.n_in)
        _check_width(f"lstm {self.prefix} state", h, self.n_hidden)
        H = self.n_hidden
        n = x.value.shape[0]
        z = ad.add(ad.add(ad.matmul(x, P[f"{self.prefix}.Wx"]), ad.matmul(h, P[f"{self.prefix}.Wh"])),
                   _bias(P, f"{self.prefix}.b", n))
        i = ad.sigmoid(z[:, 0:H])
        f = ad.sigmoid(z[:, H:2 * H])
        g = ad.tanh(z[:, 2 * H:3 * H])
        o = ad.sigmoid(z[:, 3 * H:4 * H])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


def lstm_step(P, cell: LSTMCell, x, h, c):
    return cell(P, x, h, c)


def graph_edges(adjacency, self_loops: bool = True):
    """(src, dst) arrays for message passing from every neighbour j to cell i."""
    src, dst = [], []
    for i, nbrs in enumerate(adjacency):
        if self_loops:
            src.append(i)
            dst.append(i)
        for j in nbrs:
            src.append(j)
            dst.append(i)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


@dataclass(frozen=True)
class GAT:
    """Single-head additive graph attention (LeakyReLU 0.2), ReLU between layers."""

    prefix: str
    n_in: int
    n_hidden: int
    n_layers: int = 2

    def init(self, rng: np.random.Generator) -> dict:
        P = {}
        width = self.n_in
        for k in range(self.n_layers):
            p = f"{self.prefix}.{k}"
            P[f"{p}.W"] = uniform_init(rng, width, (width, self.n_hidden))
            P[f"{p}.a_src"] = uniform_init(rng, self.n_hidden, (self.n_hidden, 1))
            P[f"{p}.a_dst"] = uniform_init(rng, self.n_hidden, (self.n_hidden, 1))
            P[f"{p}.b"] = np.zeros(self.n_hidden)
            width = self.n_hidden
        return P

    def attention(self, P, layer: int, hW: ad.Node, src, dst, n: int) -> ad.Node:
        p = f"{self.prefix}.{layer}"
        s_src = ad.reshape(ad.matmul(hW, P[f"{p}.a_src"]), (n,))
        s_dst = ad.reshape(ad.matmul(hW, P[f"{p}.a_dst"]), (n,))
        e = ad.leaky_relu(ad.add(ad.gather(s_src, src), ad.gather(s_dst, dst)), 0.2)
        # per-destination max shift; softmax is invariant to it
        m = np.full(n, -np.inf)
        np.maximum.at(m, dst, e.value)
        w = ad.exp(ad.sub(e, m[dst]))
        denom = ad.scatter_add(w, dst, n)
        return ad.div(w, ad.gather(denom, dst))

    def __call__(self, P, x, src, dst) -> ad.Node:
        x = ad.as_node(x)
        _check_width(f"gat {self.prefix}", x, self.n_in)
        n = x.value.shape[0]
        for k in range(self.n_layers):
            p = f"{self.prefix}.{k}"
            hW = ad.matmul(x, P[f"{p}.W"])
            alpha = self.attention(P, k, hW, src, dst, n)
            msg = ad.mul(ad.gather(hW, src), ad.expand(ad.reshape(alpha, (len(src), 1)),
                                                      (len(src), self.n_hidden)))
            x = ad.add(ad.scatter_add(msg, dst, n), _bias(P, f"{p}.b", n))
            if k < self.n_layers - 1:
                x = ad.relu(x)
        return x


def gat_forward(P, block: GAT, features, adjacency) -> ad.Node:
    src, dst = graph_edges(adjacency)
    return block(P, features, src, dst)


# -- parameter handling ------------------------------------------------------------------

def as_leaves(params: dict) -> dict:
    return {k: ad.Node(v, requires_grad=True) for k, v in params.items()}


def as_constants(params: dict) -> dict:
    return {k: ad.Node(v) for k, v in params.items()}


def save_checkpoint(path, params: dict, config: dict, manifest: dict | None = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so loading is bit exact."""
    doc = {
        "manifest": manifest or {},
        "config": config,
        "params": {k: {"shape": list(v.shape), "data": [float(x) for x in np.ravel(v)]}
                   for k, v in sorted(params.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return params, doc["config"], doc.get("manifest", {})
