"""Layers built on the autodiff engine: linear, conv blocks, ZN-GCN."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; subclasses register child modules/tensors as
    attributes and parameters() walks them with dotted names."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = np.ascontiguousarray(state[k], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in))
        self.b = Tensor(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class MLP(Module):
    """Fully connected stack with ReLU between layers; last layer linear
    unless `relu_last` is set."""

    def __init__(self, rng, widths: list[int], relu_last: bool = False):
        self.layers = [Linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        self.relu_last = relu_last

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.relu_last:
                x = ad.relu(x)
        return x


class ConvBNRelu(Module):
    """Conv (k x k) + per-channel batch affine normalization + ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 5, stride: int = 1):
        fan_in = c_in * k * k
        self.w = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
        self.b = Tensor(np.zeros(c_out))
        self.gamma = Tensor(np.ones(c_out))
        self.beta = Tensor(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)
        x = ad.batch_norm(x, self.gamma, self.beta)
        return ad.relu(x)


def normalized_adjacency(n: int, edges: np.ndarray) -> np.ndarray:
    """Dense row-normalized adjacency with self loops from an (e, 2) edge
    list (undirected)."""
    a = np.zeros((n, n))
    if len(edges):
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    a[np.arange(n), np.arange(n)] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    return a / deg


class ZNGCNLayer(Module):
    """Zero-Neighbor graph convolution: only the first `share` fraction of
    each vertex's features is exchanged with neighbors."""

    def __init__(self, rng, n_in: int, n_out: int, share: float):
        self.w_self = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in))
        self.w_neigh = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in))
        self.b = Tensor(np.zeros(n_out))
        mask = np.zeros(n_in)
        mask[: int(np.ceil(share * n_in))] = 1.0
        self._share_mask = mask

    def __call__(self, h: Tensor, adj_norm) -> Tensor:
        shared = ad.mul(h, Tensor(self._share_mask))
        if isinstance(adj_norm, np.ndarray):
            neigh = ad.matmul(Tensor(adj_norm), shared)
        else:
            neigh = ad.spmm(adj_norm, shared)  # scipy sparse
        out = ad.add(ad.matmul(h, self.w_self), ad.matmul(neigh, self.w_neigh))
        return ad.add(out, self.b)


class GCNStack(Module):
    """K-1 ZN-GCN layers with ReLU, then one fully-shared GCN output layer."""

    def __init__(self, rng, n_in: int, hidden: int, n_out: int, depth: int,
                 share: float, zero_init_output: bool = False):
        widths = [n_in] + [hidden] * (depth - 1)
        self.layers = [ZNGCNLayer(rng, widths[i], widths[i + 1], share)
                       for i in range(depth - 1)]
        self.out_layer = ZNGCNLayer(rng, widths[-1], n_out, share=1.0)
        if zero_init_output:
            self.out_layer.w_self.data[:] = 0.0
            self.out_layer.w_neigh.data[:] = 0.0

    def __call__(self, h: Tensor, adj_norm: np.ndarray) -> Tensor:
        for layer in self.layers:
            h = ad.relu(layer(h, adj_norm))
        return self.out_layer(h, adj_norm)


class ConvStack(Module):
    """Sequence of ConvBNRelu blocks; exposes intermediate activations for
    perceptual feature pooling."""

    def __init__(self, rng, c_in: int, specs: list[tuple[int, int]], k: int = 5):
        chans = [c_in] + [c for c, _ in specs]
        self.blocks = [ConvBNRelu(rng, chans[i], specs[i][0], k=k, stride=specs[i][1])
                       for i in range(len(specs))]

    def __call__(self, x: Tensor, keep: tuple[int, ...] = ()) -> tuple[Tensor, list[Tensor]]:
        kept = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if (i + 1) in keep:
                kept.append(x)
        return x, kept
