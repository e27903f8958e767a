"""Parameter containers and the gated recurrent cell shared by both model families."""

from __future__ import annotations

import copy

import numpy as np

from . import ndtensor as nd
from .errors import ShapeError


class Module:
    """Named float64 parameters plus the architecture needed to rebuild them."""

    def __init__(self, arch: dict):
        self.arch = dict(arch)
        self.params: dict[str, nd.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> nd.Tensor:
        p = nd.parameter(value, name)
        self.params[name] = p
        return p

    def parameters(self) -> list[nd.Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ShapeError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ShapeError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def clone(self):
        new = copy.copy(self)
        new.arch = dict(self.arch)
        new.params = {k: nd.parameter(v.data.copy(), k) for k, v in self.params.items()}
        return new

    def zero_(self) -> None:
        for p in self.params.values():
            p.data[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __getattr__(self, name):
        params = self.__dict__.get("params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(name)


def uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    return uniform(rng, shape, np.sqrt(6.0 / (shape[0] + shape[-1])))


def add_gru(module: Module, prefix: str, in_dim: int, hidden: int, rng, recurrent_scale=0.08):
    module.add(f"{prefix}.W", glorot(rng, (in_dim, 3 * hidden)))
    module.add(f"{prefix}.U", uniform(rng, (hidden, 3 * hidden), recurrent_scale))
    module.add(f"{prefix}.b", np.zeros(3 * hidden))


def gru_step(gx: nd.Tensor, h: nd.Tensor, U: nd.Tensor, hidden: int) -> nd.Tensor:
    """One GRU update given the precomputed input projection ``gx = x W + b``."""
    gh = h @ U
    r = nd.sigmoid(gx[:, :hidden] + gh[:, :hidden])
    z = nd.sigmoid(gx[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    n = nd.tanh(gx[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return n + z * (h - n)


def run_gru(x: nd.Tensor, mask: np.ndarray, W, U, b, hidden: int,
            keep_states: bool = False):
    """Run a GRU over ``x[B, T, E]``; padded steps (mask 0) carry the state through.

    Returns the final state and, with ``keep_states``, the per-step states
    stacked to ``[B, T, hidden]``.
    """
    B, T = mask.shape
    gx_all = x @ W + b
    h = nd.Tensor(np.zeros((B, hidden)))
    states = []
    for t in range(T):
        m = mask[:, t:t + 1]
        h_new = gru_step(gx_all[:, t, :], h, U, hidden)
        h = h_new if m.all() else h + m * (h_new - h)
        if keep_states:
            states.append(nd.reshape(h, (B, 1, hidden)))
    if keep_states:
        return h, nd.concat(states, axis=1)
    return h
