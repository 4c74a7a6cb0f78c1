"""Small dense networks built from the tape ops."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


class Mlp:
    """Fully connected stack over row-batched inputs of shape (B, widths[0]).

    Hidden layers use the chosen activation; the final layer is linear
    unless ``final_activation`` is set (used for encoder trunks).
    """

    def __init__(self, widths: Sequence[int], activation: str = "tanh",
                 final_activation: bool = False, rng=None, name: str = "mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"Mlp: widths must be >= 2 positive ints, got {widths}")
        if activation not in ACTIVATIONS:
            raise ContractError(f"Mlp: unknown activation {activation!r}, expected one of {sorted(ACTIVATIONS)}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.widths = widths
        self.activation = activation
        self.final_activation = bool(final_activation)
        self.name = name
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(fan_out)))

    def forward(self, x: Tensor) -> Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ContractError(f"{self.name}: expected input (B, {self.widths[0]}), got {x.shape}")
        act = ACTIVATIONS[self.activation]
        n_layers = len(self.weights)
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), ad.repeat_rows(b, h.shape[0]))
            if i < n_layers - 1 or self.final_activation:
                h = act(h)
        return h

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.w{i}", w))
            out.append((f"{self.name}.b{i}", b))
        return out
