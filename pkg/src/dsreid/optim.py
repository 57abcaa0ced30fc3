"""Adam optimizer over named parameter tensors.

Parameters are looked up by name on every step so that rebuilt classifier
heads can join or leave the set; per-parameter state is keyed by the same
names, which also makes checkpointing trivial.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .autodiff import Tensor

__all__ = ["Adam"]


class Adam:
    def __init__(
        self,
        params_fn: Callable[[], Dict[str, Tensor]],
        lr: float = 3.5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params_fn = params_fn
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        # name -> {"m": array, "v": array, "t": int}
        self.state: Dict[str, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params_fn().values():
            p.grad = None

    def step(self) -> None:
        """Update every parameter that received a gradient this step."""
        for name, p in self.params_fn().items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            g = p.grad
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            if self.lr == 0.0:
                continue  # keep zero-LR epochs bit-exact on parameters
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)

    def drop_state(self, prefix: str) -> None:
        """Forget state for parameters whose name starts with prefix (head rebuilds)."""
        for name in [n for n in self.state if n.startswith(prefix)]:
            del self.state[name]

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "state": {
                name: {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}
                for name, st in self.state.items()
            },
        }

    def load_state_dict(self, payload: dict) -> None:
        self.lr = float(payload["lr"])
        self.beta1, self.beta2 = (float(b) for b in payload["betas"])
        self.eps = float(payload["eps"])
        self.state = {
            name: {"m": np.array(st["m"]), "v": np.array(st["v"]), "t": int(st["t"])}
            for name, st in payload["state"].items()
        }
