"""Temporal critic: a 5-layer ReLU head over the reward model's encoder.

``residual_predict`` estimates the final reward from a noisy state, and the
temporal reward is the gap ``R(x0, c) - R_phi(x_t, c)``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .autodiff import AdamW, InitSpec, Linear, Tensor, maximum, no_grad
from .rewards import Encoder

FULL_WIDTHS = (1024, 128, 64, 16, 1)


def head_widths(divisor: int = 4) -> tuple[int, ...]:
    return tuple(max(1, w // divisor) for w in FULL_WIDTHS[:-1]) + (1,)


class TemporalCritic:
    """R_phi(x_t, c) = MLP_phi(Encoder(x_t, t, c))."""

    def __init__(self, encoder: Encoder, rng: np.random.Generator, widths=None, lr: float = 1e-4,
                 clip_range: float = 0.2, weight_decay: float = 1e-4, max_grad_norm: float = 1.0):
        widths = tuple(widths or head_widths())
        if len(widths) != 5:
            raise ValueError("critic head must have exactly 5 layers")
        self.encoder = encoder
        dims = (encoder.width, *widths)
        # He-normal: with the fan-in uniform default the 4-unit layer of the desk head
        # tends to die within a few Adam steps
        self.layers = [Linear(dims[i], dims[i + 1], rng, name=f"critic{i}",
                              weight_init=InitSpec("normal", scale=math.sqrt(2.0 / dims[i]), stream=f"critic{i}.weight"),
                              bias_init=InitSpec("zeros", stream=f"critic{i}.bias"))
                       for i in range(5)]
        self.clip_range = clip_range
        self.optimizer = AdamW(self.parameters(), lr=lr, weight_decay=weight_decay,
                               max_grad_norm=max_grad_norm)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def head(self, features, return_hidden: bool = False):
        h = features if isinstance(features, Tensor) else Tensor(features)
        hidden = []
        for layer in self.layers[:-1]:
            h = layer(h).relu()
            hidden.append(h)
        out = self.layers[-1](h).reshape(-1)
        return (out, hidden) if return_hidden else out

    def __call__(self, x_t, t, c) -> Tensor:
        return residual_predict(self, x_t, t, c)

    def hidden_activations(self, features) -> list[np.ndarray]:
        with no_grad():
            _, hidden = self.head(features, return_hidden=True)
        return [h.data for h in hidden]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def state_dict(self, prefix: str = "critic/") -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out[f"{prefix}{layer.name}.weight"] = layer.weight.data
            out[f"{prefix}{layer.name}.bias"] = layer.bias.data
        out[f"{prefix}encoder_seed"] = np.array([self.encoder.seed], dtype=np.int64)
        return out

    def load_state_dict(self, state, prefix: str = "critic/") -> None:
        for layer in self.layers:
            layer.weight.data = np.array(state[f"{prefix}{layer.name}.weight"], dtype=np.float64)
            layer.bias.data = np.array(state[f"{prefix}{layer.name}.bias"], dtype=np.float64)


def residual_predict(critic: TemporalCritic, x_t, t, c) -> Tensor:
    """Differentiable per-row prediction of the final reward from x_t."""
    return critic.head(critic.encoder(x_t, t, c))


def predict(critic: TemporalCritic, x_t, t, c) -> np.ndarray:
    with no_grad():
        return residual_predict(critic, x_t, t, c).data.copy()


def temporal_reward(critic: TemporalCritic, x_t, t, c, final_reward) -> np.ndarray:
    """R(x0, c) - R_phi(x_t, c), detached from the critic."""
    return np.asarray(final_reward, dtype=np.float64) - predict(critic, x_t, t, c)


def clipped_value_loss(pred: Tensor, target, prev_pred=None, clip_range: float = 0.2) -> Tensor:
    """Mean of max((p - R)^2, (clip(p, p_old +- r) - R)^2); plain MSE without ``prev_pred``."""
    target = Tensor(np.asarray(target, dtype=np.float64))
    unclipped = (pred - target).square()
    if prev_pred is None:
        return unclipped.mean()
    prev = np.asarray(prev_pred, dtype=np.float64)
    clipped = (pred.clamp(prev - clip_range, prev + clip_range) - target).square()
    return maximum(unclipped, clipped).mean()


def critic_loss(critic: TemporalCritic, x_t, t, c, final_reward, prev_pred=None) -> Tensor:
    return clipped_value_loss(residual_predict(critic, x_t, t, c), final_reward, prev_pred,
                              critic.clip_range)
