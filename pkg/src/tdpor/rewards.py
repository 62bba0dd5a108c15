"""Analytic target rewards, a frozen random-feature encoder and fitted reward heads.

The analytic rewards are cheap closed forms that double as evaluation
oracles. Training consumes :class:`RewardModel` instances instead, which
put a small regression head on top of an :class:`Encoder`. The critic reuses
that same encoder, which is what makes encoder alignment a meaningful knob.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamW, InitSpec, Linear, Tensor, no_grad
from .diffusion import MixtureData, timestep_embedding

REWARD_KINDS = ("direction", "fidelity", "radius")
FIDELITY_SCALE = 3.0


class RewardFitError(RuntimeError):
    pass


def direction_vectors(c, offset: float = 0.0) -> np.ndarray:
    """Unit vectors obtained by rotating each context direction by ``offset`` radians."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if offset == 0.0:
        return c
    cos, sin = math.cos(offset), math.sin(offset)
    return np.stack([cos * c[:, 0] - sin * c[:, 1], sin * c[:, 0] + cos * c[:, 1]], axis=1)


def analytic_reward(kind: str, x0, c, *, data: MixtureData | None = None,
                    direction_offset: float = 0.0) -> np.ndarray:
    """Closed-form reward per row.

    direction: tanh(x0 . d_c), d_c the context direction rotated by ``direction_offset``.
    fidelity:  1 + (log N(x0; r c, s^2 I) - log N(r c; r c, s^2 I)) / 3, so the
               mode centre scores 1 and typical data falls in roughly [0, 1].
    radius:    -(|x0| - r)^2.
    """
    data = data or MixtureData()
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    c = np.broadcast_to(np.atleast_2d(np.asarray(c, dtype=np.float64)), x0.shape)
    if kind == "direction":
        return np.tanh(np.sum(x0 * direction_vectors(c, direction_offset), axis=1))
    if kind == "fidelity":
        d2 = np.sum((x0 - data.radius * c) ** 2, axis=1)
        return 1.0 - d2 / (2.0 * data.std ** 2) / FIDELITY_SCALE
    if kind == "radius":
        return -(np.linalg.norm(x0, axis=1) - data.radius) ** 2
    raise ValueError(f"unknown reward kind {kind!r}")


class Encoder:
    """Frozen two-layer tanh random-feature map psi(x, t, c)."""

    def __init__(self, seed: int, num_steps: int, width: int = 128, hidden: int = 128,
                 time_dim: int = 16, input_scale: float = 0.5):
        self.seed, self.num_steps, self.width, self.time_dim = seed, num_steps, width, time_dim
        self.input_scale = input_scale
        rng = np.random.default_rng(seed)
        n_in = 2 + time_dim + 2
        self.layer1 = Linear(n_in, hidden, rng, name="encoder.l1",
                             weight_init=InitSpec("normal", scale=1.0 / math.sqrt(n_in) * 2.0),
                             bias_init=InitSpec("normal", scale=0.5))
        self.layer2 = Linear(hidden, width, rng, name="encoder.l2",
                             weight_init=InitSpec("normal", scale=1.0 / math.sqrt(hidden) * 1.5),
                             bias_init=InitSpec("normal", scale=0.2))
        self.layer1.freeze()
        self.layer2.freeze()

    def __call__(self, x, t, c) -> Tensor:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(x)
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.atleast_2d(np.asarray(c, dtype=np.float64)), (n, 2))
        temb = timestep_embedding(t, self.num_steps, self.time_dim)
        inp = Tensor(np.concatenate([x * self.input_scale, temb, c], axis=1))
        return self.layer2(self.layer1(inp).tanh()).tanh()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.layer1.parameters() + self.layer2.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}l1.weight": self.layer1.weight.data, f"{prefix}l1.bias": self.layer1.bias.data,
                f"{prefix}l2.weight": self.layer2.weight.data, f"{prefix}l2.bias": self.layer2.bias.data,
                f"{prefix}meta": np.array([self.seed, self.num_steps, self.width], dtype=np.int64)}


def encode(encoder: Encoder, x, t, c) -> np.ndarray:
    with no_grad():
        return encoder(x, t, c).data


@dataclass
class RewardModel:
    """Frozen encoder plus a fitted two-layer head."""

    kind: str
    encoder: Encoder
    head: list[Linear]
    rmse: float = float("nan")
    direction_offset: float = 0.0
    history: list[float] = field(default_factory=list)

    def predict(self, x0, c, t=0) -> Tensor:
        h = self.encoder(x0, t, c)
        return self.head[1](self.head[0](h).tanh()).reshape(-1)

    def __call__(self, x0, c) -> np.ndarray:
        with no_grad():
            return self.predict(x0, c).data.copy()

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.head for p in layer.parameters()]

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.encoder.fingerprint().encode())
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        prefix = f"reward/{self.kind}/"
        out = self.encoder.state_dict(prefix + "encoder/")
        for layer in self.head:
            out[f"{prefix}{layer.name}.weight"] = layer.weight.data
            out[f"{prefix}{layer.name}.bias"] = layer.bias.data
        out[f"{prefix}rmse"] = np.array([self.rmse])
        out[f"{prefix}direction_offset"] = np.array([self.direction_offset])
        return out

    @classmethod
    def from_state_dict(cls, state, kind: str, num_steps: int) -> "RewardModel":
        prefix = f"reward/{kind}/"
        seed, steps, width = (int(v) for v in state[prefix + "encoder/meta"])
        encoder = Encoder(seed, steps, width=width)
        head = _make_head(width, np.random.default_rng(0), state[f"{prefix}head0.weight"].shape[1])
        for layer in head:
            layer.weight.data = np.array(state[f"{prefix}{layer.name}.weight"])
            layer.bias.data = np.array(state[f"{prefix}{layer.name}.bias"])
            layer.freeze()
        return cls(kind, encoder, head, float(state[prefix + "rmse"][0]),
                   float(state[prefix + "direction_offset"][0]))


def reward(model: RewardModel, x0, c) -> np.ndarray:
    """R(x0, c) from the fitted head on clean-sample features (t = 0)."""
    return model(x0, c)


def _make_head(width: int, rng: np.random.Generator, hidden: int = 64) -> list[Linear]:
    return [Linear(width, hidden, rng, name="head0"), Linear(hidden, 1, rng, name="head1")]


def reward_dataset(model_samples: np.ndarray, model_contexts: np.ndarray, contexts: np.ndarray,
                   n_box: int, rng: np.random.Generator, box: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate on-manifold samples with uniform box points paired with random contexts."""
    xb = rng.uniform(-box, box, size=(n_box, 2))
    cb = contexts[rng.integers(0, len(contexts), size=n_box)]
    return np.concatenate([model_samples, xb]), np.concatenate([model_contexts, cb])


def fit_reward_head(encoder: Encoder, kind: str, dataset: tuple[np.ndarray, np.ndarray], seed: int, *,
                    targets: np.ndarray | None = None, data: MixtureData | None = None,
                    direction_offset: float = 0.0, steps: int = 8000, batch_size: int = 256,
                    lr: float = 3e-3, hidden: int = 64, target_rmse: float = 0.05,
                    fail_rmse: float = 0.1, holdout: float = 0.2, raise_on_failure: bool = True) -> RewardModel:
    """Regress a head over frozen features onto the analytic reward.

    Stops early once the held-out RMSE reaches ``target_rmse``; raises
    :class:`RewardFitError` if the budget ends above ``fail_rmse``.
    """
    x, c = (np.asarray(a, dtype=np.float64) for a in dataset)
    y = analytic_reward(kind, x, c, data=data, direction_offset=direction_offset) if targets is None \
        else np.asarray(targets, dtype=np.float64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_val = max(1, int(holdout * len(x)))
    val, tr = perm[:n_val], perm[n_val:]
    feats = encode(encoder, x, 0, c)
    head = _make_head(encoder.width, rng, hidden)
    model = RewardModel(kind, encoder, head, direction_offset=direction_offset)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=0.0, max_grad_norm=None)

    def head_out(f):
        return head[1](head[0](Tensor(f)).tanh()).reshape(-1)

    def val_rmse():
        with no_grad():
            pred = head_out(feats[val]).data
        return float(np.sqrt(np.mean((pred - y[val]) ** 2)))

    rmse = val_rmse()
    for step in range(steps):
        idx = tr[rng.integers(0, len(tr), size=batch_size)]
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        opt.zero_grad()
        loss = (head_out(feats[idx]) - Tensor(y[idx])).square().mean()
        loss.backward()
        opt.step()
        if step % 100 == 99 or step == steps - 1:
            rmse = val_rmse()
            model.history.append(rmse)
            if rmse <= target_rmse:
                break
    model.rmse = rmse
    for layer in head:
        layer.freeze()
    if raise_on_failure and rmse > fail_rmse:
        raise RewardFitError(f"{kind} head reached RMSE {rmse:.4f} > {fail_rmse}")
    return model
