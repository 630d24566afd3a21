"""High-dimensional TSK fuzzy classifier for benchmark grasp-point selection.

Rule firing uses the dimension-mean of log-Gaussian membership exponents
before the softmax, which keeps the normalization well-behaved as the input
dimension grows. Consequents are order-zero (one score vector per rule).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WIDTH_FLOOR = 1e-3


@dataclass
class GraspDataset:
    inputs: np.ndarray   # (N, M)
    labels: np.ndarray   # (N,) ints in [0, k)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must have the same length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class HtskModel:
    centers: np.ndarray      # (R, M)
    log_widths: np.ndarray   # (R, M)
    consequents: np.ndarray  # (R, k)

    @property
    def n_rules(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_classes(self) -> int:
        return self.consequents.shape[1]

    def copy(self) -> "HtskModel":
        return HtskModel(self.centers.copy(), self.log_widths.copy(), self.consequents.copy())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.04
    batch_size: int = 64
    weight_decay: float = 1e-8
    epochs: int = 200


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_log_memberships(x: np.ndarray, model: HtskModel) -> np.ndarray:
    """(B, R): per-rule mean over dimensions of -(x-c)^2 / (2 sigma^2)."""
    sigma = np.maximum(np.exp(model.log_widths), WIDTH_FLOOR)
    diff = x[:, None, :] - model.centers[None, :, :]
    expo = -(diff**2) / (2.0 * sigma[None, :, :] ** 2)
    return expo.mean(axis=2)


def firing_levels(x: np.ndarray, model: HtskModel) -> np.ndarray:
    """Normalized rule firing weights for a single input (sum to 1)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _softmax(_mean_log_memberships(x, model))[0]


def tsk_firing_levels(x: np.ndarray, model: HtskModel) -> np.ndarray:
    """Classic TSK normalization (sum of exponents); kept for comparison."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sigma = np.maximum(np.exp(model.log_widths), WIDTH_FLOOR)
    diff = x[:, None, :] - model.centers[None, :, :]
    expo = (-(diff**2) / (2.0 * sigma[None, :, :] ** 2)).sum(axis=2)
    return _softmax(expo)[0]


def forward(x: np.ndarray, model: HtskModel) -> np.ndarray:
    """Class probability distribution for one input."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    omega = _softmax(_mean_log_memberships(x, model))
    scores = omega @ model.consequents
    return _softmax(scores)[0]


def _forward_batch(x: np.ndarray, model: HtskModel):
    omega = _softmax(_mean_log_memberships(x, model))
    scores = omega @ model.consequents
    probs = _softmax(scores)
    return omega, probs


def cross_entropy_and_grads(
    x: np.ndarray, labels: np.ndarray, model: HtskModel
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and exact parameter gradients."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    B, M = x.shape
    omega, probs = _forward_batch(x, model)
    loss = float(-np.mean(np.log(probs[np.arange(B), labels] + 1e-300)))

    d_scores = probs.copy()
    d_scores[np.arange(B), labels] -= 1.0
    d_scores /= B
    d_conseq = omega.T @ d_scores
    d_omega = d_scores @ model.consequents.T
    inner = np.sum(omega * d_omega, axis=1, keepdims=True)
    d_z = omega * (d_omega - inner)                      # (B, R)
    d_expo = d_z[:, :, None] / M                         # (B, R, M)

    sigma = np.maximum(np.exp(model.log_widths), WIDTH_FLOOR)
    diff = x[:, None, :] - model.centers[None, :, :]
    d_centers = np.einsum("brm,brm->rm", d_expo, diff / sigma[None] ** 2)
    d_sigma = np.einsum("brm,brm->rm", d_expo, diff**2 / sigma[None] ** 3)
    active = sigma > WIDTH_FLOOR
    d_logw = np.where(active, d_sigma * sigma, 0.0)
    return loss, {"centers": d_centers, "log_widths": d_logw, "consequents": d_conseq}


def kmeans_init(
    dataset: GraspDataset, n_rules: int, rng: np.random.Generator,
    max_iter: int = 100, tol: float = 1e-6,
) -> np.ndarray:
    """Lloyd's algorithm on the inputs; returns (R, M) centers."""
    X = dataset.inputs
    if n_rules > len(X):
        raise ValueError(f"cannot place {n_rules} centers with {len(X)} samples")
    centers = X[rng.choice(len(X), size=n_rules, replace=False)].copy()
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for r in range(n_rules):
            members = X[assign == r]
            if len(members):
                new_centers[r] = members.mean(axis=0)
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    return centers


def build_model(
    dataset: GraspDataset, n_rules: int, n_classes: int, rng: np.random.Generator
) -> HtskModel:
    """k-means centers, global per-dimension std widths, zero consequents."""
    centers = kmeans_init(dataset, n_rules, rng)
    widths = np.maximum(dataset.inputs.std(axis=0), WIDTH_FLOOR)
    log_widths = np.tile(np.log(widths), (n_rules, 1))
    consequents = np.zeros((n_rules, n_classes))
    return HtskModel(centers=centers, log_widths=log_widths, consequents=consequents)


def train(
    dataset: GraspDataset,
    model: HtskModel,
    rng: np.random.Generator,
    config: TrainConfig = TrainConfig(),
) -> HtskModel:
    """Mini-batch Adam on cross-entropy; returns the epoch snapshot with the
    best training accuracy."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.epochs == 0:
        return model
    params = {"centers": model.centers, "log_widths": model.log_widths,
              "consequents": model.consequents}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    t = 0
    best = model.copy()
    best_acc = _accuracy(dataset, model)
    N = len(dataset)
    for _epoch in range(config.epochs):
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grads = cross_entropy_and_grads(
                dataset.inputs[batch], dataset.labels[batch], model
            )
            t += 1
            for key in params:
                g = grads[key] + config.weight_decay * params[key]
                m1[key] = 0.9 * m1[key] + 0.1 * g
                m2[key] = 0.999 * m2[key] + 0.001 * g * g
                mh = m1[key] / (1 - 0.9**t)
                vh = m2[key] / (1 - 0.999**t)
                params[key] -= config.learning_rate * mh / (np.sqrt(vh) + 1e-8)
        acc = _accuracy(dataset, model)
        if acc > best_acc:
            best_acc = acc
            best = model.copy()
    return best


def _accuracy(dataset: GraspDataset, model: HtskModel) -> float:
    _, probs = _forward_batch(dataset.inputs, model)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def select_grasp(
    state_vec: np.ndarray,
    model: HtskModel,
    mode: str = "argmax",
    rng: np.random.Generator | None = None,
) -> int:
    """Pick an endpoint index: `sample` draws from the class distribution,
    `argmax` returns its mode (ties to the lowest index)."""
    probs = forward(state_vec, model)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return int(rng.choice(len(probs), p=probs / probs.sum()))
    if mode == "argmax":
        return int(np.argmax(probs))
    raise ValueError(f"unknown selection mode {mode!r}")
