"""Small feed-forward embedding network with exact analytic gradients.

Forward pass: affine layers with tanh between them, a linear output layer,
then row-wise L2 normalization onto the unit sphere. All arithmetic is
float64 so finite-difference checks are clean. Gradients accumulate into a
shape-congruent buffer; one Adam step (decoupled weight decay) consumes the
summed buffer and zeroes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

CHECKPOINT_VERSION = 1

# Rows whose pre-normalization norm falls below this floor are normalized
# after nudging toward the first basis vector, keeping the map finite.
NORM_FLOOR = 1e-8


@dataclass
class EncoderParams:
    """Per-layer (weight, bias) pairs; weights are (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ContractError("weights and biases must be non-empty and congruent")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {i}: bias shape must be (fan_out,)")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ContractError(f"layer {i}: fan_in does not chain from layer {i - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError("non-finite parameter entries", layer=i)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


def init_params(layer_dims: list[int], rng: np.random.Generator) -> EncoderParams:
    """Gaussian init scaled by 1/sqrt(fan_in); zero biases."""
    if len(layer_dims) < 2:
        raise ContractError("need at least an input and an output dimension")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


@dataclass
class GradBuffer:
    """Parameter-shaped gradient accumulator."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    accumulation_count: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "GradBuffer":
        return cls(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[np.zeros_like(b) for b in params.biases],
        )

    def zero(self) -> None:
        for w in self.weights:
            w[:] = 0.0
        for b in self.biases:
            b[:] = 0.0
        self.accumulation_count = 0

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


@dataclass
class OptimState:
    """Adam moments plus hyperparameters (decoupled weight decay)."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def for_params(cls, params: EncoderParams, **hyper) -> "OptimState":
        return cls(
            m_weights=[np.zeros_like(w) for w in params.weights],
            m_biases=[np.zeros_like(b) for b in params.biases],
            v_weights=[np.zeros_like(w) for w in params.weights],
            v_biases=[np.zeros_like(b) for b in params.biases],
            **hyper,
        )


def _forward(params: EncoderParams, inputs: np.ndarray):
    """Raw forward pass; returns pre-normalization output and layer caches."""
    if inputs.ndim != 2 or inputs.shape[1] != params.input_dim:
        raise ContractError(
            f"input width {inputs.shape[-1]} does not match ambient dim {params.input_dim}"
        )
    h = np.asarray(inputs, dtype=np.float64)
    hiddens = [h]  # post-activation values feeding each layer
    n_layers = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if not np.isfinite(z).all():
            raise NumericError("non-finite activations", layer=i)
        h = np.tanh(z) if i < n_layers - 1 else z
        hiddens.append(h)
    return h, hiddens


def _normalize(raw: np.ndarray):
    """Row-wise projection to the unit sphere with a low-norm guard.

    Returns (embeddings, guarded_raw, norms) where guarded_raw is the vector
    actually normalized per row and norms its length.
    """
    norms = np.linalg.norm(raw, axis=1)
    guarded = raw.copy()
    low = norms < NORM_FLOOR
    if low.any():
        guarded[low, 0] += NORM_FLOOR
        norms = np.linalg.norm(guarded, axis=1)
    return guarded / norms[:, None], guarded, norms


def embed(params: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    """Forward pass followed by row-wise L2 normalization."""
    raw, _ = _forward(params, inputs)
    embeddings, _, _ = _normalize(raw)
    return embeddings


def _pairwise_euclidean(embeddings: np.ndarray) -> np.ndarray:
    gram = embeddings @ embeddings.T
    sq = np.diag(gram)
    d2 = sq[:, None] - 2.0 * gram + sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def hardest_distances(embeddings: np.ndarray, ids: np.ndarray):
    """Per-anchor hardest positive/negative distances and their indices.

    Ties break toward the lowest index. Every id must occur at least twice.
    """
    ids = np.asarray(ids)
    n = embeddings.shape[0]
    if ids.shape != (n,):
        raise ContractError("ids must align with embedding rows")
    _, counts = np.unique(ids, return_counts=True)
    if (counts < 2).any():
        raise ContractError("every id in the batch must occur at least twice")
    dist = _pairwise_euclidean(embeddings)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(neg_mask, dist, np.inf)
    pos_idx = pos_d.argmax(axis=1)
    neg_idx = neg_d.argmin(axis=1)
    return (
        dist[np.arange(n), pos_idx],
        dist[np.arange(n), neg_idx],
        pos_idx,
        neg_idx,
    )


def batch_hard_triplet(
    embeddings: np.ndarray, ids: np.ndarray, margin: float
) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss and its exact subgradient.

    Per anchor, the farthest same-id row is the positive and the nearest
    different-id row the negative (Euclidean distances); the loss is the mean
    hinge max(0, d_pos - d_neg + margin). At the hinge kink the active-side
    derivative is used; coincident pairs contribute zero direction.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    d_pos, d_neg, pos_idx, neg_idx = hardest_distances(embeddings, ids)
    violation = d_pos - d_neg + margin
    loss = float(np.maximum(violation, 0.0).mean())
    grad = np.zeros_like(embeddings)
    anchors = np.flatnonzero(violation >= 0.0)
    for a in anchors:
        p, q = pos_idx[a], neg_idx[a]
        if d_pos[a] > 0.0:
            u = (embeddings[a] - embeddings[p]) / d_pos[a]
            grad[a] += u
            grad[p] -= u
        if d_neg[a] > 0.0:
            v = (embeddings[a] - embeddings[q]) / d_neg[a]
            grad[a] -= v
            grad[q] += v
    grad /= n
    return loss, grad


def triplet_satisfaction(embeddings: np.ndarray, ids: np.ndarray) -> float:
    """Fraction of anchors whose hardest positive is nearer than their
    hardest negative; the online training-accuracy signal."""
    d_pos, d_neg, _, _ = hardest_distances(embeddings, ids)
    return float((d_pos < d_neg).mean())


def backward(
    params: EncoderParams,
    inputs: np.ndarray,
    grad_embeddings: np.ndarray,
    buffer: GradBuffer,
) -> None:
    """Accumulate the exact parameter gradient of loss(normalize(forward(x)))
    into ``buffer`` given the loss gradient w.r.t. the unit-norm embeddings."""
    raw, hiddens = _forward(params, inputs)
    if grad_embeddings.shape != raw.shape:
        raise ContractError(
            f"grad_embeddings shape {grad_embeddings.shape} does not match output {raw.shape}"
        )
    embeddings, _, norms = _normalize(raw)
    # Jacobian of x/||x|| is (I - y y^T)/||x||, applied per row.
    inner = np.einsum("ij,ij->i", grad_embeddings, embeddings)
    g = (grad_embeddings - inner[:, None] * embeddings) / norms[:, None]
    n_layers = params.n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (1.0 - hiddens[i + 1] ** 2)
        buffer.weights[i] += hiddens[i].T @ g
        buffer.biases[i] += g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
    buffer.accumulation_count += 1


def adam_step(params: EncoderParams, buffer: GradBuffer, state: OptimState) -> None:
    """One bias-corrected Adam update from the summed buffer, plus decoupled
    weight decay; zeroes the buffer. Accumulated gradients are used as their
    sum, not their mean."""
    if buffer.accumulation_count < 1:
        raise ContractError("adam_step requires at least one accumulated gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    groups = (
        (params.weights, buffer.weights, state.m_weights, state.v_weights),
        (params.biases, buffer.biases, state.m_biases, state.v_biases),
    )
    for values, grads, ms, vs in groups:
        for value, grad, m, v in zip(values, grads, ms, vs):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad**2
            update = state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
            if state.weight_decay:
                update = update + state.learning_rate * state.weight_decay * value
            value -= update
            if not np.isfinite(value).all():
                raise NumericError("non-finite parameters after optimizer step")
    buffer.zero()


def save_checkpoint(params: EncoderParams, path) -> None:
    """Versioned binary checkpoint; round trip is bit-exact."""
    arrays = {"version": np.array([CHECKPOINT_VERSION]), "n_layers": np.array([params.n_layers])}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> EncoderParams:
    with np.load(path) as data:
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        n_layers = int(data["n_layers"][0])
        params = EncoderParams(
            weights=[data[f"w{i}"] for i in range(n_layers)],
            biases=[data[f"b{i}"] for i in range(n_layers)],
        )
    params.validate()
    return params
