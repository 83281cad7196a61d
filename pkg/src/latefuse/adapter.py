"""Token-level readout adapter and its contrastive training loop.

The adapter maps each raw hidden state h to a matching vector
r = l2_normalize(W^T ln(h) + b) with ln a learned LayerNorm. Late scores over
adapted tokens replace the raw-token late score; the pooled score is never
touched. Training minimizes in-batch InfoNCE on the adapted late score only,
with gradients derived by hand:

* InfoNCE -> softmax minus indicator on the score matrix, scaled by 1/(B*tau);
* MaxSim -> subgradient routed to the argmax candidate token of each query
  token (ties to the lowest index);
* l2 normalization -> (g - (g.r) r) / ||z||;
* linear map and LayerNorm scale/shift by the usual accumulation rules.

The encoder is frozen, so nothing propagates past the LayerNorm inputs.
All training arithmetic is float64; finite-difference checks in the test
suite hold to 1e-4 relative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .embeddings import DEFAULT_EXCLUDED_ROLES, SequenceEmbedding, valid_indices
from .errors import (
    DimensionMismatch,
    EmptyCandidateTokens,
    EmptyQueryTokens,
    NonFiniteLoss,
    ZeroNormProjection,
)

DEFAULT_LN_EPSILON = 1e-6
_PROJECTION_NORM_FLOOR = 1e-12


class Optimizer(str, Enum):
    SGD = "sgd"
    ADAPTIVE_MOMENTS = "adaptive-moments"


@dataclass(frozen=True)
class AdapterParams:
    """Learned readout parameters. Arrays are float64 and treated as values:
    optimizer steps build new instances instead of mutating."""

    ln_scale: np.ndarray  # (hidden,)
    ln_shift: np.ndarray  # (hidden,)
    proj_weight: np.ndarray  # (hidden, out)
    proj_bias: np.ndarray  # (out,)
    ln_epsilon: float = DEFAULT_LN_EPSILON

    def __post_init__(self):
        for name in ("ln_scale", "ln_shift", "proj_weight", "proj_bias"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        h, d = self.proj_weight.shape
        if self.ln_scale.shape != (h,) or self.ln_shift.shape != (h,):
            raise DimensionMismatch("LayerNorm vectors must match proj_weight rows")
        if self.proj_bias.shape != (d,):
            raise DimensionMismatch("proj_bias must match proj_weight columns")
        if not all(
            np.isfinite(getattr(self, n)).all()
            for n in ("ln_scale", "ln_shift", "proj_weight", "proj_bias")
        ):
            raise ValueError("adapter parameters must be finite")
        if self.ln_epsilon <= 0:
            raise ValueError("ln_epsilon must be positive")

    @property
    def hidden_width(self) -> int:
        return int(self.proj_weight.shape[0])

    @property
    def out_width(self) -> int:
        return int(self.proj_weight.shape[1])


@dataclass(frozen=True)
class AdapterGradients:
    """Exact analytic gradients of the mean in-batch InfoNCE loss, together
    with the loss value from the same forward pass."""

    ln_scale: np.ndarray
    ln_shift: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    loss: float


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.05
    learning_rate: float = 1e-3
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAPTIVE_MOMENTS
    # AdaptiveMoments constants; inert under SGD.
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("in-batch negatives need batch_size >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def init_adapter_params(hidden_width: int, out_width: int, seed: int) -> AdapterParams:
    """Identity LayerNorm, zero bias, uniform +-sqrt(6/(hidden+out)) weight."""
    if hidden_width < 1 or out_width < 1:
        raise ValueError("widths must be >= 1")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (hidden_width + out_width))
    return AdapterParams(
        ln_scale=np.ones(hidden_width),
        ln_shift=np.zeros(hidden_width),
        proj_weight=rng.uniform(-bound, bound, size=(hidden_width, out_width)),
        proj_bias=np.zeros(out_width),
    )


@dataclass(frozen=True)
class _ForwardCache:
    xhat: np.ndarray  # (n, hidden) normalized LayerNorm input
    y: np.ndarray  # (n, hidden) LayerNorm output
    norms: np.ndarray  # (n,) projection row norms
    r: np.ndarray  # (n, out) unit rows


def _forward(tokens: np.ndarray, params: AdapterParams) -> _ForwardCache:
    x = np.ascontiguousarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("tokens must be a non-empty 2-d matrix")
    if x.shape[1] != params.hidden_width:
        raise DimensionMismatch(
            f"token width {x.shape[1]} != adapter hidden width {params.hidden_width}"
        )
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)  # biased, matching LayerNorm
    xhat = (x - mu) / np.sqrt(var + params.ln_epsilon)
    y = xhat * params.ln_scale + params.ln_shift
    z = y @ params.proj_weight + params.proj_bias
    norms = np.linalg.norm(z, axis=1)
    tiny = np.flatnonzero(norms <= _PROJECTION_NORM_FLOOR)
    if tiny.size:
        raise ZeroNormProjection(int(tiny[0]))
    return _ForwardCache(xhat=xhat, y=y, norms=norms, r=z / norms[:, None])


def adapter_forward(tokens: np.ndarray, params: AdapterParams) -> np.ndarray:
    """Adapted matching vectors, one unit row per token row."""
    return _forward(tokens, params).r


def _as_token_matrix(side, exclude_roles, error_cls) -> np.ndarray:
    """Accept either a raw token matrix or a SequenceEmbedding."""
    if isinstance(side, SequenceEmbedding):
        idx = valid_indices(side, exclude_roles)
        if not idx:
            raise error_cls(side.seq_id)
        return side.tokens[idx]
    arr = np.asarray(side)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise error_cls(-1)
    return arr


def adapted_late_score(
    q_tokens,
    c_tokens,
    params: AdapterParams,
    exclude_roles=DEFAULT_EXCLUDED_ROLES,
) -> float:
    """Late-interaction score over adapted vectors.

    Both sides may be raw token matrices or SequenceEmbeddings; embeddings
    are filtered by role first. The pooled score is unaffected by adapters.
    """
    qm = _as_token_matrix(q_tokens, exclude_roles, EmptyQueryTokens)
    cm = _as_token_matrix(c_tokens, exclude_roles, EmptyCandidateTokens)
    rq = adapter_forward(qm, params)
    rc = adapter_forward(cm, params)
    sims = rq @ rc.T
    return float(sims.max(axis=1).mean())


def infonce_loss(pos_score: float, neg_scores: Sequence[float], temperature: float) -> float:
    """Contrastive loss for one positive against its negatives.

    Stabilized so no exponent overflows: shift by the max logit, keep the
    positive's own term. Always >= 0; equals ln(N) when all N scores tie.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    negs = np.asarray(neg_scores, dtype=np.float64)
    rel = (negs - float(pos_score)) / temperature  # positive's own logit is 0
    m = max(0.0, float(rel.max())) if rel.size else 0.0
    value = m + np.log(np.exp(-m) + np.exp(rel - m).sum())
    return max(float(value), 0.0)


def _batch_matrices(
    batch: Sequence[tuple], exclude_roles
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(batch) < 2:
        raise ValueError("in-batch negatives need at least two pairs")
    qs, cs = [], []
    for query, positive in batch:
        qs.append(_as_token_matrix(query, exclude_roles, EmptyQueryTokens))
        cs.append(_as_token_matrix(positive, exclude_roles, EmptyCandidateTokens))
    return qs, cs


def _score_grid(
    q_caches: list[_ForwardCache], c_caches: list[_ForwardCache]
) -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """All pair scores plus the argmax routing needed for the backward pass."""
    b = len(q_caches)
    scores = np.empty((b, b), dtype=np.float64)
    routes: list[list[np.ndarray]] = [[None] * b for _ in range(b)]
    for i, qc in enumerate(q_caches):
        for j, cc in enumerate(c_caches):
            sims = qc.r @ cc.r.T
            arg = np.argmax(sims, axis=1)  # ties -> lowest index
            routes[i][j] = arg
            scores[i, j] = sims[np.arange(sims.shape[0]), arg].mean()
    return scores, routes


def batch_loss(batch: Sequence[tuple], params: AdapterParams, cfg: TrainConfig) -> float:
    """Mean in-batch InfoNCE over adapted late scores (forward only)."""
    qs, cs = _batch_matrices(batch, DEFAULT_EXCLUDED_ROLES)
    q_caches = [_forward(m, params) for m in qs]
    c_caches = [_forward(m, params) for m in cs]
    scores, _ = _score_grid(q_caches, c_caches)
    total = 0.0
    for i in range(len(batch)):
        negs = np.delete(scores[i], i)
        total += infonce_loss(float(scores[i, i]), negs, cfg.temperature)
    return total / len(batch)


def _backprop_params(
    cache: _ForwardCache,
    grad_r: np.ndarray,
    params: AdapterParams,
    acc: dict,
) -> None:
    # Through the row normalization: dz = (g - (g.r) r) / ||z||.
    inner = np.sum(grad_r * cache.r, axis=1, keepdims=True)
    grad_z = (grad_r - inner * cache.r) / cache.norms[:, None]
    acc["proj_weight"] += cache.y.T @ grad_z
    acc["proj_bias"] += grad_z.sum(axis=0)
    grad_y = grad_z @ params.proj_weight.T
    acc["ln_scale"] += (grad_y * cache.xhat).sum(axis=0)
    acc["ln_shift"] += grad_y.sum(axis=0)


def adapter_gradients(
    batch: Sequence[tuple], params: AdapterParams, cfg: TrainConfig
) -> AdapterGradients:
    """Analytic gradients of batch_loss at params, plus the loss itself.

    For query b the other positives in the batch act as negatives; the
    full BxB adapted score grid feeds a row-wise softmax.
    """
    qs, cs = _batch_matrices(batch, DEFAULT_EXCLUDED_ROLES)
    b = len(batch)
    q_caches = [_forward(m, params) for m in qs]
    c_caches = [_forward(m, params) for m in cs]
    scores, routes = _score_grid(q_caches, c_caches)

    logits = scores / cfg.temperature
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    # dL/dS[i, j] for L = mean_i infonce(row i).
    grad_s = (probs - np.eye(b)) / (b * cfg.temperature)

    loss = 0.0
    for i in range(b):
        loss += infonce_loss(float(scores[i, i]), np.delete(scores[i], i), cfg.temperature)
    loss /= b

    grad_rq = [np.zeros_like(qc.r) for qc in q_caches]
    grad_rc = [np.zeros_like(cc.r) for cc in c_caches]
    for i in range(b):
        inv_nq = 1.0 / q_caches[i].r.shape[0]
        for j in range(b):
            g = grad_s[i, j]
            arg = routes[i][j]
            grad_rq[i] += (g * inv_nq) * c_caches[j].r[arg]
            np.add.at(grad_rc[j], arg, (g * inv_nq) * q_caches[i].r)

    acc = {
        "ln_scale": np.zeros_like(params.ln_scale),
        "ln_shift": np.zeros_like(params.ln_shift),
        "proj_weight": np.zeros_like(params.proj_weight),
        "proj_bias": np.zeros_like(params.proj_bias),
    }
    for qc, g in zip(q_caches, grad_rq):
        _backprop_params(qc, g, params, acc)
    for cc, g in zip(c_caches, grad_rc):
        _backprop_params(cc, g, params, acc)

    return AdapterGradients(loss=float(loss), **acc)


def evaluate_mean_loss(
    dataset: Sequence[tuple], params: AdapterParams, cfg: TrainConfig
) -> float:
    """Mean batch_loss over consecutive full batches in dataset order.

    A trailing partial batch still contributes if it holds >= 2 pairs.
    """
    losses = []
    for start in range(0, len(dataset), cfg.batch_size):
        chunk = dataset[start : start + cfg.batch_size]
        if len(chunk) >= 2:
            losses.append(batch_loss(chunk, params, cfg))
    if not losses:
        raise ValueError("dataset too small to build any batch")
    return float(np.mean(losses))


@dataclass(frozen=True)
class TrainResult:
    params: AdapterParams
    losses: tuple[float, ...]


def train_adapter(
    dataset: Sequence[tuple], params_init: AdapterParams, cfg: TrainConfig
) -> TrainResult:
    """Run cfg.steps optimizer steps over shuffled full batches.

    The seed fixes the shuffle order, so identical configs reproduce the
    loss trace bit for bit. Raises NonFiniteLoss as soon as a step's loss
    stops being finite.
    """
    if len(dataset) < cfg.batch_size:
        raise ValueError("dataset smaller than one batch")
    rng = np.random.default_rng(cfg.seed)
    fields = ("ln_scale", "ln_shift", "proj_weight", "proj_bias")
    params = params_init
    m_state = {f: np.zeros_like(getattr(params_init, f)) for f in fields}
    v_state = {f: np.zeros_like(getattr(params_init, f)) for f in fields}
    order: list[int] = []
    cursor = 0
    losses = []

    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order = list(rng.permutation(len(dataset)))
            cursor = 0
        batch = [dataset[i] for i in order[cursor : cursor + cfg.batch_size]]
        cursor += cfg.batch_size

        grads = adapter_gradients(batch, params, cfg)
        if not np.isfinite(grads.loss):
            raise NonFiniteLoss(step)
        losses.append(grads.loss)

        updates = {}
        if cfg.optimizer is Optimizer.SGD:
            for f in fields:
                updates[f] = getattr(params, f) - cfg.learning_rate * getattr(grads, f)
        else:
            t = step + 1
            for f in fields:
                g = getattr(grads, f)
                m_state[f] = cfg.beta1 * m_state[f] + (1 - cfg.beta1) * g
                v_state[f] = cfg.beta2 * v_state[f] + (1 - cfg.beta2) * g * g
                m_hat = m_state[f] / (1 - cfg.beta1**t)
                v_hat = v_state[f] / (1 - cfg.beta2**t)
                updates[f] = getattr(params, f) - cfg.learning_rate * m_hat / (
                    np.sqrt(v_hat) + cfg.adam_epsilon
                )
        params = replace(params, **updates)

    return TrainResult(params=params, losses=tuple(losses))
