"""Matrix-factorization backbone, losses, analytical gradients, and training.

Three losses share one loop: plain pairwise ranking (`bpr`), the compressed
bag objective (`varbpr`), and its uncompressed double-sum variant
(`varbpr_elbo`). Posteriors and hardness-derived prior factors are constants
during the gradient step (inference then learning, per batch). All loss and
gradient functions are batched: leading axes are free, the last one or two
axes carry the bag.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import SignalBuffer, SplitBundle
from .inference import (
    InferenceConfig,
    PosteriorPair,
    interest_centers,
    signal_prior,
    solve_posteriors,
)
from .mathcore import sigmoid
from .sampler import epoch_schedule, sample_bags_bulk
from . import evaluation

LOSS_KINDS = ("bpr", "varbpr", "varbpr_elbo")

INIT_SCALE = 0.01

CHECKPOINT_FORMAT = "varbpr-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears; carries location diagnostics."""

    def __init__(self, epoch: int, batch_index: int, user_norm: float, item_norm: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.user_norm = user_norm
        self.item_norm = item_norm
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index} "
            f"(|user factors|={user_norm:.3e}, |item factors|={item_norm:.3e})"
        )


@dataclass
class EmbeddingModel:
    """Dense user/item factor tables scored by inner product."""

    user_factors: np.ndarray  # (num_users, d)
    item_factors: np.ndarray  # (num_items, d)

    @property
    def d(self) -> int:
        return int(self.user_factors.shape[1])

    @property
    def num_users(self) -> int:
        return int(self.user_factors.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_factors.shape[0])

    @classmethod
    def initialize(cls, num_users: int, num_items: int, d: int, rng: np.random.Generator) -> "EmbeddingModel":
        return cls(
            user_factors=rng.normal(0.0, INIT_SCALE, size=(num_users, d)),
            item_factors=rng.normal(0.0, INIT_SCALE, size=(num_items, d)),
        )

    def score(self, user: int, item: int) -> float:
        if not (0 <= user < self.num_users):
            raise ValueError(f"user id {user} out of range [0, {self.num_users})")
        if not (0 <= item < self.num_items):
            raise ValueError(f"item id {item} out of range [0, {self.num_items})")
        return float(self.user_factors[user] @ self.item_factors[item])

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.user_factors.copy(), self.item_factors.copy())


@dataclass
class TrainConfig:
    loss: str = "varbpr"
    d: int = 64
    lr: float = 1e-3
    l2: float = 1e-4
    epochs: int = 100
    m: int = 4
    n: int = 4
    seed: int = 0
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    batch_size: int = 512
    # Mean-pooling ablation: skip inference and use uniform alpha/beta.
    uniform_posteriors: bool = False

    def validate(self) -> "TrainConfig":
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.loss == "bpr" and (self.m != 1 or self.n != 1):
            raise ValueError("loss 'bpr' requires M = N = 1")
        if self.d < 1 or self.epochs < 1 or self.m < 1 or self.n < 1 or self.batch_size < 1:
            raise ValueError("d, epochs, M, N, batch_size must all be >= 1")
        if not self.lr > 0.0 or self.l2 < 0.0:
            raise ValueError("lr must be > 0 and l2 >= 0")
        self.inference.validate()
        return self


# ---------------------------------------------------------------------------
# Losses and gradients


def bpr_loss(margin):
    """-ln sigmoid(margin), i.e. softplus(-margin). Non-negative."""
    arr = np.asarray(margin, dtype=np.float64)
    out = np.logaddexp(0.0, -arr)
    return float(out) if out.ndim == 0 else out


def varbpr_loss(u, c_plus, c_minus):
    """Compressed bag loss: -ln sigmoid(<u, c+> - <u, c->)."""
    u = np.asarray(u, dtype=np.float64)
    margin = np.einsum("...d,...d->...", u, np.asarray(c_plus, dtype=np.float64)) - np.einsum(
        "...d,...d->...", u, np.asarray(c_minus, dtype=np.float64)
    )
    return bpr_loss(margin)


def elbo_loss(u, pos_vectors, neg_vectors, post: PosteriorPair):
    """Uncompressed double-sum loss: -sum_mn alpha_m beta_n ln sigmoid(gamma_mn)."""
    u = np.asarray(u, dtype=np.float64)
    spos = np.einsum("...d,...md->...m", u, np.asarray(pos_vectors, dtype=np.float64))
    sneg = np.einsum("...d,...nd->...n", u, np.asarray(neg_vectors, dtype=np.float64))
    gamma = spos[..., :, None] - sneg[..., None, :]
    w = post.alpha[..., :, None] * post.beta[..., None, :]
    out = (w * np.logaddexp(0.0, -gamma)).sum(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


def varbpr_gradients(u, pos_vectors, neg_vectors, post: PosteriorPair, l2: float = 0.0):
    """Analytical gradients of the compressed loss w.r.t. u and every bag item.

    Posteriors are treated as constants. Includes the 2*l2*param weight-decay
    terms. Returns (grad_u, grad_pos, grad_neg) with the input shapes.
    """
    u = np.asarray(u, dtype=np.float64)
    pos_vectors = np.asarray(pos_vectors, dtype=np.float64)
    neg_vectors = np.asarray(neg_vectors, dtype=np.float64)
    c_plus, c_minus = interest_centers(pos_vectors, neg_vectors, post)
    diff = c_plus - c_minus
    margin = np.einsum("...d,...d->...", u, c_plus) - np.einsum("...d,...d->...", u, c_minus)
    g = sigmoid(-margin)
    g = np.asarray(g, dtype=np.float64)
    grad_u = -g[..., None] * diff + 2.0 * l2 * u
    grad_pos = -(g[..., None] * post.alpha)[..., None] * u[..., None, :] + 2.0 * l2 * pos_vectors
    grad_neg = (g[..., None] * post.beta)[..., None] * u[..., None, :] + 2.0 * l2 * neg_vectors
    return grad_u, grad_pos, grad_neg


def elbo_gradients(u, pos_vectors, neg_vectors, post: PosteriorPair, l2: float = 0.0):
    """Analytical gradients of the double-sum loss, posteriors held fixed."""
    u = np.asarray(u, dtype=np.float64)
    pos_vectors = np.asarray(pos_vectors, dtype=np.float64)
    neg_vectors = np.asarray(neg_vectors, dtype=np.float64)
    spos = np.einsum("...d,...md->...m", u, pos_vectors)
    sneg = np.einsum("...d,...nd->...n", u, neg_vectors)
    gamma = spos[..., :, None] - sneg[..., None, :]
    w = post.alpha[..., :, None] * post.beta[..., None, :] * sigmoid(-gamma)
    w_pos = w.sum(axis=-1)
    w_neg = w.sum(axis=-2)
    grad_u = (
        -(np.einsum("...m,...md->...d", w_pos, pos_vectors) - np.einsum("...n,...nd->...d", w_neg, neg_vectors))
        + 2.0 * l2 * u
    )
    grad_pos = -w_pos[..., None] * u[..., None, :] + 2.0 * l2 * pos_vectors
    grad_neg = w_neg[..., None] * u[..., None, :] + 2.0 * l2 * neg_vectors
    return grad_u, grad_pos, grad_neg


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Per-row Adam moments; rows untouched by a batch keep their state."""

    m: np.ndarray
    v: np.ndarray
    step: np.ndarray  # int64 per row
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray) -> "AdamState":
        return cls(
            m=np.zeros_like(params),
            v=np.zeros_like(params),
            step=np.zeros(params.shape[0], dtype=np.int64),
        )


def adam_step(state: AdamState, params: np.ndarray, rows: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """Bias-corrected Adam update on exactly the touched rows, in place.

    `rows` may contain duplicates; their gradients are accumulated first.
    Each row keeps its own step counter for the bias correction.
    """
    uniq, inv = np.unique(rows, return_inverse=True)
    acc = np.zeros((len(uniq), params.shape[1]), dtype=np.float64)
    np.add.at(acc, inv, grads)
    t = state.step[uniq] + 1
    state.step[uniq] = t
    m = state.m[uniq]
    m *= state.beta1
    m += (1.0 - state.beta1) * acc
    np.square(acc, out=acc)
    v = state.v[uniq]
    v *= state.beta2
    v += (1.0 - state.beta2) * acc
    state.m[uniq] = m
    state.v[uniq] = v
    corr1 = 1.0 - np.power(state.beta1, t)
    corr2 = 1.0 - np.power(state.beta2, t)
    denom = np.sqrt(v / corr2[:, None])
    denom += state.eps
    m /= corr1[:, None]
    m /= denom
    m *= lr
    params[uniq] -= m
    return params


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: EmbeddingModel
    rows: list  # evaluation.DiagnosticsRow per evaluation point
    epoch_seconds: list[float]
    epoch_losses: list[float]


def batch_posteriors(
    pos_idx: np.ndarray,
    neg_idx: np.ndarray,
    spos: np.ndarray,
    sneg: np.ndarray,
    signals: SignalBuffer,
    cfg: InferenceConfig,
) -> PosteriorPair:
    """Prior encoding + closed-form posteriors for a batch of bags."""
    prior = signal_prior(pos_idx, neg_idx, spos, sneg, signals, cfg)
    return solve_posteriors(spos, sneg, prior, cfg)


def _batch_step(
    model: EmbeddingModel,
    opt_users: AdamState,
    opt_items: AdamState,
    users: np.ndarray,
    pos_idx: np.ndarray,
    neg_idx: np.ndarray,
    config: TrainConfig,
    signals: SignalBuffer,
) -> float:
    b, m = pos_idx.shape
    n = neg_idx.shape[1]
    uvecs = model.user_factors[users]
    pvecs = model.item_factors[pos_idx]
    nvecs = model.item_factors[neg_idx]
    spos = np.einsum("bd,bmd->bm", uvecs, pvecs)
    sneg = np.einsum("bd,bnd->bn", uvecs, nvecs)

    if config.loss == "bpr" or config.uniform_posteriors:
        post = PosteriorPair(alpha=np.full((b, m), 1.0 / m), beta=np.full((b, n), 1.0 / n))
    else:
        post = batch_posteriors(pos_idx, neg_idx, spos, sneg, signals, config.inference)

    if config.loss == "varbpr_elbo":
        loss = elbo_loss(uvecs, pvecs, nvecs, post)
        grad_u, grad_pos, grad_neg = elbo_gradients(uvecs, pvecs, nvecs, post, config.l2)
    else:
        c_plus, c_minus = interest_centers(pvecs, nvecs, post)
        loss = varbpr_loss(uvecs, c_plus, c_minus)
        grad_u, grad_pos, grad_neg = varbpr_gradients(uvecs, pvecs, nvecs, post, config.l2)

    adam_step(opt_users, model.user_factors, users, grad_u, config.lr)
    item_rows = np.concatenate([pos_idx.reshape(-1), neg_idx.reshape(-1)])
    item_grads = np.concatenate([grad_pos.reshape(-1, model.d), grad_neg.reshape(-1, model.d)])
    adam_step(opt_items, model.item_factors, item_rows, item_grads, config.lr)
    return float(np.sum(loss))


def train(
    config: TrainConfig,
    bundle: SplitBundle,
    signals: SignalBuffer,
    eval_settings: "evaluation.EvalSettings | None" = None,
) -> TrainResult:
    """Run the two-stage loop: per batch, solve posteriors then update factors.

    Deterministic under `config.seed` for a fixed batch_size (batch_size=1 is
    the per-bag reference mode). Raises TrainingDivergedError on non-finite
    loss.
    """
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    init_ss, sample_ss, eval_ss = ss.spawn(3)
    model = EmbeddingModel.initialize(bundle.user_count, bundle.item_count, config.d, np.random.default_rng(init_ss))
    opt_users = AdamState.for_params(model.user_factors)
    opt_items = AdamState.for_params(model.item_factors)
    rng = np.random.default_rng(sample_ss)
    eval_rng = np.random.default_rng(eval_ss)

    rows = []
    epoch_seconds: list[float] = []
    epoch_losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        users, anchors = epoch_schedule(bundle, rng)
        total = len(users)
        loss_sum = 0.0
        for start in range(0, total, config.batch_size):
            stop = min(start + config.batch_size, total)
            batch_users = users[start:stop]
            pos_idx, neg_idx = sample_bags_bulk(
                batch_users, bundle, config.m, config.n, rng, anchors=anchors[start:stop]
            )
            batch_loss = _batch_step(model, opt_users, opt_items, batch_users, pos_idx, neg_idx, config, signals)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    epoch=epoch,
                    batch_index=start // config.batch_size,
                    user_norm=float(np.linalg.norm(model.user_factors)),
                    item_norm=float(np.linalg.norm(model.item_factors)),
                )
            loss_sum += batch_loss
        epoch_seconds.append(time.perf_counter() - t0)
        mean_loss = loss_sum / total
        epoch_losses.append(mean_loss)

        if eval_settings is not None and (epoch % eval_settings.eval_every == 0 or epoch == config.epochs):
            rows.append(
                evaluation.compute_diagnostics(
                    epoch, mean_loss, model, bundle, signals, config, eval_settings, eval_rng
                )
            )
    return TrainResult(model=model, rows=rows, epoch_seconds=epoch_seconds, epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: EmbeddingModel, config_echo: dict | None = None) -> None:
    """Write the documented checkpoint: one JSON header line, then the two
    factor matrices as row-major float64 bytes (users first)."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": model.d,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "dtype": "<f8",
        "config": config_echo or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(model.user_factors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.item_factors, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingModel, dict]:
    """Read a checkpoint written by save_checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        d, nu, ni = header["d"], header["num_users"], header["num_items"]
        buf = fh.read()
    expected = (nu + ni) * d * 8
    if len(buf) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(buf)} bytes, expected {expected})")
    users = np.frombuffer(buf[: nu * d * 8], dtype="<f8").reshape(nu, d).copy()
    items = np.frombuffer(buf[nu * d * 8 :], dtype="<f8").reshape(ni, d).copy()
    return EmbeddingModel(user_factors=users, item_factors=items), header
