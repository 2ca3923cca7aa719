"""Straggler-aware federated training of a linear model over the HE simulation.

Users compute plaintext gradients on their local rows and ship them encrypted.
The provider computes the gradient of the pooled encrypted rows entirely with
cipher operations, aggregates whatever user gradients arrived this round, and
updates the encrypted model. Adam moments are kept on decrypted values, which
is a semantic (not cryptographic) reproduction of an encrypted optimizer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import he
from .data import ContractSplit, Dataset


class TrainingError(ValueError):
    """Invalid training configuration."""


# ---------------------------------------------------------------------------
# plaintext model algebra


def _check_dims(model: np.ndarray, ds: Dataset) -> None:
    if model.shape != (ds.features.shape[1], ds.labels.shape[1]):
        raise ValueError(f"model shape {model.shape} does not match data "
                         f"({ds.features.shape[1]} features, {ds.labels.shape[1]} outputs)")


def local_loss(model: np.ndarray, ds: Dataset) -> float:
    """Half mean squared Frobenius residual."""
    model = np.asarray(model, dtype=float)
    _check_dims(model, ds)
    if ds.n_rows == 0:
        raise ValueError("loss of an empty dataset")
    r = ds.features @ model - ds.labels
    return float(0.5 * np.sum(r * r) / ds.n_rows)


def local_gradient(model: np.ndarray, ds: Dataset) -> np.ndarray:
    model = np.asarray(model, dtype=float)
    _check_dims(model, ds)
    if ds.n_rows == 0:
        raise ValueError("gradient of an empty dataset")
    return ds.features.T @ (ds.features @ model - ds.labels) / ds.n_rows


def global_loss(map_loss: float | None, mu_losses: Sequence[float]) -> float:
    """Arithmetic mean over the provider (if it holds data) and the reporting users."""
    terms = list(mu_losses) + ([] if map_loss is None else [map_loss])
    if not terms:
        raise ValueError("no loss terms")
    return float(sum(terms) / len(terms))


# ---------------------------------------------------------------------------
# encrypted pieces


@dataclass
class EncryptedDataset:
    features: he.Ciphertext
    labels: he.Ciphertext
    n_rows: int


def encrypt_dataset(public: bytes, ds: Dataset, scale: int = he.DEFAULT_SCALE) -> EncryptedDataset:
    return EncryptedDataset(he.enc(public, ds.features, scale), he.enc(public, ds.labels, scale), ds.n_rows)


def encrypted_gradient_map(model_enc: he.Ciphertext, ds_enc: EncryptedDataset) -> he.Ciphertext:
    """(1/rows) F^T (F model - L) using only cipher operations."""
    if ds_enc.n_rows == 0:
        raise ValueError("gradient of an empty encrypted dataset")
    residual = he.hsub(he.matmul(ds_enc.features, model_enc), ds_enc.labels)
    return he.hmul_plain(he.matmul(ds_enc.features.T, residual), 1.0 / ds_enc.n_rows)


def gradient_error_bound(n_features: int, scale: int = he.DEFAULT_SCALE) -> float:
    """Fixed-point error budget of ``encrypted_gradient_map`` per entry.

    Counts the roundings one output entry accumulates per row: the feature
    encodings and products of the forward pass, the label encoding, the outer
    product and the final constant scaling; each is charged 2 / scale.
    """
    n_terms = 2 * n_features + 3
    return n_terms * 2.0 / scale


def aggregate_local(received: Sequence[tuple[int, he.Ciphertext, float]], public: bytes,
                    shape: tuple[int, ...], scale: int = he.DEFAULT_SCALE) -> he.Ciphertext:
    """Weighted sum of the received encrypted gradients, reduced in ascending id order."""
    total = he.zeros_like_key(public, shape, scale)
    for _, grad, weight in sorted(received, key=lambda item: item[0]):
        total = he.hadd(total, he.hmul_plain(grad, weight))
    return total


def global_gradient(agg_local: he.Ciphertext, grad_map: he.Ciphertext | None,
                    local_weight: float, enc_weight: float) -> he.Ciphertext:
    """Normalize the aggregate over received local rows plus the encrypted rows.

    The provider gradient is a per-row mean, so it is re-weighted by the
    encrypted row count; with every party present this is exactly the
    gradient of the pooled data.
    """
    denom = local_weight + (enc_weight if grad_map is not None else 0.0)
    if denom <= 0:
        raise ValueError("no training data contributed to this round")
    total = agg_local if grad_map is None else he.hadd(agg_local, he.hmul_plain(grad_map, enc_weight))
    return he.hmul_plain(total, 1.0 / denom)


# ---------------------------------------------------------------------------
# optimizer and state


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.01
    lr_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0 or self.lr_decay < 0:
            raise TrainingError("lr must be positive and lr_decay non-negative")

    def step_size(self, round_index: int) -> float:
        """Learning rate used for the update that ends round ``round_index`` (0-based)."""
        return self.lr / (1.0 + self.lr_decay * round_index)


@dataclass
class FlState:
    model_enc: he.Ciphertext
    round: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)


def update_model(state: FlState, grad_enc: he.Ciphertext, opt: OptimizerConfig,
                 keys: he.KeyPair) -> FlState:
    """One optimizer step; returns a new state with the round counter advanced."""
    lr = opt.step_size(state.round)
    if opt.kind == "sgd":
        model = he.refresh(keys, he.hsub(state.model_enc, he.hmul_plain(grad_enc, lr)))
        return FlState(model, state.round + 1, state.m, state.v, list(state.loss_history))
    g = np.asarray(he.dec(keys.secret, grad_enc), dtype=float)
    m = np.zeros_like(g) if state.m is None else state.m
    v = np.zeros_like(g) if state.v is None else state.v
    t = state.round + 1
    m = opt.beta1 * m + (1 - opt.beta1) * g
    v = opt.beta2 * v + (1 - opt.beta2) * g * g
    m_hat = m / (1 - opt.beta1 ** t)
    v_hat = v / (1 - opt.beta2 ** t)
    delta = lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    model = he.hsub(state.model_enc, he.enc(keys.public, delta, state.model_enc.scale))
    return FlState(model, t, m, v, list(state.loss_history))


# ---------------------------------------------------------------------------
# stragglers


@dataclass(frozen=True)
class StragglerModel:
    """``prob``: every user independently misses a round with probability ``value``.
    ``fixed``: exactly ``value`` users report, the first ones of a seeded shuffle."""

    mode: str = "prob"
    value: float = 0.0

    def __post_init__(self):
        if self.mode == "prob":
            if not 0 <= self.value <= 1:
                raise TrainingError("straggling probability must be in [0, 1]")
        elif self.mode == "fixed":
            if self.value < 0 or int(self.value) != self.value:
                raise TrainingError("fixed participant count must be a non-negative integer")
        else:
            raise TrainingError(f"unknown straggler mode {self.mode!r}")

    def sample(self, rng: np.random.Generator, n_mus: int) -> np.ndarray:
        """Boolean mask of users whose update arrives this round."""
        if self.mode == "prob":
            return rng.random(n_mus) >= self.value
        k = int(self.value)
        if k > n_mus:
            raise TrainingError(f"fixed participant count {k} exceeds {n_mus} users")
        mask = np.zeros(n_mus, dtype=bool)
        mask[rng.permutation(n_mus)[:k]] = True
        return mask


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 300
    optimizer: OptimizerConfig = OptimizerConfig()
    local_iters: int = 1
    seed: int = 0
    tol: float = 1e-7
    patience: int = 10
    quorum: int = 0          # >0: skip the update unless this many users reported
    key_seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_iters < 1 or self.patience < 1 or self.quorum < 0:
            raise TrainingError("rounds, local_iters, patience must be >= 1 and quorum >= 0")


@dataclass
class TraceRow:
    round: int
    global_loss: float
    participants: int
    straggled_ids: list[int]
    wallclock_ms: int = 0


@dataclass
class TrainingResult:
    rows: list[TraceRow]
    model: np.ndarray
    final_loss: float
    max_model_norm: float
    model_history: list[np.ndarray]
    checkpoint: he.Ciphertext

    def losses(self) -> np.ndarray:
        return np.array([r.global_loss for r in self.rows])


def _local_update(model: np.ndarray, ds: Dataset, iters: int, lr: float) -> np.ndarray:
    """Gradient shipped by a user: one gradient, or the averaged drift of local steps."""
    if iters == 1:
        return local_gradient(model, ds)
    w = model.copy()
    for _ in range(iters):
        w = w - lr * local_gradient(w, ds)
    return (model - w) / (lr * iters)


def evaluate_loss(model: np.ndarray, locals_: Sequence[Dataset], pooled: Dataset) -> float:
    """Global loss with every party reporting (users with rows plus the provider)."""
    mu = [local_loss(model, ds) for ds in locals_ if ds.n_rows]
    return global_loss(local_loss(model, pooled) if pooled.n_rows else None, mu)


def run_training(cfg: TrainConfig, split: ContractSplit, straggler: StragglerModel,
                 mu_ids: Sequence[int] | None = None,
                 on_round: Callable[[TraceRow], None] | None = None) -> TrainingResult:
    """Run the federated loop until ``cfg.rounds`` or a loss plateau."""
    locals_ = split.local
    pooled = split.pooled_encrypted()
    n_mus = len(locals_)
    ids = list(range(n_mus)) if mu_ids is None else list(mu_ids)
    d = locals_[0].features.shape[1]
    k = locals_[0].labels.shape[1]
    if pooled.n_rows == 0 and all(ds.n_rows == 0 for ds in locals_):
        raise TrainingError("no training data: every user and the provider hold zero rows")

    if cfg.local_iters > 1 and pooled.n_rows:
        # each encrypted local step costs two levels of the depth budget
        raise TrainingError("multiple local iterations on encrypted data exceed the cipher "
                            "depth budget; use local_iters=1")
    keys = he.keygen("federation", cfg.key_seed)
    rng = np.random.default_rng(cfg.seed)
    enc_pool = encrypt_dataset(keys.public, pooled) if pooled.n_rows else None
    state = FlState(he.enc(keys.public, np.zeros((d, k))))
    rows: list[TraceRow] = []
    history = [np.zeros((d, k))]
    max_norm = 0.0
    calm = 0
    for r in range(cfg.rounds):
        model = np.asarray(he.dec(keys.secret, state.model_enc), dtype=float).reshape(d, k)
        lr = cfg.optimizer.step_size(state.round)
        arrived = straggler.sample(rng, n_mus)
        reporting = [n for n in range(n_mus) if arrived[n] and locals_[n].n_rows]
        received = []
        for n in reporting:
            grad = _local_update(model, locals_[n], cfg.local_iters, lr)
            received.append((ids[n], he.enc(keys.public, grad), float(locals_[n].n_rows)))
        update = len(received) >= cfg.quorum and (received or enc_pool is not None)
        map_loss = local_loss(model, pooled) if pooled.n_rows else None
        mu_losses = [local_loss(model, locals_[n]) for n in reporting]
        if map_loss is None and not mu_losses:
            loss = evaluate_loss(model, locals_, pooled)
        else:
            loss = global_loss(map_loss, mu_losses)
        if update:
            agg = aggregate_local(received, keys.public, (d, k))
            grad_map = None
            if enc_pool is not None:
                grad_map = encrypted_gradient_map(state.model_enc, enc_pool)
            local_weight = float(sum(w for _, _, w in received))
            grad = global_gradient(agg, grad_map, local_weight, float(pooled.n_rows))
            state = update_model(state, grad, cfg.optimizer, keys)
        else:
            state = FlState(state.model_enc, state.round + 1, state.m, state.v, state.loss_history)
        state.loss_history.append(loss)
        straggled = [ids[n] for n in range(n_mus) if not arrived[n]]
        row = TraceRow(r + 1, loss, len(received) if update else 0, straggled)
        rows.append(row)
        if on_round is not None:
            on_round(row)
        new_model = np.asarray(he.dec(keys.secret, state.model_enc), dtype=float).reshape(d, k)
        history.append(new_model)
        max_norm = max(max_norm, float(np.linalg.norm(new_model)))
        if not np.isfinite(loss):
            break
        if len(rows) > 1 and abs(rows[-1].global_loss - rows[-2].global_loss) < cfg.tol:
            calm += 1
            if calm >= cfg.patience:
                break
        else:
            calm = 0
    final = np.asarray(he.dec(keys.secret, state.model_enc), dtype=float).reshape(d, k)
    return TrainingResult(rows, final, evaluate_loss(final, locals_, pooled), max_norm, history,
                          state.model_enc)


TRACE_COLUMNS = ("round", "global_loss", "participants", "straggled_ids", "wallclock_ms")


def trace_text(rows: Sequence[TraceRow]) -> str:
    """Trace CSV body; losses use the shortest exact float repr so reruns are byte-identical."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in rows:
        writer.writerow([r.round, repr(r.global_loss), r.participants,
                         " ".join(str(i) for i in r.straggled_ids), r.wallclock_ms])
    return buf.getvalue()


def write_trace(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trace_text(rows))


# ---------------------------------------------------------------------------
# convergence bound


class BoundParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ConvergenceBoundParams:
    delta: float            # smoothness of the global loss
    delta1: float           # learning-rate admissibility constant
    delta2: float           # contraction constant
    local_iters: int        # local steps per round
    gamma_norm: float       # largest model norm over the run
    lambda_bias: float      # non-iid bias of the split
    m_total: int            # users plus the provider
    n_part: float           # users reporting per round
    init_gap_sq: float      # squared distance of the initial model to the optimum

    def __post_init__(self):
        if min(self.delta, self.delta1, self.delta2, self.local_iters, self.m_total, self.n_part) <= 0:
            raise BoundParameterError("bound constants must be positive")
        if self.gamma_norm < 0 or self.lambda_bias < 0 or self.init_gap_sq < 0:
            raise BoundParameterError("norms, bias and initial gap must be non-negative")
        if self.m_total < 2:
            raise BoundParameterError("m_total counts the provider plus at least one user")


def contraction_factor(p: ConvergenceBoundParams, lam: float) -> float:
    t = p.local_iters
    return 1.0 - p.delta2 * lam * (t - lam * (t - 1))


def noise_term(p: ConvergenceBoundParams, lam: float) -> float:
    t = p.local_iters
    users = p.m_total - 1
    g2 = p.gamma_norm ** 2
    participation = (p.m_total - p.n_part) * lam ** 2 * t ** 2 * g2 / (p.n_part * users)
    bias = 2.0 * lam * (t - 1) * p.lambda_bias
    curvature = (1.0 + p.delta2 * (1.0 - lam)) * lam ** 2 * g2 * t * (t - 1) * (2 * t - 1) / 6.0
    tail = lam ** 2 * (t ** 2 + t - 1) * g2
    return participation + bias + curvature + tail


def convergence_bound(p: ConvergenceBoundParams, lambdas, rounds: int | None = None) -> np.ndarray:
    """Upper bound on the global loss gap after 0, 1, ..., rounds updates.

    ``lambdas`` is an array of per-round step sizes or a callable of the
    0-based round index.
    """
    if callable(lambdas):
        if rounds is None:
            raise BoundParameterError("rounds is required with a callable schedule")
        lam = np.array([lambdas(t) for t in range(rounds)], dtype=float)
    else:
        lam = np.asarray(lambdas, dtype=float)
        if rounds is not None:
            lam = lam[:rounds]
    limit = min(1.0, 1.0 / (p.delta1 * p.local_iters))
    if np.any(lam < 0) or np.any(lam > limit + 1e-15):
        raise BoundParameterError(f"step sizes must lie in [0, {limit}]")
    gap = np.empty(lam.size + 1)
    gap[0] = p.init_gap_sq
    for t, step in enumerate(lam):
        gap[t + 1] = contraction_factor(p, step) * gap[t] + noise_term(p, step)
    return 0.5 * p.delta * gap


def _parties(split: ContractSplit) -> list[Dataset]:
    pooled = split.pooled_encrypted()
    return [ds for ds in [*split.local, pooled] if ds.n_rows]


def pooled_loss(model: np.ndarray, split: ContractSplit) -> float:
    """Loss over every training row; the objective the row-weighted update descends.

    Equals the party-averaged global loss when all parties hold the same
    number of rows.
    """
    parts = _parties(split)
    total = sum(ds.n_rows for ds in parts)
    return float(sum(local_loss(model, ds) * ds.n_rows for ds in parts) / total)


def pooled_optimum(split: ContractSplit) -> np.ndarray:
    parts = _parties(split)
    f = np.vstack([ds.features for ds in parts])
    y = np.vstack([ds.labels for ds in parts])
    return np.linalg.lstsq(f, y, rcond=None)[0]


def bound_params_from_run(split: ContractSplit, result: TrainingResult, local_iters: int = 1,
                          n_part: float | None = None) -> ConvergenceBoundParams:
    """Constants for ``convergence_bound`` measured on a split and a finished run.

    Smoothness and contraction are the extreme eigenvalues of the pooled
    Hessian (power iteration for the largest), the model-norm constant is the
    largest norm seen, and the bias is the optimal pooled loss minus the
    row-weighted mean of each party's own optimum.
    """
    parts = _parties(split)
    total = sum(ds.n_rows for ds in parts)
    f = np.vstack([ds.features for ds in parts])
    hessian = f.T @ f / total
    delta = power_iteration(hessian)
    delta2 = float(np.linalg.eigvalsh(hessian)[0])
    opt = pooled_optimum(split)
    own = sum(ds.n_rows * local_loss(np.linalg.lstsq(ds.features, ds.labels, rcond=None)[0], ds)
              for ds in parts) / total
    bias = max(0.0, pooled_loss(opt, split) - own)
    users = len(split.local)
    gap0 = float(np.sum((result.model_history[0] - opt) ** 2))
    gamma = max(float(np.linalg.norm(m)) for m in result.model_history)
    return ConvergenceBoundParams(delta, delta, delta2, local_iters, gamma, bias, users + 1,
                                  users if n_part is None else n_part, gap0)


def power_iteration(matrix: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric positive semi-definite matrix."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[0])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iters):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        value = float(v @ matrix @ v)
    return value
