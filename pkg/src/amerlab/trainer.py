"""Contrastive training: per-embedding InfoNCE, matched batch loss, single-query
baseline loss, AdamW with linear warmup/decay, scheduled-sampling ramp, and
validation-based checkpoint selection."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from amerlab import seqmodel
from amerlab.assignment import hungarian_batch
from amerlab.errors import ConfigError, DivergedLoss, PositiveNotInBatch, ShapeMismatch
from amerlab.seqmodel import ModelConfig, StepInputPolicy
from amerlab.tensor_core import RngStream, as_rng, normalize

log = logging.getLogger(__name__)

AMER = "amer"
SINGLE_QUERY = "single-query"


@dataclass
class TrainConfig:
    batch_size: int = 128
    m: int = 5
    temperature: float = 0.05
    lr: float = 1e-3
    total_steps: int = 8000
    epochs: int = 0  # when > 0, overrides total_steps
    warmup: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    sampling_cap: float = 0.8
    negatives: int = 1
    seed: int = 0
    mode: str = AMER
    feedback: str = "scheduled"  # or "predicted"
    detach_feedback: bool = False
    eval_every: int = 500
    val_policy: str = "free"  # or "schedule"

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError("train.temperature must be > 0")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if not 0.0 <= self.warmup <= 0.5:
            raise ConfigError("train.warmup must lie in [0, 0.5]")
        if self.mode not in (AMER, SINGLE_QUERY):
            raise ConfigError(f"train.mode must be {AMER!r} or {SINGLE_QUERY!r}")
        if self.feedback not in ("scheduled", "predicted"):
            raise ConfigError("train.feedback must be 'scheduled' or 'predicted'")
        if self.val_policy not in ("free", "schedule"):
            raise ConfigError("train.val_policy must be 'free' or 'schedule'")
        if self.negatives < 0 or self.eval_every < 1 or self.total_steps < 0:
            raise ConfigError("invalid train.negatives / eval_every / total_steps")
        return self


@dataclass
class BatchLossBreakdown:
    total: float
    perms: np.ndarray        # (b, m) matched target slot per prediction
    denominator: int         # |D_batch|
    grad: np.ndarray | None = None  # d total / d preds, same shape as preds
    per_row: np.ndarray | None = None


# ----------------------------------------------------------------- losses


def _logsumexp_rows(s):
    mx = s.max(axis=1, keepdims=True)
    e = np.exp(s - mx)
    z = e.sum(axis=1, keepdims=True)
    return (mx + np.log(z))[:, 0], e / z


def infonce(q, positive, docs, tau) -> float:
    """-log softmax weight of ``positive`` among ``docs`` at temperature ``tau``.

    ``positive`` is either an index into ``docs`` or a vector that must occur
    in ``docs`` exactly.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    docs = np.atleast_2d(np.asarray(docs, dtype=np.float64))
    if np.ndim(positive) == 0:
        idx = int(positive)
        if not 0 <= idx < docs.shape[0]:
            raise PositiveNotInBatch("positive index out of range")
    else:
        hits = np.flatnonzero(np.all(docs == np.asarray(positive, dtype=np.float64), axis=1))
        if hits.size == 0:
            raise PositiveNotInBatch("positive document is not in the batch")
        idx = int(hits[0])
    s = docs @ np.asarray(q, dtype=np.float64) / tau
    lse, _ = _logsumexp_rows(s[None])
    return float(lse[0] - s[idx])


def _pool(targets, negatives):
    b, m, d = targets.shape
    docs = targets.reshape(b * m, d)
    if negatives is not None and len(negatives):
        docs = np.concatenate([docs, np.asarray(negatives, dtype=np.float64)])
    return docs


def _rows_loss(P, docs, pos_cols, tau, want_grad):
    S = P @ docs.T / tau
    lse, sm = _logsumexp_rows(S)
    rows = np.arange(P.shape[0])
    per_row = lse - S[rows, pos_cols]
    grad = None
    if want_grad:
        sm[rows, pos_cols] -= 1.0
        grad = sm @ docs / tau
    return per_row, grad


def batch_loss(preds, targets, negatives, tau, want_grad=True) -> BatchLossBreakdown:
    """Matched InfoNCE summed over the batch.

    Every prediction's denominator spans all targets of all examples plus all
    paired negatives. The pairing of predictions to targets inside each example
    is the Hungarian optimum of ``-sim``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 3:
        raise ShapeMismatch(f"preds {preds.shape} vs targets {targets.shape}")
    b, m, d = preds.shape
    docs = _pool(targets, negatives)
    perms = hungarian_batch(-np.einsum("bid,bjd->bij", preds, targets))
    pos = (np.arange(b)[:, None] * m + perms).reshape(-1)
    per_row, grad = _rows_loss(preds.reshape(b * m, d), docs, pos, tau, want_grad)
    return BatchLossBreakdown(
        total=float(per_row.sum()), perms=perms, denominator=docs.shape[0],
        grad=None if grad is None else grad.reshape(b, m, d), per_row=per_row.reshape(b, m),
    )


def single_query_loss(preds, targets, negatives, tau, rng, want_grad=True) -> BatchLossBreakdown:
    """InfoNCE with one uniformly drawn target per example as the positive."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    squeeze = preds.ndim == 2
    if squeeze:
        preds = preds[:, None]
    b, _, d = targets.shape
    if preds.shape != (b, 1, d):
        raise ShapeMismatch(f"single-query preds must be ({b}, 1, {d}), got {preds.shape}")
    m = targets.shape[1]
    choice = as_rng(rng).integers(0, m, size=b)
    docs = _pool(targets, negatives)
    pos = np.arange(b) * m + choice
    per_row, grad = _rows_loss(preds[:, 0], docs, pos, tau, want_grad)
    if grad is not None:
        grad = grad if squeeze else grad[:, None]
    return BatchLossBreakdown(total=float(per_row.sum()), perms=choice[:, None],
                              denominator=docs.shape[0], grad=grad, per_row=per_row[:, None])


# -------------------------------------------------------------- schedules


def warmup_steps(total: int, warmup: float) -> float:
    return warmup * total


def lr_at(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total``."""
    if total <= 0:
        return 0.0
    w = warmup_steps(total, warmup)
    if step < w:
        return peak * step / w
    if step >= total:
        return 0.0
    return peak * (total - step) / (total - w)


def sampling_p(step: int, total: int, cap: float = 0.8) -> float:
    if total <= 0:
        raise ValueError("total must be > 0")
    return min(cap, step / total)


# ------------------------------------------------------------------ AdamW


class AdamW:
    """Decoupled weight decay applied to weight matrices only."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = seqmodel.zeros_like_params(params)
        self.v = seqmodel.zeros_like_params(params)
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and k.rsplit(".", 1)[-1].startswith("W"):
                upd = upd + self.wd * p
            p -= lr * upd


# ------------------------------------------------------------------ train


@dataclass
class TrainData:
    """Inputs (n, d) raw float64 and unit targets (n, m, d) float64."""

    inputs: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_split(cls, ds, corpus=None):
        x = ds.inputs.astype(np.float64)
        if corpus is not None:
            y = corpus.vectors[ds.target_ids].astype(np.float64)
        else:
            y = ds.unit_targets()
        return cls(x, y)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class TrainResult:
    params: dict
    moments: tuple | None
    best_step: int
    best_val: float
    log: list = field(default_factory=list)  # rows (step, loss, val_loss, lr, p)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "val_loss", "lr", "p"])
        for step, loss, val, lr, p in self.log:
            w.writerow([step, _fmt(loss), _fmt(val), _fmt(lr), _fmt(p)])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def total_steps_for(cfg: TrainConfig, n_train: int) -> int:
    if cfg.epochs > 0:
        return cfg.epochs * max(1, n_train // cfg.batch_size)
    return cfg.total_steps


def _negatives(gen, count, d):
    if count == 0:
        return np.empty((0, d))
    return normalize(gen.standard_normal((count, d)))


def _step_loss(params, mcfg, tcfg, x, y, policy, gen, want_grad=True):
    """Forward + loss (+ backward) for one batch; returns (mean loss, grads)."""
    b, m, d = y.shape
    # float32 compute, float64 master weights and loss
    params = {k: v.astype(np.float32) for k, v in params.items()}
    negs = _negatives(gen, b * m * tcfg.negatives, d)
    seq_seed = gen.integers(0, 2**63)
    if tcfg.mode == AMER:
        preds, tape = seqmodel.forward_sequence(
            params, mcfg, x, y, policy, seq_seed, m=m, detach=tcfg.detach_feedback
        )
        br = batch_loss(preds, y, negs, tcfg.temperature, want_grad=want_grad)
        count = b * m
    else:
        preds, tape = seqmodel.forward_sequence(params, mcfg, x, y, policy, seq_seed, m=1)
        br = single_query_loss(preds, y, negs, tcfg.temperature, gen, want_grad=want_grad)
        count = b
    loss = br.total / count
    if not want_grad:
        return loss, None
    grads = seqmodel.backward(params, mcfg, tape, br.grad / count)
    return loss, grads


def validation_loss(params, mcfg, tcfg, val: TrainData, policy, rng: RngStream) -> float:
    """Mean per-embedding loss over the validation split with fixed negatives."""
    n = len(val)
    if n == 0:
        return float("nan")
    b = tcfg.batch_size
    total, count = 0.0, 0
    for i, lo in enumerate(range(0, n, b)):
        x = val.inputs[lo:lo + b]
        y = val.targets[lo:lo + b]
        gen = rng.derive("val", i).generator()
        loss, _ = _step_loss(params, mcfg, tcfg, x, y, policy, gen, want_grad=False)
        w = x.shape[0]
        total += loss * w
        count += w
    return total / count


def _policy(tcfg: TrainConfig, step: int, total: int) -> StepInputPolicy:
    if tcfg.feedback == "predicted":
        return StepInputPolicy(seqmodel.PREDICTED, 1.0)
    return StepInputPolicy(seqmodel.SCHEDULED, sampling_p(step, total, tcfg.sampling_cap))


def _val_policy(tcfg, step, total):
    if tcfg.val_policy == "free":
        return StepInputPolicy(seqmodel.PREDICTED, 1.0)
    return _policy(tcfg, step, total)


def train(params, mcfg: ModelConfig, train_data: TrainData, val_data: TrainData,
          tcfg: TrainConfig, progress=None) -> TrainResult:
    """Optimize ``params`` (modified in place) and return the best checkpoint.

    Validation runs at step 0, every ``eval_every`` steps and after the last
    step; the parameters with the lowest validation loss are returned.
    """
    tcfg.validate()
    n = len(train_data)
    total = total_steps_for(tcfg, n)
    if total == 0:
        return TrainResult({k: v.copy() for k, v in params.items()}, None, 0, float("nan"), [])
    if n < 2:
        raise ConfigError("need at least two training examples")
    b = min(tcfg.batch_size, n)
    per_epoch = n // b
    root = RngStream(tcfg.seed)
    opt = AdamW(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)

    best = None
    rows = []
    order = None
    for step in range(total + 1):
        val = None
        if step % tcfg.eval_every == 0 or step == total:
            val = validation_loss(params, mcfg, tcfg, val_data, _val_policy(tcfg, step, total), root)
            if not np.isfinite(val) and len(val_data):
                raise DivergedLoss(f"validation loss is {val} at step {step}")
            if best is None or (np.isfinite(val) and val < best[1]):
                best = (step, val, {k: v.copy() for k, v in params.items()},
                        ({k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}))
            if progress:
                progress(step, total, val)
        if step == total:
            rows.append((step, None, val, 0.0, _policy(tcfg, step, total).feed_prob))
            break
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = root.derive("epoch", epoch).generator().permutation(n)
        idx = order[pos * b:(pos + 1) * b]
        policy = _policy(tcfg, step, total)
        lr = lr_at(step, total, tcfg.lr, tcfg.warmup)
        gen = root.derive("step", step).generator()
        loss, grads = _step_loss(params, mcfg, tcfg, train_data.inputs[idx], train_data.targets[idx],
                                 policy, gen)
        if not np.isfinite(loss):
            raise DivergedLoss(f"training loss is {loss} at step {step}")
        opt.step(params, grads, lr)
        rows.append((step, loss, val, lr, policy.feed_prob))
    step, val, p, moments = best
    return TrainResult(p, moments, step, val, rows)
