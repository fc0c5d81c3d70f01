"""EM loop that calibrates a trainable policy toward per-bin accuracy.

Each epoch stratifies records into M equal-width bins of top confidence
(E-step), estimates the accuracy q_m inside each bin (M-step), freezes a
rank-preserving target per record with its bin's q_m pinned on top, then runs
a fixed number of full-batch gradient steps on

    mean( sft_weight * L_nll + lambda * L_target_divergence )

against those frozen targets. Policies supply ``probs``/``combined_grad``/
``descend`` (see toylab).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CalibrationError, ConfidenceVector, bin_index_array
from .metrics import accuracy_arrays, conf_ece_arrays, cw_ece_arrays
from .targetmap import TargetDistribution, build_target_matrix

DIVERGENCES = ("mse", "cross-entropy")

# A bin with perfect or zero accuracy would pin the target top at 1 or 0,
# which the tail solve cannot absorb; clamp into the open interval.
Q_CLAMP = 1e-3
LOG_FLOOR = 1e-12


class NonFiniteLoss(CalibrationError):
    def __init__(self, epoch: int, detail: str):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")


class NonFiniteGradient(CalibrationError):
    pass


@dataclass(frozen=True)
class EmConfig:
    epochs: int = 10
    bins: int = 10
    lam: float = 1.0
    divergence: str = "mse"
    learning_rate: float = 0.1
    min_bin_count: int = 5
    inner_steps: int = 50
    sft_weight: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.bins < 1 or self.min_bin_count < 1:
            raise CalibrationError("bad EM configuration")
        if self.lam < 0.0 or self.learning_rate <= 0.0 or self.inner_steps < 1:
            raise CalibrationError("bad EM configuration")
        if self.divergence not in DIVERGENCES:
            raise CalibrationError(f"unknown divergence {self.divergence!r}")


@dataclass(frozen=True)
class LatentAssignment:
    """Per-record bin index in [1, M] of the current top confidence."""

    z: np.ndarray
    M: int


@dataclass(frozen=True)
class BinAccuracy:
    """Per-bin accuracy estimates; q is NaN where a bin is empty."""

    q: np.ndarray
    counts: np.ndarray


def e_step(probs: np.ndarray, M: int) -> LatentAssignment:
    """Stratify records by top confidence into M equal-width bins."""
    return LatentAssignment(z=bin_index_array(probs.max(axis=1), M), M=M)


def m_step(
    probs: np.ndarray,
    labels: np.ndarray,
    z: LatentAssignment,
    min_bin_count: int = 1,
) -> BinAccuracy:
    """Per-bin fraction of records whose top class is the label.

    Bins smaller than ``min_bin_count`` use the Laplace-shrunk estimate
    (wins + 1) / (count + 2); empty bins are NaN and skipped downstream.
    """
    M = z.M
    correct = (np.argmax(probs, axis=1) == labels).astype(float)
    counts = np.bincount(z.z, minlength=M + 1)[1:]
    wins = np.bincount(z.z, weights=correct, minlength=M + 1)[1:]
    q = np.full(M, np.nan)
    occupied = counts > 0
    small = occupied & (counts < min_bin_count)
    plain = occupied & ~small
    q[plain] = wins[plain] / counts[plain]
    q[small] = (wins[small] + 1.0) / (counts[small] + 2.0)
    return BinAccuracy(q=q, counts=counts)


def _clamped_record_q(qs: BinAccuracy, z: LatentAssignment) -> np.ndarray:
    q_rec = qs.q[z.z - 1]
    if np.isnan(q_rec).any():
        raise CalibrationError("a record fell in a bin with undefined accuracy")
    return np.clip(q_rec, Q_CLAMP, 1.0 - Q_CLAMP)


def build_all_targets(
    probs: np.ndarray, qs: BinAccuracy, z: LatentAssignment
) -> list[TargetDistribution]:
    """One calibration target per record, top pinned to its bin's (clamped) q."""
    q_rec = _clamped_record_q(qs, z)
    out, top, rank_ok = build_target_matrix(probs, q_rec)
    return [
        TargetDistribution(
            probs=ConfidenceVector(tuple(out[i])),
            top_index=int(top[i]),
            q_m=float(q_rec[i]),
            rank_preserved=bool(rank_ok[i]),
        )
        for i in range(out.shape[0])
    ]


def _target_matrix(probs: np.ndarray, qs: BinAccuracy, z: LatentAssignment) -> np.ndarray:
    return build_target_matrix(probs, _clamped_record_q(qs, z))[0]


def _as_row(x) -> np.ndarray:
    if isinstance(x, TargetDistribution):
        return x.probs.as_array()
    if hasattr(x, "as_array"):
        return x.as_array()
    return np.asarray(x, dtype=float)


def ece_loss(target, conf, divergence: str = "mse") -> float:
    """Divergence from a target distribution to a confidence vector.

    mse averages squared per-class gaps; cross-entropy is the negative
    target-weighted log-confidence (confidences floored at 1e-12).
    """
    t = _as_row(target)
    c = _as_row(conf)
    if divergence == "mse":
        return float(np.mean((t - c) ** 2))
    if divergence == "cross-entropy":
        return float(-(t * np.log(np.maximum(c, LOG_FLOOR))).sum())
    raise CalibrationError(f"unknown divergence {divergence!r}")


def sft_loss(conf, label: int) -> float:
    """Negative log-confidence of the true class (floored at 1e-12)."""
    c = _as_row(conf)
    return float(-np.log(max(float(c[label]), LOG_FLOOR)))


def mean_sft(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def mean_ece_loss(probs: np.ndarray, targets: np.ndarray, divergence: str) -> float:
    if divergence == "mse":
        return float(((targets - probs) ** 2).mean())
    if divergence == "cross-entropy":
        return float(-(targets * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=1).mean())
    raise CalibrationError(f"unknown divergence {divergence!r}")


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def run_em(
    policy,
    labels: np.ndarray,
    cfg: EmConfig,
    features: np.ndarray | None = None,
) -> tuple[object, list[dict]]:
    """Run the EM calibration loop, mutating and returning the policy.

    ``features`` is forwarded to the policy (tabular policies ignore it).
    Each history row evaluates the policy state at that epoch, including the
    mean losses against the targets built from that same state; the epoch's
    inner gradient passes then reuse exactly those frozen targets. With
    lam = 0 the target term is skipped entirely, so the trajectory matches
    plain NLL training bitwise.
    """
    labels = np.asarray(labels, dtype=np.int64)
    y1 = _one_hot(labels, policy.k)
    history: list[dict] = []

    for epoch in range(cfg.epochs + 1):
        probs = policy.probs(features)
        if not np.isfinite(probs).all():
            raise NonFiniteLoss(epoch, "policy produced non-finite confidences")
        z = e_step(probs, cfg.bins)
        qs = m_step(probs, labels, z, cfg.min_bin_count)
        targets = _target_matrix(probs, qs, z)
        row = _history_row(epoch, probs, labels, targets, cfg)
        if not all(np.isfinite(v) for v in row.values()):
            raise NonFiniteLoss(epoch, f"history row {row}")
        history.append(row)
        if epoch == cfg.epochs:
            break
        for _ in range(cfg.inner_steps):
            try:
                grad = policy.combined_grad(
                    features,
                    y1,
                    targets,
                    cfg.lam,
                    cfg.divergence,
                    sft_weight=cfg.sft_weight,
                )
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(epoch + 1, str(exc)) from exc
            policy.descend(grad, cfg.learning_rate)
    return policy, history


def _history_row(
    epoch: int,
    probs: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    cfg: EmConfig,
) -> dict:
    conf, _ = conf_ece_arrays(probs, labels, cfg.bins)
    cw, _ = cw_ece_arrays(probs, labels, cfg.bins)
    return {
        "epoch": epoch,
        "acc": accuracy_arrays(probs, labels),
        "conf_ece": conf,
        "cw_ece": cw,
        "mean_sft": mean_sft(probs, labels),
        "mean_ece": mean_ece_loss(probs, targets, cfg.divergence),
    }
