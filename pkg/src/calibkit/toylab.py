"""Desk-scale training lab: a synthetic multiple-choice task, linear and
tabular softmax policies with analytic gradients, temperature scaling, and
label smoothing.

The task draws features from a standard normal and labels from a hidden
linear-softmax teacher, so the highest accuracy any predictor can reach is
known from the teacher itself (its mean top probability). That value plays
the role of the critical accuracy separating the two calibration regimes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import (
    BinningConfig,
    CalibrationError,
    ConfidenceVector,
    Dataset,
    EmptyDataset,
    PredictionRecord,
)
from .emcal import (
    EmConfig,
    LOG_FLOOR,
    NonFiniteGradient,
    NonFiniteLoss,
    mean_ece_loss,
    mean_sft,
    run_em,
)
from .metrics import accuracy_arrays, binned_ece, conf_ece_arrays, cw_ece_arrays


class BadParams(CalibrationError):
    pass


class DimensionMismatch(CalibrationError):
    pass


class BadTemperature(CalibrationError):
    pass


class BadEpsilon(CalibrationError):
    pass


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ToyTask:
    """Synthetic multiple-choice dataset with a known linear-softmax teacher."""

    features: np.ndarray
    labels: np.ndarray
    k: int
    teacher_weights: np.ndarray
    teacher_temperature: float

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @cached_property
    def teacher_probs(self) -> np.ndarray:
        return softmax(self.features @ self.teacher_weights / self.teacher_temperature)

    @cached_property
    def bayes_accuracy(self) -> float:
        """Highest accuracy any predictor can reach in expectation: the mean
        top probability of the label-generating teacher."""
        return float(self.teacher_probs.max(axis=1).mean())


def gen_toy_task(
    d: int, k: int, n: int, teacher_temperature: float = 1.0, seed: int = 0
) -> ToyTask:
    """Features ~ N(0, 1), hidden teacher weights ~ N(0, 1), labels sampled
    from softmax(X W* / tau*). Deterministic given the seed."""
    if d < 1 or k < 2 or n < 1:
        raise BadParams("need d >= 1, k >= 2, n >= 1")
    if not (teacher_temperature > 0.0):
        raise BadParams("teacher temperature must be > 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    W = rng.standard_normal((d, k))
    probs = softmax(X @ W / teacher_temperature)
    u = rng.random(n)
    cdf = np.cumsum(probs, axis=1)
    labels = np.minimum((cdf < u[:, None]).sum(axis=1), k - 1)
    return ToyTask(X, labels.astype(np.int64), k, W, float(teacher_temperature))


def _grad_wrt_logits(
    probs: np.ndarray,
    soft_labels: np.ndarray,
    targets: np.ndarray | None,
    lam: float,
    divergence: str,
    sft_weight: float,
) -> np.ndarray:
    """Gradient of the mean combined loss with respect to the row logits.

    The fit term is cross-entropy against ``soft_labels`` (one-hot for plain
    training), whose softmax gradient is (p - t). The target term goes through
    the full softmax Jacobian. lam == 0 skips the target term entirely so the
    trajectory is bit-identical to fit-only training.
    """
    n, k = probs.shape
    g = (sft_weight / n) * (probs - soft_labels)
    if lam != 0.0:
        if targets is None:
            raise BadParams("a positive lam needs targets")
        if divergence == "mse":
            dldp = (2.0 / k) * (probs - targets) / n
        elif divergence == "cross-entropy":
            dldp = np.where(probs > LOG_FLOOR, -targets / probs, 0.0) / n
        else:
            raise BadParams(f"unknown divergence {divergence!r}")
        g = g + lam * probs * (dldp - (dldp * probs).sum(axis=1, keepdims=True))
    return g


class LinearPolicy:
    """Softmax of X @ W / temperature."""

    def __init__(self, d: int, k: int, W: np.ndarray | None = None, temperature: float = 1.0):
        if not (temperature > 0.0):
            raise BadTemperature("temperature must be > 0")
        self.W = np.zeros((d, k)) if W is None else np.array(W, dtype=float)
        if self.W.shape != (d, k):
            raise DimensionMismatch(f"W must be ({d}, {k})")
        self.temperature = float(temperature)

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def probs(self, features: np.ndarray) -> np.ndarray:
        if features is None or features.shape[1] != self.W.shape[0]:
            raise DimensionMismatch("features do not match the weight matrix")
        return softmax(features @ self.W / self.temperature)

    def combined_grad(self, features, soft_labels, targets, lam, divergence, sft_weight=1.0):
        probs = self.probs(features)
        g = _grad_wrt_logits(probs, soft_labels, targets, lam, divergence, sft_weight)
        grad = features.T @ g / self.temperature
        if not np.isfinite(grad).all():
            raise NonFiniteGradient("linear policy gradient is not finite")
        return grad

    def descend(self, grad: np.ndarray, lr: float) -> None:
        self.W -= lr * grad

    def clone(self) -> "LinearPolicy":
        return LinearPolicy(self.W.shape[0], self.W.shape[1], self.W.copy(), self.temperature)

    def to_json_dict(self) -> dict:
        return {
            "type": "linear",
            "d": self.W.shape[0],
            "k": self.W.shape[1],
            "weights": self.W.tolist(),
            "temperature": self.temperature,
        }


class TabularPolicy:
    """One free logit row per record; ignores features."""

    def __init__(self, logits: np.ndarray):
        self.logits = np.array(logits, dtype=float)
        if self.logits.ndim != 2 or self.logits.shape[1] < 2:
            raise DimensionMismatch("logits must be (n, k>=2)")

    @property
    def k(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def zeros(cls, n: int, k: int) -> "TabularPolicy":
        return cls(np.zeros((n, k)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "TabularPolicy":
        return cls(np.log(np.maximum(probs, LOG_FLOOR)))

    def probs(self, features: np.ndarray | None = None) -> np.ndarray:
        return softmax(self.logits)

    def combined_grad(self, features, soft_labels, targets, lam, divergence, sft_weight=1.0):
        probs = self.probs()
        grad = _grad_wrt_logits(probs, soft_labels, targets, lam, divergence, sft_weight)
        if not np.isfinite(grad).all():
            raise NonFiniteGradient("tabular policy gradient is not finite")
        return grad

    def descend(self, grad: np.ndarray, lr: float) -> None:
        # The mean-loss gradient carries a 1/n factor per row, but the rows are
        # independent coordinates of a separable objective; stepping per record
        # keeps the learning rate scale comparable to the linear policy.
        self.logits -= lr * self.logits.shape[0] * grad

    def clone(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy())

    def to_json_dict(self) -> dict:
        return {
            "type": "tabular",
            "n": self.logits.shape[0],
            "k": self.logits.shape[1],
            "logits": self.logits.tolist(),
        }


def policy_from_json_dict(obj: dict):
    if obj.get("type") == "linear":
        return LinearPolicy(
            int(obj["d"]),
            int(obj["k"]),
            np.asarray(obj["weights"], dtype=float),
            float(obj["temperature"]),
        )
    if obj.get("type") == "tabular":
        return TabularPolicy(np.asarray(obj["logits"], dtype=float))
    raise BadParams(f"unknown policy type {obj.get('type')!r}")


def forward(policy, features: np.ndarray | None = None) -> np.ndarray:
    """Confidence matrix of a policy on the given features."""
    return policy.probs(features)


def grad_combined(
    policy,
    features: np.ndarray | None,
    soft_labels: np.ndarray,
    targets: np.ndarray | None,
    lam: float,
    divergence: str = "mse",
    sft_weight: float = 1.0,
) -> np.ndarray:
    """Analytic gradient of the mean combined loss w.r.t. the policy params."""
    return policy.combined_grad(features, soft_labels, targets, lam, divergence, sft_weight)


def combined_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray | None,
    lam: float,
    divergence: str = "mse",
    sft_weight: float = 1.0,
) -> float:
    loss = sft_weight * mean_sft(probs, labels)
    if lam != 0.0:
        loss += lam * mean_ece_loss(probs, targets, divergence)
    return float(loss)


def label_smooth_targets(label: int, k: int, epsilon: float) -> ConfidenceVector:
    """1 - epsilon on the true class, epsilon spread over the others."""
    if not (0.0 <= epsilon < 1.0):
        raise BadEpsilon(f"epsilon {epsilon!r} outside [0, 1)")
    if not (0 <= label < k):
        raise BadParams(f"label {label} outside [0, {k})")
    row = np.full(k, epsilon / (k - 1))
    row[label] = 1.0 - epsilon
    return ConfidenceVector(tuple(row))


def _smooth_matrix(labels: np.ndarray, k: int, epsilon: float) -> np.ndarray:
    if not (0.0 <= epsilon < 1.0):
        raise BadEpsilon(f"epsilon {epsilon!r} outside [0, 1)")
    out = np.full((labels.shape[0], k), epsilon / (k - 1))
    out[np.arange(labels.shape[0]), labels] = 1.0 - epsilon
    return out


def apply_temperature(ds: Dataset, T: float) -> Dataset:
    """Rescale every record's log-confidences by 1/T and renormalize.

    The top class never changes, so accuracy is invariant for any T > 0.
    """
    if not (T > 0.0):
        raise BadTemperature("temperature must be > 0")
    probs = temperature_transform(ds.probs_matrix, T)
    records = [
        PredictionRecord(r.id, ConfidenceVector(tuple(probs[i])), r.label, r.split)
        for i, r in enumerate(ds.records)
    ]
    return Dataset(records)


def temperature_transform(probs: np.ndarray, T: float) -> np.ndarray:
    if not (T > 0.0):
        raise BadTemperature("temperature must be > 0")
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return softmax(logp / T)


def fit_temperature(
    ds_val: Dataset, bins: BinningConfig = BinningConfig()
) -> tuple[float, float, float]:
    """Search a log-spaced temperature grid (plus golden-section refinement)
    for the value minimizing conf-ECE on the given split.

    T = 1 is always a candidate, so the fitted temperature never increases
    conf-ECE here; when nothing beats the identity, (1.0, e, e) is returned.
    """
    if ds_val.n < 1:
        raise EmptyDataset("fit_temperature needs at least one record")
    M = bins.effective_bins(ds_val.n)
    probs, labels = ds_val.probs_matrix, ds_val.labels_array
    with np.errstate(divide="ignore"):
        logp = np.log(probs)

    def objective(T: float) -> float:
        # Same float path as apply_temperature + conf_ece, so the reported
        # minimum is exactly what a caller recomputes on the rescaled data.
        scaled = softmax(logp / T)
        return binned_ece(scaled.max(axis=1), np.argmax(scaled, axis=1) == labels, M)

    ece_before = conf_ece_arrays(probs, labels, M)[0]
    grid = np.geomspace(0.05, 20.0, 400)
    scores = _grid_objective(logp, labels, M, grid)
    best = int(np.argmin(scores))

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    t_best, s_best = _golden_section(objective, lo, hi)
    if scores[best] < s_best:
        t_best, s_best = float(grid[best]), float(scores[best])

    if s_best < ece_before:
        return t_best, ece_before, s_best
    return 1.0, ece_before, ece_before


def _grid_objective(logp: np.ndarray, labels: np.ndarray, M: int, grid: np.ndarray) -> np.ndarray:
    """Binned top-confidence gap for every temperature in one pass.

    Elementwise identical to evaluating softmax(logp / T) per grid point.
    """
    n = logp.shape[0]
    scaled = softmax(logp[None, :, :] / grid[:, None, None], axis=2)
    values = scaled.max(axis=2)
    events = (np.argmax(scaled, axis=2) == labels[None, :]).astype(float)
    idx = np.clip(np.ceil(values * M).astype(np.int64), 1, M) - 1
    flat = idx + (np.arange(grid.shape[0])[:, None] * M)
    size = grid.shape[0] * M
    counts = np.bincount(flat.ravel(), minlength=size).reshape(grid.shape[0], M)
    vsum = np.bincount(flat.ravel(), weights=values.ravel(), minlength=size).reshape(
        grid.shape[0], M
    )
    esum = np.bincount(flat.ravel(), weights=events.ravel(), minlength=size).reshape(
        grid.shape[0], M
    )
    occupied = counts > 0
    mean_conf = np.where(occupied, vsum / np.maximum(counts, 1), 0.0)
    freq = np.where(occupied, esum / np.maximum(counts, 1), 0.0)
    return (np.abs(freq - mean_conf) * counts).sum(axis=1) / n


def _golden_section(fn, lo: float, hi: float, iters: int = 24) -> tuple[float, float]:
    """Golden-section minimization on log-temperature inside [lo, hi]."""
    a, b = np.log(lo), np.log(hi)
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(float(np.exp(c))), fn(float(np.exp(d)))
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(float(np.exp(c)))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(float(np.exp(d)))
    t = float(np.exp((a + b) / 2.0))
    return t, fn(t)


def _gd_history_row(epoch, probs, labels, M):
    conf, _ = conf_ece_arrays(probs, labels, M)
    cw, _ = cw_ece_arrays(probs, labels, M)
    return {
        "epoch": epoch,
        "acc": accuracy_arrays(probs, labels),
        "conf_ece": conf,
        "cw_ece": cw,
        "mean_sft": mean_sft(probs, labels),
        "mean_ece": None,
    }


def _gd_train(policy, features, labels, soft_labels, epochs, lr, M=10):
    """Plain full-batch gradient descent on cross-entropy to soft targets."""
    history = [_gd_history_row(0, policy.probs(features), labels, M)]
    for epoch in range(1, epochs + 1):
        grad = policy.combined_grad(features, soft_labels, None, 0.0, "mse")
        policy.descend(grad, lr)
        probs = policy.probs(features)
        if not np.isfinite(probs).all():
            raise NonFiniteLoss(epoch, "policy produced non-finite confidences")
        history.append(_gd_history_row(epoch, probs, labels, M))
    return policy, history


def train(
    policy,
    task: ToyTask,
    mode: str = "sft-only",
    epochs: int = 200,
    lr: float = 0.05,
    epsilon: float = 0.1,
    em: EmConfig | None = None,
    overfit_epochs: int = 400,
    overfit_lr: float = 0.5,
):
    """Train a policy on the toy task under one of the study modes.

    sft-only and label-smooth run plain full-batch gradient descent on the
    (optionally smoothed) label cross-entropy. cft hands the policy to the EM
    calibration loop. rcft-analog first switches to a tabular policy seeded
    from the current confidences and overfits it with plain descent, then runs
    the EM loop at lam = 1; the capacity jump stands in for a heavier fit
    objective and pushes accuracy past the task's critical threshold.
    """
    y1 = _one_hot(task.labels, task.k)
    if mode == "sft-only":
        return _gd_train(policy, task.features, task.labels, y1, epochs, lr)
    if mode == "label-smooth":
        smooth = _smooth_matrix(task.labels, task.k, epsilon)
        return _gd_train(policy, task.features, task.labels, smooth, epochs, lr)
    if mode == "cft":
        cfg = em if em is not None else EmConfig(epochs=max(1, epochs // 50), learning_rate=lr)
        return run_em(policy, task.labels, cfg, features=task.features)
    if mode == "rcft-analog":
        tab = TabularPolicy.from_probs(policy.probs(task.features))
        tab, hist1 = _gd_train(tab, None, task.labels, y1, overfit_epochs, overfit_lr)
        cfg = em if em is not None else EmConfig(
            epochs=max(1, epochs // 50), lam=1.0, learning_rate=lr
        )
        tab, hist2 = run_em(tab, task.labels, cfg, features=None)
        for i, row in enumerate(hist2):
            row["epoch"] = hist1[-1]["epoch"] + i
        return tab, hist1 + hist2[1:]
    raise BadParams(f"unknown training mode {mode!r}")


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def task_dataset(task: ToyTask, policy) -> Dataset:
    """Snapshot the policy's confidences on the task as a metrics dataset."""
    return Dataset.from_arrays(policy.probs(task.features), task.labels)


# Pinned study configuration: one task and budget per stage, reused by the CLI
# defaults and the acceptance suite so published numbers are reproducible.
STUDY = {
    "d": 32,
    "k": 4,
    "n": 2000,
    "teacher_temperature": 1.0,
    "sft_epochs": 150,
    "sft_lr": 0.5,
    "em_epochs": 8,
    "em_lr": 0.5,
    "rcft_overfit_epochs": 400,
    "rcft_overfit_lr": 0.5,
    "rcft_em_lr": 0.1,
    "ece_only_epochs": 12,
    "bins": 10,
}


def _endpoint(task: ToyTask, policy) -> dict:
    probs = policy.probs(task.features)
    conf, _ = conf_ece_arrays(probs, task.labels, STUDY["bins"])
    cw, _ = cw_ece_arrays(probs, task.labels, STUDY["bins"])
    return {"acc": accuracy_arrays(probs, task.labels), "conf_ece": conf, "cw_ece": cw}


def tradeoff_study(seed: int = 42) -> dict:
    """Run the pinned four-stage study on one seeded task.

    Stages: plain-descent baseline (fits the labels, leaves a calibration
    gap), EM calibration at lam = 1 from that endpoint, the stronger-fit
    analog (tabular capacity, then EM at lam = 1), and target-only training
    from scratch (no fit term). Returns per-stage endpoint metrics plus the
    task's critical accuracy.
    """
    task = gen_toy_task(
        d=STUDY["d"], k=STUDY["k"], n=STUDY["n"],
        teacher_temperature=STUDY["teacher_temperature"], seed=seed,
    )
    out = {"bayes_accuracy": task.bayes_accuracy, "task": task}

    sft = LinearPolicy(task.d, task.k)
    sft, sft_hist = train(
        sft, task, mode="sft-only", epochs=STUDY["sft_epochs"], lr=STUDY["sft_lr"]
    )
    out["sft"] = _endpoint(task, sft)
    out["sft_policy"] = sft
    out["sft_history"] = sft_hist

    cft_cfg = EmConfig(
        epochs=STUDY["em_epochs"], bins=STUDY["bins"], lam=1.0,
        learning_rate=STUDY["em_lr"], seed=seed,
    )
    cft_pol, cft_hist = train(sft.clone(), task, mode="cft", em=cft_cfg)
    out["cft"] = _endpoint(task, cft_pol)
    out["cft_history"] = cft_hist

    rcft_cfg = EmConfig(
        epochs=STUDY["em_epochs"], bins=STUDY["bins"], lam=1.0,
        learning_rate=STUDY["rcft_em_lr"], seed=seed,
    )
    rcft_pol, rcft_hist = train(
        sft.clone(), task, mode="rcft-analog", em=rcft_cfg,
        overfit_epochs=STUDY["rcft_overfit_epochs"], overfit_lr=STUDY["rcft_overfit_lr"],
    )
    out["rcft"] = _endpoint(task, rcft_pol)
    out["rcft_history"] = rcft_hist

    eo_cfg = EmConfig(
        epochs=STUDY["ece_only_epochs"], bins=STUDY["bins"], lam=1.0,
        sft_weight=0.0, learning_rate=STUDY["em_lr"], seed=seed,
    )
    eo_pol, eo_hist = run_em(
        TabularPolicy.zeros(task.n, task.k), task.labels, eo_cfg, features=None
    )
    out["ece_only"] = _endpoint(task, eo_pol)
    out["ece_only_history"] = eo_hist
    return out
