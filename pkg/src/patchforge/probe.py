"""Linear probing of frozen embeddings with a fixed training protocol.

The head is a single linear layer trained with nesterov-momentum SGD under
a cosine learning-rate schedule that decays from the (batch-size-scaled)
peak to zero over a fixed step budget. Validation balanced accuracy is
checked once per epoch and training stops early after a fixed number of
stagnant epochs; the best-validation checkpoint is what gets reported.
Splitting keeps all samples of a group (slide, patient) on one side.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import RandomStream

DEFAULT_RUNS = 5


@dataclass(frozen=True)
class ProbeConfig:
    batch_size: int = 4096
    base_batch_size: int = 4096
    base_lr: float = 0.01
    total_steps: int = 12_500
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1 or self.batch_size > self.base_batch_size:
            raise ValueError(
                f"batch_size must be in [1, {self.base_batch_size}]"
            )
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def lr(self) -> float:
        """Peak learning rate, scaled linearly with the batch size."""
        return self.base_lr * self.batch_size / self.base_batch_size

    def steps_per_epoch(self, n_train: int) -> int:
        return max(1, math.ceil(n_train / self.batch_size))

    def max_epochs(self, n_train: int) -> int:
        return math.ceil(self.total_steps / self.steps_per_epoch(n_train))

    def patience(self, n_train: int) -> int:
        return max(1, self.max_epochs(n_train) // 20)


@dataclass
class ProbeRunResult:
    balanced_accuracy: float
    steps_executed: int
    epochs_run: int
    early_stopped: bool
    best_epoch: int
    val_history: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "steps_executed": self.steps_executed,
            "epochs_run": self.epochs_run,
            "early_stopped": self.early_stopped,
            "best_epoch": self.best_epoch,
        }


@dataclass
class ProbeResult:
    runs: list
    mean: float
    std: float
    config: ProbeConfig

    def to_json_dict(self) -> dict:
        return {
            "runs": [r.to_json_dict() for r in self.runs],
            "mean": self.mean,
            "std": self.std,
            "config_echo": {
                "batch_size": self.config.batch_size,
                "base_batch_size": self.config.base_batch_size,
                "base_lr": self.config.base_lr,
                "lr": self.config.lr,
                "total_steps": self.config.total_steps,
                "momentum": self.config.momentum,
                "nesterov": self.config.nesterov,
                "weight_decay": self.config.weight_decay,
            },
        }


def lr_at_step(config: ProbeConfig, step: int) -> float:
    """Cosine decay from the peak rate at step 0 to exactly 0 at the end."""
    if step < 0 or step > config.total_steps:
        raise ValueError(f"step must be in [0, {config.total_steps}]")
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.total_steps))


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in y_true."""
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    if yt.shape != yp.shape:
        raise ValueError(f"length mismatch: {yt.shape} vs {yp.shape}")
    if yt.size < 1:
        raise ValueError("need at least one sample")
    recalls = [float(np.mean(yp[yt == c] == c)) for c in np.unique(yt)]
    return float(np.mean(recalls))


def split_stratified_grouped(labels, groups, fractions, seed: int) -> np.ndarray:
    """Assign every sample to a split without breaking groups apart.

    Greedy allocation: groups are visited largest-first (ties in seeded
    random order) and each goes to the split whose per-class sample targets
    it best fills. Per-split class proportions land within about 10%
    relative of the global ones whenever the group structure permits;
    a larger deviation raises a warning but still returns the best effort.
    """
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    if labels.shape != groups.shape:
        raise ValueError("labels and groups must have equal length")
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")

    classes = list(np.unique(labels))
    class_index = {c: i for i, c in enumerate(classes)}
    group_ids = list(np.unique(groups))
    counts = {g: np.zeros(len(classes)) for g in group_ids}
    for lab, grp in zip(labels, groups):
        counts[grp][class_index[lab]] += 1

    rng = RandomStream(seed, "split")
    rng.shuffle(group_ids)
    group_ids.sort(key=lambda g: -counts[g].sum())

    totals = np.array([counts[g] for g in group_ids]).sum(axis=0)
    targets = np.array([[f * t for t in totals] for f in fractions])
    assigned = np.zeros_like(targets)
    choice: dict = {}
    for g in group_ids:
        costs = []
        for s in range(len(fractions)):
            after = assigned[s] + counts[g]
            costs.append(float(np.sum((after - targets[s]) ** 2 / (targets[s] + 1.0))))
        best = int(np.argmin(costs))
        choice[g] = best
        assigned[best] += counts[g]

    for s in range(len(fractions)):
        for ci, c in enumerate(classes):
            target = targets[s][ci]
            if target >= 1 and abs(assigned[s][ci] - target) > 0.10 * target + 1.0:
                warnings.warn(
                    f"split {s} holds {assigned[s][ci]:.0f} of class {c!r} "
                    f"vs target {target:.1f}; group structure may not permit "
                    f"the requested fractions",
                    stacklevel=2,
                )
    return np.array([choice[g] for g in groups])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(
    train_x: np.ndarray,
    train_y,
    val_x: np.ndarray,
    val_y,
    config: ProbeConfig | None = None,
    seed: int = 0,
) -> ProbeRunResult:
    """Train one linear head run and report its best-validation metrics.

    Weights start uniform in +-1/sqrt(K) with zero bias; batches follow a
    seeded shuffle per epoch, so a run is fully determined by (data,
    config, seed).
    """
    config = config or ProbeConfig()
    X = np.asarray(train_x, dtype=np.float64)
    Xv = np.asarray(val_x, dtype=np.float64)
    if X.ndim != 2 or Xv.ndim != 2:
        raise ValueError("embeddings must be 2D")
    if X.shape[1] != Xv.shape[1]:
        raise ValueError(
            f"train K = {X.shape[1]} does not match val K = {Xv.shape[1]}"
        )
    if Xv.shape[0] < 1:
        raise ValueError("validation set must not be empty")
    classes = list(np.unique(np.asarray(train_y)))
    if len(classes) < 2:
        raise ValueError("training set must contain at least 2 classes")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[v] for v in np.asarray(train_y)])
    yv = np.array([class_index.get(v, -1) for v in np.asarray(val_y)])

    n, k = X.shape
    c = len(classes)
    rng = RandomStream(seed, "probe")
    bound = 1.0 / math.sqrt(k)
    w = np.array(
        [rng.uniform(-bound, bound) for _ in range(k * c)], dtype=np.float64
    ).reshape(k, c)
    b = np.zeros(c)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)

    batch = min(config.batch_size, n)
    steps_per_epoch = config.steps_per_epoch(n)
    patience = config.patience(n)
    onehot = np.eye(c)[y]

    best_score = -math.inf
    best_state = (w.copy(), b.copy())
    best_epoch = 0
    stagnant = 0
    early = False
    step = 0
    epoch = 0
    history = []

    while step < config.total_steps:
        epoch += 1
        order = list(range(n))
        rng.shuffle(order)
        for start in range(0, steps_per_epoch * batch, batch):
            if step >= config.total_steps:
                break
            idx = order[start : start + batch]
            if len(idx) < batch:
                idx = idx + order[: batch - len(idx)]  # wrap the short tail
            xb, yb = X[idx], onehot[idx]
            probs = _softmax(xb @ w + b)
            grad = (probs - yb) / len(idx)
            gw = xb.T @ grad + config.weight_decay * w
            gb = grad.sum(axis=0)
            lr = lr_at_step(config, step)
            vel_w = config.momentum * vel_w + gw
            vel_b = config.momentum * vel_b + gb
            if config.nesterov:
                w -= lr * (gw + config.momentum * vel_w)
                b -= lr * (gb + config.momentum * vel_b)
            else:
                w -= lr * vel_w
                b -= lr * vel_b
            step += 1

        preds = np.argmax(Xv @ w + b, axis=1)
        score = balanced_accuracy(yv, preds)
        history.append(score)
        if score > best_score:
            best_score = score
            best_state = (w.copy(), b.copy())
            best_epoch = epoch
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= patience:
                early = True
                break

    w, b = best_state
    preds = np.argmax(Xv @ w + b, axis=1)
    return ProbeRunResult(
        balanced_accuracy=balanced_accuracy(yv, preds),
        steps_executed=step,
        epochs_run=epoch,
        early_stopped=early,
        best_epoch=best_epoch,
        val_history=history,
    )


def run_probe(
    train_x,
    train_y,
    val_x,
    val_y,
    config: ProbeConfig | None = None,
    seed: int = 0,
    n_runs: int = DEFAULT_RUNS,
) -> ProbeResult:
    """Repeat train_probe with seeds seed..seed+n_runs-1 and aggregate."""
    config = config or ProbeConfig()
    runs = [
        train_probe(train_x, train_y, val_x, val_y, config, seed=seed + i)
        for i in range(n_runs)
    ]
    accs = np.array([r.balanced_accuracy for r in runs])
    std = float(accs.std(ddof=1)) if len(runs) > 1 else 0.0
    return ProbeResult(runs=runs, mean=float(accs.mean()), std=std, config=config)
