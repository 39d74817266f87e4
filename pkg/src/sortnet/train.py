"""Mini-batch SGD with momentum, section-wise learning rates and metric logging."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sortnet import ops
from sortnet.autodiff import Param, Tape
from sortnet.data import DatasetHandle, augment_batch, iter_batches
from sortnet.errors import DivergedLoss, EmptySplit, NonFiniteGradient
from sortnet.model import Network
from sortnet.netbuild import NetworkSpec

# Learning-rate sections (lr, iterations) used for each architecture family.
REFERENCE_SCHEDULES: dict[str, list[tuple[float, int]]] = {
    "lenet": [(1e-2, 60_000), (1e-3, 5_000), (1e-4, 5_000)],
    "vggish": [(1e-1, 60_000), (1e-2, 30_000), (1e-3, 20_000), (1e-4, 10_000)],
    "resnet": [(1e-1, 32_000), (1e-2, 16_000), (1e-3, 16_000)],
}


def scaled_schedule(family: str, scale: float) -> list[tuple[float, int]]:
    """Paper schedule for ``family`` with every section's length multiplied by ``scale``."""
    if family not in REFERENCE_SCHEDULES:
        raise ValueError(f"no schedule for {family!r}; choose from {sorted(REFERENCE_SCHEDULES)}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    return [(lr, max(1, round(n * scale))) for lr, n in REFERENCE_SCHEDULES[family]]


def parse_sections(text: str) -> list[tuple[float, int]]:
    """``"0.1:300,0.01:100"`` -> ``[(0.1, 300), (0.01, 100)]``."""
    out = []
    for part in text.split(","):
        lr, _, n = part.strip().partition(":")
        if not n:
            raise ValueError(f"section {part!r} must look like lr:iters")
        out.append((float(lr), int(n)))
    return out


@dataclass
class TrainConfig:
    sections: list[tuple[float, int]] = field(default_factory=lambda: [(1e-2, 100)])
    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 0
    augment: bool = False

    def __post_init__(self):
        self.sections = [(float(lr), int(n)) for lr, n in self.sections]
        if not self.sections:
            raise ValueError("at least one LR section is required")
        for lr, n in self.sections:
            if lr < 0 or n <= 0:
                raise ValueError(f"bad section lr={lr}, iters={n}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_iters(self) -> int:
        return sum(n for _, n in self.sections)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sections"] = [list(s) for s in self.sections]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{**d, "sections": [tuple(s) for s in d["sections"]]})


@dataclass
class RunMetrics:
    """Per-iteration train loss/error plus periodic test error."""

    iters: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_error: list[float] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)
    evals: list[tuple[int, float, float, float]] = field(default_factory=list)  # iter, loss, error %, elapsed
    diverged: bool = False
    net: Optional[Network] = field(default=None, repr=False, compare=False)

    @property
    def final_test_error(self) -> Optional[float]:
        return self.evals[-1][2] if self.evals else None

    def time_per(self, n: int = 20) -> list[float]:
        """Wall time of every consecutive block of ``n`` iterations."""
        t = [0.0] + self.elapsed
        return [t[i + n] - t[i] for i in range(0, len(self.elapsed) - n + 1, n)]

    def rows(self):
        ev = iter(self.evals)
        nxt = next(ev, None)
        for i, loss, err, el in zip(self.iters, self.train_loss, self.train_error, self.elapsed):
            yield (i, "train", loss, err, el)
            while nxt is not None and nxt[0] == i:
                yield (nxt[0], "test", nxt[1], nxt[2], nxt[3])
                nxt = next(ev, None)
        while nxt is not None:
            yield (nxt[0], "test", nxt[1], nxt[2], nxt[3])
            nxt = next(ev, None)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "split", "loss", "error_pct", "elapsed_s"])
            for i, split, loss, err, el in self.rows():
                w.writerow([i, split, repr(loss), f"{err:.4f}", f"{el:.4f}"])
        return path

    def same_values(self, other: "RunMetrics") -> bool:
        """Equality ignoring wall-clock fields."""
        return (
            self.iters == other.iters
            and self.train_loss == other.train_loss
            and self.train_error == other.train_error
            and [e[:3] for e in self.evals] == [e[:3] for e in other.evals]
            and self.diverged == other.diverged
        )


class SGD:
    """Momentum SGD with L2 weight decay; velocities start at zero."""

    def __init__(self, params: Sequence[Param], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(
    params: Sequence[Param],
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    velocity: Optional[list[np.ndarray]] = None,
) -> list[np.ndarray]:
    """``v <- momentum*v - lr*(g + wd*p); p <- p + v``. Updates ``velocity`` in place and returns it."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {p.name or 'param'}")
    for i, (p, g) in enumerate(zip(params, grads)):
        velocity[i] = momentum * velocity[i] - lr * (g + weight_decay * p.data)
        p.data = p.data + velocity[i]
    return velocity


def evaluate(net: Network, split: DatasetHandle, batch_size: int = 500) -> float:
    """Top-1 error (%) with batchnorm in eval mode."""
    return evaluate_loss(net, split, batch_size)[1]


def evaluate_loss(net: Network, split: DatasetHandle, batch_size: int = 500) -> tuple[float, float]:
    if len(split) == 0:
        raise EmptySplit("cannot evaluate on an empty split")
    total_loss, wrong = 0.0, 0
    for i in range(0, len(split), batch_size):
        x, y = split.images[i : i + batch_size], split.labels[i : i + batch_size]
        loss, pred = ops.softmax_xent(net.forward(x, train=False), y)
        total_loss += float(loss.data) * len(y)
        wrong += int(np.count_nonzero(pred != y))
    return total_loss / len(split), 100.0 * wrong / len(split)


def train(
    net_spec: NetworkSpec | Network,
    train_set: DatasetHandle,
    cfg: TrainConfig,
    test_set: Optional[DatasetHandle] = None,
    log=None,
) -> RunMetrics:
    """Run every LR section in order and return the metric history.

    Initialization, shuffling and augmentation use independent streams derived
    from ``cfg.seed``, so a run is bitwise reproducible. A NaN/Inf loss raises
    :class:`DivergedLoss` carrying the metrics gathered so far.
    """
    net = net_spec if isinstance(net_spec, Network) else Network(net_spec, seed=cfg.seed)
    if train_set.class_count != net.spec.num_classes:
        raise ValueError(f"dataset has {train_set.class_count} classes, network expects {net.spec.num_classes}")
    if len(train_set) == 0:
        raise EmptySplit("training split is empty")
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    opt = SGD(net.params(), cfg.momentum, cfg.weight_decay)
    batches = iter_batches(len(train_set), min(cfg.batch_size, len(train_set)), shuffle_rng)
    m = RunMetrics()
    t0 = time.perf_counter()
    it = 0
    for lr, n_iters in cfg.sections:
        for _ in range(n_iters):
            it += 1
            idx = next(batches)
            x, y = train_set.images[idx], train_set.labels[idx]
            if cfg.augment and x.ndim == 4:
                x = augment_batch(x, aug_rng)
            net.zero_grad()
            # overflow shows up as a non-finite loss below, so numpy's warnings are redundant
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                loss, pred = ops.softmax_xent(net.forward(x, train=True), y)
            value = float(loss.data)
            if not math.isfinite(value):
                m.diverged = True
                raise DivergedLoss(f"loss became {value} at iteration {it}", metrics=m, iteration=it)
            with np.errstate(over="ignore", invalid="ignore"):
                tape.backward(loss)
            try:
                opt.step(lr)
            except NonFiniteGradient as exc:
                m.diverged = True
                raise DivergedLoss(f"{exc} at iteration {it}", metrics=m, iteration=it) from exc
            m.iters.append(it)
            m.train_loss.append(value)
            m.train_error.append(100.0 * float(np.mean(pred != y)))
            m.elapsed.append(time.perf_counter() - t0)
            if test_set is not None and cfg.eval_every and it % cfg.eval_every == 0:
                tl, te = evaluate_loss(net, test_set)
                m.evals.append((it, tl, te, time.perf_counter() - t0))
                if log:
                    log(f"iter {it}: train_loss={value:.4f} test_error={te:.2f}%")
    if test_set is not None and (not m.evals or m.evals[-1][0] != it):
        tl, te = evaluate_loss(net, test_set)
        m.evals.append((it, tl, te, time.perf_counter() - t0))
    m.net = net
    return m


def summary_report(name: str, runs: dict[int, Optional[RunMetrics]], extra: Optional[dict] = None) -> str:
    """Plain-text summary: one line per seed and the mean ± std of the final test error."""
    lines = [f"run: {name}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {json.dumps(v) if not isinstance(v, str) else v}")
    errs = []
    for seed, m in runs.items():
        if m is None or m.diverged:
            lines.append(f"seed {seed}: diverged (-)")
            continue
        err = m.final_test_error
        errs.append(err)
        lines.append(f"seed {seed}: final_train_loss={m.train_loss[-1]:.4f} test_error_pct={err:.2f}")
    if errs:
        lines.append(f"test_error_pct: {np.mean(errs):.2f} ± {np.std(errs):.2f} (n={len(errs)})")
    else:
        lines.append("test_error_pct: - (all runs diverged)")
    return "\n".join(lines) + "\n"
