"""Training objective, SSC metrics, and a toy SGD trainer.

The total loss is voxel cross-entropy plus the semantic and geometric
scene-class affinity losses of MonoScene, weighted 1:1:1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .block import SceneContext, SceneModel
from .config import ModelConfig
from .errors import LabelOutOfRange, ShapeMismatch, ValidationError
from .grid import VoxelGrid
from .numcore import DiffArray, Tape


def _check_labels(labels, n_rows, n_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != n_rows:
        raise ShapeMismatch(f"{labels.size} labels for {n_rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes - 1}]")
    return labels


def cross_entropy(logits, labels) -> DiffArray:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    logits = nc._lift(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = nc.log_softmax(logits, axis=1)
    picked = nc.index(logp, (np.arange(labels.size), labels))
    return nc.mul(nc.mean(picked), -1.0)


def _ratio_terms(p, target):
    """(-log precision, -log recall, -log specificity) on soft mass ``p``
    against the boolean ``target``; ``None`` where the ratio is undefined."""
    t = target.astype(np.float64)
    terms = [None, None, None]
    nominator = nc.sum(nc.mul(p, t))
    if t.sum() > 0:
        terms[0] = nc.mul(nc.log(nc.div(nominator, nc.sum(p))), -1.0)
        terms[1] = nc.mul(nc.log(nc.mul(nominator, 1.0 / t.sum())), -1.0)
    neg = 1.0 - t
    if neg.sum() > 0:
        spec = nc.mul(nc.sum(nc.mul(nc.sub(1.0, p), neg)), 1.0 / neg.sum())
        terms[2] = nc.mul(nc.log(spec), -1.0)
    return terms


def scal_terms(probs, labels, mode: str = "semantic") -> list[tuple[int, list]]:
    """Per counted class, the three ratio terms (see :func:`scal_loss`)."""
    probs = nc._lift(probs)
    if probs.ndim != 2:
        raise ShapeMismatch(f"probs must be (V, K), got {probs.shape}")
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    if mode == "geometric":
        empty = nc.index(probs, (slice(None), 0))
        return [(1, _ratio_terms(nc.sub(1.0, empty), labels != 0))]
    if mode != "semantic":
        raise ValidationError(f"unknown scal mode {mode!r}")
    out = []
    for c in range(probs.shape[1]):
        target = labels == c
        if not target.any():
            continue
        out.append((c, _ratio_terms(nc.index(probs, (slice(None), c)), target)))
    return out


def scal_loss(probs, labels, mode: str = "semantic") -> DiffArray:
    """Scene-class affinity loss on soft class probabilities.

    ``semantic``: for every class present in ``labels``, sum the defined
    terms among -log precision, -log recall and -log specificity, then average
    over those classes.  ``geometric``: the same three terms once, for
    occupied (any class > 0) against empty, using ``1 - probs[:, 0]`` as the
    occupied mass.
    """
    per_class = scal_terms(probs, labels, mode)
    if not per_class:
        return DiffArray(0.0)
    total = None
    for _, terms in per_class:
        for term in terms:
            if term is not None:
                total = term if total is None else nc.add(total, term)
    if total is None:
        return DiffArray(0.0)
    return nc.mul(total, 1.0 / len(per_class))


@dataclass
class LossReport:
    l_ce: float
    l_scal_sem: float
    l_scal_geo: float

    @property
    def l_total(self) -> float:
        return self.l_ce + self.l_scal_sem + self.l_scal_geo


def total_loss(logits, labels) -> tuple[DiffArray, LossReport]:
    probs = nc.softmax(logits, axis=1)
    ce = cross_entropy(logits, labels)
    sem = scal_loss(probs, labels, "semantic")
    geo = scal_loss(probs, labels, "geometric")
    total = nc.add(nc.add(ce, sem), geo)
    report = LossReport(float(ce.value), float(sem.value), float(geo.value))
    return total, report


@dataclass
class SscMetrics:
    sc_iou: float
    per_class_iou: list
    miou: float
    accuracy: float

    def lines(self) -> list[str]:
        out = [f"sc_iou={self.sc_iou:.6f}", f"miou={self.miou:.6f}", f"accuracy={self.accuracy:.6f}"]
        out += [f"iou_class{c}={v:.6f}" for c, v in enumerate(self.per_class_iou, 1)]
        return out


def ssc_metrics(pred, labels, num_classes: int) -> SscMetrics:
    """SC-IoU (occupied vs empty) and IoU per semantic class 1..N.

    A class absent from both prediction and ground truth has undefined IoU
    (NaN) and is left out of the mean.
    """
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)

    def iou(a, b):
        union = np.count_nonzero(a | b)
        return np.count_nonzero(a & b) / union if union else float("nan")

    sc = iou(pred > 0, labels > 0)
    per = [iou(pred == c, labels == c) for c in range(1, num_classes + 1)]
    finite = [v for v in per if not np.isnan(v)]
    miou = float(np.mean(finite)) if finite else float("nan")
    return SscMetrics(0.0 if np.isnan(sc) else float(sc), per, miou,
                      float(np.mean(pred == labels)))


class SGD:
    """Plain SGD with heavy-ball momentum and a constant learning rate."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


@dataclass
class TraceRow:
    step: int
    tau: float
    l_ce: float
    l_scal_sem: float
    l_scal_geo: float
    l_total: float
    miou: float
    sc_iou: float
    accuracy: float
    shifts: str

    HEADER = "step,tau,l_ce,l_scal_sem,l_scal_geo,l_total,miou,sc_iou,accuracy,shifts"

    def csv(self) -> str:
        return (f"{self.step},{self.tau:.6g},{self.l_ce:.10g},{self.l_scal_sem:.10g},"
                f"{self.l_scal_geo:.10g},{self.l_total:.10g},{self.miou:.6f},{self.sc_iou:.6f},"
                f"{self.accuracy:.6f},{self.shifts}")


@dataclass
class TrainResult:
    model: SceneModel
    trace: list = field(default_factory=list)
    metrics: SscMetrics | None = None
    seconds: float = 0.0


def evaluate(model: SceneModel, scene: VoxelGrid, context: SceneContext | None = None) -> SscMetrics:
    """Deterministic evaluation: Gumbel noise frozen at zero."""
    logits = model.forward(scene, t=0, rng=None, scene=context)
    return ssc_metrics(np.argmax(logits.value, axis=1), scene.labels, scene.num_classes)


def train_toy(scene: VoxelGrid, cfg: ModelConfig, steps: int, seed: int = 0,
              model: SceneModel | None = None, callback=None) -> TrainResult:
    """Overfit ``model`` (fresh if not given) to one labelled scene.

    Step ``t`` doubles as the annealing epoch; Gumbel noise comes from one
    generator seeded with ``seed``.  Each trace row records the loss and the
    training-mode metrics of that step's forward pass, before the update.
    """
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    start = time.perf_counter()
    model = model or SceneModel(cfg, scene.channels, scene.num_classes, seed=seed)
    context = SceneContext.build(scene, cfg)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum)
    rng = np.random.default_rng(seed)
    schedule = model.schedule()
    result = TrainResult(model)
    for t in range(steps):
        opt.zero_grad()
        info: dict = {}
        with Tape() as tape:
            logits = model.forward(scene, t=t, rng=rng, scene=context, trace=info)
            loss, report = total_loss(logits, scene.labels)
        tape.backward(loss)
        m = ssc_metrics(np.argmax(logits.value, axis=1), scene.labels, scene.num_classes)
        row = TraceRow(t, schedule.tau(t), report.l_ce, report.l_scal_sem, report.l_scal_geo,
                       report.l_total, m.miou, m.sc_iou, m.accuracy,
                       "|".join(str(s) for s in info.get("shifts", [])))
        result.trace.append(row)
        if callback is not None:
            callback(row)
        if not np.isfinite(report.l_total):
            break
        opt.step()
    result.metrics = evaluate(model, scene, context)
    result.seconds = time.perf_counter() - start
    return result
