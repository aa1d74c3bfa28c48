"""Zero-shot and linear-probe accuracy, forgetting deltas, Wise-FT selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nets
from .datagen import TaskDataset
from .nets import ConceptEmbedder, LinearHead, ModelSnapshot

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "run_id",
    "method",
    "ft_dataset",
    "eval_dataset",
    "checkpoint_fraction",
    "a_zs",
    "a_lp",
    "delta_zs",
    "delta_lp",
    "param_dist",
    "feat_dist",
)
DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    method: str
    ft_dataset_id: str
    eval_dataset_id: str
    checkpoint_fraction: float
    a_zs: float
    a_lp: float
    delta_zs: float
    delta_lp: float
    param_dist: float
    feat_dist: float

    def key(self) -> tuple[str, str, float]:
        return (self.run_id, self.eval_dataset_id, self.checkpoint_fraction)


def fmt_float(v: float) -> str:
    return f"{float(v):.17g}"


def write_records(records: Iterable[MetricRecord], path, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in records:
            row = astuple(r)
            w.writerow([v if isinstance(v, str) else fmt_float(v) for v in row])
        fh.flush()


def read_records(path) -> list[MetricRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            vals = [row[c] for c in METRIC_COLUMNS]
            out.append(MetricRecord(*vals[:4], *(float(v) for v in vals[4:])))
    return out


# -- linear probe -------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    head: LinearHead
    iterations: int
    converged: bool
    objective_init: float
    objective_final: float
    degenerate: bool = False


def _probe_objective(x, onehot, w, l2):
    z = x @ w
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    loss = float(np.mean(np.log(s[:, 0]) - np.sum(z * onehot, axis=1))) + 0.5 * l2 * float(np.sum(w * w))
    grad = x.T @ (p - onehot) / x.shape[0] + l2 * w
    return loss, grad


def _probe_grad(x, xt_n, onehot_n, w, l2):
    # gradient only; xt_n = x.T / n and onehot_n = x.T @ onehot / n are loop invariants
    z = x @ w
    e = np.exp(z - z.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return xt_n @ e - onehot_n + l2 * w


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    init_head: LinearHead | np.ndarray,
    max_iter: int = 5000,
    tol: float = 1e-6,
    l2: float | None = None,
) -> ProbeResult:
    """Full-batch multinomial logistic regression started from ``init_head``.

    Minimises mean cross-entropy plus ``l2/2 * ||W||^2`` (``l2`` defaults to
    ``1/n``) by gradient descent with step ``1/L``, where ``L`` bounds the
    Hessian, until the gradient norm drops below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    w0 = init_head.weight if isinstance(init_head, LinearHead) else np.asarray(init_head, dtype=np.float64)
    concepts = init_head.class_concepts if isinstance(init_head, LinearHead) else None
    n, d = x.shape
    k = w0.shape[1]
    if w0.shape[0] != d:
        raise ValueError(f"probe init {w0.shape} does not match features {x.shape}")
    if n < k:
        raise ValueError("need at least as many samples as classes")
    l2 = 1.0 / n if l2 is None else float(l2)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    degenerate = bool(np.all(x == x[0]))
    lmax = float(np.linalg.eigvalsh(x.T @ x / n)[-1])
    step = 1.0 / (0.5 * lmax + l2)
    w = np.array(w0, dtype=np.float64)
    obj0, grad = _probe_objective(x, onehot, w, l2)
    xt_n = np.ascontiguousarray(x.T) / n
    onehot_n = xt_n @ onehot
    it = 0
    converged = float(np.linalg.norm(grad)) < tol
    while it < max_iter and not converged:
        w = w - step * grad
        grad = _probe_grad(x, xt_n, onehot_n, w, l2)
        it += 1
        converged = float(np.linalg.norm(grad)) < tol
    obj, _ = _probe_objective(x, onehot, w, l2)
    if degenerate:
        log.warning("linear_probe: all feature rows identical")
    return ProbeResult(LinearHead(w, concepts), it, converged, obj0, obj, degenerate)


# -- accuracies ------------------------------------------------------------------------


def probe_features(snapshot: ModelSnapshot, x) -> np.ndarray:
    """Unit-normalised embeddings, the representation every head reads."""
    e = nets.embed(snapshot, x)
    return e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)


def accuracy(logits: np.ndarray, labels) -> float:
    return 100.0 * float(np.mean(nets.predict(logits) == np.asarray(labels)))


def zs_head(embedder: ConceptEmbedder, concept_ids) -> LinearHead:
    return LinearHead(embedder.rows(concept_ids).T.copy(), tuple(concept_ids))


def fit_probe(snapshot: ModelSnapshot, dataset: TaskDataset, embedder: ConceptEmbedder, **solver) -> ProbeResult:
    feats = probe_features(snapshot, dataset.train.x)
    return linear_probe(feats, dataset.train.y, zs_head(embedder, dataset.concept_ids), **solver)


def a_lp(
    snapshot: ModelSnapshot,
    dataset: TaskDataset,
    embedder: ConceptEmbedder,
    split: str = "test",
    **solver,
) -> float:
    """Linear-probe accuracy (percent): probe fit on train, scored on ``split``."""
    head = fit_probe(snapshot, dataset, embedder, **solver).head
    s = dataset.split(split)
    return accuracy(nets.zs_logits(probe_features(snapshot, s.x), head), s.y)


def a_zs(snapshot: ModelSnapshot, head: LinearHead, dataset: TaskDataset, split: str = "test") -> float:
    s = dataset.split(split)
    return accuracy(nets.zs_logits(probe_features(snapshot, s.x), head), s.y)


def delta(finetuned_acc: float, pretrained_acc: float) -> float:
    return finetuned_acc - pretrained_acc


def delta_lp(dataset, finetuned, pretrained, embedder, **solver) -> float:
    """Signed LP-accuracy change; negative means concept forgetting."""
    return delta(a_lp(finetuned, dataset, embedder, **solver), a_lp(pretrained, dataset, embedder, **solver))


def delta_zs(dataset, finetuned, pretrained, embedder) -> float:
    head = zs_head(embedder, dataset.concept_ids)
    return delta(a_zs(finetuned, head, dataset), a_zs(pretrained, head, dataset))


def continual_delta(final_acc: float, prior_accs: Sequence[float]) -> float:
    if not len(prior_accs):
        raise ValueError("need at least the pre-trained model among the priors")
    return final_acc - max(prior_accs)


def continual_delta_lp(dataset, final_model, prior_models, embedder, **solver) -> float:
    """LP accuracy of ``final_model`` minus the best LP accuracy among ``prior_models``."""
    if not prior_models:
        raise ValueError("prior_models must start with the pre-trained model")
    final = a_lp(final_model, dataset, embedder, **solver)
    return continual_delta(final, [a_lp(m, dataset, embedder, **solver) for m in prior_models])


def concept_overlap(a: Sequence[int], b: Sequence[int]) -> float:
    """Fraction of ``b``'s concepts also present in ``a``."""
    return len(set(a) & set(b)) / len(set(b))


def others(ft_task: TaskDataset, eval_tasks: Iterable[TaskDataset], max_overlap: float = 0.5) -> list[TaskDataset]:
    """Eval tasks other than ``ft_task`` that share under half of its concepts."""
    return [
        t
        for t in eval_tasks
        if t.task_id != ft_task.task_id and concept_overlap(ft_task.concept_ids, t.concept_ids) < max_overlap
    ]


def mean_delta_on_others(records: Sequence[MetricRecord], ft_dataset_id: str, exclude: Iterable[str] = ()) -> float:
    skip = set(exclude) | {ft_dataset_id}
    vals = [r.delta_lp for r in records if r.eval_dataset_id not in skip]
    if not vals:
        raise ValueError("no records on other datasets")
    return float(np.mean(vals))


def wise_ft_select(
    theta0: ModelSnapshot,
    thetaf: ModelSnapshot,
    val_dataset: TaskDataset,
    embedder: ConceptEmbedder,
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    **solver,
) -> tuple[float, ModelSnapshot, dict[float, float]]:
    """Pick the interpolation weight with the best validation LP accuracy.

    Ties go to the smaller alpha (closer to the fine-tuned model). Returns the
    chosen alpha, the interpolated snapshot and the accuracy per alpha.
    """
    if not alpha_grid or any(not 0.0 <= a <= 1.0 for a in alpha_grid):
        raise ValueError("alpha grid must be a non-empty subset of [0, 1]")
    scores: dict[float, float] = {}
    for a in alpha_grid:
        scores[a] = a_lp(nets.interpolate(theta0, thetaf, a), val_dataset, embedder, split="val", **solver)
    best = min(scores, key=lambda a: (-scores[a], a))
    return best, nets.interpolate(theta0, thetaf, best), scores
