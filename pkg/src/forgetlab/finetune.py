"""End-to-end fine-tuning methods, their losses and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tape, Tensor
from .datagen import TaskDataset, stream
from .evaluate import linear_probe, probe_features, zs_head
from .nets import ConceptEmbedder, LinearHead, ModelSnapshot
from .optim import AdamW, warmup_cosine
from .pretrain import infonce_loss

METHODS = (
    "zs_init_ce",
    "lp_init_ce",
    "zs_init_l2sp",
    "lp_init_l2sp",
    "zs_init_ldifs",
    "lp_init_ldifs",
    "ldifs_last_layer",
    "flyp",
    "flyp_ce",
    "lwf",
    "lfl",
    "joint",
)
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 10.0, 100.0)
LP_INIT = {"lp_init_ce", "lp_init_l2sp", "lp_init_ldifs", "ldifs_last_layer"}
L2SP = {"zs_init_l2sp", "lp_init_l2sp"}
LDIFS = {"zs_init_ldifs", "lp_init_ldifs", "ldifs_last_layer"}
FLYP = {"flyp", "flyp_ce"}


class FinetuneError(RuntimeError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    method: str = "zs_init_ce"
    lambda_l2sp: float = 0.01
    lambda_ldifs: float = 10.0
    lambda_distill: float = 1.0
    lwf_temperature: float = 2.0
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    warmup_steps: int = 50
    checkpoint_fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    probe_max_iter: int = 5000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "checkpoint_fractions", tuple(float(f) for f in self.checkpoint_fractions))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for name in ("lambda_l2sp", "lambda_ldifs", "lambda_distill", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("epochs", "batch_size", "learning_rate", "lwf_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.probe_max_iter < 0:
            raise ValueError("warmup_steps and probe_max_iter must be non-negative")
        fr = self.checkpoint_fractions
        if not fr or any(not 0.0 <= f <= 1.0 for f in fr) or list(fr) != sorted(set(fr)):
            raise ValueError("checkpoint_fractions must be sorted, unique and within [0, 1]")

    @property
    def head_mode(self) -> str:
        return "lp" if self.method in LP_INIT else "zs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_fractions"] = list(self.checkpoint_fractions)
        return d

    def with_(self, **kw) -> "FinetuneConfig":
        return replace(self, **kw)


@dataclass
class FinetuneTrajectory:
    config: FinetuneConfig
    initial: ModelSnapshot
    checkpoints: list[tuple[float, ModelSnapshot]]
    losses: list[dict]
    final: ModelSnapshot
    embedder: ConceptEmbedder
    task_id: str = ""
    extra: dict = field(default_factory=dict)

    def checkpoint(self, fraction: float) -> ModelSnapshot:
        for f, s in self.checkpoints:
            if f == fraction:
                return s
        raise KeyError(fraction)


# -- heads -------------------------------------------------------------------------


def init_head(
    encoder: ModelSnapshot,
    embedder: ConceptEmbedder,
    task: TaskDataset,
    mode: str,
    probe_max_iter: int = 5000,
) -> LinearHead:
    """Zero-shot head from the prototypes, or a linear probe started from it."""
    zs = zs_head(embedder, task.concept_ids)
    if mode == "zs":
        return zs
    if mode != "lp":
        raise ValueError(f"unknown head mode {mode!r}")
    feats = probe_features(encoder, task.train.x)
    return linear_probe(feats, task.train.y, zs, max_iter=probe_max_iter).head


# -- losses ------------------------------------------------------------------------


def head_logits(embedding: Tensor, head_weight: Tensor) -> Tensor:
    return ad.matmul(ad.l2_normalize(embedding), head_weight)


def loss_ce(embedding: Tensor, head_weight: Tensor, labels) -> Tensor:
    return ad.softmax_cross_entropy(head_logits(embedding, head_weight), labels)


def l2sp_penalty(current: Mapping[str, Tensor], origin: ModelSnapshot) -> Tensor:
    """Squared distance of the encoder parameters in ``current`` to ``origin``."""
    terms = [
        ad.l2_norm_sq(ad.sub(t, origin.params[k]))
        for k, t in current.items()
        if k.startswith(nets.ENCODER_PREFIX)
    ]
    if len(terms) != len(origin.encoder_params()):
        raise nets.SchemaError("current parameters do not cover the origin encoder")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss_l2sp(ce: Tensor, current: Mapping[str, Tensor], origin: ModelSnapshot, lam: float) -> Tensor:
    if lam == 0:
        return ce
    return ad.add(ce, ad.scale(l2sp_penalty(current, origin), lam))


def feature_distance_t(current_taps: Sequence[Tensor], origin_features: np.ndarray, last_only: bool = False) -> Tensor:
    taps = list(current_taps)[-1:] if last_only else list(current_taps)
    phi = nets.concat_features(taps)
    if phi.shape != origin_features.shape:
        raise nets.SchemaError(f"feature shapes differ: {phi.shape} vs {origin_features.shape}")
    return ad.scale(ad.l2_norm_sq(ad.sub(phi, origin_features)), 1.0 / phi.shape[0])


def feature_distance(current: ModelSnapshot, origin: ModelSnapshot, x, last_only: bool = False) -> float:
    """Mean squared distance between concatenated tap features of two encoders."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("feature_distance needs a non-empty batch")
    a = nets.features_concat(current, x, last_only).concatenated
    b = nets.features_concat(origin, x, last_only).concatenated
    d = a - b
    return float(np.sum(d * d) / x.shape[0])


def loss_ldifs(ce: Tensor, distance: Tensor, lam: float) -> Tensor:
    if lam == 0:
        return ce
    return ad.add(ce, ad.scale(distance, lam))


def loss_lwf(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """``T^2`` times the cross-entropy from softened teacher to softened student."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits) / temperature
    if t.shape != student_logits.shape:
        raise nets.SchemaError(f"lwf: student {student_logits.shape} vs teacher {t.shape}")
    q = np.exp(t - t.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    return ad.scale(ad.soft_cross_entropy(ad.scale(student_logits, 1.0 / temperature), q), temperature**2)


def loss_lfl(student_embedding: Tensor, teacher_embedding) -> Tensor:
    """Mean squared L2 distance between raw final embeddings."""
    t = np.asarray(teacher_embedding.data if isinstance(teacher_embedding, Tensor) else teacher_embedding)
    if t.shape != student_embedding.shape:
        raise nets.SchemaError(f"lfl: student {student_embedding.shape} vs teacher {t.shape}")
    return ad.scale(ad.l2_norm_sq(ad.sub(student_embedding, t)), 1.0 / t.shape[0])


def loss_flyp(embeddings: Tensor, rows: Tensor, labels, temperature: float, mode: str = "contrastive") -> Tensor:
    """Contrastive (FLYP) or cosine-logit cross-entropy (FLYP-CE) against trainable prototype rows."""
    if mode == "contrastive":
        return infonce_loss(embeddings, rows, labels, temperature)
    if mode == "ce":
        return ad.softmax_cross_entropy(ad.scale(ad.cosine_similarity(embeddings, rows), 1.0 / temperature), labels)
    raise ValueError(f"unknown flyp mode {mode!r}")


# -- training ------------------------------------------------------------------------


def checkpoint_steps(fractions: Sequence[float], total_steps: int) -> dict[int, float]:
    return {math.ceil(f * total_steps): f for f in fractions}


def _with_head(encoder: ModelSnapshot, head_weight, concepts, extra=None) -> dict[str, np.ndarray]:
    params = dict(encoder.encoder_params())
    params[nets.HEAD_KEY] = head_weight
    if extra:
        params.update(extra)
    return params


def finetune(
    start: ModelSnapshot,
    embedder: ConceptEmbedder,
    task: TaskDataset,
    config: FinetuneConfig,
    head: LinearHead | None = None,
    run_id: str = "run",
) -> FinetuneTrajectory:
    """Fine-tune ``start`` on ``task`` with ``config.method``.

    ``start`` is also the regularisation origin and the distillation teacher.
    For joint training pass the merged dataset as ``task``.
    """
    cfg = config
    spec = start.spec
    method = cfg.method
    origin = start.with_updates(params=start.encoder_params())
    concepts = tuple(task.concept_ids)
    if head is None:
        head = init_head(start, embedder, task, cfg.head_mode, cfg.probe_max_iter)
    params = {k: np.array(v) for k, v in _with_head(start, head.weight, concepts).items()}
    trainable = list(params)
    is_flyp = method in FLYP
    prov = {"run_id": run_id, "method": method, "task": task.task_id}

    def snapshot(fraction: float) -> ModelSnapshot:
        p = dict(params)
        if is_flyp:
            table = np.array(embedder.table)
            cols = p[nets.HEAD_KEY]
            table[list(concepts)] = (cols / np.maximum(np.linalg.norm(cols, axis=0, keepdims=True), 1e-12)).T
            p[nets.EMBEDDER_KEY] = table
        return ModelSnapshot(spec, p, fraction, prov, concepts)

    x_all, y_all = task.train.x, task.train.y
    n = len(y_all)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    ckpt_at = checkpoint_steps(cfg.checkpoint_fractions, total)
    initial = snapshot(0.0)
    checkpoints: list[tuple[float, ModelSnapshot]] = []
    if 0 in ckpt_at:
        checkpoints.append((ckpt_at[0], initial))

    origin_tensors = {k: Tensor(v, _copy=False) for k, v in origin.params.items()}
    table_all = embedder.table
    opt = AdamW(weight_decay=cfg.weight_decay)
    losses: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "finetune", "shuffle", epoch).permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = Tensor(x_all[idx], _copy=False)
            yb = y_all[idx]
            tensors = {k: Tensor(params[k], requires_grad=True) for k in trainable}
            try:
                with Tape() as tape:
                    emb, taps = nets.forward(spec, tensors, xb)
                    if is_flyp:
                        mode = "contrastive" if method == "flyp" else "ce"
                        main = loss_flyp(emb, ad.transpose(tensors[nets.HEAD_KEY]), yb, embedder.temperature, mode)
                    else:
                        main = loss_ce(emb, tensors[nets.HEAD_KEY], yb)
                    reg = _regulariser(method, cfg, tensors, emb, taps, origin, origin_tensors, xb, table_all, embedder)
                    total_loss = main if reg is None else ad.add(main, reg)
                ad.backward(tape, total_loss)
            except ad.NumericError as exc:
                raise FinetuneError(f"non-finite value at step {step}: {exc}") from exc
            lr = warmup_cosine(step, total, cfg.learning_rate, cfg.warmup_steps)
            opt.step(params, {k: t.grad for k, t in tensors.items()}, lr)
            step += 1
            losses.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_total": total_loss.item(),
                    "loss_ce": main.item(),
                    "loss_reg": 0.0 if reg is None else reg.item(),
                }
            )
            if step in ckpt_at:
                checkpoints.append((ckpt_at[step], snapshot(ckpt_at[step])))
    final = snapshot(1.0)
    final_embedder = ConceptEmbedder(final.params[nets.EMBEDDER_KEY], embedder.temperature) if is_flyp else embedder
    return FinetuneTrajectory(cfg, initial, checkpoints, losses, final, final_embedder, task.task_id)


def _regulariser(method, cfg, tensors, emb, taps, origin, origin_tensors, xb, table_all, embedder):
    if method in L2SP:
        if cfg.lambda_l2sp == 0:
            return None
        return ad.scale(l2sp_penalty(tensors, origin), cfg.lambda_l2sp)
    if method in LDIFS:
        if cfg.lambda_ldifs == 0:
            return None
        last_only = method == "ldifs_last_layer"
        _, origin_taps = nets.forward(origin.spec, origin_tensors, xb)
        phi0 = nets.concat_features(origin_taps[-1:] if last_only else origin_taps).data
        return ad.scale(feature_distance_t(taps, phi0, last_only), cfg.lambda_ldifs)
    if method == "lwf":
        if cfg.lambda_distill == 0:
            return None
        teacher_emb, _ = nets.forward(origin.spec, origin_tensors, xb)
        vocab = Tensor(table_all.T, _copy=False)
        scale = 1.0 / embedder.temperature
        teacher = ad.scale(head_logits(teacher_emb, vocab), scale).data
        student = ad.scale(head_logits(emb, vocab), scale)
        return ad.scale(loss_lwf(student, teacher, cfg.lwf_temperature), cfg.lambda_distill)
    if method == "lfl":
        if cfg.lambda_distill == 0:
            return None
        teacher_emb, _ = nets.forward(origin.spec, origin_tensors, xb)
        return ad.scale(loss_lfl(emb, teacher_emb.data), cfg.lambda_distill)
    return None


def head_accuracy(snapshot: ModelSnapshot, task: TaskDataset, split: str = "val") -> float:
    """Accuracy of the snapshot's own fine-tuned head on ``split`` (percent)."""
    s = task.split(split)
    w = snapshot.params[nets.HEAD_KEY]
    if snapshot.provenance.get("method") in FLYP:
        w = w / np.maximum(np.linalg.norm(w, axis=0, keepdims=True), 1e-12)
    logits = probe_features(snapshot, s.x) @ w
    return 100.0 * float(np.mean(nets.predict(logits) == s.y))


def _lambda_field(method: str) -> str:
    if method in L2SP:
        return "lambda_l2sp"
    if method in LDIFS:
        return "lambda_ldifs"
    if method in ("lwf", "lfl"):
        return "lambda_distill"
    raise ValueError(f"method {method!r} has no regulariser weight")


def _grid_runs(start, embedder, task, config, grid, head, fractions, run_id=None):
    name = _lambda_field(config.method)
    if not len(grid):
        raise ValueError("empty lambda grid")
    if head is None:
        head = init_head(start, embedder, task, config.head_mode, config.probe_max_iter)
    runs = {}
    for lam in grid:
        cfg = config.with_(**{name: float(lam)}, checkpoint_fractions=fractions)
        runs[float(lam)] = finetune(start, embedder, task, cfg, head=head, run_id=run_id or f"grid-{lam}")
    scores = {lam: head_accuracy(t.final, task, "val") for lam, t in runs.items()}
    best = max(scores, key=lambda lam: (scores[lam], lam))
    return best, scores, runs


def select_lambda(
    start: ModelSnapshot,
    embedder: ConceptEmbedder,
    task: TaskDataset,
    config: FinetuneConfig,
    grid: Sequence[float] = LAMBDA_GRID,
    head: LinearHead | None = None,
) -> tuple[float, dict[float, float]]:
    """Grid-search the method's regulariser weight on the validation split.

    Ties go to the larger weight.
    """
    best, scores, _ = _grid_runs(start, embedder, task, config, grid, head, (1.0,))
    return best, scores


def finetune_selected(
    start: ModelSnapshot,
    embedder: ConceptEmbedder,
    task: TaskDataset,
    config: FinetuneConfig,
    grid: Sequence[float] = LAMBDA_GRID,
    run_id: str = "run",
) -> FinetuneTrajectory:
    """``finetune`` with the regulariser weight chosen by ``select_lambda``'s rule.

    The winning trajectory is returned as trained during the search, which is
    bit-identical to a fresh run at that weight. ``extra`` records the choice.
    """
    best, scores, runs = _grid_runs(start, embedder, task, config, grid, None, config.checkpoint_fractions, run_id)
    traj = runs[best]
    traj.extra.update(lambda_field=_lambda_field(config.method), lambda_selected=best, lambda_scores=scores)
    return traj
