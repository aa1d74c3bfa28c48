"""Contrastive two-tower pre-training of the foundation encoder and concept prototypes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tape, Tensor
from .datagen import ConceptUniverse, make_pretrain_corpus, make_task, stream
from .nets import ConceptEmbedder, EncoderSpec, ModelSnapshot
from .optim import SGD, AdamW, warmup_cosine

log = logging.getLogger(__name__)

ZS_GATE = 85.0


class PretrainError(RuntimeError):
    pass


def infonce_loss(embeddings: Tensor, table: Tensor, labels, temperature: float) -> Tensor:
    """Symmetric contrastive loss between samples and concept prototypes.

    Sample-to-concept is a softmax over every row of ``table``; concept-to-sample
    runs over the concepts present in the batch, with the probability mass
    spread evenly over that concept's samples.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0 or y.max() >= table.shape[0]:
        raise ValueError(f"labels outside table of {table.shape[0]} rows")
    logits = ad.scale(ad.cosine_similarity(embeddings, table), 1.0 / temperature)
    to_concept = ad.softmax_cross_entropy(logits, y)
    present = np.unique(y)
    per_concept = ad.take_rows(ad.transpose(logits), present)
    target = (present[:, None] == y[None, :]).astype(np.float64)
    target /= target.sum(axis=1, keepdims=True)
    to_sample = ad.soft_cross_entropy(per_concept, target)
    return ad.scale(ad.add(to_concept, to_sample), 0.5)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    temperature: float = 0.07
    seed: int = 0
    n_per_concept: int = 50
    optimizer: str = "adamw"
    gate_noise_sigma: float = 0.05
    max_reseeds: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FoundationModel:
    encoder: ModelSnapshot
    embedder: ConceptEmbedder
    spec: EncoderSpec
    pretrain_config: dict = field(default_factory=dict)

    def zs_head(self, concept_ids) -> nets.LinearHead:
        return nets.LinearHead(self.embedder.rows(concept_ids).T.copy(), tuple(concept_ids))

    def save(self, path) -> None:
        path = Path(path)
        params = dict(self.encoder.params)
        params[nets.EMBEDDER_KEY] = self.embedder.table
        nets.save_snapshot(self.encoder.with_updates(params=params), path)
        sidecar = {"temperature": self.embedder.temperature, "pretrain_config": self.pretrain_config}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FoundationModel":
        path = Path(path)
        snap = nets.load_snapshot(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        params = dict(snap.params)
        table = params.pop(nets.EMBEDDER_KEY)
        encoder = snap.with_updates(params=params)
        return cls(encoder, ConceptEmbedder(table, sidecar["temperature"]), snap.spec, sidecar["pretrain_config"])


def zs_accuracy(foundation: FoundationModel, task) -> float:
    head = foundation.zs_head(task.concept_ids)
    emb = nets.embed(foundation.encoder, task.test.x)
    pred = nets.predict(nets.zs_logits(emb, head))
    return 100.0 * float(np.mean(pred == task.test.y))


def gate_task(universe: ConceptUniverse, seed: int, noise_sigma: float):
    """Fresh identity-style 8-concept task used for the zero-shot sanity gate."""
    ids = np.sort(stream(seed, "gate", "concepts").choice(universe.num_concepts, size=8, replace=False))
    return make_task(universe, ids, style_seed=None, noise_sigma=noise_sigma, task_id="zs-gate", seed=seed + 7919)


def _train_once(universe: ConceptUniverse, spec: EncoderSpec, cfg: PretrainConfig, seed: int) -> FoundationModel:
    corpus = make_pretrain_corpus(universe, cfg.n_per_concept, seed)
    init = nets.init_snapshot(spec, stream(seed, "pretrain", "init"), run_id=f"pretrain-{seed}")
    table0 = stream(seed, "pretrain", "table").standard_normal((universe.num_concepts, spec.embed_dim))
    params = dict(init.params)
    params[nets.EMBEDDER_KEY] = table0 / np.linalg.norm(table0, axis=1, keepdims=True)
    params = {k: np.array(v) for k, v in params.items()}
    opt = AdamW() if cfg.optimizer == "adamw" else SGD()
    x_all, y_all = corpus.train.x, corpus.train.y
    n = len(y_all)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = stream(seed, "pretrain", "shuffle", epoch).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Tape() as tape:
                emb, _ = nets.forward(spec, tensors, Tensor(x_all[idx], _copy=False))
                loss = infonce_loss(emb, tensors[nets.EMBEDDER_KEY], y_all[idx], cfg.temperature)
            ad.backward(tape, loss)
            lr = warmup_cosine(step, total, cfg.learning_rate)
            opt.step(params, {k: t.grad for k, t in tensors.items()}, lr)
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d loss %.4f", epoch, epoch_losses[-1])
    table = params.pop(nets.EMBEDDER_KEY)
    table = table / np.linalg.norm(table, axis=1, keepdims=True)
    encoder = ModelSnapshot(spec, params, 0.0, {"run_id": f"pretrain-{seed}", "method": "pretrain"})
    record = cfg.to_dict()
    record.update(seed_used=seed, epoch_losses=epoch_losses)
    return FoundationModel(encoder, ConceptEmbedder(table, cfg.temperature), spec, record)


def pretrain(universe: ConceptUniverse, spec: EncoderSpec, config: PretrainConfig | None = None) -> FoundationModel:
    cfg = config or PretrainConfig()
    if spec.input_dim != universe.input_dim:
        raise ValueError("encoder input_dim does not match the universe")
    for attempt in range(cfg.max_reseeds + 1):
        seed = cfg.seed + attempt
        model = _train_once(universe, spec, cfg, seed)
        if cfg.epochs == 0:
            return model
        acc = zs_accuracy(model, gate_task(universe, seed, cfg.gate_noise_sigma))
        model.pretrain_config["gate_zs_accuracy"] = acc
        if acc >= ZS_GATE:
            return model
        log.warning("pretrain seed %d: zero-shot gate %.2f%% < %.0f%%, reseeding", seed, acc, ZS_GATE)
    raise PretrainError(f"zero-shot sanity gate failed after {cfg.max_reseeds} reseeds")
