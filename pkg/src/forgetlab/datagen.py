"""Deterministic synthetic concept universe and task builder."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

MIN_ANGLE_DEG = 15.0


def stream(seed: int, *names) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *names)``; same key, same draws."""
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for n in names:
        h.update(b"\x00" + str(n).encode())
    key = np.frombuffer(h.digest(), dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ConceptUniverse:
    seed: int
    concept_means: np.ndarray
    within_concept_scale: float = 0.15

    @property
    def num_concepts(self) -> int:
        return self.concept_means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.concept_means.shape[1]


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    concept_ids: tuple[int, ...]
    transform: np.ndarray
    shift: np.ndarray
    noise_sigma: float
    train: Split
    val: Split
    test: Split
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.concept_ids)

    @property
    def n(self) -> int:
        return len(self.train)

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def make_universe(
    seed: int,
    num_concepts: int = 40,
    input_dim: int = 32,
    within_concept_scale: float = 0.15,
    max_tries: int = 100_000,
) -> ConceptUniverse:
    """Unit-norm concept means with every pairwise angle at least 15 degrees."""
    if num_concepts < 4 or input_dim < 4:
        raise ValueError("need at least 4 concepts and 4 input dims")
    rng = stream(seed, "universe", "means")
    max_cos = np.cos(np.deg2rad(MIN_ANGLE_DEG))
    means: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(input_dim)
        v /= np.linalg.norm(v)
        if all(float(v @ m) <= max_cos for m in means):
            means.append(v)
            if len(means) == num_concepts:
                break
    else:
        raise RuntimeError(f"could not place {num_concepts} separated concepts in {input_dim} dims")
    return ConceptUniverse(int(seed), np.array(means), float(within_concept_scale))


def style_transform(style_seed: int | None, input_dim: int, angle: float, shift_scale: float):
    """Orthogonal transform exp(angle * S) for a random unit skew matrix S, plus a shift."""
    if style_seed is None or (angle == 0.0 and shift_scale == 0.0):
        return np.eye(input_dim), np.zeros(input_dim)
    rng = stream(style_seed, "style")
    a = rng.standard_normal((input_dim, input_dim))
    s = a - a.T
    s /= np.linalg.norm(s, 2)
    q = expm(angle * s)
    shift = rng.standard_normal(input_dim) * (shift_scale / np.sqrt(input_dim))
    return q, shift


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _sample(universe, concept_ids, labels, transform, shift, noise_sigma, rng) -> np.ndarray:
    d = universe.input_dim
    means = universe.concept_means[np.asarray(concept_ids)[labels]]
    raw = means + universe.within_concept_scale * rng.standard_normal((len(labels), d))
    return raw @ transform.T + shift + noise_sigma * rng.standard_normal((len(labels), d))


def make_task(
    universe: ConceptUniverse,
    concept_ids: Sequence[int],
    style_seed: int | None,
    noise_sigma: float,
    n_train: int = 800,
    n_val: int = 200,
    n_test: int = 400,
    task_id: str | None = None,
    style_angle: float = 0.5,
    shift_scale: float = 0.5,
    seed: int | None = None,
) -> TaskDataset:
    concept_ids = tuple(int(c) for c in concept_ids)
    k = len(concept_ids)
    if k < 2:
        raise ValueError("a task needs at least 2 concepts")
    bad = [c for c in concept_ids if not 0 <= c < universe.num_concepts]
    if bad:
        raise ValueError(f"unknown concept ids {bad}")
    if len(set(concept_ids)) != k:
        raise ValueError("duplicate concept ids")
    if min(n_train, n_val, n_test) < k:
        raise ValueError("each split needs at least one sample per class")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    task_id = task_id or f"task-{style_seed}-{'_'.join(map(str, concept_ids))}"
    seed = seed if seed is not None else (style_seed if style_seed is not None else universe.seed)
    transform, shift = style_transform(style_seed, universe.input_dim, style_angle, shift_scale)
    splits = {}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        labels = _balanced_labels(stream(seed, task_id, name, "labels"), n, k)
        x = _sample(universe, concept_ids, labels, transform, shift, noise_sigma, stream(seed, task_id, name, "x"))
        splits[name] = Split(x, labels)
    return TaskDataset(task_id, concept_ids, transform, shift, float(noise_sigma), seed=int(seed), **splits)


def make_pretrain_corpus(universe: ConceptUniverse, n_per_concept: int, seed: int) -> TaskDataset:
    """Identity-style samples of every universe concept; labels are concept ids."""
    if n_per_concept < 2:
        raise ValueError("n_per_concept must be at least 2")
    m = universe.num_concepts
    n_eval = max(1, n_per_concept // 5)
    return make_task(
        universe,
        range(m),
        style_seed=None,
        noise_sigma=0.0,
        n_train=n_per_concept * m,
        n_val=n_eval * m,
        n_test=n_eval * m,
        task_id="pretrain",
        seed=seed,
    )


def merge_tasks(tasks: Sequence[TaskDataset], task_id: str | None = None) -> TaskDataset:
    """Union of several tasks' splits, relabelled over the union of their concepts."""
    concepts: list[int] = []
    for t in tasks:
        concepts.extend(c for c in t.concept_ids if c not in concepts)
    pos = {c: i for i, c in enumerate(concepts)}

    def join(name):
        xs, ys = [], []
        for t in tasks:
            s = t.split(name)
            xs.append(s.x)
            ys.append(np.array([pos[t.concept_ids[j]] for j in s.y], dtype=np.int64))
        return Split(np.concatenate(xs), np.concatenate(ys))

    first = tasks[0]
    return TaskDataset(
        task_id or "+".join(t.task_id for t in tasks),
        tuple(concepts),
        first.transform,
        first.shift,
        first.noise_sigma,
        join("train"),
        join("val"),
        join("test"),
        first.seed,
    )


def dump_csv(task: TaskDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = task.train.x.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"x_{i}" for i in range(d)])
        for name in ("train", "val", "test"):
            s = task.split(name)
            for row, label in zip(s.x, s.y):
                w.writerow([name, int(label)] + [f"{v:.17g}" for v in row])
