"""Tappable feed-forward encoder, prototype embedder, linear head and snapshots."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENCODER_PREFIX = "encoder."
HEAD_KEY = "head.weight"
EMBEDDER_KEY = "embedder.table"
_MAGIC = b"FGLSNAP1"


class SchemaError(ValueError):
    """Snapshots, specs or inputs that do not line up."""


def default_taps(n_hidden: int) -> tuple[int, ...]:
    """Up to four evenly spaced hidden layers plus the embedding layer."""
    if n_hidden <= 4:
        hidden = list(range(n_hidden))
    else:
        hidden = sorted({int(round(v)) for v in np.linspace(0, n_hidden - 1, 4)})
    return tuple(hidden) + (n_hidden,)


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64, 64, 64)
    embed_dim: int = 32
    activation: str = "relu"
    tap_layers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in ("relu", "tanh"):
            raise SchemaError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.embed_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise SchemaError("all layer widths must be positive")
        taps = default_taps(len(self.hidden_widths)) if self.tap_layers is None else tuple(self.tap_layers)
        if not taps:
            raise SchemaError("tap_layers must be non-empty")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise SchemaError(f"tap_layers must be strictly increasing, got {taps}")
        if taps[0] < 0 or taps[-1] >= self.num_layers:
            raise SchemaError(f"tap_layers {taps} out of range for {self.num_layers} layers")
        object.__setattr__(self, "tap_layers", taps)

    @property
    def num_layers(self) -> int:
        # hidden layers plus the linear embedding projection
        return len(self.hidden_widths) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.embed_dim)

    def layer_width(self, layer: int) -> int:
        return self.widths[layer + 1]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        w = self.widths
        for i in range(self.num_layers):
            out.append((f"{ENCODER_PREFIX}{i}.weight", (w[i], w[i + 1])))
            out.append((f"{ENCODER_PREFIX}{i}.bias", (w[i + 1],)))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "embed_dim": self.embed_dim,
            "activation": self.activation,
            "tap_layers": list(self.tap_layers),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            embed_dim=int(d["embed_dim"]),
            activation=d["activation"],
            tap_layers=tuple(d["tap_layers"]),
        )


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable, ordered copy of model parameters at one training instant."""

    spec: EncoderSpec
    params: Mapping[str, np.ndarray]
    step_fraction: float = 0.0
    provenance: Mapping[str, object] = field(default_factory=dict)
    head_concepts: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        params = {k: _frozen(v) for k, v in self.params.items()}
        for name, shape in self.spec.param_shapes():
            if name not in params:
                raise SchemaError(f"snapshot missing encoder parameter {name}")
            if params[name].shape != shape:
                raise SchemaError(f"{name}: shape {params[name].shape} does not match spec {shape}")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "provenance", dict(self.provenance))
        if self.head_concepts is not None:
            object.__setattr__(self, "head_concepts", tuple(int(c) for c in self.head_concepts))

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def encoder_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(ENCODER_PREFIX)}

    @property
    def head(self) -> "LinearHead | None":
        if HEAD_KEY not in self.params:
            return None
        return LinearHead(self.params[HEAD_KEY], self.head_concepts)

    def schema(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def schema_hash(self) -> bytes:
        return _schema_hash(self.schema())

    def with_updates(self, **kw) -> "ModelSnapshot":
        return replace(self, **kw)

    def equals(self, other: "ModelSnapshot") -> bool:
        """Bit-exact parameter equality (names, order, values)."""
        if self.names != other.names:
            return False
        return all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)


def _schema_hash(schema) -> bytes:
    h = hashlib.sha256()
    for name, shape in schema:
        h.update(name.encode())
        h.update(struct.pack(f"<{len(shape) + 1}I", len(shape), *shape))
    return h.digest()


@dataclass(frozen=True)
class ConceptEmbedder:
    table: np.ndarray
    temperature: float = 0.07

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", _frozen(self.table))
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def rows(self, concept_ids: Sequence[int]) -> np.ndarray:
        return self.table[np.asarray(concept_ids, dtype=np.int64)]

    def normalized(self) -> "ConceptEmbedder":
        t = self.table
        return ConceptEmbedder(t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), ad.NORM_EPS), self.temperature)


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray
    class_concepts: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _frozen(self.weight))
        if self.weight.ndim != 2 or self.weight.shape[1] < 2:
            raise SchemaError(f"head weight must be D x K with K >= 2, got {self.weight.shape}")
        if self.class_concepts is not None:
            cc = tuple(int(c) for c in self.class_concepts)
            if len(cc) != self.weight.shape[1]:
                raise SchemaError("class_concepts must align with head columns")
            object.__setattr__(self, "class_concepts", cc)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class FeatureVector:
    segments: list[np.ndarray]
    concatenated: np.ndarray


# -- construction ----------------------------------------------------------------


def init_snapshot(spec: EncoderSpec, rng: np.random.Generator, run_id: str = "init") -> ModelSnapshot:
    gain = 2.0 if spec.activation == "relu" else 1.0
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".weight"):
            params[name] = rng.normal(0.0, np.sqrt(gain / shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return ModelSnapshot(spec, params, 0.0, {"run_id": run_id, "method": "init"})


# -- forward ---------------------------------------------------------------------


def forward(spec: EncoderSpec, params: Mapping[str, Tensor], x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Differentiable encoder pass; returns the embedding and the tap activations."""
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise SchemaError(f"encode: input shape {x.shape} does not match input_dim {spec.input_dim}")
    act = ad.relu if spec.activation == "relu" else ad.tanh
    taps = []
    h = x
    last = spec.num_layers - 1
    for i in range(spec.num_layers):
        h = ad.add(ad.matmul(h, params[f"{ENCODER_PREFIX}{i}.weight"]), params[f"{ENCODER_PREFIX}{i}.bias"])
        if i < last:
            h = act(h)
        if i in spec.tap_layers:
            taps.append(h)
    return h, taps


def tensors_of(snapshot: ModelSnapshot, requires_grad: bool = False, keys=None) -> dict[str, Tensor]:
    keys = snapshot.names if keys is None else keys
    return {k: Tensor(snapshot.params[k], requires_grad=requires_grad) for k in keys}


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), _copy=False)


def encode(snapshot: ModelSnapshot, x) -> tuple[np.ndarray, list[np.ndarray]]:
    params = {k: Tensor(v, _copy=False) for k, v in snapshot.encoder_params().items()}
    emb, taps = forward(snapshot.spec, params, _as_input(x))
    return emb.data, [t.data for t in taps]


def embed(snapshot: ModelSnapshot, x) -> np.ndarray:
    return encode(snapshot, x)[0]


def concat_features(taps: Sequence[Tensor]) -> Tensor:
    """Per-tap L2 normalisation followed by concatenation."""
    return ad.concat([ad.l2_normalize(t) for t in taps])


def features_concat(snapshot: ModelSnapshot, x, last_only: bool = False) -> FeatureVector:
    _, taps = encode(snapshot, x)
    if last_only:
        taps = taps[-1:]
    segments = [ad.l2_normalize(Tensor(t, _copy=False)).data for t in taps]
    return FeatureVector(segments, np.concatenate(segments, axis=-1))


def zs_logits(embedding, head: LinearHead) -> np.ndarray:
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != head.weight.shape[0]:
        raise SchemaError(f"zs_logits: embedding {e.shape} vs head {head.weight.shape}")
    return e @ head.weight


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index: lowest index wins ties
    return np.argmax(logits, axis=1)


# -- parameter-space geometry --------------------------------------------------------


def _check_same_schema(a: ModelSnapshot, b: ModelSnapshot, encoder_only: bool) -> list[str]:
    ka = list(a.encoder_params()) if encoder_only else a.names
    kb = list(b.encoder_params()) if encoder_only else b.names
    if ka != kb or any(a.params[k].shape != b.params[k].shape for k in ka):
        raise SchemaError("snapshots have different parameter schemas")
    return ka


def param_sq_distance(a: ModelSnapshot, b: ModelSnapshot) -> float:
    """Squared L2 distance over encoder parameters only."""
    total = 0.0
    for k in _check_same_schema(a, b, encoder_only=True):
        d = a.params[k] - b.params[k]
        total += float(np.dot(d.ravel(), d.ravel()))
    return total


def interpolate(theta0: ModelSnapshot, thetaf: ModelSnapshot, alpha: float) -> ModelSnapshot:
    """``alpha * theta0 + (1 - alpha) * thetaf`` for every shared parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    keys = [k for k in thetaf.names if k in theta0.params]
    if any(theta0.params[k].shape != thetaf.params[k].shape for k in keys):
        raise SchemaError("snapshots have different parameter schemas")
    params = {}
    for k in thetaf.names:
        if k not in theta0.params or alpha == 0.0:
            params[k] = thetaf.params[k]
        elif alpha == 1.0:
            params[k] = theta0.params[k]
        else:
            params[k] = alpha * theta0.params[k] + (1.0 - alpha) * thetaf.params[k]
    prov = dict(thetaf.provenance)
    prov["wise_ft_alpha"] = alpha
    return ModelSnapshot(thetaf.spec, params, thetaf.step_fraction, prov, thetaf.head_concepts)


# -- serialization ---------------------------------------------------------------------


def dumps_snapshot(snap: ModelSnapshot) -> bytes:
    """Binary blob: magic, schema hash, JSON metadata, names/shapes, then float64 LE data."""
    meta = json.dumps(
        {
            "spec": snap.spec.to_dict(),
            "step_fraction": snap.step_fraction,
            "provenance": snap.provenance,
            "head_concepts": list(snap.head_concepts) if snap.head_concepts is not None else None,
        },
        sort_keys=True,
    ).encode()
    parts = [_MAGIC, snap.schema_hash(), struct.pack("<I", len(meta)), meta, struct.pack("<I", len(snap.params))]
    for name, arr in snap.params.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<{arr.ndim + 1}I", arr.ndim, *arr.shape))
    for arr in snap.params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_snapshot(blob: bytes) -> ModelSnapshot:
    if blob[:8] != _MAGIC:
        raise SchemaError("not a snapshot blob")
    pos = 8
    digest = blob[pos : pos + 32]
    pos += 32
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = json.loads(blob[pos : pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    schema = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        schema.append((name, tuple(shape)))
    if _schema_hash(schema) != digest:
        raise SchemaError("snapshot schema hash mismatch")
    params = {}
    for name, shape in schema:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise SchemaError("trailing bytes in snapshot blob")
    hc = meta.get("head_concepts")
    return ModelSnapshot(
        EncoderSpec.from_dict(meta["spec"]),
        params,
        meta["step_fraction"],
        meta["provenance"],
        tuple(hc) if hc is not None else None,
    )


def save_snapshot(snap: ModelSnapshot, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_snapshot(snap))


def load_snapshot(path) -> ModelSnapshot:
    return loads_snapshot(Path(path).read_bytes())
