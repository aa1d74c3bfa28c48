"""Self-check suite behind ``forgetlab verify``: gradient checks, metric oracles, trivial cases."""

from __future__ import annotations

import time
from typing import Callable, TextIO

import numpy as np

from . import autodiff as ad
from . import evaluate as ev
from . import finetune as ft
from . import nets
from .autodiff import Tensor
from .datagen import make_task, make_universe
from .nets import ConceptEmbedder, EncoderSpec
from .pretrain import infonce_loss

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-9


def _small_net(seed: int):
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(6, (16, 12), 4, "relu")
    origin = nets.init_snapshot(spec, rng)
    current = nets.init_snapshot(spec, rng)
    x = rng.standard_normal((8, 6))
    y = rng.integers(0, 3, size=8)
    table = rng.standard_normal((5, 4))
    return spec, origin, current, x, y, table, rng


def loss_closures(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Every fine-tuning loss as a closure over leaf tensors of a 2-hidden-layer net."""
    spec, origin, current, x, y, table, rng = _small_net(seed)
    leaves = nets.tensors_of(current, requires_grad=True)
    head = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    rows = Tensor(table[:3], requires_grad=True)
    xt = Tensor(x)
    o_emb, o_taps = nets.encode(origin, x)
    phi0 = nets.concat_features([Tensor(t) for t in o_taps]).data
    phi0_last = nets.concat_features([Tensor(o_taps[-1])]).data
    vocab = Tensor(table.T)
    teacher = (o_emb / np.linalg.norm(o_emb, axis=1, keepdims=True)) @ table.T / 0.07
    params = list(leaves.values())

    def fwd():
        return nets.forward(spec, leaves, xt)

    def ce():
        emb, _ = fwd()
        return ft.loss_ce(emb, head, y)

    def l2sp():
        return ft.loss_l2sp(ce(), leaves, origin, 0.3)

    def ldifs(last=False):
        emb, taps = fwd()
        dist = ft.feature_distance_t(taps, phi0_last if last else phi0, last_only=last)
        return ft.loss_ldifs(ft.loss_ce(emb, head, y), dist, 2.0)

    def lwf():
        emb, _ = fwd()
        student = ad.scale(ft.head_logits(emb, vocab), 1 / 0.07)
        return ad.add(ft.loss_ce(emb, head, y), ft.loss_lwf(student, teacher, 2.0))

    def lfl():
        emb, _ = fwd()
        return ad.add(ft.loss_ce(emb, head, y), ft.loss_lfl(emb, o_emb))

    def flyp(mode):
        emb, _ = fwd()
        return ft.loss_flyp(emb, rows, y, 0.5, mode)

    return {
        "ce": (ce, params + [head]),
        "l2sp": (l2sp, params + [head]),
        "ldifs": (ldifs, params + [head]),
        "ldifs_last_layer": (lambda: ldifs(True), params + [head]),
        "lwf": (lwf, params + [head]),
        "lfl": (lfl, params + [head]),
        "flyp": (lambda: flyp("contrastive"), params + [rows]),
        "flyp_ce": (lambda: flyp("ce"), params + [rows]),
    }


def _oracle_checks(seed: int) -> dict[str, float]:
    spec, origin, current, x, y, table, rng = _small_net(seed)
    errs = {}
    brute = sum(float(np.sum((current.params[k] - origin.params[k]) ** 2)) for k in origin.encoder_params())
    errs["param_sq_distance"] = abs(nets.param_sq_distance(current, origin) - brute)
    _, ta = nets.encode(current, x)
    _, tb = nets.encode(origin, x)
    total = 0.0
    for i in range(len(x)):
        for a, b in zip(ta, tb):
            total += float(np.sum((a[i] / np.linalg.norm(a[i]) - b[i] / np.linalg.norm(b[i])) ** 2))
    errs["feature_distance"] = abs(ft.feature_distance(current, origin, x) - total / len(x))
    emb = rng.standard_normal((8, 4))
    temp = 0.1
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    t = table / np.linalg.norm(table, axis=1, keepdims=True)
    s = e @ t.T / temp
    fwd = np.mean([np.log(np.sum(np.exp(s[i]))) - s[i, y[i]] for i in range(8)])
    bwd = []
    for c in np.unique(y):
        col = s[:, c]
        members = np.flatnonzero(y == c)
        bwd.append(np.log(np.sum(np.exp(col))) - np.mean(col[members]))
    want = 0.5 * (fwd + np.mean(bwd))
    errs["infonce_loss"] = abs(infonce_loss(Tensor(emb), Tensor(table), y, temp).item() - want)
    return errs


def _trivial_checks() -> dict[str, bool]:
    u = make_universe(3, num_concepts=12, input_dim=8)
    task = make_task(u, range(4), style_seed=5, noise_sigma=0.05, n_train=64, n_val=16, n_test=32)
    spec = EncoderSpec(8, (16, 16), 8)
    base = nets.init_snapshot(spec, np.random.default_rng(1))
    emb = ConceptEmbedder(np.random.default_rng(2).standard_normal((12, 8)), 0.1).normalized()
    other = nets.init_snapshot(spec, np.random.default_rng(4))
    out = {}
    cfg = ft.FinetuneConfig(method="lp_init_ldifs", lambda_ldifs=0.0, epochs=2, batch_size=32, warmup_steps=1, seed=9)
    a = ft.finetune(base, emb, task, cfg).final
    b = ft.finetune(base, emb, task, cfg.with_(method="lp_init_ce")).final
    out["lambda_ldifs=0 equals CE"] = a.equals(b)
    out["interpolate endpoints exact"] = nets.interpolate(base, other, 0.0).equals(other) and nets.interpolate(
        base, other, 1.0
    ).equals(base)
    same = ev.delta_lp(task, base, base, emb) == 0.0 and ev.delta_zs(task, base, base, emb) == 0.0
    same = same and ev.continual_delta_lp(task, base, [base, base], emb) == 0.0
    out["deltas zero for identical models"] = same and nets.param_sq_distance(base, base) == 0.0
    feats = ev.probe_features(base, task.train.x)
    zs = ev.zs_head(emb, task.concept_ids)
    out["LP with 0 iterations equals ZS"] = np.array_equal(ev.linear_probe(feats, task.train.y, zs, max_iter=0).head.weight, zs.weight)
    return out


def run_checks(stream: TextIO) -> bool:
    ok = True
    t0 = time.perf_counter()
    for name, (fn, params) in loss_closures().items():
        err = ad.grad_check(fn, params)
        good = err < GRAD_TOL
        ok &= good
        stream.write(f"{'PASS' if good else 'FAIL'} grad_check {name}: max rel err {err:.2e}\n")
    worst: dict[str, float] = {}
    for seed in range(20):
        for k, v in _oracle_checks(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    for k, v in worst.items():
        good = v < ORACLE_TOL
        ok &= good
        stream.write(f"{'PASS' if good else 'FAIL'} oracle {k}: max abs err {v:.2e} over 20 instances\n")
    for k, good in _trivial_checks().items():
        ok &= good
        stream.write(f"{'PASS' if good else 'FAIL'} {k}\n")
    stream.write(f"{'all checks passed' if ok else 'some checks FAILED'} in {time.perf_counter() - t0:.1f}s\n")
    return ok
