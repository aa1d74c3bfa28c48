"""End-to-end acceptance criteria. Each test prints one PASS/FAIL line and asserts it."""

import time

import numpy as np
import pytest
from scipy.optimize import minimize

from forgetlab import autodiff as ad
from forgetlab import evaluate as ev
from forgetlab import finetune as ft
from forgetlab import nets
from forgetlab import runner as rn
from forgetlab.autodiff import Tensor
from forgetlab.datagen import make_task, make_universe
from forgetlab.finetune import FinetuneConfig
from forgetlab.nets import ConceptEmbedder, EncoderSpec
from forgetlab.pretrain import infonce_loss

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
FT_TASKS = ("t0", "t1", "t2")
N_OTHERS = 5
# accuracies are k/n_test in float, so a mean sitting exactly on a threshold can miss it by rounding
TOL = 1e-9


class Lab:
    """Lazily trained final models of the default plan, shared by the criteria."""

    def __init__(self):
        self._ctx = {}
        self._final = {}
        self._lp = {}

    def ctx(self, seed):
        if seed not in self._ctx:
            self._ctx[seed] = rn.Context.build(rn.default_plan(seed))
        return self._ctx[seed]

    def final(self, seed, method, task_id):
        key = (seed, method, task_id)
        if key not in self._final:
            c = self.ctx(seed)
            job = rn.Job(method, task_id)
            cfg = c.plan.finetune_config(method, run_id=job.run_id).with_(checkpoint_fractions=(1.0,))
            self._final[key] = rn.train(c.plan, c.origin, c.embedder, c.tasks[task_id], cfg, run_id=job.run_id).final
        return self._final[key]

    def others(self, seed, task_id):
        c = self.ctx(seed)
        return [t.task_id for t in ev.others(c.tasks[task_id], c.tasks.values())][:N_OTHERS]

    def a_lp(self, seed, method, ft_task, eval_task):
        key = (seed, method, ft_task, eval_task)
        if key not in self._lp:
            c = self.ctx(seed)
            self._lp[key] = ev.a_lp(self.final(seed, method, ft_task), c.tasks[eval_task], c.embedder)
        return self._lp[key]

    def delta_others(self, seed, method, task_id):
        c = self.ctx(seed)
        return float(
            np.mean([self.a_lp(seed, method, task_id, o) - c.baseline(o)[1] for o in self.others(seed, task_id)])
        )

    def self_lp(self, seed, method, task_id):
        return self.a_lp(seed, method, task_id, task_id)


@pytest.fixture(scope="module")
def lab():
    return Lab()


def _grid_mean(fn, seeds=SEEDS, tasks=FT_TASKS):
    return float(np.mean([fn(s, t) for s in seeds for t in tasks]))


# -- 1: gradients ------------------------------------------------------------------------------


def _loss_cases(seed):
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(6, (10, 8), 5)
    origin = nets.init_snapshot(spec, rng)
    moved = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in origin.params.items()}
    x = rng.normal(size=(8, 6))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    head0 = rng.normal(size=(5, 3))
    table = rng.normal(size=(7, 5))
    phi0 = nets.features_concat(origin, x).concatenated
    phi0_last = nets.features_concat(origin, x, last_only=True).concatenated
    teacher_emb = nets.embed(origin, x)
    teacher_logits = ft.head_logits(Tensor(teacher_emb), Tensor(table.T)).data / 0.07
    params = {k: Tensor(v, requires_grad=True) for k, v in moved.items()}
    head = Tensor(head0, requires_grad=True)
    allp = [*params.values(), head]

    def fwd():
        return nets.forward(spec, params, Tensor(x))

    def ce():
        emb, _ = fwd()
        return ft.loss_ce(emb, head, y)

    def l2sp():
        return ft.loss_l2sp(ce(), params, origin, 0.7)

    def ldifs(last):
        emb, taps = fwd()
        return ft.loss_ldifs(ft.loss_ce(emb, head, y), ft.feature_distance_t(taps, phi0_last if last else phi0, last), 2.5)

    def lwf():
        emb, _ = fwd()
        student = ad.scale(ft.head_logits(emb, Tensor(table.T)), 1 / 0.07)
        return ad.add(ft.loss_ce(emb, head, y), ft.loss_lwf(student, teacher_logits, 2.0))

    def lfl():
        emb, _ = fwd()
        return ad.add(ft.loss_ce(emb, head, y), ft.loss_lfl(emb, teacher_emb))

    def flyp(mode):
        emb, _ = fwd()
        return ft.loss_flyp(emb, ad.transpose(head), y, 0.1, mode)

    return {
        "CE": ce,
        "L2SP": l2sp,
        "LDIFS": lambda: ldifs(False),
        "LDIFS-LL": lambda: ldifs(True),
        "LwF": lwf,
        "LFL": lfl,
        "FLYP": lambda: flyp("contrastive"),
        "FLYP-CE": lambda: flyp("ce"),
    }, allp


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(2):
        cases, params = _loss_cases(seed)
        for name, fn in cases.items():
            worst[name] = max(worst.get(name, 0.0), ad.grad_check(fn, params))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-5 and elapsed < 10.0
    verdict(1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} losses in {elapsed:.1f}s")
    assert ok


# -- 2: metric oracles -----------------------------------------------------------------------------


def _sq_dist_loops(a, b):
    total = 0.0
    for k in a.encoder_params():
        for u, v in zip(a.params[k].ravel(), b.params[k].ravel()):
            total += (u - v) ** 2
    return total


def _feat_dist_loops(a, b, x):
    _, ta = nets.encode(a, x)
    _, tb = nets.encode(b, x)
    total = 0.0
    for i in range(len(x)):
        for p, q in zip(ta, tb):
            np_, nq = np.sqrt(sum(v * v for v in p[i])), np.sqrt(sum(v * v for v in q[i]))
            total += sum((u / np_ - v / nq) ** 2 for u, v in zip(p[i], q[i]))
    return total / len(x)


def _lp_acc_oracle(snap, task):
    """Logistic regression solved by L-BFGS on unit embeddings; accuracy counted by loop."""

    def unit(x):
        e = nets.embed(snap, x)
        return np.array([r / np.sqrt(r @ r) for r in e])

    xtr, ytr = unit(task.train.x), task.train.y
    n, d = xtr.shape
    k = task.num_classes
    l2 = 1.0 / n

    def obj(w):
        w = w.reshape(d, k)
        z = xtr @ w
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        p = np.exp(z - lse[:, None])
        p[np.arange(n), ytr] -= 1.0
        loss = np.mean(lse - z[np.arange(n), ytr]) + 0.5 * l2 * np.sum(w * w)
        return loss, (xtr.T @ p / n + l2 * w).ravel()

    w = minimize(obj, np.zeros(d * k), jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 0, "maxiter": 20000}).x
    w = w.reshape(d, k)
    xte = unit(task.test.x)
    hits = sum(int(np.argmax(xte[i] @ w) == task.test.y[i]) for i in range(len(xte)))
    return 100.0 * hits / len(xte)


def _infonce_loops(emb, table, labels, temp):
    e = [v / np.linalg.norm(v) for v in emb]
    t = [v / np.linalg.norm(v) for v in table]
    s = [[float(a @ b) / temp for b in t] for a in e]
    fwd = np.mean([np.log(sum(np.exp(v) for v in row)) - row[labels[i]] for i, row in enumerate(s)])
    bwd = []
    for c in sorted(set(labels)):
        col = [row[c] for row in s]
        members = [i for i in range(len(s)) if labels[i] == c]
        bwd.append(np.log(sum(np.exp(v) for v in col)) - np.mean([col[i] for i in members]))
    return 0.5 * (fwd + np.mean(bwd))


def test_criterion_02_metric_oracles(verdict):
    u = make_universe(3, num_concepts=10, input_dim=6)
    spec = EncoderSpec(6, (12, 12), 5)
    worst = {"param_sq_distance": 0.0, "feature_distance": 0.0, "delta_lp": 0.0, "continual_delta_lp": 0.0, "infonce_loss": 0.0}
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        a = nets.init_snapshot(spec, rng)
        chain = [a]
        for _ in range(3):
            chain.append(a.with_updates(params={k: v + 0.4 * rng.normal(size=v.shape) for k, v in a.params.items()}))
        b = chain[1]
        task = make_task(u, rng.choice(10, 3, replace=False), style_seed=i, noise_sigma=0.1, n_train=30, n_val=6, n_test=30, seed=i)
        emb = ConceptEmbedder(rng.normal(size=(10, 5)), 0.07)
        x = rng.normal(size=(7, 6))
        worst["param_sq_distance"] = max(worst["param_sq_distance"], abs(nets.param_sq_distance(a, b) - _sq_dist_loops(a, b)))
        worst["feature_distance"] = max(worst["feature_distance"], abs(ft.feature_distance(b, a, x) - _feat_dist_loops(b, a, x)))
        oracle = [_lp_acc_oracle(m, task) for m in chain]
        worst["delta_lp"] = max(worst["delta_lp"], abs(ev.delta_lp(task, b, a, emb) - (oracle[1] - oracle[0])))
        got = ev.continual_delta_lp(task, chain[-1], chain[:-1], emb)
        worst["continual_delta_lp"] = max(worst["continual_delta_lp"], abs(got - (oracle[-1] - max(oracle[:-1]))))
        e, t = rng.normal(size=(9, 4)), rng.normal(size=(5, 4))
        lab = list(rng.integers(0, 5, size=9))
        temp = float(rng.uniform(0.05, 1.0))
        worst["infonce_loss"] = max(worst["infonce_loss"], abs(infonce_loss(Tensor(e), Tensor(t), lab, temp).item() - _infonce_loops(e, t, lab, temp)))
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-9
    verdict(2, ok, f"max abs error {worst[top]:.1e} ({top}) over 20 instances x {len(worst)} metrics")
    assert ok


# -- 3: trivial cases ------------------------------------------------------------------------------------


def test_criterion_03_trivial_cases(lab, verdict):
    c = lab.ctx(0)
    task = c.tasks["t0"]
    checks = {}
    cfg = FinetuneConfig(method="lp_init_ldifs", lambda_ldifs=0.0, epochs=5, seed=11, checkpoint_fractions=(1.0,))
    a = ft.finetune(c.origin, c.embedder, task, cfg)
    b = ft.finetune(c.origin, c.embedder, task, cfg.with_(method="lp_init_ce"))
    checks["ldifs0==ce"] = a.final.equals(b.final) and a.losses == b.losses
    f = b.final
    one, zero = nets.interpolate(c.origin, f, 1.0), nets.interpolate(c.origin, f, 0.0)
    checks["interp endpoints"] = all(one.params[k].tobytes() == c.origin.params[k].tobytes() for k in c.origin.params) and all(
        zero.params[k].tobytes() == f.params[k].tobytes() for k in f.params
    )
    same = [
        ev.delta_lp(task, c.origin, c.origin, c.embedder),
        ev.delta_zs(task, c.origin, c.origin, c.embedder),
        nets.param_sq_distance(c.origin, c.origin),
        ft.feature_distance(c.origin, c.origin, task.train.x),
        ev.continual_delta_lp(task, c.origin, [c.origin, c.origin], c.embedder),
    ]
    checks["zero deltas"] = all(v == 0.0 for v in same)
    zs = ft.init_head(c.origin, c.embedder, task, "zs")
    lp0 = ft.init_head(c.origin, c.embedder, task, "lp", probe_max_iter=0)
    checks["LP(0 iter)==ZS"] = np.array_equal(zs.weight, lp0.weight)
    ok = all(checks.values())
    verdict(3, ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


# -- 4-8: single-task protocol --------------------------------------------------------------------------------


def test_criterion_04_forgetting_exists(lab, verdict):
    for s in SEEDS:
        lab.ctx(s)
    t0 = time.perf_counter()
    per_seed = [lab.delta_others(s, "zs_init_ce", "t0") for s in SEEDS]
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(per_seed))
    ok = mean <= -2.0 + TOL and elapsed < 120.0
    verdict(4, ok, f"ZS-init-CE mean delta_LP on {N_OTHERS} others {mean:+.2f} (<= -2.00), seeds {np.round(per_seed, 2).tolist()}, {elapsed:.0f}s")
    assert ok


def test_criterion_05_method_ordering(lab, verdict):
    m = {k: _grid_mean(lambda s, t: lab.delta_others(s, k, t)) for k in ("lp_init_ldifs", "lp_init_l2sp", "zs_init_ce")}
    g1 = m["lp_init_ldifs"] - m["lp_init_l2sp"]
    g2 = m["lp_init_l2sp"] - m["zs_init_ce"]
    ok = g1 >= 0.5 - TOL and g2 >= 0.5 - TOL
    verdict(
        5,
        ok,
        f"others delta_LP: LDIFS {m['lp_init_ldifs']:+.2f}, L2SP {m['lp_init_l2sp']:+.2f}, ZS-CE {m['zs_init_ce']:+.2f}; gaps {g1:+.2f}, {g2:+.2f} (each >= 0.50)",
    )
    assert ok


def test_criterion_06_competitive_accuracy(lab, verdict):
    ldifs = _grid_mean(lambda s, t: lab.self_lp(s, "lp_init_ldifs", t))
    ce = _grid_mean(lambda s, t: lab.self_lp(s, "zs_init_ce", t))
    ok = abs(ldifs - ce) <= 2.0 + TOL
    verdict(6, ok, f"A_LP on fine-tune task: LDIFS {ldifs:.2f}, ZS-CE {ce:.2f}, gap {abs(ldifs - ce):.2f} (<= 2.00)")
    assert ok


def test_criterion_07_last_layer_ablation(lab, verdict):
    full = _grid_mean(lambda s, t: lab.delta_others(s, "lp_init_ldifs", t))
    last = _grid_mean(lambda s, t: lab.delta_others(s, "ldifs_last_layer", t))
    ok = full - last >= 0.5 - TOL
    verdict(7, ok, f"others delta_LP: all taps {full:+.2f}, last layer {last:+.2f}, gap {full - last:+.2f} (>= 0.50)")
    assert ok


def test_criterion_08_distance_dynamics(lab, verdict):
    wins = []
    ratios = []
    for s in SEEDS:
        c = lab.ctx(s)
        ce = lab.final(s, "zs_init_ce", "t0")
        l2sp = lab.final(s, "lp_init_l2sp", "t0")
        ldifs = lab.final(s, "lp_init_ldifs", "t0")
        ratio = nets.param_sq_distance(ce, c.origin) / nets.param_sq_distance(l2sp, c.origin)
        held = c.tasks[lab.others(s, "t0")[0]]
        feat = [
            ft.feature_distance(ldifs, c.origin, x) < ft.feature_distance(ce, c.origin, x)
            for x in (c.tasks["t0"].train.x, held.train.x)
        ]
        ratios.append(ratio)
        wins.append(ratio >= 2.0 and all(feat))
    ok = sum(wins) > len(SEEDS) / 2
    verdict(8, ok, f"{sum(wins)}/{len(SEEDS)} seeds hold; param-distance ratio CE/L2SP {np.round(ratios, 1).tolist()} (>= 2)")
    assert ok


# -- 9: continual ---------------------------------------------------------------------------------------------


def test_criterion_09_continual(lab, verdict):
    seq = ("t0", "t1", "t2")
    first = {}
    final_lp = {}
    for s in SEEDS:
        c = lab.ctx(s)
        for m in rn.SEQUENCE_METHODS:
            _, rows = rn.run_sequence(c, seq, m)
            by_task = {r[3]: r for r in rows}
            first.setdefault(m, []).append(by_task["t0"][6])
            final_lp.setdefault(m, []).append(by_task["t2"][5])
    first = {m: float(np.mean(v)) for m, v in first.items()}
    final_lp = {m: float(np.mean(v)) for m, v in final_lp.items()}
    gap = first["lp_init_ldifs"] - first["zs_init_ce"]
    best = max(final_lp, key=final_lp.get)
    short = final_lp[best] - final_lp["lp_init_ldifs"]
    ok = gap >= 1.0 - TOL and short <= 2.0 + TOL
    verdict(
        9,
        ok,
        f"first-task continual delta_LP LDIFS {first['lp_init_ldifs']:+.2f} vs ZS-CE {first['zs_init_ce']:+.2f} (gap {gap:+.2f} >= 1.00); "
        f"final-task A_LP LDIFS {final_lp['lp_init_ldifs']:.2f}, best {best} {final_lp[best]:.2f} (short {short:.2f} <= 2.00)",
    )
    assert ok


# -- 10: wise-ft ----------------------------------------------------------------------------------------------


def test_criterion_10_wise_ft(lab, verdict):
    pairs = []
    for s in SEEDS[:3]:
        c = lab.ctx(s)
        final = lab.final(s, "zs_init_ce", "t0")
        _, mixed, _ = ev.wise_ft_select(c.origin, final, c.tasks["t0"], c.embedder)
        others = lab.others(s, "t0")
        with_ = np.mean([ev.a_lp(mixed, c.tasks[o], c.embedder) - c.baseline(o)[1] for o in others])
        pairs.append((lab.delta_others(s, "zs_init_ce", "t0"), float(with_)))
    ok = all(w >= wo for wo, w in pairs)
    verdict(10, ok, "ZS-CE others delta_LP without -> with Wise-FT: " + ", ".join(f"{wo:+.2f} -> {w:+.2f}" for wo, w in pairs))
    assert ok


# -- 11-12: the default plan end to end -------------------------------------------------------------------------------


def _full_plan(out):
    t0 = time.perf_counter()
    r = rn.Runner(rn.default_plan(0), out, workers=rn.default_workers())
    r.run_single()
    r.run_sequences()
    r.run_wise_ft()
    r.report()
    return time.perf_counter() - t0, len(r.registry.completed())


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"full{i}")
        runs.append((*_full_plan(out), out))
    return runs


def test_criterion_11_determinism(full_runs, verdict):
    a, b = (p / "metrics.csv" for _, _, p in full_runs)
    ok = a.read_bytes() == b.read_bytes()
    n = len(a.read_text().splitlines()) - 1
    verdict(11, ok, f"two default-plan runs, metrics.csv {n} rows, {'byte-identical' if ok else 'DIFFERENT'}")
    assert ok


def test_criterion_12_full_plan_runtime(full_runs, verdict):
    seconds, runs = full_runs[0][:2]
    ok = seconds < 30 * 60
    verdict(12, ok, f"pretrain + {runs} runs + evaluations in {seconds / 60:.1f} min on {rn.default_workers()} worker(s) (< 30 min)")
    assert ok
