"""Acceptance criteria. Each test prints one PASS/FAIL line, repeated in the
terminal summary under "acceptance criteria"."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from imumatch.estimator import OracleEstimator, RunningStats, reliability
from imumatch.matching import DEFERRED, NEGATIVE, POSITIVE, MatchConfig, MatchState, finalize
from imumatch.metrics import Outcome, evaluate
from imumatch.network import Architecture, DualConvAttentionNet
from imumatch.config import MatchingConfig
from imumatch.pipeline import Dataset, match_and_evaluate, prepare, run_scene, score_pairs
from imumatch.signals import FeatureWindow
from imumatch.simulator import ScenarioConfig, generate_scenario
from imumatch.training import TrainConfig, build_pairs, fit, split_by_individual
from imumatch.undefined import UNDEFINED


def record(number, title, ok, detail=""):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# --------------------------------------------------------------------------- 1: reliability


def _stats(var_spd, var_acc):
    var = np.ones(9)
    var[0], var[2] = var_spd, var_acc
    return RunningStats(np.zeros(9), var, frozen=True)


def _with_variance(rng, W, var_spd, var_acc):
    data = rng.normal(size=(9, W))
    for ch, target in ((0, var_spd), (2, var_acc)):
        x = data[ch] - data[ch].mean()
        data[ch] = x * math.sqrt(target / np.var(x)) + 2.0
    return data


def _r(data, stats):
    return reliability(FeatureWindow.from_array("t", "s", 0.0, data), stats)


def test_criterion_1_reliability():
    rng = np.random.default_rng(1)
    checks = []
    for _ in range(20):
        vs, va = rng.uniform(0.05, 5.0, 2)
        checks.append(abs(_r(_with_variance(rng, 300, vs, va), _stats(vs, va)) - 0.5) <= 1e-12)
    equal = all(checks)
    constant = all(_r(np.full((9, W), c), _stats(*rng.uniform(0.05, 5.0, 2))) <= 0.01
                   for W, c in ((100, 0.0), (300, 1.3), (600, -4.0)))
    vs, va = 0.4, 1.1
    e2 = abs(_r(_with_variance(rng, 300, math.e**2 * vs, va), _stats(vs, va)) - 1 / (1 + math.exp(-2))) <= 1e-9
    monotone = True
    for _ in range(1000):
        W = int(rng.integers(10, 200))
        data = rng.normal(size=(9, W)) * rng.uniform(0.1, 3.0)
        st = _stats(*rng.uniform(0.05, 5.0, 2))
        louder = data.copy()
        louder[rng.choice([0, 2])] *= math.sqrt(rng.uniform(1.0, 30.0))
        monotone &= _r(louder, st) >= _r(data, st)
    ok = equal and constant and e2 and monotone
    record(1, "reliability unit suite", ok, f"r=0.5:{equal} const<=0.01:{constant} e^2:{e2} monotone:{monotone}")
    assert ok


# --------------------------------------------------------------------------- 2: gradient check


def _worst_fd_error(seed, h=1e-4):
    arch = Architecture(W=14, k_short=3, k_long=5, maps=3, attention=4, hidden=4)
    rng = np.random.default_rng(seed)
    net = DualConvAttentionNet(arch, RunningStats(rng.normal(size=9), rng.uniform(0.5, 2.0, 9), frozen=True))
    net.params = rng.normal(0, 0.5, arch.n_params)
    w = FeatureWindow.from_array("t", "s", 0.0, rng.normal(size=(9, arch.W)) * 1.5)
    net.forward(w)
    grad = net.backward(w, 1.0)
    theta = net.params.copy()
    probe = net.with_params(theta)
    worst = 0.0
    for i in range(len(theta)):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        probe.params = plus
        fp = probe.predict(w.data[None])[0]
        probe.params = minus
        fm = probe.predict(w.data[None])[0]
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8))
    return worst


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    worst = max(_worst_fd_error(seed) for seed in range(12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 60
    record(2, "backward vs central differences, 12 seeds", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 3: matching semantics


def _kinds(decisions):
    return [(d.kind, d.sensor_id) for d in decisions]


def _state(means, cfg):
    s = MatchState(cfg)
    for m, p in means.items():
        s.ingest("t", m, 0, p, 1.0)
    return s


def _series(rng, n_tracks=5, n_sensors=4, length=15):
    out = {}
    for t in range(n_tracks):
        owner = rng.integers(-1, n_sensors)
        for m in range(n_sensors):
            p = np.clip((0.85 if m == owner else 0.2) + rng.normal(0, 0.25, length), 0, 1)
            r = rng.uniform(0, 1, length)
            out[(f"t{t}", f"m{m}")] = [(k, float(p[k]), float(r[k])) for k in range(length)]
    return out


def _interleave(series, rng):
    queues = {k: list(v) for k, v in series.items()}
    keys = [k for k, v in queues.items() for _ in v]
    rng.shuffle(keys)
    return [(k, queues[k].pop(0)) for k in keys]


def _final_after_all(order, cfg):
    s = MatchState(cfg)
    for (t, m), (k, p, r) in order:
        s.ingest(t, m, k, p, r)
    s.decide()
    return tuple(sorted(finalize(s).items()))


def _never_revoked(order, cfg):
    """Decide after every ingest; a positive or negative, once issued, must persist."""
    s, issued = MatchState(cfg), []
    for (t, m), (k, p, r) in order:
        s.ingest(t, m, k, p, r)
        issued += [d for d in s.decide() if d.kind in (POSITIVE, NEGATIVE)]
        for d in issued:
            if d.kind == POSITIVE and s.positives.get(d.track_id) != d.sensor_id:
                return False
            if d.kind == NEGATIVE and (d.track_id, d.sensor_id) not in s.negatives:
                return False
    return True


def test_criterion_3_matching_semantics():
    unique = _kinds(_state({"m1": 0.95, "m2": 0.10}, MatchConfig(0.1, 0.7)).decide()) == [
        (NEGATIVE, "m2"), (POSITIVE, "m1")]
    two_above = _kinds(_state({"m1": 0.95, "m2": 0.92}, MatchConfig(0.1, 0.9)).decide()) == [(DEFERRED, None)]
    band = _kinds(_state({"m1": 0.6}, MatchConfig(0.1, 0.7)).decide()) == [(DEFERRED, None)]

    rng = np.random.default_rng(3)
    cfg = MatchConfig(0.3, 0.7)
    robust, permanent = True, True
    for _ in range(3):
        series = _series(rng)
        finals = set()
        for _ in range(100):
            order = _interleave(series, rng)
            finals.add(_final_after_all(order, cfg))
            permanent &= _never_revoked(order, cfg)
        robust &= len(finals) == 1
    ok = unique and two_above and band and robust and permanent
    record(3, "matching semantics", ok,
           f"examples:{unique and two_above and band} order-robust(300 shuffles):{robust} permanent:{permanent}")
    assert ok


# --------------------------------------------------------------------------- 4: metrics oracle


def _enumeration_oracle(outcomes, participants):
    """Per-track predicate sets enumerated explicitly, then measured."""
    n = len(outcomes)
    P = [j for j in range(n) if outcomes[j].predicted is not UNDEFINED and outcomes[j].predicted in participants]
    A = [j for j in range(n) if outcomes[j].actual in participants]
    C = [j for j in range(n) if outcomes[j].predicted is not UNDEFINED and outcomes[j].predicted is not None
         and outcomes[j].predicted == outcomes[j].actual]
    res = {}
    for w in (False, True):
        size = (lambda S: math.fsum(outcomes[j].duration for j in S)) if w else (lambda S: float(len(S)))
        pp = size([j for j in P if j in C]) / size(P) if P else UNDEFINED
        pr = size([j for j in A if j in C]) / size(A) if A else UNDEFINED
        if pp is UNDEFINED or pr is UNDEFINED:
            pf = UNDEFINED
        elif pp + pr == 0:
            pf = 0.0
        else:
            pf = 2 * pp * pr / (pp + pr)
        res[w] = (pp, pr, pf)
    return res


def _eq(a, b):
    return (a is UNDEFINED and b is UNDEFINED) or (a is not UNDEFINED and b is not UNDEFINED and a == b)


def test_criterion_4_metrics_oracle():
    rng = np.random.default_rng(4)
    ids = ["A", "B", "C", "D"]
    participants = set(ids[:3])
    agree = True
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        outcomes = []
        for j in range(n):
            pred = [*ids, None, UNDEFINED][rng.integers(0, 6)]
            actual = [*ids, None][rng.integers(0, 5)]
            outcomes.append(Outcome(f"t{j}", pred, actual, float(rng.uniform(0.1, 600.0))))
        rep = evaluate(outcomes, participants)
        want = _enumeration_oracle(outcomes, participants)
        got = {False: (rep.PP, rep.PR, rep.PF), True: (rep.PP_w, rep.PR_w, rep.PF_w)}
        agree &= all(_eq(a, b) for w in (False, True) for a, b in zip(got[w], want[w]))
    hand = evaluate([Outcome("a", "A", "A"), Outcome("b", "B", "B"), Outcome("c", None, "C")], {"A", "B", "C"})
    hand_ok = hand.PP == 1.0 and hand.PR == pytest.approx(2 / 3, abs=1e-15) and hand.PF == pytest.approx(0.8, abs=1e-15)
    ok = agree and hand_ok
    record(4, "metrics equal the enumeration oracle", ok, f"1000 sets exact:{agree} hand case:{hand_ok}")
    assert ok


# --------------------------------------------------------------------------- 5: oracle end to end


def test_criterion_5_oracle_end_to_end():
    results = []
    for seed in (0, 1, 2):
        cfg = ScenarioConfig(seed=seed)
        assert (cfg.n_participants, cfg.n_nonparticipants, cfg.duration_s) == (10, 5, 600.0)
        assert cfg.fragmentation_per_min > 0
        start = time.perf_counter()
        ds = Dataset.from_scenario(generate_scenario(cfg))
        prepared = prepare(ds)
        model = OracleEstimator(ds.labels(), 100, prepared.channel_stats())
        _, res = run_scene(ds, model, MatchConfig(0.1, 0.7), prepared=prepared)
        labels = ds.labels()
        false_pos = sum(1 for t, s in res.assignment.items() if isinstance(s, str) and labels[t] != s)
        results.append((seed, res.report.PF, false_pos, time.perf_counter() - start))
    ok = all(pf == 1.0 and fp == 0 and dt < 60 for _, pf, fp, dt in results)
    detail = "; ".join(f"seed {s}: PF={pf} FP={fp} {dt:.1f}s" for s, pf, fp, dt in results)
    record(5, "oracle end-to-end PF = 1, no false positives", ok, detail)
    assert ok


# --------------------------------------------------------------------------- 6 and 7: learned end to end

# Desk-scale recipe, fixed before looking at the test scenes. N_min_windows was
# chosen as the best W = 300 PF on separate tuning scenes (seeds 300-302).
TRAIN_SCENE = dict(seed=100, n_participants=20)
TEST_SEEDS = (200, 201, 202)
MATCHING = MatchingConfig(N_min_windows=1.5)


def _recipe(W):
    return TrainConfig(W=W, estimator="nn", rho_neg=16, lr=3e-4, batch_size=128, epochs=15, patience=4,
                       stride_train=W // 3, stride_val=20, seed=0)


@pytest.fixture(scope="module")
def benchmark():
    """{W: {"seconds": train+score time on one scene, seed: MetricReport}}"""
    t0 = time.perf_counter()
    train = prepare(Dataset.from_scenario(generate_scenario(ScenarioConfig(**TRAIN_SCENE))))
    prep_s = time.perf_counter() - t0
    tests = []
    for seed in TEST_SEEDS:
        ds = Dataset.from_scenario(generate_scenario(ScenarioConfig(seed=seed)))
        tests.append((seed, ds, prepare(ds)))
    out = {}
    for W in (100, 300, 600):
        start = time.perf_counter()
        result, split = fit(train, _recipe(W))
        assert not set(split.train_ids) & set(split.val_ids)
        out[W] = {"train_s": time.perf_counter() - start}
        for seed, ds, prepared in tests:
            s0 = time.perf_counter()
            scores = score_pairs(prepared, result.model)
            res = match_and_evaluate(scores, MATCHING.resolve(W), ds.labels(), ds.participants, ds.durations())
            out[W][seed] = res.report
            if seed == TEST_SEEDS[0]:
                out[W]["pipeline_s"] = prep_s + out[W]["train_s"] + time.perf_counter() - s0
    return out


def _mean(bench, W, name):
    return float(np.mean([getattr(bench[W][s], name) for s in TEST_SEEDS]))


@pytest.mark.slow
def test_criterion_6_learned_end_to_end(benchmark):
    pf = {W: _mean(benchmark, W, "PF") for W in (100, 300, 600)}
    pfw = _mean(benchmark, 300, "PF_w")
    runtime = benchmark[300]["pipeline_s"]
    levels = pf[300] >= 0.8 and pfw >= 0.9
    ordering = pf[300] >= pf[100] and pf[300] >= pf[600]
    ok = levels and ordering and runtime < 600
    per_seed = " ".join(f"{s}:{benchmark[300][s].PF:.3f}/{benchmark[300][s].PF_w:.3f}" for s in TEST_SEEDS)
    record(6, "learned estimator end-to-end at W = 300", ok,
           f"PF {pf[300]:.3f} PF_w {pfw:.3f} (per seed {per_seed}); "
           f"PF by W 100/300/600 = {pf[100]:.3f}/{pf[300]:.3f}/{pf[600]:.3f} ordering:{ordering}; "
           f"W=300 pipeline {runtime:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_window_trade_off(benchmark):
    rows = []
    for s in TEST_SEEDS:
        a, b = benchmark[100][s], benchmark[600][s]
        rows.append((s, a.PP, b.PP, a.PR, b.PR, b.PP >= a.PP and b.PR <= a.PR))
    ok = all(r[-1] for r in rows)
    record(7, "longer window: PP never lower, PR never higher (W 100 -> 600)", ok,
           "; ".join(f"seed {s}: PP {p1:.3f}->{p6:.3f} PR {r1:.3f}->{r6:.3f}" for s, p1, p6, r1, r6, _ in rows))
    assert ok


# --------------------------------------------------------------------------- 8: leak and pair invariants


def _pairs_ok(pairs, W):
    """Loop-based re-check of every pair: identity rule, alignment and window bounds."""
    ds = pairs.dataset
    for i in range(len(pairs)):
        tr, se = ds.tracks[pairs.track_idx[i]], ds.sensors[pairs.sensor_idx[i]]
        kt, ks = int(pairs.k_track[i]), int(pairs.k_sensor[i])
        if not (tr.k0 <= kt and kt + W <= tr.k0 + tr.n and se.k0 <= ks and ks + W <= se.k0 + se.n):
            return False
        same = tr.label == se.sensor_id
        if pairs.y[i] == 1 and not (same and kt == ks):
            return False
        if pairs.y[i] == 0 and same and abs(kt - ks) < W:
            return False
    return True


def test_criterion_8_training_invariants():
    assert TrainConfig().val_rho == 1
    results = []
    for seed in (0, 1, 2):
        ds = Dataset.from_scenario(generate_scenario(ScenarioConfig(seed=seed, duration_s=240.0)))
        prepared = prepare(ds)
        split = split_by_individual(prepared, 0.8, seed)
        W = 100
        tr = build_pairs(split.train, W, 10, 16, seed)
        va = build_pairs(split.val, W, 1, TrainConfig().val_rho, seed + 1)
        no_leak = not (set(split.train_ids) & set(split.val_ids)) and not (tr.identities() & va.identities())
        admissible = _pairs_ok(tr, W) and _pairs_ok(va, W)
        balanced = va.n_neg == va.n_pos
        results.append((seed, no_leak, admissible, balanced))
    ok = all(all(r[1:]) for r in results)
    record(8, "no identity leak, admissible pairs, validation rho_neg = 1", ok,
           "; ".join(f"seed {s}: leak-free={a} admissible={b} val 1:1={c}" for s, a, b, c in results))
    assert ok
