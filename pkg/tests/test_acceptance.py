"""Acceptance criteria, one test per criterion.

Each test prints a single pass/fail line; the lines are repeated in the
terminal summary. Criteria 5 to 8 share one grid of end-to-end runs (five
master seeds, seed ``s`` on fold ``s % 5``, epsilon in {inf, 50, 25, 10, 5})
on the default synthetic population under the desk preset.
"""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import record_acceptance
from fedleak import config, conv, data, fed, metrics, nn, pipeline, udp
from gradcheck import fd_relative_error

SEEDS = range(5)
GRID_EPSILONS = ["inf", 50, 25, 10, 5]


# -- closed-form and unit-level criteria ---------------------------------------------

def test_criterion_01_dp_calibration():
    t0 = time.perf_counter()
    ref = math.sqrt(40 * math.log(2))  # sqrt(2 q T ln(1/delta)) with q=0.1, T=200, delta=0.5
    s10 = udp.sigma(1.0, 0.1, 200, 0.5, 10)
    s5 = udp.sigma(1.0, 0.1, 200, 0.5, 5)
    ok_ref = abs(s10 - ref / 10) <= 1e-6 * ref / 10 and abs(s5 - ref / 5) <= 1e-6 * ref / 5
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        sens, q = rng.uniform(1e-6, 10), rng.uniform(1e-3, 1)
        T, delta, eps = int(rng.integers(1, 2000)), rng.uniform(1e-6, 0.999), rng.uniform(0.01, 100)
        sig = udp.sigma(sens, q, T, delta, eps)
        lhs = udp.privacy_log_term(sens, q, T, eps, sig)
        worst = max(worst, abs(lhs - math.log(1 / delta)) / math.log(1 / delta))
    elapsed = time.perf_counter() - t0
    # the stated six-digit decimals 0.526560 / 1.053119 sit 1.2e-5 away from sqrt(40 ln 2)/10
    stated_gap = abs(0.526560 - ref / 10) / (ref / 10)
    ok = ok_ref and worst <= 1e-9 and elapsed < 1.0
    record_acceptance(1, ok, f"sigma(eps=10)={s10:.7f} sigma(eps=5)={s5:.7f} (closed form sqrt(40 ln2)/eps); "
                             f"worst calibration error {worst:.1e}; {elapsed:.3f}s; "
                             f"stated decimal 0.526560 is {stated_gap:.1e} off the closed form")
    assert ok


def test_criterion_02_sensitivity_bound(small_clients):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    net = nn.NetSpec(24, (256, 128), 4, dropout_rate=0.2)
    worst = 0.0
    for trial in range(100):
        client = small_clients[int(rng.integers(len(small_clients)))]
        theta = nn.init_params(net, rng)
        cfg = fed.FLConfig(learning_rate=float(rng.choice([0.0005, 0.01, 0.1, 0.5, 2.0])),
                           clip=float(rng.uniform(0.01, 1.0)), batch_size=int(rng.integers(1, 21)),
                           local_epochs=int(rng.integers(1, 4)))
        out, steps = fed.local_update(client, theta, cfg, 0.0, rng, net)
        ratio = nn.l2_norm(theta - out) / (steps * cfg.learning_rate * cfg.clip)
        worst = max(worst, ratio)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 + 1e-12 and elapsed < 30
    record_acceptance(2, ok, f"max ||dtheta|| / (steps*lr*C) = {worst:.6f} over 100 updates; {elapsed:.1f}s")
    assert ok


def test_criterion_03_gradients():
    t0 = time.perf_counter()
    errs = []
    for trial in range(20):
        rng = np.random.default_rng(9000 + trial)
        spec = nn.NetSpec(int(rng.integers(4, 12)), (int(rng.integers(4, 12)), int(rng.integers(4, 12))), 4, 0.2)
        params = nn.init_params(spec, rng).map(lambda a: a + 0.1 * rng.normal(size=a.shape))
        X = rng.normal(size=(int(rng.integers(2, 10)), spec.input_dim))
        y = rng.integers(0, 4, len(X))
        seed = int(rng.integers(1 << 30))
        _, g = nn.loss_and_gradients(spec, params, X, y, np.random.default_rng(seed))
        errs.append(fd_relative_error(
            lambda v: nn.loss_and_gradients(spec, params.unflatten(v), X, y, np.random.default_rng(seed))[0],
            params, g, rng))
    mlp_worst = max(errs)
    errs = []
    for trial in range(20):
        rng = np.random.default_rng(9100 + trial)
        spec = conv.ConvNetSpec((int(rng.integers(22, 30)), int(rng.integers(22, 30))), int(rng.integers(1, 8)),
                                channels=(2, 3, 4), hidden_dims=(6,), dropout_rate=0.2)
        params = conv.init_convnet(spec, rng, np.float64).map(lambda a: a + 0.05 * rng.normal(size=a.shape))
        X = rng.normal(size=(int(rng.integers(2, 5)), spec.input_dim))
        y = rng.integers(0, 2, len(X))
        seed = int(rng.integers(1 << 30))
        _, g = conv.convnet_loss_and_gradients(spec, params, X, y, np.random.default_rng(seed))
        errs.append(fd_relative_error(
            lambda v: conv.convnet_loss_and_gradients(spec, params.unflatten(v), X, y,
                                                      np.random.default_rng(seed))[0],
            params, g, rng, max_coords=200))
    conv_worst = max(errs)
    elapsed = time.perf_counter() - t0
    ok = mlp_worst < 1e-4 and conv_worst < 1e-4 and elapsed < 60
    record_acceptance(3, ok, f"worst relative error MLP {mlp_worst:.1e}, ConvNet {conv_worst:.1e} "
                             f"(20 trials each); {elapsed:.1f}s")
    assert ok


def test_criterion_04_fedavg_equivalence():
    t0 = time.perf_counter()
    clients, _ = data.synth_generate(data.SynthConfig(num_speakers=1, utterances_per_speaker=50, seed=3))
    client = clients[0]
    net = nn.NetSpec(88, (256, 128), 4, 0.2)
    cfg = fed.FLConfig(rounds=50, sample_ratio=1.0, learning_rate=0.05, clip=1e6, batch_size=20, seed=13)
    theta0 = nn.init_params(net, np.random.default_rng(4))
    final, _ = fed.train_federated([client], cfg, net, init=theta0)
    p = theta0
    X, y = client.X_train, client.y_train
    for rnd in range(50):
        rng = fed.client_stream(13, rnd, client.client_id)
        order = rng.permutation(len(y))
        for s in range(0, len(y), 20):
            idx = order[s:s + 20]
            g = nn.gradients(net, p, X[idx], y[idx], rng)
            p = nn.ParamSet([(w - 0.05 * gw, b - 0.05 * gb) for (w, b), (gw, gb) in zip(p.layers, g.layers)])
    elapsed = time.perf_counter() - t0
    ok = final.equal(p) and elapsed < 60
    record_acceptance(4, ok, f"bit-identical after 50 rounds: {final.equal(p)}; {elapsed:.1f}s")
    assert ok


COMPOSITION_CASES = [
    (1.0, 0.1, 1, False), (1.0, 0.1, 5, False), (1.0, 0.1, 9, False), (1.0, 0.1, 10, True),
    (1.0, 0.1, 11, True), (5.0, 0.5, 1, False), (5.0, 0.5, 2, True), (5.0, 0.5, 3, True),
    (10.0, 1e-5, 10, False), (25.0, 0.25, 4, True), (25.0, 0.25, 3, False), (50.0, 0.01, 99, False),
    (50.0, 0.01, 100, True), (0.5, 0.25, 4, True), (0.5, 0.25, 3, False), (2.0, 0.125, 8, True),
    (2.0, 0.125, 7, False), (3.0, 0.5, 1, False), (math.inf, 0.5, 1, False), (math.inf, 0.5, 2, True),
]


def test_criterion_09_composition():
    t0 = time.perf_counter()
    bad = []
    for eps, delta, n, vacuous in COMPOSITION_CASES:
        rep = udp.compose(eps, delta, n)
        # exact rational products, rounded once
        ce = math.inf if math.isinf(eps) else float(Fraction(n) * Fraction(eps))
        cd = Fraction(n) * Fraction(delta)
        if rep.composed_epsilon != ce or rep.composed_delta != float(cd) or rep.vacuous is not vacuous \
                or (cd >= 1) is not vacuous:
            bad.append((eps, delta, n))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1
    record_acceptance(9, ok, f"{len(COMPOSITION_CASES) - len(bad)}/{len(COMPOSITION_CASES)} cases exact "
                             f"(incl. n*delta>=1 boundary); {elapsed:.4f}s")
    assert ok


def _brute_uar(truth, pred, k):
    recalls = []
    for c in range(k):
        hits = total = 0
        for t, p in zip(truth, pred):
            if t == c:
                total += 1
                hits += p == c
        if total:
            recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def test_criterion_11_uar_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(k, 200))
        truth = rng.integers(0, k, n)
        truth[:k] = np.arange(k)
        pred = rng.integers(0, k, n)
        worst = max(worst, abs(metrics.uar(truth, pred, k) - _brute_uar(truth.tolist(), pred.tolist(), k)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    record_acceptance(11, ok, f"max |uar - brute force| = {worst:.1e} over 1000 vectors; {elapsed:.2f}s")
    assert ok


# -- end-to-end grid -----------------------------------------------------------------

def _grid_config(seed: int) -> dict:
    return config.resolve({"seed": seed, "data": {"folds": [seed % 5]}, "fl": {"epsilons": GRID_EPSILONS}},
                          preset="desk")


def _run_seed(seed: int) -> dict:
    """All epsilons for one seed with per-stage timings."""
    cfg = _grid_config(seed)
    timings = {}
    t = time.perf_counter()
    clients, meta = pipeline.raw_clients(cfg)
    pop = pipeline.build_population(clients, cfg, meta)
    theta0 = pipeline.initial_model(cfg, pipeline.net_spec(cfg, pop.feature_dim))
    timings["population"] = time.perf_counter() - t
    t = time.perf_counter()
    shadows = (pipeline.run_shadow(pop, cfg, m, theta0) for m in range(cfg["attack"]["num_shadows"]))
    examples = pipeline.shadow_examples(pop, shadows)
    timings["shadows"] = time.perf_counter() - t
    t = time.perf_counter()
    model = pipeline.train_attacker(pop, cfg, examples)
    del examples
    timings["attack"] = time.perf_counter() - t
    fold = pipeline.selected_folds(cfg, pop)[0]
    uar, ser, snr = {}, {}, {}
    for eps in cfg["fl"]["epsilons"]:
        t = time.perf_counter()
        _, runlog = pipeline.run_victim(pop, cfg, fold, eps, theta0)
        _, cells = pipeline.evaluate_victim(model, runlog, pop, cfg, fold.fold)
        key = udp.parse_epsilon(eps)
        timings[("victim", key)] = time.perf_counter() - t
        for c in cells:
            uar[(key, c["n"])] = c["uar"]
        ser[key] = runlog.test_uar
        snr[key] = runlog.mean_snr_db()
        del runlog
    return {"uar": uar, "ser": ser, "snr": snr, "timings": timings, "valid_uar": model.valid_uar}


@pytest.fixture(scope="session")
def grid():
    return {s: _run_seed(s) for s in SEEDS}


def _mean(grid, key, table="uar"):
    return float(np.mean([grid[s][table][key] for s in SEEDS]))


def _stage_time(grid, eps_keys):
    total = 0.0
    for s in SEEDS:
        t = grid[s]["timings"]
        total += t["population"] + t["shadows"] + t["attack"] + sum(t[("victim", e)] for e in eps_keys)
    return total


@pytest.mark.slow
def test_criterion_05_attack_viability(grid):
    m = _mean(grid, (math.inf, 1))
    per_seed = [round(grid[s]["uar"][(math.inf, 1)], 3) for s in SEEDS]
    elapsed = _stage_time(grid, [math.inf])
    ok = m >= 0.70 and elapsed <= 15 * 60
    record_acceptance(5, ok, f"mean attack UAR at eps=inf, n=1: {m:.3f} (seeds {per_seed}); "
                             f"{elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_06_mitigation(grid):
    inf1, e10 = _mean(grid, (math.inf, 1)), _mean(grid, (10.0, 1))
    elapsed = _stage_time(grid, [math.inf, 10.0])
    ok = e10 <= 0.58 and inf1 - e10 >= 0.10 and elapsed <= 20 * 60
    record_acceptance(6, ok, f"mean attack UAR n=1: eps=10 {e10:.3f}, eps=inf {inf1:.3f} "
                             f"(drop {inf1 - e10:.3f}); {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_07_multi_update_trend(grid):
    g50 = _mean(grid, (50.0, "all")) - _mean(grid, (50.0, 1))
    g5 = _mean(grid, (5.0, "all")) - _mean(grid, (5.0, 1))
    elapsed = _stage_time(grid, [udp.parse_epsilon(e) for e in GRID_EPSILONS])
    ok = g50 >= 0.05 and g5 <= 0.05 and elapsed <= 25 * 60
    record_acceptance(7, ok, f"n=all minus n=1: eps=50 {g50:+.3f}, eps=5 {g5:+.3f}; "
                             f"{elapsed / 60:.1f} min for the whole grid")
    assert ok


@pytest.mark.slow
def test_criterion_08_utility_ordering(grid):
    s_inf, s25, s5 = (_mean(grid, e, "ser") for e in (math.inf, 25.0, 5.0))
    snr25 = np.mean([grid[s]["snr"][25.0] for s in SEEDS])
    ok = s25 <= s_inf + 0.03 and s5 <= s25 + 0.03 and s_inf - s5 >= 0.03
    record_acceptance(8, ok, f"mean SER UAR eps=inf {s_inf:.3f}, eps=25 {s25:.3f}, eps=5 {s5:.3f}; "
                             f"mean weight SNR at eps=25 {snr25:.1f} dB")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(grid, tmp_path):
    from fedleak import cli

    crit5 = _stage_time(grid, [math.inf]) / len(SEEDS)
    cfg = {"seed": 42, "data": {"folds": [2]}, "fl": {"rounds": 60, "epsilons": ["inf", 10]},
           "attack": {"epochs": 2, "max_train_examples": 400, "max_valid_examples": 200},
           "scenario": {"n_values": [1, 5, "all"], "repeats": 3}}
    path = tmp_path / "c.json"
    path.write_text(config.dumps(cfg))
    t0 = time.perf_counter()
    outs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        out = tmp_path / name
        assert cli.main(["sweep", "--preset", "desk", "--config", str(path), "--out", str(out),
                         "--threads", threads]) == 0
        outs.append(out)
    elapsed = time.perf_counter() - t0
    files = ["reports/fold=2/attack_report.csv", "reports/attack_summary.csv", "reports/ser_summary.csv"]
    same = all((outs[0] / f).read_bytes() == (o / f).read_bytes() for o in outs[1:] for f in files)
    ok = same and elapsed <= 2 * crit5
    record_acceptance(10, ok, f"attack reports byte-identical across 2 runs and 1 vs 4 threads: {same}; "
                              f"{elapsed:.0f}s for 3 runs (budget {2 * crit5:.0f}s)")
    assert ok
