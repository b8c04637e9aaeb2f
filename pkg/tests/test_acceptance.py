"""Acceptance suite.

One test per shipped acceptance criterion, each printing a PASS/FAIL line
(run with ``pytest -s tests/test_acceptance.py`` to see them live). The
statistical experiments load their parameters from the JSON files under
configs/ and grids/, so every run here is reproducible from the CLI too.
"""

import json
import os
import time

import numpy as np

from winforge import (
    GeneratorSpec,
    InitSpec,
    MeanFieldLayer,
    Network,
    ProbeConfig,
    TrainConfig,
    WinConfig,
    build_hybrid,
    chain_arch,
    discrepancy,
    gen_dataset,
    hybrid_scan,
    init_network,
    insert_linear_pairs,
    layer_lipschitz_gap,
    load_model,
    network_forward,
    network_forward_batch,
    network_backward,
    rmse,
    save_model,
    sgd_train,
    subsample_init,
    win_run,
)
from winforge.merge import batch_relative_deviation, merge_pass
from winforge.net import LinearMap
from winforge.persist import sha256_file
from winforge.seeds import derive_cell_seed, derive_int, rng_for
from winforge.sweep import SweepConfig, run_sweep
from winforge.train import Uniform

from helpers import fd_param_grad, fd_check, flatten_params

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_cfg(*parts):
    with open(os.path.join(ROOT, *parts), encoding="utf-8") as fh:
        return json.load(fh)


def report(num, name, ok, detail):
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")


def ols_slope(xs, ys):
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    lx = lx - lx.mean()
    return float(lx @ (ly - ly.mean()) / (lx @ lx))


def test_criterion_01_gradient_oracle():
    t0 = time.time()
    rng = np.random.default_rng(101)
    pairs = 0
    worst = 0.0
    while pairs < 100:
        for act in ("tanh", "sigmoid"):
            n_blocks = int(rng.integers(1, 6))
            d = int(rng.integers(2, 9))
            m = int(rng.integers(1, 33))
            arch = chain_arch(n_blocks, m, d, activation=act)
            net = init_network(arch, InitSpec(Uniform(-1, 1)),
                               seed=int(rng.integers(0, 2**31)))
            x = rng.uniform(-1, 1, d)
            _, cache = network_forward(net, x)
            grads = network_backward(net, cache, np.ones(1))
            analytic = np.concatenate(
                [np.concatenate([g[0].ravel(), g[1].ravel()]) for g in grads]
            )
            n_params = analytic.size
            idx = rng.choice(n_params, size=min(60, n_params), replace=False)
            fd = fd_param_grad(net, x, indices=idx, h=1e-5)
            worst = max(worst, fd_check(analytic[idx], fd, rtol=1e-6, atol=1e-9))
            pairs += 1
    elapsed = time.time() - t0
    ok = worst <= 1.0 and elapsed < 30
    report(1, "gradient oracle", ok,
           f"{pairs} pairs, worst violation ratio {worst:.3f} (<=1), {elapsed:.1f}s (<30s)")
    assert worst <= 1.0
    assert elapsed < 30


def test_criterion_02_merge_exactness():
    t0 = time.time()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        thin = init_network(chain_arch(3, 8, 6), InitSpec(Uniform(-1, 1)), seed)
        sbar = insert_linear_pairs(thin, 10, "identity")
        blocks = [
            LinearMap(b.a + 0.25 * rng.uniform(-1, 1, b.a.shape))
            if isinstance(b, LinearMap) else b
            for b in sbar.blocks
        ]
        sbar = Network(blocks, "tanh")
        merged, _ = merge_pass(sbar)
        X = rng.uniform(-1, 1, (1000, 6))
        ya, _ = network_forward_batch(sbar, X)
        yb, _ = network_forward_batch(merged, X)
        worst = max(worst, batch_relative_deviation(ya, yb))
        again, plan2 = merge_pass(merged)
        assert plan2.steps == []
        for a, b in zip(again.blocks, merged.blocks):
            assert np.array_equal(a.theta0, b.theta0)
            assert np.array_equal(a.theta1, b.theta1)
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 30
    report(2, "merge exactness", ok,
           f"20 networks x 1000 inputs, worst deviation {worst:.2e} (<=1e-10), "
           f"idempotent, {elapsed:.1f}s (<30s)")
    assert worst <= 1e-10
    assert elapsed < 30


def _scan_suite():
    """Seeded scans covering theory and practical layouts."""
    out = []
    for seed in range(10):
        rng_seed = 2000 + seed
        teacher = init_network(chain_arch(4, 64, 6), InitSpec(Uniform(-1, 1)), rng_seed)
        student = Network(
            [subsample_init(b, 8, "with_replacement", rng_seed * 7 + i)
             for i, b in enumerate(teacher.blocks)],
            "tanh",
        )
        xs = rng_for(rng_seed, "eval").uniform(-1, 1, (128, 6))
        out.append(hybrid_scan(teacher, student, xs))
    for seed in range(4):
        thin = init_network(chain_arch(3, 6, 5), InitSpec(Uniform(-1, 1)), 3000 + seed)
        sbar = insert_linear_pairs(thin, 5, "identity")
        teacher = init_network(chain_arch(3, 48, 5), InitSpec(Uniform(-1, 1)), 4000 + seed)
        xs = rng_for(3000 + seed, "eval").uniform(-1, 1, (128, 5))
        out.append(hybrid_scan(teacher, sbar, xs))
    return out


def test_criterion_03_telescoping():
    t0 = time.time()
    scans = _scan_suite()
    worst_violation = max(s.total - sum(s.terms) for s in scans)
    teacher = init_network(chain_arch(4, 32, 6), InitSpec(Uniform(-1, 1)), 5000)
    xs = rng_for(5000, "eval").uniform(-1, 1, (128, 6))
    copy_scan = hybrid_scan(teacher, teacher.copy(), xs)
    zeros_exact = all(t == 0.0 for t in copy_scan.terms) and copy_scan.total == 0.0
    elapsed = time.time() - t0
    ok = worst_violation <= 1e-9 and zeros_exact and elapsed < 60
    report(3, "telescoping invariant", ok,
           f"{len(scans)} scans, worst total-minus-sum {worst_violation:.2e} (<=1e-9), "
           f"copy-student terms all exactly 0: {zeros_exact}, {elapsed:.1f}s (<1min)")
    assert worst_violation <= 1e-9
    assert zeros_exact
    assert elapsed < 60


def test_criterion_04_per_term_amplification():
    scans = _scan_suite()
    assert len(scans) >= 10
    worst = -np.inf
    for s in scans:
        for term, amp, handoff in zip(s.terms, s.amplification, s.handoffs):
            worst = max(worst, term - (amp * handoff + 1e-9))
    ok = worst <= 0.0
    report(4, "per-term amplification bound", ok,
           f"{len(scans)} scans, worst term-minus-bound {worst:.2e} (<=0)")
    assert worst <= 0.0


def test_criterion_05_subsampling_concentration():
    t0 = time.time()
    cfg = load_cfg("configs", "subsample_concentration.json")
    master = cfg["master_seed"]
    init = InitSpec.from_dict(cfg["init"])
    tcfg = TrainConfig.from_dict(cfg["teacher_train"])
    spec = GeneratorSpec.from_dict(dict(cfg["data"], seed=derive_int(master, "data")))
    train, test = gen_dataset(spec)
    arch = chain_arch(cfg["n"], cfg["wide_m"], cfg["d"])
    teachers = []
    for s in range(cfg["seeds"]):
        t0net = init_network(arch, init, derive_int(master, "teacher", s))
        teacher, _ = sgd_train(
            t0net, train.xs, train.ys, tcfg.with_(seed=derive_int(master, "tt", s))
        )
        teachers.append(teacher)
    means = []
    for m in cfg["ms"]:
        vals = []
        for s, teacher in enumerate(teachers):
            sub = subsample_init(
                teacher.blocks[0], m, cfg["subsample"], derive_int(master, "sub", m, s)
            )
            student = Network([sub] + teacher.blocks[1:], teacher.activation)
            vals.append(discrepancy(build_hybrid(teacher, student, 1), teacher, test.xs))
        means.append(float(np.mean(vals)))
    slope = ols_slope(cfg["ms"], means)
    lo, hi = cfg["slope_range"]
    elapsed = time.time() - t0
    ok = lo <= slope <= hi and elapsed < 300
    report(5, "subsampling concentration", ok,
           f"M={cfg['wide_m']}, m={cfg['ms']}, {cfg['seeds']} seeds: "
           f"log-log slope {slope:.3f} in [{lo},{hi}], {elapsed:.0f}s (<5min)")
    assert lo <= slope <= hi
    assert elapsed < 300


def test_criterion_06_width_scaling_bound(tmp_path):
    t0 = time.time()
    cfg = SweepConfig.from_dict(load_cfg("grids", "theory_scaling.json"))
    assert cfg.seeds >= 10 and set(cfg.ns) == {2, 4, 8} and set(cfg.ms) == {16, 64, 256}
    assert cfg.widen_factor == 32
    result = run_sweep(cfg, str(tmp_path / "grid"), threads=1)
    assert not result["failures"]
    rep = result["report"]
    elapsed = time.time() - t0
    ok = -0.65 <= rep.width_slope <= -0.35 and rep.depth_slope <= 1.3 and elapsed < 1200
    report(6, "width scaling of the bound", ok,
           f"width slope {rep.width_slope:.3f} in [-0.65,-0.35], "
           f"depth slope {rep.depth_slope:.3f} <= 1.3, {elapsed:.0f}s (<20min)")
    assert -0.65 <= rep.width_slope <= -0.35
    assert rep.depth_slope <= 1.3
    assert elapsed < 1200


def test_criterion_07_curse_of_depth_proxy():
    t0 = time.time()
    cfg = load_cfg("configs", "depth_proxy.json")
    master = cfg["master_seed"]
    win_cfg = WinConfig.from_dict(cfg["win"])
    scratch_cfg = TrainConfig.from_dict(cfg["scratch"])
    med_scratch, med_win = {}, {}
    for n in cfg["depths"]:
        ds, dw = [], []
        for s in range(cfg["seeds"]):
            cell = derive_cell_seed(master, s)
            spec = GeneratorSpec.from_dict(dict(cfg["data"], seed=derive_int(cell, "data")))
            train, test = gen_dataset(spec)
            thin = chain_arch(n, cfg["m"], cfg["d"])
            arts = win_run(thin, train, win_cfg, derive_int(cell, "win", n))
            net0 = init_network(thin, win_cfg.init, derive_int(cell, "scratch-init", n))
            scratch, _ = sgd_train(
                net0, train.xs, train.ys,
                scratch_cfg.with_(seed=derive_int(cell, "scratch-train", n)),
            )
            ds.append(discrepancy(scratch, arts.teacher, test.xs))
            dw.append(discrepancy(arts.merged, arts.teacher, test.xs))
        med_scratch[n] = float(np.median(ds))
        med_win[n] = float(np.median(dw))
    depths = cfg["depths"]
    mono = all(med_scratch[a] <= med_scratch[b] for a, b in zip(depths, depths[1:]))
    s_slope = ols_slope(depths, [med_scratch[n] for n in depths])
    w_slope = ols_slope(depths, [med_win[n] for n in depths])
    elapsed = time.time() - t0
    ok = mono and w_slope < s_slope and elapsed < 1800
    report(7, "curse-of-depth proxy", ok,
           f"scratch medians {[round(med_scratch[n], 4) for n in depths]} non-decreasing: {mono}; "
           f"win slope {w_slope:.3f} < scratch slope {s_slope:.3f}, {elapsed:.0f}s (<30min)")
    assert mono
    assert w_slope < s_slope
    assert elapsed < 1800


def test_criterion_08_win_vs_scratch():
    t0 = time.time()
    cfg = load_cfg("configs", "desk_default.json")
    arch = cfg["arch"]
    assert (arch["n"], arch["m"], arch["d"]) == (8, 16, 8)
    win_cfg = WinConfig.from_dict(cfg["win"])
    assert win_cfg.widen_factor == 32
    scratch_cfg = TrainConfig.from_dict(cfg["comparison"]["scratch"])
    imitation_total = sum(win_cfg.imitation_steps(i) for i in range(1, arch["n"]))
    win_total = win_cfg.teacher_train.steps + imitation_total + win_cfg.finetune.steps
    assert scratch_cfg.steps == win_total  # matched total gradient-step budget
    seeds = cfg["comparison"]["seeds"]
    assert seeds >= 9
    master = cfg["seed"]
    rw, rs = [], []
    for s in range(seeds):
        cell = derive_cell_seed(master, s)
        spec = GeneratorSpec.from_dict(dict(cfg["data"], seed=derive_int(cell, "data")))
        train, test = gen_dataset(spec)
        thin = chain_arch(arch["n"], arch["m"], arch["d"])
        arts = win_run(thin, train, win_cfg, derive_int(cell, "win"))
        net0 = init_network(thin, win_cfg.init, derive_int(cell, "scratch-init"))
        scratch, _ = sgd_train(
            net0, train.xs, train.ys,
            scratch_cfg.with_(seed=derive_int(cell, "scratch-train")),
        )
        rw.append(rmse(arts.merged, test.xs, test.ys))
        rs.append(rmse(scratch, test.xs, test.ys))
    med_w, med_s = float(np.median(rw)), float(np.median(rs))
    elapsed = time.time() - t0
    ok = med_w <= med_s and elapsed < 900
    report(8, "WIN vs scratch", ok,
           f"median test RMSE win {med_w:.4f} <= scratch {med_s:.4f} "
           f"({seeds} seeds, budget {win_total}), {elapsed:.0f}s (<15min)")
    assert med_w <= med_s
    assert elapsed < 900


def test_criterion_09_lipschitz_preservation():
    cfg = load_cfg("configs", "lipschitz_preservation.json")
    master = cfg["master_seed"]
    d = cfg["d"]
    probes = rng_for(master, "probe").uniform(
        -cfg["probe_radius"], cfg["probe_radius"], (cfg["n_probes"], d)
    )
    medians = []
    for m in cfg["ms"]:
        gaps = []
        for s in range(cfg["seeds"]):
            rng = rng_for(master, "layer", s)
            w = cfg["weight_scale"]
            wide = MeanFieldLayer(
                rng.uniform(0, w, (cfg["wide_m"], d)), rng.uniform(0, w, (cfg["wide_m"], d))
            )
            thin = subsample_init(wide, m, "with_replacement", derive_int(master, "sub", m, s))
            gaps.append(layer_lipschitz_gap(wide, thin, probes, "tanh", ProbeConfig(seed=master)))
        medians.append(float(np.median(gaps)))
    dec = all(a > b for a, b in zip(medians, medians[1:]))
    report(9, "Lipschitz preservation", dec,
           f"M={cfg['wide_m']}, m={cfg['ms']}, {cfg['seeds']} seeds: "
           f"median gaps {[round(v, 5) for v in medians]} strictly decreasing: {dec}")
    assert dec


def test_criterion_10_determinism_and_persistence(tmp_path):
    t0 = time.time()
    from winforge.cli import cli_dispatch

    cfg_path = tmp_path / "win.json"
    cfg_path.write_text(json.dumps({
        "arch": {"n": 3, "m": 8, "d": 4},
        "win": {
            "widen_factor": 4,
            "mode": "theory",
            "init": {"distribution": {"kind": "uniform", "lo": 0.0, "hi": 0.6}},
            "teacher_train": {"steps": 60, "eta": 3.2, "batch_size": 16},
            "finetune": {"steps": 40, "eta": 1.6, "batch_size": 16},
        },
        "data": {"kind": "teacher_net", "n_train": 64, "n_test": 64, "c": 2.0},
    }))
    dirs = [str(tmp_path / "a"), str(tmp_path / "b")]
    for out in dirs:
        code = cli_dispatch(["win", "--config", str(cfg_path), "--seed", "7",
                             "--threads", "1", "--out", out])
        assert code == 0
    files = ["teacher.json", "warmed.json", "merged.json", "metrics.json",
             "teacher_trace.csv", "finetune_trace.csv", "events.jsonl",
             "merge_plan.json", "train.wfd", "test.wfd"]
    identical = all(
        sha256_file(os.path.join(dirs[0], f)) == sha256_file(os.path.join(dirs[1], f))
        for f in files
    )

    net = load_model(os.path.join(dirs[0], "merged.json"))
    probes = rng_for(99, "probes").uniform(-1, 1, (100, 4))
    y0, _ = network_forward_batch(net, probes)
    round_trips_ok = True
    for ext in ("json", "wfm"):
        p = tmp_path / f"rt.{ext}"
        save_model(net, p)
        back = load_model(p)
        yb, _ = network_forward_batch(back, probes)
        round_trips_ok = round_trips_ok and np.array_equal(y0, yb)
    elapsed = time.time() - t0
    ok = identical and round_trips_ok and elapsed < 60
    report(10, "determinism and persistence", ok,
           f"two identical runs bit-identical over {len(files)} files: {identical}; "
           f"save/load output-bit-identical on 100 probes: {round_trips_ok}; "
           f"{elapsed:.1f}s (<1min)")
    assert identical
    assert round_trips_ok
    assert elapsed < 60
