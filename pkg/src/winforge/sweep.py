"""Grid sweeps over (depth, width, seed) cells.

Each cell is an isolated, fully specified job seeded by a pure function of
(master seed, cell index); completed cells are detected through their
manifest hashes and skipped on resume. Cells run in a process pool when
threads > 1 but are internally single-threaded for reproducibility.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from multiprocessing import get_context

from .data import GeneratorSpec, gen_dataset, save_dataset
from .errors import ConfigError, ManifestError
from .metrics import (
    ProbeConfig,
    bound_report,
    discrepancy,
    rmse,
    suffix_lipschitz_report,
)
from .persist import (
    atomic_write_text,
    config_hash,
    report_to_csv,
    save_model,
    verify_manifest,
    write_manifest,
)
from .pipeline import WinConfig, win_run
from .seeds import derive_cell_seed, derive_int
from .train import chain_arch, init_network, sgd_train

CELL_METRIC_COLUMNS = (
    "index", "n", "m", "M", "seed_index", "cell_seed",
    "d_win", "ell_hat", "rmse_teacher", "rmse_win", "d_scratch", "rmse_scratch",
)


@dataclass(frozen=True)
class SweepConfig:
    master_seed: int = 0
    ns: tuple = (2, 4, 8)
    ms: tuple = (16, 64, 256)
    seeds: int = 10
    d: int = 8
    activation: str = "tanh"
    widen_factor: int = 32               # M = widen_factor * m
    win: WinConfig = WinConfig()
    data: dict = field(default_factory=dict)       # GeneratorSpec fields sans d/seed
    eta_per_neuron: float | None = None  # width-matched step sizes when set
    scratch: bool = False                # also train a thin net from scratch
    scratch_steps: int | None = None     # None = matched total budget
    n_eval: int = 512
    probe: ProbeConfig = ProbeConfig()
    binary_models: bool = False

    def validate(self):
        if not self.ns or not self.ms or self.seeds < 1:
            raise ConfigError("grid must have n values, m values, and seeds >= 1")
        if self.widen_factor < 1:
            raise ConfigError("widen_factor must be >= 1")
        self.win.validate()

    def cells(self) -> list[dict]:
        """Expansion order is (n, m, seed_index), row-major as configured."""
        cells = []
        index = 0
        for n in self.ns:
            for m in self.ms:
                for s in range(self.seeds):
                    cells.append({
                        "index": index,
                        "n": int(n),
                        "m": int(m),
                        "M": int(self.widen_factor * m),
                        "seed_index": s,
                        "cell_seed": derive_cell_seed(self.master_seed, index),
                    })
                    index += 1
        return cells

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "ns": list(self.ns),
            "ms": list(self.ms),
            "seeds": self.seeds,
            "d": self.d,
            "activation": self.activation,
            "widen_factor": self.widen_factor,
            "win": self.win.to_dict(),
            "data": dict(self.data),
            "eta_per_neuron": self.eta_per_neuron,
            "scratch": self.scratch,
            "scratch_steps": self.scratch_steps,
            "n_eval": self.n_eval,
            "probe": {
                "n_pairs": self.probe.n_pairs,
                "n_local_points": self.probe.n_local_points,
                "n_local_dirs": self.probe.n_local_dirs,
                "include_axes": self.probe.include_axes,
                "delta": self.probe.delta,
                "seed": self.probe.seed,
            },
            "binary_models": self.binary_models,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        if "win" in d:
            d["win"] = WinConfig.from_dict(d["win"])
        if "probe" in d:
            d["probe"] = ProbeConfig(**d["probe"])
        for key in ("ns", "ms"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown SweepConfig fields: {sorted(extra)}")
        return cls(**d)


def _cell_win_config(cfg: SweepConfig, m: int, M: int) -> WinConfig:
    win = cfg.win.with_(widen_factor=cfg.widen_factor)
    if cfg.eta_per_neuron is not None:
        epn = cfg.eta_per_neuron
        win = win.with_(
            teacher_train=win.teacher_train.with_(eta=epn * M),
            imitate_train=win.imitate_train.with_(eta=epn * m),
            finetune=win.finetune.with_(eta=epn * m),
        )
    return win


def matched_scratch_steps(cfg: SweepConfig, n: int) -> int:
    """Total gradient-step budget of one win run on an n-layer net."""
    steps = cfg.win.teacher_train.steps + cfg.win.finetune.steps
    if cfg.win.mode == "practical" or cfg.win.theory_imitate:
        steps += sum(cfg.win.imitation_steps(i) for i in range(1, n))
    return steps


def run_cell(cfg: SweepConfig, cell: dict, out_dir: str) -> dict:
    """Run one grid cell and write its artifacts; returns the metrics row."""
    n, m, M = cell["n"], cell["m"], cell["M"]
    cell_seed = cell["cell_seed"]
    os.makedirs(out_dir, exist_ok=True)

    spec = GeneratorSpec.from_dict(
        dict(cfg.data, d=cfg.d, seed=derive_int(cell_seed, "data"))
    )
    train_ds, test_ds = gen_dataset(spec)
    thin = chain_arch(n, m, cfg.d, activation=cfg.activation)
    win_cfg = _cell_win_config(cfg, m, M)
    arts = win_run(thin, train_ds, win_cfg, derive_int(cell_seed, "win"))

    lip = suffix_lipschitz_report(
        arts.teacher, test_ds.xs[: cfg.n_eval], cfg.probe,
        provenance={"n": n, "m": m, "M": M, "seed": cell["seed_index"]},
    )
    row = {
        "index": cell["index"],
        "n": n,
        "m": m,
        "M": M,
        "seed_index": cell["seed_index"],
        "cell_seed": cell_seed,
        "d_win": discrepancy(arts.merged, arts.teacher, test_ds.xs[: cfg.n_eval]),
        "ell_hat": lip.ell_max,
        "rmse_teacher": rmse(arts.teacher, test_ds.xs, test_ds.ys),
        "rmse_win": rmse(arts.merged, test_ds.xs, test_ds.ys),
        "d_scratch": "",
        "rmse_scratch": "",
    }

    ext = ".wfm" if cfg.binary_models else ".json"
    artifacts = {}
    prov = {"seed": cell_seed, "config_hash": config_hash(cfg.to_dict())}
    save_model(arts.teacher, os.path.join(out_dir, "teacher" + ext), prov)
    artifacts["teacher"] = "teacher" + ext
    save_model(arts.merged, os.path.join(out_dir, "merged" + ext), prov)
    artifacts["merged"] = "merged" + ext

    if cfg.scratch:
        steps = cfg.scratch_steps
        if steps is None:
            steps = matched_scratch_steps(cfg, n)
        eta = cfg.win.finetune.eta
        if cfg.eta_per_neuron is not None:
            eta = cfg.eta_per_neuron * m
        scfg = cfg.win.teacher_train.with_(
            steps=steps, eta=eta, seed=derive_int(cell_seed, "scratch-train")
        )
        net0 = init_network(thin, cfg.win.init, derive_int(cell_seed, "scratch-init"))
        scratch_net, _ = sgd_train(net0, train_ds.xs, train_ds.ys, scfg)
        row["d_scratch"] = discrepancy(scratch_net, arts.teacher, test_ds.xs[: cfg.n_eval])
        row["rmse_scratch"] = rmse(scratch_net, test_ds.xs, test_ds.ys)
        save_model(scratch_net, os.path.join(out_dir, "scratch" + ext), prov)
        artifacts["scratch"] = "scratch" + ext

    save_dataset(test_ds, os.path.join(out_dir, "test.wfd"))
    artifacts["test_data"] = "test.wfd"
    atomic_write_text(
        os.path.join(out_dir, "metrics.json"), json.dumps(row, sort_keys=True) + "\n"
    )
    artifacts["metrics"] = "metrics.json"
    write_manifest(
        os.path.join(out_dir, "manifest.json"),
        master_seed=cell_seed,
        config=dict(cell=cell, sweep=cfg.to_dict()),
        artifacts=artifacts,
    )
    return row


def _cell_is_complete(out_dir: str) -> bool:
    manifest = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(manifest):
        return False
    try:
        verify_manifest(manifest)
    except ManifestError:
        return False
    return True


def _cell_dir(root: str, cell: dict) -> str:
    return os.path.join(
        root, "cells",
        f"n{cell['n']}_m{cell['m']}_s{cell['seed_index']:03d}",
    )


def _run_cell_entry(args):
    cfg_dict, cell, out_dir = args
    cfg = SweepConfig.from_dict(cfg_dict)
    try:
        return run_cell(cfg, cell, out_dir), None
    except Exception as e:
        return None, f"{type(e).__name__}: {e}"


def run_sweep(cfg: SweepConfig, out_root: str, threads: int = 1) -> dict:
    """Run all cells (skipping verified-complete ones), then aggregate.

    Writes cells.csv plus, when the grid supports it, the fitted scaling
    report as bound_report.csv / bound_report.json. Returns a summary dict
    with rows, failures, and the report (or None).
    """
    cfg.validate()
    os.makedirs(out_root, exist_ok=True)
    cells = cfg.cells()
    pending = []
    rows: dict[int, dict] = {}
    failures: list = []
    for cell in cells:
        cdir = _cell_dir(out_root, cell)
        if _cell_is_complete(cdir):
            with open(os.path.join(cdir, "metrics.json"), encoding="utf-8") as fh:
                rows[cell["index"]] = json.load(fh)
        else:
            pending.append((cfg.to_dict(), cell, cdir))

    if pending:
        if threads > 1:
            with get_context("spawn").Pool(threads) as pool:
                results = pool.map(_run_cell_entry, pending)
        else:
            results = [_run_cell_entry(p) for p in pending]
        for (cfg_dict, cell, cdir), (row, err) in zip(pending, results):
            if err is not None:
                failures.append({"index": cell["index"], "error": err})
            else:
                rows[cell["index"]] = row

    from .persist import csv_cell

    ordered = [rows[i] for i in sorted(rows)]
    lines = [",".join(CELL_METRIC_COLUMNS)]
    for row in ordered:
        lines.append(",".join(csv_cell(row[c]) for c in CELL_METRIC_COLUMNS))
    atomic_write_text(os.path.join(out_root, "cells.csv"), "\n".join(lines) + "\n")

    report = None
    if len(set(cfg.ns)) >= 3 and len(set(cfg.ms)) >= 3 and not failures:
        report = bound_report([
            {"n": r["n"], "m": r["m"], "M": r["M"], "seed": r["seed_index"],
             "d": r["d_win"], "ell": r["ell_hat"]}
            for r in ordered
        ])
        atomic_write_text(os.path.join(out_root, "bound_report.csv"), report_to_csv(report))
        atomic_write_text(
            os.path.join(out_root, "bound_report.json"),
            json.dumps(report.to_json_dict(), sort_keys=True) + "\n",
        )
    summary = {"cells": len(cells), "completed": len(ordered), "failures": failures}
    atomic_write_text(
        os.path.join(out_root, "sweep_summary.json"),
        json.dumps(summary, sort_keys=True) + "\n",
    )
    return {"rows": ordered, "failures": failures, "report": report, "summary": summary}
