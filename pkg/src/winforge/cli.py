"""Command-line front end.

Subcommands cover the whole pipeline: gen-data, train-teacher, win,
scratch, eval, hybrid-scan, lipschitz, sweep, verify. Configuration is
JSON; --seed and --out override the config. The WINFORGE_OUT environment
variable, when set, overrides --out. Failures print a machine-readable
JSON object on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import GeneratorSpec, gen_dataset, load_dataset, save_dataset
from .errors import ConfigError, WinforgeError
from .metrics import (
    ProbeConfig,
    discrepancy,
    hybrid_scan,
    rmse,
    suffix_lipschitz_report,
)
from .persist import (
    atomic_write_text,
    config_hash,
    load_model,
    save_model,
    verify_manifest,
    write_manifest,
    write_report,
)
from .pipeline import WinConfig, win_run
from .seeds import derive_int
from .sweep import SweepConfig, run_sweep
from .train import InitSpec, TrainConfig, chain_arch, init_network, sgd_train


class EventLog:
    """Line-delimited JSON event sink (no timestamps: outputs stay
    deterministic for deterministic runs)."""

    def __init__(self):
        self.events = []

    def emit(self, event: str, **fields):
        self.events.append({"event": event, **fields})

    def dump(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def _resolve_out(args) -> str:
    out = os.environ.get("WINFORGE_OUT") or getattr(args, "out", None)
    if not out:
        raise ConfigError("no output directory: pass --out or set WINFORGE_OUT")
    return out


def _arch_from_config(cfg: dict):
    arch = cfg.get("arch")
    if not arch:
        raise ConfigError("config needs an 'arch' object with n, m, d")
    return chain_arch(
        int(arch["n"]), int(arch["m"]), int(arch["d"]),
        hidden=arch.get("hidden"),
        activation=arch.get("activation", "tanh"),
    )


def _data_from_config(cfg: dict, seed: int, d: int | None = None):
    """Dataset pair from a generator spec or from explicit file paths."""
    data = cfg.get("data", {})
    if "train_path" in data:
        train = load_dataset(data["train_path"])
        test = load_dataset(data["test_path"]) if "test_path" in data else train
        return train, test
    fields = {k: v for k, v in data.items() if k != "seed"}
    if d is not None:
        fields.setdefault("d", d)
        if fields["d"] != d:
            raise ConfigError(f"data d={fields['d']} conflicts with arch d={d}")
    spec = GeneratorSpec.from_dict(dict(fields, seed=data.get("seed", derive_int(seed, "data"))))
    return gen_dataset(spec)


def _probe_from_config(cfg: dict) -> ProbeConfig:
    return ProbeConfig(**cfg.get("probe", {}))


# --------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = _resolve_out(args)
    spec_fields = dict(cfg.get("data", cfg))
    if args.seed is not None:
        spec_fields["seed"] = args.seed
    spec = GeneratorSpec.from_dict(spec_fields)
    train, test = gen_dataset(spec)
    os.makedirs(out, exist_ok=True)
    ext = ".csv" if cfg.get("text", False) else ".wfd"
    save_dataset(train, os.path.join(out, "train" + ext))
    save_dataset(test, os.path.join(out, "test" + ext))
    write_manifest(
        os.path.join(out, "manifest.json"),
        master_seed=spec.seed,
        config=spec.to_dict(),
        artifacts={"train": "train" + ext, "test": "test" + ext},
    )
    print(json.dumps({"out": out, "n_train": train.n, "n_test": test.n}))
    return 0


def _train_once(cfg: dict, args, task: str) -> int:
    out = _resolve_out(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    arch = _arch_from_config(cfg)
    train_ds, test_ds = _data_from_config(cfg, seed, d=arch.input_dim)
    init = InitSpec.from_dict(cfg.get("init", {}))
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    net0 = init_network(arch, init, derive_int(seed, task + "-init"))
    net, trace = sgd_train(
        net0, train_ds.xs, train_ds.ys,
        tcfg.with_(seed=derive_int(seed, task + "-train")),
    )
    os.makedirs(out, exist_ok=True)
    ext = ".wfm" if cfg.get("binary_models") else ".json"
    prov = {"seed": seed, "config_hash": config_hash(cfg)}
    save_model(net, os.path.join(out, "model" + ext), prov)
    atomic_write_text(os.path.join(out, "trace.csv"), trace.to_csv())
    metrics = {
        "final_train_loss": trace.final_loss,
        "rmse_train": rmse(net, train_ds.xs, train_ds.ys),
        "rmse_test": rmse(net, test_ds.xs, test_ds.ys),
        "seed": seed,
    }
    atomic_write_text(
        os.path.join(out, "metrics.json"), json.dumps(metrics, sort_keys=True) + "\n"
    )
    write_manifest(
        os.path.join(out, "manifest.json"),
        master_seed=seed,
        config=cfg,
        artifacts={"model": "model" + ext, "trace": "trace.csv", "metrics": "metrics.json"},
    )
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _load_config(args.config)
    # teacher = the widened architecture trained on the task
    from .pipeline import widen_spec

    win_cfg = WinConfig.from_dict(cfg.get("win", {}))
    thin = _arch_from_config(cfg)
    wide = widen_spec(thin, win_cfg)
    sub = dict(cfg)
    sub["arch"] = {
        "n": wide.n_layers,
        "m": wide.layers[0].m,
        "d": wide.input_dim,
        "hidden": wide.layers[0].d_out if wide.n_layers > 1 else None,
        "activation": wide.activation,
    }
    sub.setdefault("train", win_cfg.teacher_train.to_dict())
    sub.setdefault("init", win_cfg.init.to_dict())
    return _train_once(sub, args, "teacher")


def _cmd_scratch(args) -> int:
    cfg = _load_config(args.config)
    return _train_once(cfg, args, "scratch")


def _cmd_win(args) -> int:
    cfg = _load_config(args.config)
    out = _resolve_out(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    thin = _arch_from_config(cfg)
    win_cfg = WinConfig.from_dict(cfg.get("win", {}))
    train_ds, test_ds = _data_from_config(cfg, seed, d=thin.input_dim)
    events = EventLog()
    arts = win_run(thin, train_ds, win_cfg, seed, events=events)

    os.makedirs(out, exist_ok=True)
    ext = ".wfm" if cfg.get("binary_models") else ".json"
    prov = {"seed": seed, "config_hash": config_hash(cfg)}
    artifacts = {}
    for name, net in (("teacher", arts.teacher), ("warmed", arts.warmed), ("merged", arts.merged)):
        save_model(net, os.path.join(out, name + ext), prov)
        artifacts[name] = name + ext
    atomic_write_text(os.path.join(out, "teacher_trace.csv"), arts.teacher_trace.to_csv())
    artifacts["teacher_trace"] = "teacher_trace.csv"
    if arts.finetune_trace is not None:
        atomic_write_text(os.path.join(out, "finetune_trace.csv"), arts.finetune_trace.to_csv())
        artifacts["finetune_trace"] = "finetune_trace.csv"
    atomic_write_text(os.path.join(out, "merge_plan.json"), arts.merge_plan.to_json() + "\n")
    artifacts["merge_plan"] = "merge_plan.json"
    save_dataset(train_ds, os.path.join(out, "train.wfd"))
    save_dataset(test_ds, os.path.join(out, "test.wfd"))
    artifacts["train_data"] = "train.wfd"
    artifacts["test_data"] = "test.wfd"

    metrics = {
        "seed": seed,
        "teacher_final_loss": arts.teacher_trace.final_loss,
        "imitation_losses": arts.imitation_losses,
        "rmse_teacher": rmse(arts.teacher, test_ds.xs, test_ds.ys),
        "rmse_merged": rmse(arts.merged, test_ds.xs, test_ds.ys),
        "d_merged_teacher": discrepancy(arts.merged, arts.teacher, test_ds.xs),
    }
    atomic_write_text(
        os.path.join(out, "metrics.json"), json.dumps(metrics, sort_keys=True) + "\n"
    )
    artifacts["metrics"] = "metrics.json"
    atomic_write_text(os.path.join(out, "events.jsonl"), events.dump())
    artifacts["events"] = "events.jsonl"
    write_manifest(
        os.path.join(out, "manifest.json"),
        master_seed=seed, config=cfg, artifacts=artifacts,
    )
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    net = load_model(args.model)
    ds = load_dataset(args.data)
    result = {"rmse": rmse(net, ds.xs, ds.ys)}
    if args.against:
        other = load_model(args.against)
        result["d"] = discrepancy(net, other, ds.xs)
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_hybrid_scan(args) -> int:
    teacher = load_model(args.teacher)
    student = load_model(args.student)
    ds = load_dataset(args.data)
    scan = hybrid_scan(teacher, student, ds.xs)
    if args.out or os.environ.get("WINFORGE_OUT"):
        out = _resolve_out(args)
        os.makedirs(out, exist_ok=True)
        write_report(scan, os.path.join(out, "hybrid_scan.csv"), "csv")
        write_report(scan, os.path.join(out, "hybrid_scan.json"), "json")
    print(json.dumps(scan.to_json_dict(), sort_keys=True))
    return 0


def _cmd_lipschitz(args) -> int:
    cfg = _load_config(args.config)
    net = load_model(args.model)
    ds = load_dataset(args.data)
    report = suffix_lipschitz_report(net, ds.xs, _probe_from_config(cfg))
    if args.out or os.environ.get("WINFORGE_OUT"):
        out = _resolve_out(args)
        os.makedirs(out, exist_ok=True)
        write_report(report, os.path.join(out, "lipschitz.csv"), "csv")
        write_report(report, os.path.join(out, "lipschitz.json"), "json")
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    cfg_dict = _load_config(args.config)
    out = os.environ.get("WINFORGE_OUT") or args.out or cfg_dict.pop("out", None)
    if not out:
        raise ConfigError("no output directory: pass --out, set WINFORGE_OUT, "
                          "or put 'out' in the sweep config")
    cfg_dict.pop("out", None)
    if args.seed is not None:
        cfg_dict["master_seed"] = args.seed
    cfg = SweepConfig.from_dict(cfg_dict)
    result = run_sweep(cfg, out, threads=args.threads)
    print(json.dumps(result["summary"], sort_keys=True))
    return 1 if result["failures"] else 0


def _cmd_verify(args) -> int:
    doc = verify_manifest(args.manifest)
    print(json.dumps({"ok": True, "artifacts": sorted(doc.get("artifacts", {}))}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="winforge",
        description="Wide-then-narrow training and bound verification for "
                    "mean-field networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate a seeded train/test dataset pair")
    common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the widened teacher on the task")
    common(p)
    p.set_defaults(fn=_cmd_train_teacher)

    p = sub.add_parser("win", help="run the full wide-then-narrow pipeline")
    common(p)
    p.set_defaults(fn=_cmd_win)

    p = sub.add_parser("scratch", help="train the thin network directly (baseline)")
    common(p)
    p.set_defaults(fn=_cmd_scratch)

    p = sub.add_parser("eval", help="report RMSE (and discrepancy vs --against)")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--against", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("hybrid-scan", help="telescoping discrepancy scan")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_hybrid_scan)

    p = sub.add_parser("lipschitz", help="suffix Lipschitz estimates of a model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_lipschitz)

    p = sub.add_parser("sweep", help="run a (depth, width, seed) grid")
    common(p)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("verify", help="check a run manifest's content hashes")
    common(p, config=False)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_verify)

    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.fn(args)
    except WinforgeError as e:
        sys.stderr.write(json.dumps(
            {"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    except OSError as e:
        sys.stderr.write(json.dumps({"error": "OSError", "message": str(e)}) + "\n")
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
