"""Command-line front end: gen-data, pretrain, finetune, eval, report.

Exit codes: 0 success, 1 I/O or runtime failure, 2 configuration error,
3 leakage-guard abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .chansim import (
    ConfigError,
    ScenarioConfig,
    SuiteSpec,
    build_suite,
    derive_seed,
    generate_dataset,
    load_dataset,
)
from .evalbench import (
    CSV_COLUMNS,
    EvalReport,
    evaluate_baselines,
    evaluate_model,
    read_report,
    split_indices,
    write_report,
    zero_shot_eval,
    _fmt,
)
from .trainkit import FreezePolicy, LeakageError, TrainConfig, finetune, head_freeze_policy, pretrain
from .wifomodel import Checkpoint, ModelConfig

log = logging.getLogger("chanfm")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_LEAKAGE = 0, 1, 2, 3

# physical fields every scenario must state explicitly
PHYSICAL_FIELDS = ("T", "S", "F", "delta_t", "delta_f", "carrier_hz", "P", "tau_max", "speed_mps", "rician_k")
TOP_LEVEL_KEYS = {"seed", "suite", "model", "train", "finetune", "eval"}


@dataclass
class RunConfig:
    seed: int = 0
    suite: SuiteSpec | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000, lr=1e-3, lr_min=1e-4))
    freeze: FreezePolicy | None = None
    fusion: bool = False
    tasks: tuple = (("time", None), ("frequency", None))


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(where, "must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key in {where}")


def parse_suite(d: dict) -> SuiteSpec:
    _reject_unknown(d, {"seed", "n_samples", "configs"}, "suite")
    if not isinstance(d.get("configs"), list):
        raise ConfigError("configs", "suite needs a list of configs")
    for i, c in enumerate(d["configs"]):
        _reject_unknown(c, {"id", "held_out", "spacing_wl", *PHYSICAL_FIELDS}, f"configs[{i}]")
        missing = [k for k in PHYSICAL_FIELDS if k not in c]
        if missing:
            raise ConfigError(missing[0], f"configs[{i}] must state {missing[0]} explicitly")
    return SuiteSpec.from_dict(d)


def _dataclass_from(cls, d: dict, where: str, convert=None):
    _reject_unknown(d, {f.name for f in fields(cls)}, where)
    try:
        return convert(d) if convert else cls(**d)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(where, str(exc)) from None


def parse_run_config(d: dict) -> RunConfig:
    """Validate a config document; every unknown key is an error."""
    _reject_unknown(d, TOP_LEVEL_KEYS, "config")
    rc = RunConfig()
    if "seed" in d:
        rc.seed = int(d["seed"])
    if "suite" in d:
        rc.suite = parse_suite(d["suite"])
    if "model" in d:
        m = dict(d["model"])
        if "patch" in m:
            _reject_unknown(m["patch"], {"pt", "ps", "pf"}, "model.patch")
        rc.model = _dataclass_from(ModelConfig, m, "model", ModelConfig.from_dict)
    if "train" in d:
        rc.train = _dataclass_from(TrainConfig, d["train"], "train", TrainConfig.from_dict)
    if "finetune" in d:
        ft = d["finetune"]
        _reject_unknown(ft, {"train", "freeze", "fusion"}, "finetune")
        if "train" in ft:
            rc.finetune_train = _dataclass_from(TrainConfig, ft["train"], "finetune.train", TrainConfig.from_dict)
        if "freeze" in ft:
            rc.freeze = FreezePolicy(tuple(ft["freeze"]))
        rc.fusion = bool(ft.get("fusion", False))
    if "eval" in d:
        ev = d["eval"]
        _reject_unknown(ev, {"tasks"}, "eval")
        tasks = []
        for t in ev.get("tasks", []):
            kind, horizon = (t, None) if isinstance(t, str) else tuple(t)
            if kind not in ("time", "frequency"):
                raise ConfigError("eval.tasks", f"unknown task {kind!r}")
            tasks.append((kind, horizon))
        rc.tasks = tuple(tasks) or rc.tasks
    return rc


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc)


def _with_seed(rc: RunConfig, seed: int | None) -> RunConfig:
    if seed is not None:
        rc.seed = seed
    if rc.suite is not None:
        rc.suite.seed = rc.seed
    return rc


def _sub_seed(master: int, label: str) -> int:
    return derive_seed(master, label) >> 1


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> int:
    if rc.suite is None:
        raise ConfigError("suite", "gen-data needs a suite section")
    out = Path(args.out)
    configs = build_suite(rc.suite)
    out.mkdir(parents=True, exist_ok=True)
    for cfg in configs:
        manifest = generate_dataset(cfg, out / cfg.id)
        log.info("wrote %s (%d samples, csi %s)", cfg.id, cfg.n_samples, manifest.csi_digest[:12])
    (out / "suite.json").write_text(json.dumps(rc.suite.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _dataset_dirs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.glob("*/manifest.json"))


def cmd_pretrain(args, rc: RunConfig) -> int:
    root = Path(args.suite)
    datasets = [load_dataset(d) for d in _dataset_dirs(root)]
    if not datasets:
        raise FileNotFoundError(f"no datasets under {root}")
    train = [ds for ds in datasets if not ds.config.held_out]
    tc = replace(rc.train, seed=_sub_seed(rc.seed, "pretrain"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, _ = pretrain(train, rc.model, tc, log_path=out / "train_log.jsonl")
    ckpt.save(out / "checkpoint.bin")
    log.info("pre-trained on %d datasets; checkpoint %s", len(train), out / "checkpoint.bin")
    return EXIT_OK


def cmd_finetune(args, rc: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset)
    fusion = args.fusion or rc.fusion
    policy = rc.freeze or head_freeze_policy(fusion)
    train_idx, _ = split_indices(len(ds))
    tc = replace(rc.finetune_train, seed=_sub_seed(rc.seed, "finetune"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tuned, _ = finetune(ckpt, ds, policy, fusion, tc, indices=train_idx, log_path=out / "finetune_log.jsonl")
    tuned.save(out / "checkpoint.bin")
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.to_model()
    ds = load_dataset(args.dataset)
    seeds = (rc.seed,)
    if args.zero_shot:
        report = zero_shot_eval(model, ds, rc.tasks, seeds=seeds)
    else:
        _, test_idx = split_indices(len(ds))
        fusion = model.config.scene_token_enabled
        method = "wifo_finetuned_fusion" if fusion else "wifo_finetuned"
        report = evaluate_model(model, ds, rc.tasks, method, test_idx, seeds, fusion=fusion)
        report.extend(evaluate_baselines(ds, rc.tasks, test_idx, seeds))
    out = Path(args.out)
    write_report(report, out / "report.csv", "csv")
    write_report(report, out / "report.json", "json")
    for e in report:
        print(f"{e.method:<22} {e.task:<9} h={e.horizon:<3} nmse={e.nmse_linear:.4f} ({e.nmse_db:.2f} dB) "
              f"params {e.params_trainable}/{e.params_total}")
    return EXIT_OK


def emit_plot_data(report_paths) -> list[dict]:
    """Merge report files into one row per (method, task, dataset), ordered by (task, method)."""
    if not report_paths:
        raise ValueError("need at least one report")
    rows: dict[tuple, dict] = {}
    for path in report_paths:
        for e in read_report(path):
            key = (e.method, e.task, e.dataset_id)
            row = e.row()
            if key in rows and rows[key] != row:
                raise ValueError(f"conflicting entries for {key} in {path}")
            rows[key] = row
    return [rows[k] for k in sorted(rows, key=lambda k: (k[1], k[0], k[2]))]


def cmd_report(args, rc: RunConfig) -> int:
    rows = emit_plot_data(args.reports)
    out = Path(args.out)
    if out.suffix != ".csv":
        out = out / "plot_data.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        return p

    common(sub.add_parser("gen-data", help="synthesize the scenario suite"))
    p = common(sub.add_parser("pretrain", help="masked pre-training on the suite"))
    p.add_argument("--suite", required=True, help="directory written by gen-data")
    p = common(sub.add_parser("finetune", help="adapt a checkpoint to one dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fusion", action="store_true", help="fuse the scene token")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint and baselines"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--zero-shot", action="store_true")
    p = common(sub.add_parser("report", help="merge reports into plot data"))
    p.add_argument("reports", nargs="+")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        rc = _with_seed(load_run_config(args.config), args.seed)
        return COMMANDS[args.command](args, rc)
    except LeakageError as exc:
        print(f"chanfm: leakage guard: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except ConfigError as exc:
        print(f"chanfm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"chanfm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
