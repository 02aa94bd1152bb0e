"""Command-line driver.

Subcommands share one output directory::

    <out>/config.json          resolved configuration of the last command
    <out>/data/                features.csv, genders.csv, generator.json
    <out>/population.json      pools, shadow parts and folds
    <out>/victims/eps=E/fold=F run logs of the private FL runs
    <out>/shadows/m=M          run logs of the shadow FL runs
    <out>/attack/              trained attack model
    <out>/reports/             SER and attack reports

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
error, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
from collections import defaultdict
from pathlib import Path

from . import attack, config, data, fed, pipeline, udp
from .errors import ConfigError, DataError, FedLeakError, InvariantError
from .metrics import format_eps, summarize_grid, summary_to_csv

log = logging.getLogger("fedleak")

OUT_ENV = "FEDLEAK_OUT"
DEFAULT_OUT = "fedleak-runs"


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def resolve_config(args) -> dict:
    user = config.load(args.config) if args.config else {}
    cfg = config.resolve(user, args.preset)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg["seed"] = args.seed
    if getattr(args, "epsilon", None):
        cfg["fl"]["epsilons"] = config.parse_list(args.epsilon, lambda s: config.eps_to_json(udp.parse_epsilon(s)))
    if getattr(args, "n", None):
        cfg["scenario"]["n_values"] = config.parse_list(args.n, config.parse_n)
    if getattr(args, "repeats", None) is not None:
        cfg["scenario"]["repeats"] = args.repeats
    if getattr(args, "threads", None) is not None:
        cfg["runtime"]["threads"] = args.threads
    if getattr(args, "folds", None):
        cfg["data"]["folds"] = config.parse_list(args.folds, int)
    return config.validate(cfg)


def _refuse_existing(path: Path, force: bool):
    if path.exists():
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _features_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["data"]["path"]) if cfg["data"]["path"] else out / "data" / "features.csv"


def _population(cfg: dict, out: Path) -> pipeline.Population:
    path = _features_path(cfg, out)
    if not path.exists():
        raise DataError(f"dataset not found: {path} (run `fedleak gen-data` or set data.path)")
    clients = data.load_features(path)
    pop = pipeline.build_population(clients, cfg, {"source": str(path)})
    pipeline.write_json(out / "population.json", {"config": cfg, **pop.to_dict()})
    return pop


def _echo(cfg: dict, out: Path):
    pipeline.write_json(out / "config.json", cfg)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _out_dir(args)
    ddir = out / "data"
    _refuse_existing(ddir / "features.csv", args.force)
    clients, meta = data.synth_generate(pipeline.synth_config(cfg))
    ddir.mkdir(parents=True, exist_ok=True)
    data.export_features(clients, ddir / "features.csv")
    with open(ddir / "genders.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", "gender"])
        for sid, g in data.gender_table(clients).items():
            w.writerow([sid, g])
    pipeline.write_json(ddir / "generator.json", {"config": cfg, **meta})
    _echo(cfg, out)
    n_utt = sum(len(c) for c in clients)
    print(f"speakers={len(clients)} clients={len(clients) * cfg['data']['shards_per_speaker']} "
          f"utterances={n_utt} -> {ddir / 'features.csv'}")
    return 0


def cmd_train_fl(args, cfg):
    out = _out_dir(args)
    pop = _population(cfg, out)
    net = pipeline.net_spec(cfg, pop.feature_dim)
    theta0 = pipeline.initial_model(cfg, net)
    fed.save_params(out / "init_model.npz", theta0)
    ser = []
    for fold in pipeline.selected_folds(cfg, pop):
        for eps in cfg["fl"]["epsilons"]:
            run_dir = pipeline.victim_dir(out, eps, fold.fold)
            _refuse_existing(run_dir, args.force)
            params, runlog = pipeline.run_victim(pop, cfg, fold, eps, theta0)
            fed.save_runlog(runlog, run_dir, {"run_config": cfg, "fold": fold.to_dict(), "role": "victim"})
            fed.save_params(run_dir / fed.FINAL_MODEL, params)
            entry = pipeline.ser_entry(runlog, fold.fold)
            ser.append(entry)
            snr = entry["mean_snr_db"]
            print(f"fold={fold.fold} epsilon={format_eps(udp.parse_epsilon(eps))} records={len(runlog.records)} "
                  f"ser_uar={runlog.test_uar:.4f}" + (f" snr_db={snr:.2f}" if snr is not None else ""))
    _write_ser(out, cfg, ser)
    _echo(cfg, out)
    return 0


def _write_ser(out: Path, cfg: dict, ser):
    rep = out / "reports"
    pipeline.write_json(rep / "ser.json", pipeline.clean_for_json({"config": cfg, "runs": ser}))
    grid = [(udp.parse_epsilon(e["epsilon"]), 0, e["fold"], e["test_uar"]) for e in ser]
    rows = summarize_grid(grid)
    snr = defaultdict(list)
    for e in ser:
        if e["mean_snr_db"] is not None:
            snr[udp.parse_epsilon(e["epsilon"])].append(e["mean_snr_db"])
    for r in rows:
        vals = snr.get(r["epsilon"], [])
        r["mean_snr_db"] = sum(vals) / len(vals) if vals else ""
        r["snr_note"] = _snr_note(r["epsilon"], r["mean_snr_db"])
        del r["n"]
    text = _csv(rows, ["epsilon", "count", "mean", "std", "mean_snr_db", "snr_note"])
    (rep / "ser_summary.csv").write_text(text, encoding="utf-8")


def _snr_note(eps, snr) -> str:
    if snr == "" or snr is None:
        return ""
    if float(eps) != 25.0:
        return ""
    return "inside reference band" if udp.snr_in_reference_band(snr) else "outside reference band"


def _csv(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        vals = []
        for c in cols:
            v = r.get(c, "")
            if c == "epsilon":
                v = format_eps(v)
            elif isinstance(v, float):
                v = repr(v)
            vals.append(v)
        w.writerow(vals)
    return buf.getvalue()


def cmd_train_shadows(args, cfg):
    out = _out_dir(args)
    pop = _population(cfg, out)
    net = pipeline.net_spec(cfg, pop.feature_dim)
    theta0 = pipeline.initial_model(cfg, net)
    overlap = set(pop.shadow) & set(pop.private)
    if overlap:
        raise DataError(f"shadow and private pools overlap: {sorted(overlap)}")
    for m in range(cfg["attack"]["num_shadows"]):
        run_dir = pipeline.shadow_dir(out, m)
        _refuse_existing(run_dir, args.force)
        runlog = pipeline.run_shadow(pop, cfg, m, theta0)
        fed.save_runlog(runlog, run_dir, {"run_config": cfg, "role": "shadow"})
        print(f"shadow={m} speakers={len(runlog.metadata['speakers'])} records={len(runlog.records)}")
    _echo(cfg, out)
    return 0


def cmd_train_attack(args, cfg):
    out = _out_dir(args)
    pop = _population(cfg, out)
    dirs = [pipeline.shadow_dir(out, m) for m in range(cfg["attack"]["num_shadows"])]
    for d in dirs:
        if not d.exists():
            raise DataError(f"missing shadow run {d} (run `fedleak train-shadows`)")
    adir = out / "attack"
    _refuse_existing(adir, args.force)
    examples = pipeline.shadow_examples(pop, (fed.load_runlog(d) for d in dirs))
    model = pipeline.train_attacker(pop, cfg, examples)
    model.save(adir)
    pipeline.write_json(adir / "config.json", cfg)
    print(f"attack model: best validation UAR {model.valid_uar:.4f} on held-out shadow speakers")
    _echo(cfg, out)
    return 0


def cmd_eval_attack(args, cfg):
    out = _out_dir(args)
    pop = _population(cfg, out)
    adir = out / "attack"
    if not adir.exists():
        raise DataError(f"missing attack model {adir} (run `fedleak train-attack`)")
    model = attack.AttackModel.load(adir)
    overlap = set(model.shadow_speakers) & set(pop.private)
    if overlap:
        raise DataError(f"attack model was trained on private-pool speakers: {sorted(overlap)}")
    rep = out / "reports"
    cells, ser = [], []
    for fold in pipeline.selected_folds(cfg, pop):
        rows = []
        for eps in cfg["fl"]["epsilons"]:
            d = pipeline.victim_dir(out, eps, fold.fold)
            if not d.exists():
                raise DataError(f"missing victim run {d} (run `fedleak train-fl`)")
            runlog = fed.load_runlog(d)
            r, c = pipeline.evaluate_victim(model, runlog, pop, cfg, fold.fold)
            rows.extend(r)
            cells.extend(c)
            ser.append(pipeline.ser_entry(runlog, fold.fold))
            for cell in c:
                print(f"fold={fold.fold} epsilon={format_eps(udp.parse_epsilon(eps))} n={cell['n']} "
                      f"attack_uar={cell['uar']:.4f}")
        fdir = rep / f"fold={fold.fold}"
        fdir.mkdir(parents=True, exist_ok=True)
        (fdir / "attack_report.csv").write_text(attack.rows_to_csv(rows), encoding="utf-8")
    summary = pipeline.attack_summary(cfg, cells, ser, model)
    pipeline.write_json(rep / "attack_summary.json", summary)
    (rep / "attack_summary.csv").write_text(summary_to_csv(summary["summary"]), encoding="utf-8")
    _echo(cfg, out)
    return 0


def cmd_sweep(args, cfg):
    out = _out_dir(args)
    if not cfg["data"]["path"] and (not (out / "data" / "features.csv").exists() or args.force):
        cmd_gen_data(args, cfg)
    for step in (cmd_train_fl, cmd_train_shadows, cmd_train_attack, cmd_eval_attack):
        step(args, cfg)
    return 0


def cmd_report(args, cfg):
    runs = [Path(p) for p in (args.runs or [str(_out_dir(args))])]
    cells, ser, used = [], [], []
    for run in runs:
        summary_path = run / "reports" / "attack_summary.json"
        try:
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
            for d in sorted((run / "victims").glob("eps=*/fold=*")):
                header = json.loads((d / fed.HEADER).read_text(encoding="utf-8"))
                pipeline.validate_sigmas(header)
            run_cells = summary["cells"]
            run_ser = summary.get("ser", [])
        except (OSError, ValueError, KeyError, InvariantError) as exc:
            log.warning("skipping %s: %s", run, exc)
            print(f"warning: skipping {run}: {exc}", file=sys.stderr)
            continue
        label = _dataset_label(summary.get("config", {}))
        seed = summary.get("config", {}).get("seed", len(used))
        for c in run_cells:
            cells.append((label, seed, c))
        for e in run_ser:
            ser.append((label, seed, e))
        used.append(str(run))
    if not used:
        raise DataError("no readable runs to report on")
    out = Path(args.report_out) if args.report_out else _out_dir(args) / "combined"
    out.mkdir(parents=True, exist_ok=True)
    grid = [(udp.parse_epsilon(c["epsilon"]), c["n"], (seed, c["fold"]), c["uar"]) for _, seed, c in cells]
    rows = summarize_grid(grid)
    (out / "attack_summary.csv").write_text(summary_to_csv(rows), encoding="utf-8")
    sgrid = [(udp.parse_epsilon(e["epsilon"]), 0, (seed, e["fold"]), e["test_uar"]) for _, seed, e in ser]
    srows = summarize_grid(sgrid) if sgrid else []
    snr = defaultdict(list)
    for _, _, e in ser:
        if e.get("mean_snr_db") not in (None, "inf"):
            snr[udp.parse_epsilon(e["epsilon"])].append(float(e["mean_snr_db"]))
    for r in srows:
        vals = snr.get(r["epsilon"], [])
        r["mean_snr_db"] = sum(vals) / len(vals) if vals else ""
        r["snr_note"] = _snr_note(r["epsilon"], r["mean_snr_db"])
    (out / "ser_summary.csv").write_text(_csv(srows, ["epsilon", "count", "mean", "std", "mean_snr_db", "snr_note"]),
                                         encoding="utf-8")
    for label in sorted({lab for lab, _, _ in cells}):
        _write_plot_data(out / f"plot_{label}.csv", [c for lab, _, c in cells if lab == label])
    pipeline.write_json(out / "sources.json", {"runs": used})
    print(f"merged {len(used)} run(s) -> {out}")
    return 0


def _dataset_label(cfg: dict) -> str:
    path = (cfg.get("data") or {}).get("path")
    return Path(path).stem if path else "synthetic"


def _write_plot_data(path: Path, cells):
    """Rows: n; columns: mean attack UAR per epsilon."""
    groups = defaultdict(list)
    for c in cells:
        groups[(udp.parse_epsilon(c["epsilon"]), c["n"])].append(c["uar"])
    epsilons = sorted({e for e, _ in groups}, key=lambda e: -e)
    ns = sorted({n for _, n in groups}, key=lambda n: math.inf if n == "all" else n)
    cols = ["n"] + [f"uar_eps_{format_eps(e)}" for e in epsilons]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for n in ns:
        row = [n]
        for e in epsilons:
            vals = groups.get((e, n))
            row.append(repr(sum(vals) / len(vals)) if vals else "")
        w.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic feature table"),
    "train-fl": (cmd_train_fl, "run the private FedAvg runs for every fold and epsilon"),
    "train-shadows": (cmd_train_shadows, "run the attacker's shadow FedAvg runs"),
    "train-attack": (cmd_train_attack, "train the attack model on shadow updates"),
    "eval-attack": (cmd_eval_attack, "attack every victim run for every n"),
    "sweep": (cmd_sweep, "all of the above"),
    "report": (cmd_report, "merge reports of one or more output directories"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedleak", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--preset", choices=sorted(config.PRESETS), help="built-in defaults to start from")
        s.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        s.add_argument("--epsilon", help="comma-separated epsilons, e.g. 5,10,inf")
        s.add_argument("--n", help="comma-separated leak counts, e.g. 1,5,all")
        s.add_argument("--repeats", type=int, help="draws per victim client")
        s.add_argument("--folds", help="comma-separated fold indices to run")
        s.add_argument("--threads", type=int, help="worker threads for local updates")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "report":
            s.add_argument("runs", nargs="*", help="output directories to merge")
            s.add_argument("--report-out", help="directory for the merged files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except FedLeakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
