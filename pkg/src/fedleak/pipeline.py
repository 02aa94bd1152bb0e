"""End-to-end experiment steps shared by the command line and the tests.

Every random choice is drawn from a substream of the master seed keyed by
what it is for (``"pools"``, ``("victim", fold)``, ...), so individual
steps can be rerun in isolation and reproduce the same artifacts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack, data, fed, udp
from .config import eps_to_json
from .errors import ConfigError, InvariantError
from .metrics import format_eps, summarize_grid
from .nn import NetSpec, ParamSet, init_params

log = logging.getLogger(__name__)


def derive_seed(master: int, *key) -> int:
    h = hashlib.sha256(json.dumps([int(master), *[str(k) for k in key]]).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(master: int, *key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *key))


@dataclass
class Population:
    clients: list[data.ClientDataset]
    genders: dict[str, int]
    private: list[str]
    shadow: list[str]
    folds: list[data.FoldPlan]
    shadow_parts: list[list[str]]
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.clients[0].feature_dim

    def to_dict(self) -> dict:
        return {"private_speakers": self.private, "shadow_speakers": self.shadow,
                "shadow_parts": self.shadow_parts, "folds": [f.to_dict() for f in self.folds],
                "num_clients": len(self.clients), "feature_dim": self.feature_dim, "data": self.meta}


def synth_config(cfg: dict) -> data.SynthConfig:
    return data.SynthConfig(seed=cfg["seed"], **cfg["data"]["synth"])


def raw_clients(cfg: dict, data_path=None) -> tuple[list[data.ClientDataset], dict]:
    """Feature table from ``data_path``/``data.path`` or freshly generated."""
    path = data_path or cfg["data"]["path"]
    if path is not None:
        clients = data.load_features(path)
        return clients, {"source": str(path)}
    return data.synth_generate(synth_config(cfg))


def build_population(clients, cfg: dict, meta: dict | None = None) -> Population:
    """Normalise per speaker, split pools, shard into clients and plan folds."""
    master = cfg["seed"]
    d = cfg["data"]
    clients = data.znorm_per_speaker(clients)
    genders = data.gender_table(clients)
    private, shadow = data.split_pools(clients, d["shadow_fraction"], rng_for(master, "pools"))
    clients = data.shard_speakers(clients, d["shards_per_speaker"], rng_for(master, "shards"))
    folds = data.make_folds(clients, d["num_folds"], d["test_fraction"], rng_for(master, "folds"),
                            shadow_speakers=shadow)
    parts = data.stratified_partition(shadow, genders, max(2, cfg["attack"]["num_shadows"]),
                                      rng_for(master, "shadow-parts"))
    return Population(clients, genders, private, shadow, folds, parts, meta or {})


def net_spec(cfg: dict, input_dim: int) -> NetSpec:
    return NetSpec(input_dim, tuple(cfg["net"]["hidden_dims"]), 4, cfg["net"]["dropout_rate"])


def fl_config(cfg: dict, epsilon, seed: int) -> fed.FLConfig:
    f = cfg["fl"]
    return fed.FLConfig(rounds=f["rounds"], sample_ratio=f["sample_ratio"], learning_rate=f["learning_rate"],
                        batch_size=f["batch_size"], local_epochs=f["local_epochs"], clip=f["clip"],
                        epsilon=udp.parse_epsilon(epsilon), delta=f["delta"], seed=seed)


def initial_model(cfg: dict, net: NetSpec) -> ParamSet:
    """The broadcast starting model; shadow runs start from the same one."""
    return init_params(net, rng_for(cfg["seed"], "init"))


def selected_folds(cfg: dict, pop: Population) -> list[data.FoldPlan]:
    idx = cfg["data"]["folds"]
    if idx is None:
        return pop.folds
    return [pop.folds[i] for i in idx]


def run_victim(pop: Population, cfg: dict, fold: data.FoldPlan, epsilon, theta0: ParamSet,
               threads: int | None = None):
    net = net_spec(cfg, pop.feature_dim)
    flc = fl_config(cfg, epsilon, derive_seed(cfg["seed"], "victim", fold.fold))
    return fed.train_federated(pop.clients, flc, net, fold=fold, init=theta0,
                               threads=threads or cfg["runtime"]["threads"],
                               checkpoints=cfg["runtime"]["checkpoints"])


def run_shadow(pop: Population, cfg: dict, m: int, theta0: ParamSet, threads: int | None = None):
    """Shadow run ``m`` trains on the shadow pool minus its ``m``-th part."""
    if not 0 <= m < cfg["attack"]["num_shadows"]:
        raise ConfigError(f"shadow index {m} out of range")
    held = set(pop.shadow_parts[m]) if cfg["attack"]["num_shadows"] > 1 else set()
    speakers = [s for s in pop.shadow if s not in held]
    net = net_spec(cfg, pop.feature_dim)
    flc = fl_config(cfg, cfg["attack"]["shadow_epsilon"], derive_seed(cfg["seed"], "shadow", m))
    _, runlog = fed.train_federated(data.select(pop.clients, speakers), flc, net, init=theta0,
                                    threads=threads or cfg["runtime"]["threads"])
    runlog.metadata["shadow_index"] = m
    runlog.metadata["speakers"] = speakers
    return runlog


def attack_config(cfg: dict) -> attack.AttackTrainConfig:
    a = cfg["attack"]
    return attack.AttackTrainConfig(channels=tuple(a["channels"]), hidden_dims=tuple(a["hidden_dims"]),
                                    dropout_rate=a["dropout_rate"], learning_rate=a["learning_rate"],
                                    epochs=a["epochs"], batch_size=a["batch_size"],
                                    max_train_examples=a["max_train_examples"],
                                    max_valid_examples=a["max_valid_examples"], input_norm=a["input_norm"])


def shadow_examples(pop: Population, logs) -> list[attack.AttackExample]:
    """Labelled pseudo-gradients from an iterable of shadow logs.

    Each log's records are released once converted, so only one run log is
    held in memory when ``logs`` is a generator.
    """
    out = []
    for m, runlog in enumerate(logs):
        ex = attack.build_attack_dataset([runlog], pop.genders)
        for e in ex:
            e.shadow_id = m
        out.extend(ex)
        runlog.records.clear()
    return out


def train_attacker(pop: Population, cfg: dict, examples) -> attack.AttackModel:
    """Attack model on shadow uploads; the first shadow part is held out for validation."""
    return attack.train_attack_model(examples, attack_config(cfg), rng_for(cfg["seed"], "attack"),
                                     valid_speakers=pop.shadow_parts[0])


def scenarios(cfg: dict) -> list[attack.LeakageScenario]:
    sc = cfg["scenario"]
    return [attack.LeakageScenario(n, sc["repeats"], sc["aggregation"]) for n in sc["n_values"]]


def evaluate_victim(model: attack.AttackModel, runlog: fed.RunLog, pop: Population, cfg: dict, fold: int):
    """All leakage scenarios on one victim run; returns (rows, cells)."""
    cache: dict = {}
    rows, cells = [], []
    eps = udp.parse_epsilon(runlog.config["epsilon"])
    for sc in scenarios(cfg):
        ev = attack.evaluate_attack(model, runlog, sc, pop.genders, derive_seed(cfg["seed"], "eval", fold), cache)
        rows.extend(ev.rows)
        cells.append({"epsilon": eps_to_json(eps), "n": sc.n, "fold": fold, "uar": ev.uar,
                      "flagged_clients": ev.flagged, "composition": ev.composition.to_dict()})
    return rows, cells


def ser_entry(runlog: fed.RunLog, fold: int) -> dict:
    eps = udp.parse_epsilon(runlog.config["epsilon"])
    snr = runlog.mean_snr_db()
    return {"epsilon": eps_to_json(eps), "fold": fold, "test_uar": runlog.test_uar, "mean_snr_db": snr,
            "snr_in_reference_band": (udp.snr_in_reference_band(snr) if snr is not None else None)}


def summarize_cells(cells) -> list[dict]:
    grid = [(udp.parse_epsilon(c["epsilon"]), c["n"], c["fold"], c["uar"]) for c in cells]
    rows = summarize_grid(grid)
    for r in rows:
        r["epsilon"] = format_eps(r["epsilon"])
    return rows


def validate_sigmas(header: dict, tol: float = 1e-12) -> float:
    """Re-derive every client's sigma from the embedded config; returns the worst relative error."""
    c = header["config"]
    worst = 0.0
    for cid, p in header["privacy"].items():
        if c["learning_rate"] == 0:
            expect = 0.0
        else:
            sens = udp.sensitivity(c["learning_rate"], c["clip"], p["dataset_size"])
            expect = udp.sigma(sens, c["sample_ratio"], c["rounds"], c["delta"], c["epsilon"])
        got = float(p["sigma"])
        err = abs(got - expect) / expect if expect else abs(got)
        if err > tol:
            raise InvariantError(f"client {cid}: stored sigma {got!r} differs from re-derived {expect!r}")
        worst = max(worst, err)
    return worst


# -- on-disk layout ------------------------------------------------------------

def victim_dir(out: Path, epsilon, fold: int) -> Path:
    return Path(out) / "victims" / f"eps={format_eps(udp.parse_epsilon(epsilon))}" / f"fold={fold}"


def shadow_dir(out: Path, m: int) -> Path:
    return Path(out) / "shadows" / f"m={m}"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n",
                    encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def clean_for_json(obj):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: clean_for_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_for_json(v) for v in obj]
    return obj


def attack_summary(cfg: dict, cells, ser, model: attack.AttackModel | None) -> dict:
    return clean_for_json({
        "config": cfg,
        "cells": cells,
        "summary": summarize_cells(cells) if cells else [],
        "ser": ser,
        "attack_valid_uar": None if model is None else model.valid_uar,
    })


def run_all(cfg: dict, clients=None, meta=None, keep_logs: bool = False, threads: int | None = None):
    """In-memory pipeline: shadows, attacker, every (fold, epsilon) victim, every n.

    Returns a dict with ``rows`` (per fold), ``cells``, ``ser``, ``model``
    and, with ``keep_logs``, the victim run logs.
    """
    if clients is None:
        clients, meta = raw_clients(cfg)
    pop = build_population(clients, cfg, meta)
    net = net_spec(cfg, pop.feature_dim)
    theta0 = initial_model(cfg, net)
    shadows = (run_shadow(pop, cfg, m, theta0, threads) for m in range(cfg["attack"]["num_shadows"]))
    model = train_attacker(pop, cfg, shadow_examples(pop, shadows))
    rows: dict[int, list] = {}
    cells, ser, logs = [], [], {}
    for fold in selected_folds(cfg, pop):
        for eps in cfg["fl"]["epsilons"]:
            _, runlog = run_victim(pop, cfg, fold, eps, theta0, threads)
            r, c = evaluate_victim(model, runlog, pop, cfg, fold.fold)
            rows.setdefault(fold.fold, []).extend(r)
            cells.extend(c)
            ser.append(ser_entry(runlog, fold.fold))
            if keep_logs:
                logs[(fold.fold, eps)] = runlog
    return {"population": pop, "model": model, "rows": rows, "cells": cells, "ser": ser, "logs": logs}
