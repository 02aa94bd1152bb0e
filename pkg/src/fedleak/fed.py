"""FedAvg with optional user-level DP, instrumented to log every upload.

Each round samples ``max(1, round(q*U))`` clients uniformly without
replacement. A sampled client runs ``local_epochs`` of clipped mini-batch
SGD from the global model, adds Gaussian noise once (std ``sigma_k``) and
uploads; the server takes the coordinate-wise mean. Every upload is logged
as an :class:`UpdateRecord` holding the first-layer delta relative to the
global model it started from.

Randomness is split into substreams keyed by ``(seed, round, client_id)``
so the schedule of a thread pool cannot change any result.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import udp
from .data import ClientDataset, round_half_up
from .errors import ConfigError, DataError, InvariantError
from .metrics import uar
from .nn import NetSpec, ParamSet, clip_to_norm, forward, gradients, init_params, sgd_step

log = logging.getLogger(__name__)

CLIP_MODE = "per_batch"
OPTIMIZER = "sgd (no momentum, no weight decay)"

_TAG_INIT = 0
_TAG_SAMPLE = 1
_TAG_CLIENT = 2


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 200
    sample_ratio: float = 0.1
    learning_rate: float = 0.0005
    batch_size: int = 20
    local_epochs: int = 1
    clip: float = 0.25
    epsilon: float = math.inf
    delta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", udp.parse_epsilon(self.epsilon))
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ConfigError(f"sample_ratio must lie in (0, 1], got {self.sample_ratio}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("batch_size and local_epochs must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def privacy_off(self) -> bool:
        return math.isinf(self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = "inf" if self.privacy_off else self.epsilon
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FLConfig":
        return cls(**d)


def desk_config(**overrides) -> FLConfig:
    """Defaults with a learning rate large enough to train in 200 rounds at desk scale.

    Every noise-to-signal ratio in the privacy path is independent of the
    learning rate (sigma and the update both scale with it), so only utility
    changes.
    """
    return replace(FLConfig(learning_rate=0.5), **overrides)


def _key(client_id: str) -> int:
    return int.from_bytes(hashlib.sha256(client_id.encode("utf-8")).digest()[:8], "little")


def substream(seed: int, *key) -> np.random.Generator:
    words = []
    for k in key:
        words.append(_key(k) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))


def client_stream(seed: int, rnd: int, client_id: str) -> np.random.Generator:
    return substream(seed, _TAG_CLIENT, rnd, client_id)


def sample_size(U: int, q: float) -> int:
    return max(1, round_half_up(q * U))


def sample_clients(U: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of ``max(1, round(q*U))`` indices, sorted."""
    if U < 1:
        raise ConfigError(f"need at least one client, got U={U}")
    return np.sort(rng.choice(U, size=sample_size(U, q), replace=False))


def local_steps(train_size: int, batch_size: int, local_epochs: int) -> int:
    return local_epochs * math.ceil(train_size / batch_size)


def local_update(client: ClientDataset, theta: ParamSet, cfg: FLConfig, sigma_k: float,
                 rng: np.random.Generator, net: NetSpec, return_clean: bool = False):
    """Clipped mini-batch SGD from ``theta`` followed by one Gaussian perturbation.

    Returns ``(theta_k, steps)``, or ``(theta_k, steps, clean)`` with the
    pre-noise model when ``return_clean``.
    """
    X, y = client.X_train, client.y_train
    if len(y) == 0:
        raise DataError(f"client {client.client_id} has an empty training split")
    params = theta
    steps = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = clip_to_norm(gradients(net, params, X[idx], y[idx], rng), cfg.clip)
            params = sgd_step(params, g, cfg.learning_rate)
            steps += 1
    noised = udp.perturb(params, sigma_k, rng)
    if return_clean:
        return noised, steps, params
    return noised, steps


def aggregate(updates) -> ParamSet:
    """Coordinate-wise mean of the uploaded models."""
    updates = list(updates)
    if not updates:
        raise InvariantError("cannot aggregate an empty set of updates")
    first = updates[0]
    for u in updates[1:]:
        if not u.same_shape(first):
            raise ConfigError("uploaded models differ in shape")
    layers = []
    for i in range(len(first.layers)):
        w = np.mean(np.stack([u.layers[i][0] for u in updates]), axis=0)
        b = np.mean(np.stack([u.layers[i][1] for u in updates]), axis=0)
        layers.append((w, b))
    return ParamSet(layers)


def checksum(p: ParamSet) -> str:
    h = hashlib.sha256()
    for a in p.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class UpdateRecord:
    """One leaked upload: first-layer ``theta_k^{t+1} - theta^t`` (post-noise)."""

    round: int
    client_id: str
    step_count: int
    dataset_size: int
    dw: np.ndarray
    db: np.ndarray
    sigma: float = 0.0
    snr_db: float = math.inf


@dataclass
class RunLog:
    config: dict
    net: dict
    sampled: list[list[str]] = field(default_factory=list)
    records: list[UpdateRecord] = field(default_factory=list)
    checksums: list[str] = field(default_factory=list)
    privacy: dict[str, dict] = field(default_factory=dict)
    test_uar: float | None = None
    metadata: dict = field(default_factory=dict)
    checkpoints: list[ParamSet] = field(default_factory=list)

    def records_by_client(self) -> dict[str, list[UpdateRecord]]:
        out: dict[str, list[UpdateRecord]] = {}
        for r in self.records:
            out.setdefault(r.client_id, []).append(r)
        return out

    @property
    def learning_rate(self) -> float:
        return float(self.config["learning_rate"])

    def check(self):
        expected = sum(len(s) for s in self.sampled)
        if expected != len(self.records):
            raise InvariantError(f"{len(self.records)} update records for {expected} sampled uploads")

    def mean_snr_db(self) -> float | None:
        vals = [r.snr_db for r in self.records if math.isfinite(r.snr_db)]
        return float(np.mean(vals)) if vals else None


def net_to_dict(net: NetSpec) -> dict:
    d = asdict(net)
    d["hidden_dims"] = list(d["hidden_dims"])
    return d


def client_privacy(client: ClientDataset, cfg: FLConfig) -> udp.PrivacySpec:
    if cfg.learning_rate == 0:
        # a frozen model releases nothing, so no noise is needed
        return udp.PrivacySpec(cfg.epsilon, cfg.delta, 0.0, 0.0, cfg.sample_ratio, cfg.rounds)
    return udp.PrivacySpec.derive(cfg.epsilon, cfg.delta, cfg.learning_rate, cfg.clip, client.train_size,
                                  cfg.sample_ratio, cfg.rounds)


def train_federated(clients, cfg: FLConfig, net: NetSpec, *, test_clients=(), init: ParamSet | None = None,
                    threads: int = 1, fold=None, checkpoints: bool = False) -> tuple[ParamSet, RunLog]:
    """Run ``cfg.rounds`` FedAvg rounds over ``clients``.

    With ``fold`` the participating clients are restricted to its private
    training pool and the test set to its test speakers. ``init`` overrides
    the seeded initial model. With ``checkpoints`` the full global model
    broadcast at the start of every round is kept in the log as well.
    Returns the final model and the run log.
    """
    clients = list(clients)
    if fold is not None:
        keep = set(fold.private_clients)
        tests = set(fold.test_speakers)
        test_clients = [c for c in clients if c.speaker_id in tests]
        clients = [c for c in clients if c.client_id in keep]
    if not clients:
        raise ConfigError("federated training needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate client ids")
    if clients[0].feature_dim != net.input_dim:
        raise ConfigError(f"features have dimension {clients[0].feature_dim}, network expects {net.input_dim}")

    theta = init.copy() if init is not None else init_params(net, substream(cfg.seed, _TAG_INIT))
    privacy = {c.client_id: client_privacy(c, cfg) for c in clients}
    runlog = RunLog(cfg.to_dict(), net_to_dict(net),
                    privacy={c.client_id: {**privacy[c.client_id].to_dict(), "dataset_size": c.train_size}
                             for c in clients},
                    metadata={"clip_mode": CLIP_MODE, "optimizer": OPTIMIZER, "sigma_unit": "std",
                              "num_clients": len(clients), "init_checksum": checksum(theta)})
    w0_shape = theta.layers[0][0].shape

    def work(rnd, client, theta):
        rng = client_stream(cfg.seed, rnd, client.client_id)
        sig = privacy[client.client_id].sigma
        noised, steps, clean = local_update(client, theta, cfg, sig, rng, net, return_clean=True)
        w_new, b_new = noised.layers[0]
        w_old, b_old = theta.layers[0]
        snr = udp.snr_db(clean, noised - clean) if sig > 0 else math.inf
        rec = UpdateRecord(rnd, client.client_id, steps, client.train_size,
                           (w_new - w_old).astype(np.float32), (b_new - b_old).astype(np.float32), sig, snr)
        return noised, rec

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for rnd in range(cfg.rounds):
            S = sample_clients(len(clients), cfg.sample_ratio, substream(cfg.seed, _TAG_SAMPLE, rnd))
            chosen = [clients[i] for i in S]
            if checkpoints:
                runlog.checkpoints.append(theta.copy())
            if pool is None:
                results = [work(rnd, c, theta) for c in chosen]
            else:
                results = list(pool.map(lambda c, t=theta, r=rnd: work(r, c, t), chosen))
            runlog.sampled.append([c.client_id for c in chosen])
            runlog.records.extend(r for _, r in results)
            theta = aggregate([u for u, _ in results])
            if not all(np.isfinite(a).all() for a in theta.arrays()):
                raise InvariantError(f"global model became non-finite in round {rnd}")
            runlog.checksums.append(checksum(theta))
    finally:
        if pool is not None:
            pool.shutdown()
    assert all(r.dw.shape == w0_shape for r in runlog.records)
    runlog.check()
    if test_clients:
        runlog.test_uar = evaluate_model(net, theta, test_clients)
    return theta, runlog


def evaluate_model(net: NetSpec, params: ParamSet, test_clients) -> float:
    """Emotion UAR over every utterance of the test clients (eval mode)."""
    test_clients = list(test_clients)
    if not test_clients:
        raise DataError("no test clients to evaluate on")
    X = np.concatenate([c.X for c in test_clients])
    y = np.concatenate([c.y for c in test_clients])
    pred = forward(net, params, X, "eval").argmax(axis=1)
    return uar(y, pred, net.num_classes)


# -- persistence -------------------------------------------------------------

HEADER = "header.json"
INDEX = "index.jsonl"
SIDECAR = "updates.f32"
INIT_MODEL = "init_model.npz"
FINAL_MODEL = "final_model.npz"
CHECKPOINTS = "checkpoints.npz"


def save_params(path, p: ParamSet):
    arrays = {}
    for i, (w, b) in enumerate(p.layers):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> ParamSet:
    with np.load(path) as z:
        n = len(z.files) // 2
        return ParamSet([(z[f"w{i}"], z[f"b{i}"]) for i in range(n)])


def _json_float(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _parse_float(x):
    return float(x)


def save_runlog(runlog: RunLog, out_dir, extra_header: dict | None = None):
    """Write header JSON, JSONL index and little-endian float32 sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "config": runlog.config,
        "net": runlog.net,
        "metadata": runlog.metadata,
        "privacy": runlog.privacy,
        "sampled": runlog.sampled,
        "checksums": runlog.checksums,
        "test_uar": runlog.test_uar,
        "mean_snr_db": runlog.mean_snr_db(),
        "num_records": len(runlog.records),
    }
    if extra_header:
        header.update(extra_header)
    offset = 0
    with open(out / SIDECAR, "wb") as side, open(out / INDEX, "w", encoding="utf-8") as idx:
        for r in runlog.records:
            blob = np.ascontiguousarray(r.dw, dtype="<f4").tobytes() + np.ascontiguousarray(r.db, dtype="<f4").tobytes()
            side.write(blob)
            entry = {"round": r.round, "client_id": r.client_id, "step_count": r.step_count,
                     "dataset_size": r.dataset_size, "sigma": r.sigma, "snr_db": _json_float(r.snr_db),
                     "offset": offset, "nbytes": len(blob), "w_shape": list(r.dw.shape)}
            idx.write(json.dumps(entry, sort_keys=True) + "\n")
            offset += len(blob)
    if runlog.checkpoints:
        arrays = {}
        for t, p in enumerate(runlog.checkpoints):
            for i, (w, b) in enumerate(p.layers):
                arrays[f"t{t}_w{i}"] = w
                arrays[f"t{t}_b{i}"] = b
        with open(out / CHECKPOINTS, "wb") as fh:
            np.savez(fh, **arrays)
    (out / HEADER).write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")


def load_runlog(run_dir) -> RunLog:
    run = Path(run_dir)
    try:
        header = json.loads((run / HEADER).read_text(encoding="utf-8"))
        raw = np.fromfile(run / SIDECAR, dtype="<f4")
        records = []
        with open(run / INDEX, encoding="utf-8") as fh:
            for line in fh:
                e = json.loads(line)
                h, d = e["w_shape"]
                start = e["offset"] // 4
                if e["nbytes"] != 4 * (h * d + h) or start + h * d + h > raw.size:
                    raise DataError(f"{run}: index entry points outside the update sidecar")
                dw = raw[start:start + h * d].reshape(h, d).astype(np.float32)
                db = raw[start + h * d:start + h * d + h].astype(np.float32)
                records.append(UpdateRecord(e["round"], e["client_id"], e["step_count"], e["dataset_size"],
                                            dw, db, e["sigma"], _parse_float(e["snr_db"])))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{run}: corrupt or incomplete run log ({exc})") from exc
    log_ = RunLog(header["config"], header["net"], header["sampled"], records, header["checksums"],
                  header["privacy"], header.get("test_uar"), header.get("metadata", {}))
    if (run / CHECKPOINTS).exists():
        with np.load(run / CHECKPOINTS) as z:
            n_layers = len(log_.net["hidden_dims"]) + 1
            log_.checkpoints = [ParamSet([(z[f"t{t}_w{i}"], z[f"t{t}_b{i}"]) for i in range(n_layers)])
                                for t in range(len(z.files) // (2 * n_layers))]
    log_.check()
    return log_


def net_from_dict(d: dict) -> NetSpec:
    return NetSpec(d["input_dim"], tuple(d["hidden_dims"]), d["num_classes"], d["dropout_rate"], d.get("activation", "relu"))
