"""Shadow-model attribute inference on first-layer model updates.

The adversary observes the global model ``theta^t`` and an uploaded local
model ``theta_k^{t+1}``. It converts the first-layer difference into a
pseudo-gradient ``(theta^t - theta_k^{t+1}) / (steps * lr)``, treats the
weight part as a one-channel image and the bias part as side features,
and classifies the uploader's gender with a ConvNet trained on updates
from shadow FL runs over speakers it controls.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conv import AttackConvNet, ConvNetSpec
from .data import round_half_up, speaker_of, stratified_partition
from .errors import ConfigError, DataError, DomainError
from .fed import RunLog, UpdateRecord, substream
from .metrics import format_eps, uar
from .nn import ParamSet, TrainConfig, train_classifier
from . import udp

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
# "rms": after per-coordinate standardisation every example is rescaled to
# unit root-mean-square, so heavily noised uploads reach the ConvNet at the
# scale it was trained on and only their signal-to-noise ratio differs.
INPUT_NORMS = ("rms", "none")
REPORT_COLUMNS = ("epsilon", "n", "repeat_seed", "client_id", "true_z", "pred_z", "p_z1")


def pseudo_gradient(theta_t, theta_next, steps: int, lr: float):
    """``(theta_t - theta_next) / (steps * lr)`` elementwise."""
    if steps < 1:
        raise DomainError(f"step count must be >= 1, got {steps}")
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    theta_t = np.asarray(theta_t)
    theta_next = np.asarray(theta_next)
    if theta_t.shape != theta_next.shape:
        raise ConfigError(f"shape mismatch {theta_t.shape} vs {theta_next.shape}")
    return (theta_t - theta_next) / (steps * lr)


def record_features(rec: UpdateRecord, lr: float) -> np.ndarray:
    """Flattened ``[dW, db]`` pseudo-gradient of one logged upload (float32)."""
    scale = np.float32(-1.0 / (rec.step_count * lr))
    if rec.step_count < 1 or not lr > 0:
        raise DomainError("records need step_count >= 1 and a positive learning rate")
    return np.concatenate([rec.dw.ravel() * scale, rec.db * scale]).astype(np.float32, copy=False)


@dataclass
class AttackExample:
    dw: np.ndarray
    db: np.ndarray
    z: int
    shadow_id: int
    round: int
    client_id: str

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.dw.ravel(), self.db]).astype(np.float32, copy=False)


def build_attack_dataset(shadow_logs, genders: dict[str, int]) -> list[AttackExample]:
    """One labelled pseudo-gradient per upload across all shadow runs."""
    out = []
    for m, runlog in enumerate(shadow_logs):
        lr = runlog.learning_rate
        for r in runlog.records:
            sid = speaker_of(r.client_id)
            if sid not in genders:
                raise DataError(f"no gender known for speaker {sid} (client {r.client_id})")
            scale = np.float32(-1.0 / (r.step_count * lr))
            out.append(AttackExample(r.dw * scale, r.db * scale, int(genders[sid]), m, r.round, r.client_id))
    return out


def stack_examples(examples) -> tuple[np.ndarray, np.ndarray]:
    if not examples:
        raise DataError("no attack examples")
    X = np.stack([e.features for e in examples])
    y = np.array([e.z for e in examples], dtype=np.int64)
    return X, y


@dataclass(frozen=True)
class AttackTrainConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    hidden_dims: tuple[int, ...] = (128,)
    dropout_rate: float = 0.2
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    valid_fraction: float = 0.2
    max_train_examples: int | None = None
    max_valid_examples: int | None = None
    input_norm: str = "rms"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("attack epochs, batch_size and learning_rate must be positive")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError(f"valid_fraction must lie in (0, 1), got {self.valid_fraction}")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        for cap in (self.max_train_examples, self.max_valid_examples):
            if cap is not None and cap < 1:
                raise ConfigError("example caps must be positive when set")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def desk_attack_config(**overrides) -> AttackTrainConfig:
    """A narrower attacker trained on a capped example budget for single-core runs."""
    base = dict(channels=(4, 8, 16), learning_rate=3e-4, epochs=14, max_train_examples=3200,
                max_valid_examples=800)
    base.update(overrides)
    return AttackTrainConfig(**base)


@dataclass
class AttackModel:
    spec: ConvNetSpec
    params: ParamSet
    mean: np.ndarray
    std: np.ndarray
    shadow_speakers: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    valid_uar: float | None = None
    input_norm: str = "rms"

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return normalize_inputs(X, self.mean, self.std, self.input_norm)

    def predict_proba(self, X: np.ndarray, chunk: int = 128) -> np.ndarray:
        net = AttackConvNet(self.spec)
        X = np.atleast_2d(X)
        return np.concatenate([net.predict_proba(self.params, self.standardize(X[i:i + chunk]))
                               for i in range(0, len(X), chunk)])

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {"mean": self.mean, "std": self.std}
        for i, (w, b) in enumerate(self.params.layers):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        with open(path / "attack_model.npz", "wb") as fh:
            np.savez(fh, **arrays)
        meta = {"spec": {"input_shape": list(self.spec.input_shape), "bias_dim": self.spec.bias_dim,
                         "channels": list(self.spec.channels), "hidden_dims": list(self.spec.hidden_dims),
                         "dropout_rate": self.spec.dropout_rate, "num_classes": self.spec.num_classes},
                "shadow_speakers": self.shadow_speakers, "history": self.history, "valid_uar": self.valid_uar,
                "input_norm": self.input_norm}
        (path / "attack_model.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AttackModel":
        path = Path(path)
        try:
            meta = json.loads((path / "attack_model.json").read_text(encoding="utf-8"))
            s = meta["spec"]
            spec = ConvNetSpec(tuple(s["input_shape"]), s["bias_dim"], tuple(s["channels"]),
                               hidden_dims=tuple(s["hidden_dims"]), dropout_rate=s["dropout_rate"],
                               num_classes=s["num_classes"])
            with np.load(path / "attack_model.npz") as z:
                n = (len(z.files) - 2) // 2
                params = ParamSet([(z[f"w{i}"], z[f"b{i}"]) for i in range(n)])
                mean, std = z["mean"], z["std"]
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: cannot load attack model ({exc})") from exc
        return cls(spec, params, mean, std, meta["shadow_speakers"], meta["history"], meta["valid_uar"],
                   meta.get("input_norm", "rms"))


def normalize_inputs(X: np.ndarray, mean: np.ndarray, std: np.ndarray, mode: str = "rms") -> np.ndarray:
    Z = ((X - mean) / std).astype(np.float32, copy=False)
    if mode == "rms":
        rms = np.sqrt(np.mean(np.square(Z, dtype=np.float64), axis=1, keepdims=True))
        Z = (Z / np.where(rms > 0, rms, 1.0)).astype(np.float32)
    return Z


def split_by_speaker(examples, valid_fraction: float, rng: np.random.Generator, valid_speakers=None):
    """Speaker-disjoint train/validation split of attack examples.

    ``valid_speakers`` fixes the held-out speakers; otherwise a
    gender-stratified ``valid_fraction`` of the speakers is drawn.
    """
    genders = {}
    for e in examples:
        genders[speaker_of(e.client_id)] = e.z
    if valid_speakers is None:
        speakers = sorted(genders)
        parts = max(2, round_half_up(1.0 / valid_fraction))
        if len(speakers) < parts:
            raise DataError(f"{len(speakers)} shadow speakers are too few for a held-out validation split")
        valid_speakers = stratified_partition(speakers, genders, parts, rng)[0]
    valid = set(valid_speakers)
    train = [e for e in examples if speaker_of(e.client_id) not in valid]
    held = [e for e in examples if speaker_of(e.client_id) in valid]
    if not train or not held:
        raise DataError("the validation split left no training or no validation examples")
    return train, held


def _cap(examples, cap, rng):
    if cap is None or len(examples) <= cap:
        return examples
    keep = np.sort(rng.choice(len(examples), size=cap, replace=False))
    return [examples[i] for i in keep]


def train_attack_model(examples, cfg: AttackTrainConfig, rng: np.random.Generator, valid=None,
                       valid_speakers=None) -> AttackModel:
    """Fit standardisation and the ConvNet on shadow examples.

    ``valid`` defaults to a held-out, speaker-disjoint share of ``examples``
    (the speakers in ``valid_speakers`` when given). Both splits are capped
    by random subsampling when the config sets a cap. The checkpoint with
    the best validation UAR is kept.
    """
    examples = list(examples)
    if not examples:
        raise DataError("no attack examples")
    if valid is None:
        train, valid = split_by_speaker(examples, cfg.valid_fraction, rng, valid_speakers)
    else:
        train, valid = examples, list(valid)
    train = _cap(train, cfg.max_train_examples, rng)
    valid = _cap(valid, cfg.max_valid_examples, rng)
    X, y = stack_examples(train)
    Xv, yv = stack_examples(valid)
    if len(np.unique(y)) < 2:
        raise DataError("attack training data holds a single gender; the attacker cannot be trained")
    h, d = train[0].dw.shape
    spec = ConvNetSpec((h, d), h, cfg.channels, hidden_dims=cfg.hidden_dims,
                       dropout_rate=cfg.dropout_rate, num_classes=2)
    mean = X.mean(axis=0, dtype=np.float64).astype(np.float32)
    std = (X.std(axis=0, dtype=np.float64) + STD_FLOOR).astype(np.float32)
    Xs = normalize_inputs(X, mean, std, cfg.input_norm)
    Xvs = normalize_inputs(Xv, mean, std, cfg.input_norm)
    del X, Xv
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate, optimizer="adam")
    res = train_classifier(AttackConvNet(spec), (Xs, y), (Xvs, yv), tc, rng)
    shadow = sorted({speaker_of(e.client_id) for e in examples})
    return AttackModel(spec, res.params, mean, std, shadow, res.history, res.best_uar, cfg.input_norm)


def infer_attribute(model: AttackModel, records, lr: float, aggregation: str = "input"):
    """Predict the gender behind ``records`` (all from one client).

    ``aggregation="input"`` averages the pseudo-gradients before one forward
    pass; ``"output"`` averages per-record class probabilities instead.
    Returns ``(pred_z, probs)``.
    """
    records = list(records)
    if not records:
        raise ConfigError("need at least one record")
    if len({r.client_id for r in records}) != 1:
        raise ConfigError("records come from more than one client")
    feats = np.stack([record_features(r, lr) for r in records])
    if aggregation == "input":
        probs = model.predict_proba(feats.mean(axis=0, dtype=np.float64).astype(np.float32)[None])[0]
    elif aggregation == "output":
        probs = model.predict_proba(feats).mean(axis=0)
    else:
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    return int(np.argmax(probs)), probs


@dataclass(frozen=True)
class LeakageScenario:
    n: int | str = 1
    repeats: int = 10
    aggregation: str = "input"

    def __post_init__(self):
        if self.n != "all" and (int(self.n) != self.n or self.n < 1):
            raise ConfigError(f"n must be a positive integer or 'all', got {self.n!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.aggregation not in ("input", "output"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class AttackEvaluation:
    uar: float
    rows: list[dict]
    flagged: list[str]
    composition: udp.CompositionReport | None = None


def evaluate_attack(model: AttackModel, victim: RunLog, scenario: LeakageScenario, genders: dict[str, int],
                    seed: int = 0, cache: dict | None = None) -> AttackEvaluation:
    """Pooled gender UAR over ``repeats`` draws of ``n`` records per victim client.

    Draws use substreams keyed by ``(seed, client_id, n, repeat)``. A client
    with fewer than ``n`` records is evaluated with all of them and flagged.
    ``cache`` (keyed by record index tuples) may be shared across scenarios
    of the same victim run to avoid repeated forward passes.
    """
    by_client = victim.records_by_client()
    victim_speakers = {speaker_of(c) for c in by_client}
    overlap = victim_speakers & set(model.shadow_speakers)
    if overlap:
        raise DataError(f"victim and shadow speakers overlap: {sorted(overlap)}")
    lr = victim.learning_rate
    eps = udp.parse_epsilon(victim.config["epsilon"])
    if cache is None:
        cache = {}
    n_tag = 0 if scenario.n == "all" else int(scenario.n)
    draws = []
    flagged = []
    for cid in sorted(by_client):
        recs = by_client[cid]
        sid = speaker_of(cid)
        if sid not in genders:
            raise DataError(f"no gender known for victim speaker {sid}")
        short = scenario.n != "all" and len(recs) < scenario.n
        if short:
            flagged.append(cid)
        for r in range(scenario.repeats):
            if scenario.n == "all" or short:
                pick = tuple(range(len(recs)))
            else:
                rng = substream(seed, cid, n_tag, r)
                pick = tuple(sorted(rng.choice(len(recs), size=int(scenario.n), replace=False).tolist()))
            draws.append((cid, r, pick))

    todo, queued = [], set()
    for cid, _, pick in draws:
        key = (cid, pick, scenario.aggregation)
        if key not in cache and key not in queued:
            todo.append(key)
            queued.add(key)
    if todo:
        feats = []
        spans = []
        for cid, pick, agg in todo:
            recs = by_client[cid]
            f = np.stack([record_features(recs[i], lr) for i in pick])
            if agg == "input":
                f = f.mean(axis=0, dtype=np.float64).astype(np.float32)[None]
            spans.append((len(feats), len(f)))
            feats.extend(f)
        probs = model.predict_proba(np.stack(feats))
        for key, (start, length) in zip(todo, spans):
            cache[key] = probs[start:start + length].mean(axis=0)

    rows, truth, pred = [], [], []
    for cid, r, pick in draws:
        p = cache[(cid, pick, scenario.aggregation)]
        z = int(genders[speaker_of(cid)])
        pz = int(np.argmax(p))
        truth.append(z)
        pred.append(pz)
        rows.append({"epsilon": format_eps(eps), "n": str(scenario.n), "repeat_seed": r, "client_id": cid,
                     "true_z": z, "pred_z": pz, "p_z1": float(p[1])})
    n_obs = max(len(v) for v in by_client.values()) if scenario.n == "all" else int(scenario.n)
    comp = udp.compose(eps, float(victim.config["delta"]), n_obs)
    return AttackEvaluation(uar(truth, pred, 2), rows, flagged, comp)


def rows_to_csv(rows) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        vals = []
        for c in REPORT_COLUMNS:
            v = row[c]
            vals.append(repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
