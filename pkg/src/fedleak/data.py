"""Client populations: synthetic features, CSV ingestion, normalisation, sharding, folds.

A population is a list of :class:`ClientDataset`, one per (speaker, shard).
Feature rows are stored as a float64 matrix per client; emotion labels are
0=neutral, 1=sad, 2=happy, 3=angry and the private attribute is a binary
gender label shared by all of a speaker's utterances.
"""
from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

NUM_EMOTIONS = 4
EMOTIONS = ("neutral", "sad", "happy", "angry")
TRAIN_FRACTION = 0.8


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (Python's round is banker's)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    features: np.ndarray
    emotion: int
    gender: int


@dataclass
class ClientDataset:
    """One client: a shard of a single speaker's utterances.

    The first ``round(0.8 * n)`` rows form the local training split and the
    rest the validation split.
    """

    client_id: str
    speaker_id: str
    gender: int
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray = field(default=None)
    valid_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise DataError(f"client {self.client_id}: features {self.X.shape} and labels {self.y.shape} disagree")
        if self.train_idx is None:
            ntr = round_half_up(TRAIN_FRACTION * len(self.y))
            self.train_idx = np.arange(ntr)
            self.valid_idx = np.arange(ntr, len(self.y))

    def __len__(self):
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self):
        return self.X[self.train_idx]

    @property
    def y_train(self):
        return self.y[self.train_idx]

    @property
    def train_size(self) -> int:
        return len(self.train_idx)

    @property
    def utterances(self) -> list[Utterance]:
        return [Utterance(self.speaker_id, x, int(e), self.gender) for x, e in zip(self.X, self.y)]


def client_id_for(speaker_id: str, shard) -> str:
    return f"{speaker_id}#{shard}"


def speaker_of(client_id: str) -> str:
    return client_id.rsplit("#", 1)[0]


def group_by_speaker(clients) -> "OrderedDict[str, list[ClientDataset]]":
    out: OrderedDict[str, list[ClientDataset]] = OrderedDict()
    for c in clients:
        out.setdefault(c.speaker_id, []).append(c)
    return out


def gender_table(clients) -> dict[str, int]:
    """Speaker id to gender; raises on a speaker with two genders."""
    table: dict[str, int] = {}
    for c in clients:
        g = table.setdefault(c.speaker_id, c.gender)
        if g != c.gender:
            raise DataError(f"speaker {c.speaker_id} has inconsistent gender labels")
    return table


# -- synthetic generator -----------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_speakers: int = 40
    utterances_per_speaker: int = 50
    feature_dim: int = 88
    gender_shift_scale: float = 1.0
    emotion_shift_scale: float = 1.5
    noise_std: float = 1.0
    gender_smoothness: float = 4.0
    seed: int = 0

    def validate(self):
        if self.feature_dim < NUM_EMOTIONS:
            raise ConfigError(f"feature_dim must be >= {NUM_EMOTIONS} so emotion directions span, got {self.feature_dim}")
        if self.num_speakers < 1 or self.utterances_per_speaker < 1:
            raise ConfigError("num_speakers and utterances_per_speaker must be positive")
        if self.gender_shift_scale < 0 or self.emotion_shift_scale < 0 or self.noise_std < 0:
            raise ConfigError("shift scales and noise_std must be non-negative")
        if self.gender_smoothness < 0:
            raise ConfigError("gender_smoothness must be non-negative")


def _smooth_directions(rng: np.random.Generator, k: int, dim: int, width: float) -> np.ndarray:
    """``k`` unit vectors, Gaussian-smoothed along the coordinate axis when ``width > 0``."""
    a = rng.normal(size=(k, dim))
    if width > 0:
        half = int(math.ceil(3 * width)) + 1
        x = np.arange(-half, half + 1)
        kernel = np.exp(-x ** 2 / (2 * width * width))
        off = (len(kernel) - 1) // 2  # centred slice, also valid when the kernel is longer than dim
        a = np.stack([np.convolve(row, kernel)[off:off + dim] for row in a])
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def synth_generate(cfg: SynthConfig) -> tuple[list[ClientDataset], dict]:
    """Generate one client per speaker with gender- and emotion-dependent features.

    For speaker gender ``z`` (sign ``s = 2z - 1``) and emotion ``y``::

        x = e_s * mu_emotion[y] + g_s * s * (u + v[y]) + noise_std * N(0, I)

    ``u`` is a gender direction shared by all emotions and ``v[y]`` makes the
    gender shift depend on the emotion, so gender stays visible after
    per-speaker normalisation (which removes any constant per-speaker
    offset). Emotion means have N(0, 1/D) coordinates; the gender directions
    are unit vectors whose coordinates vary smoothly along the feature axis
    (Gaussian kernel of width ``gender_smoothness``), like neighbouring
    functionals of one acoustic descriptor. Everything is drawn once from
    the seed. Genders are a shuffled balanced assignment; emotions are
    balanced per speaker up to rounding.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    mu_emotion = rng.normal(size=(NUM_EMOTIONS, D)) / np.sqrt(D)
    u = _smooth_directions(rng, 1, D, cfg.gender_smoothness)[0]
    v = _smooth_directions(rng, NUM_EMOTIONS, D, cfg.gender_smoothness)
    genders = np.arange(cfg.num_speakers) % 2
    rng.shuffle(genders)
    width = len(str(cfg.num_speakers - 1))
    clients = []
    for s in range(cfg.num_speakers):
        z = int(genders[s])
        y = np.arange(cfg.utterances_per_speaker) % NUM_EMOTIONS
        rng.shuffle(y)
        sign = 2 * z - 1
        X = (cfg.emotion_shift_scale * mu_emotion[y]
             + cfg.gender_shift_scale * sign * (u + v[y])
             + cfg.noise_std * rng.normal(size=(len(y), D)))
        sid = f"spk{s:0{width}d}"
        clients.append(ClientDataset(client_id_for(sid, 0), sid, z, X, y))
    meta = {"generator": "synthetic", "config": asdict(cfg),
            "num_speakers": cfg.num_speakers, "num_utterances": cfg.num_speakers * cfg.utterances_per_speaker}
    return clients, meta


# -- CSV ingestion / export ----------------------------------------------------

BASE_COLUMNS = ("speaker_id", "shard", "gender", "emotion")


def export_features(clients, path=None) -> str:
    """Write clients in the feature CSV schema; returns the text."""
    clients = list(clients)
    if not clients:
        raise DataError("nothing to export")
    D = clients[0].feature_dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*BASE_COLUMNS, *(f"f_{i}" for i in range(D))])
    for c in clients:
        shard = c.client_id.rsplit("#", 1)[1] if "#" in c.client_id else "0"
        for x, e in zip(c.X, c.y):
            w.writerow([c.speaker_id, shard, c.gender, int(e), *(repr(float(v)) for v in x)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_features(path) -> list[ClientDataset]:
    """Read the feature CSV; one client per (speaker, shard), row order kept.

    Errors name the 1-based line number of the offending row (header is line 1).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in BASE_COLUMNS:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        fcols = [i for i, h in enumerate(header) if h.startswith("f_")]
        names = [header[i] for i in fcols]
        if not fcols or names != [f"f_{i}" for i in range(len(fcols))]:
            raise DataError(f"{path}: feature columns must be f_0..f_{{D-1}} in order")
        pos = {c: header.index(c) for c in BASE_COLUMNS}
        groups: OrderedDict[tuple[str, str], list] = OrderedDict()
        genders: dict[str, tuple[int, int]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            sid, shard = row[pos["speaker_id"]], row[pos["shard"]]
            try:
                g = int(row[pos["gender"]])
                e = int(row[pos["emotion"]])
            except ValueError:
                raise DataError(f"{path}: row {lineno} has a non-integer gender or emotion") from None
            if g not in (0, 1):
                raise DataError(f"{path}: row {lineno} gender must be 0 or 1, got {g}")
            if not 0 <= e < NUM_EMOTIONS:
                raise DataError(f"{path}: row {lineno} emotion must be in 0..3, got {e}")
            try:
                x = [float(row[i]) for i in fcols]
            except ValueError:
                raise DataError(f"{path}: row {lineno} has a non-numeric feature value") from None
            if not all(map(math.isfinite, x)):
                raise DataError(f"{path}: row {lineno} has a non-finite feature value")
            first = genders.setdefault(sid, (g, lineno))
            if first[0] != g:
                raise DataError(f"{path}: row {lineno} gives speaker {sid} gender {g}, "
                                f"but row {first[1]} gave {first[0]}")
            groups.setdefault((sid, shard), []).append((x, e))
    if not groups:
        raise DataError(f"{path}: no data rows")
    out = []
    for (sid, shard), rows in groups.items():
        X = np.array([r[0] for r in rows], dtype=np.float64)
        y = np.array([r[1] for r in rows], dtype=np.int64)
        out.append(ClientDataset(client_id_for(sid, shard), sid, genders[sid][0], X, y))
    return out


# -- normalisation, sharding, folds -----------------------------------------------

def merge_speakers(clients) -> list[ClientDataset]:
    """Concatenate each speaker's clients into a single client (shard 0)."""
    out = []
    for sid, cs in group_by_speaker(clients).items():
        out.append(ClientDataset(client_id_for(sid, 0), sid, cs[0].gender,
                                 np.concatenate([c.X for c in cs]), np.concatenate([c.y for c in cs])))
    return out


def znorm_per_speaker(clients) -> list[ClientDataset]:
    """Per speaker and feature: zero mean, unit population std over all of its utterances.

    Coordinates that are constant for a speaker become 0.
    """
    clients = list(clients)
    stats = {}
    for sid, cs in group_by_speaker(clients).items():
        X = np.concatenate([c.X for c in cs])
        if len(X) < 2:
            raise DataError(f"speaker {sid} has a single utterance; its std is undefined")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        stats[sid] = (mean, std)
    out = []
    for c in clients:
        mean, std = stats[c.speaker_id]
        safe = np.where(std > 0, std, 1.0)
        Xn = np.where(std > 0, (c.X - mean) / safe, 0.0)
        out.append(ClientDataset(c.client_id, c.speaker_id, c.gender, Xn, c.y.copy()))
    return out


def shard_speakers(clients, shards_per_speaker: int, rng: np.random.Generator) -> list[ClientDataset]:
    """Split each speaker's utterances, in shuffled order, into near-equal shards.

    Shard sizes differ by at most one; earlier shards take the remainder.
    """
    if shards_per_speaker < 1:
        raise ConfigError(f"shards_per_speaker must be >= 1, got {shards_per_speaker}")
    out = []
    for c in merge_speakers(clients):
        n = len(c)
        if n < shards_per_speaker:
            raise ConfigError(f"speaker {c.speaker_id} has {n} utterances, fewer than {shards_per_speaker} shards")
        order = rng.permutation(n)
        for k, idx in enumerate(np.array_split(order, shards_per_speaker)):
            out.append(ClientDataset(client_id_for(c.speaker_id, k), c.speaker_id, c.gender, c.X[idx], c.y[idx]))
    return out


def stratified_partition(speakers, genders: dict[str, int], parts: int, rng: np.random.Generator) -> list[list[str]]:
    """Deal speakers into ``parts`` disjoint groups, alternating genders, sizes within one."""
    if parts < 1:
        raise ConfigError(f"parts must be >= 1, got {parts}")
    speakers = sorted(speakers)
    if len(speakers) < parts:
        raise ConfigError(f"cannot split {len(speakers)} speakers into {parts} non-empty groups")
    by_gender = [[s for s in speakers if genders[s] == g] for g in (0, 1)]
    for lst in by_gender:
        rng.shuffle(lst)
    dealt = by_gender[0] + by_gender[1]
    groups = [[] for _ in range(parts)]
    for i, s in enumerate(dealt):
        groups[i % parts].append(s)
    return [sorted(g) for g in groups]


def split_pools(clients, shadow_fraction: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Gender-stratified split of speakers into (private pool, shadow pool)."""
    if not 0.0 < shadow_fraction < 1.0:
        raise ConfigError(f"shadow_fraction must lie in (0, 1), got {shadow_fraction}")
    genders = gender_table(clients)
    private, shadow = [], []
    for g in (0, 1):
        spk = sorted(s for s, v in genders.items() if v == g)
        rng.shuffle(spk)
        k = round_half_up(shadow_fraction * len(spk))
        shadow += spk[:k]
        private += spk[k:]
    if not private or not shadow:
        raise ConfigError("both the private and the shadow pool need at least one speaker")
    return sorted(private), sorted(shadow)


@dataclass
class FoldPlan:
    fold: int
    test_speakers: list[str]
    train_speakers: list[str]
    shadow_speakers: list[str]
    private_clients: list[str]
    shadow_clients: list[str]

    def validate(self):
        t, tr, sh = set(self.test_speakers), set(self.train_speakers), set(self.shadow_speakers)
        if t & tr:
            raise DataError(f"fold {self.fold}: test and training speakers overlap: {sorted(t & tr)}")
        if (t | tr) & sh:
            raise DataError(f"fold {self.fold}: shadow pool overlaps the private pool: {sorted((t | tr) & sh)}")

    def to_dict(self):
        return asdict(self)


def make_folds(clients, num_folds: int = 5, test_fraction: float = 0.2, rng: np.random.Generator | None = None,
               shadow_speakers=(), disjoint: bool = True) -> list[FoldPlan]:
    """Speaker-disjoint test folds over the private pool.

    Each fold holds out ``round(test_fraction * S)`` of the ``S`` private
    speakers. With ``disjoint`` the held-out sets are pairwise disjoint,
    which needs ``num_folds * test_fraction <= 1``.
    """
    if rng is None:
        raise ConfigError("make_folds needs an explicit rng")
    if num_folds < 1 or not 0.0 < test_fraction < 1.0:
        raise ConfigError("num_folds must be >= 1 and test_fraction in (0, 1)")
    if disjoint and num_folds * test_fraction > 1 + 1e-12:
        raise ConfigError(f"{num_folds} disjoint folds of fraction {test_fraction} exceed the speaker set")
    clients = list(clients)
    shadow = set(shadow_speakers)
    private = [s for s in group_by_speaker(clients) if s not in shadow]
    n_test = round_half_up(test_fraction * len(private))
    if n_test < 1 or n_test >= len(private):
        raise ConfigError(f"{len(private)} private speakers cannot form test folds of fraction {test_fraction}")
    order = list(private)
    rng.shuffle(order)
    tests = []
    if disjoint:
        if num_folds * n_test > len(order):
            raise ConfigError(f"{num_folds} disjoint folds of {n_test} speakers need more than {len(order)} speakers")
        tests = [order[i * n_test:(i + 1) * n_test] for i in range(num_folds)]
    else:
        seen = set()
        while len(tests) < num_folds:
            pick = tuple(sorted(rng.choice(order, n_test, replace=False)))
            if pick not in seen:
                seen.add(pick)
                tests.append(list(pick))
    plans = []
    for f, test in enumerate(tests):
        test = sorted(test)
        train = sorted(set(private) - set(test))
        tr = set(train)
        plan = FoldPlan(f, test, train, sorted(shadow),
                        [c.client_id for c in clients if c.speaker_id in tr],
                        [c.client_id for c in clients if c.speaker_id in shadow])
        plan.validate()
        plans.append(plan)
    return plans


def select(clients, speakers) -> list[ClientDataset]:
    keep = set(speakers)
    return [c for c in clients if c.speaker_id in keep]
