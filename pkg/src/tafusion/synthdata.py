"""Synthetic multimodal cohorts, their on-disk format and cross-subject splits.

Each subject has hidden latents: a static factor, a severity trajectory
z(t) = z0 + slope * tau (tau runs 0 -> 1 over the lab horizon), a vitals
factor and an ECG factor.  The label depends on the static factor, the
slope (the planted lab trend), the vitals and ECG factors, plus a
``beta_x``-weighted slope * ECG product that no single modality reveals.
Lab sampling intensity grows with exp(gamma * z(t)).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, MigrationError, ParseError, SplitError
from .hier import SIGNAL_SHAPE, EcgRecord, VitalsGrid
from .sparse import TimedObservation

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MULTICLASS, BINARY, REGRESSION = "multiclass", "binary", "regression"
TASKS = (MULTICLASS, BINARY, REGRESSION)
CLASS_NAMES = ("non-CVD", "CHD", "stroke", "HF")
DEFAULT_PRIORS = {
    MULTICLASS: tuple(float(c) / (125987 + 18445 + 4927 + 21418)
                      for c in (125987, 18445, 4927, 21418)),
    BINARY: (1 - 4035 / 40167, 4035 / 40167),
}
DAY = 1440.0
LAB_HISTORY = 365 * DAY  # long-horizon task: labs over the year before the latest ECG
ICU_HORIZON = DAY
CATEGORICAL_ITEM = "lab_cat"
N_CATEGORIES = 5
ABNORMAL_TERMS = 43  # the top ids of the text vocabulary mark abnormal findings


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 1000
    task: str = BINARY
    n_static: int = 8
    n_lab_items: int = 8
    n_vital_items: int = 24
    n_ecg_features: int = 6
    text_vocab: int = 143
    class_prior: tuple[float, ...] | None = None
    mnar_gamma: float = 1.0
    beta_x: float = 1.0
    ecg_missing: float = 0.467
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)  # static, labs, vitals, ecg
    ecg_records_mean: float = 0.6
    lab_rate: float = 3.0  # expected observations per item over the horizon at z = 0
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("n_subjects", "n_static", "n_lab_items", "n_vital_items", "n_ecg_features",
                     "text_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.text_vocab > 143 or self.text_vocab <= ABNORMAL_TERMS:
            raise ConfigError(f"text_vocab must be in ({ABNORMAL_TERMS}, 143]")
        if not 0.0 <= self.ecg_missing <= 1.0:
            raise ConfigError(f"ecg_missing must be in [0, 1], got {self.ecg_missing}")
        if len(self.weights) != 4:
            raise ConfigError("weights must list static, labs, vitals, ecg")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        prior = self.prior
        if self.task != REGRESSION:
            k = 4 if self.task == MULTICLASS else 2
            if len(prior) != k or any(p <= 0 for p in prior) or abs(sum(prior) - 1) > 1e-9:
                raise ConfigError(f"class prior must be {k} positive values summing to 1, "
                                  f"got {prior}")

    @property
    def prior(self) -> tuple[float, ...]:
        if self.class_prior is not None:
            return tuple(float(p) for p in self.class_prior)
        return DEFAULT_PRIORS.get(self.task, ())

    @property
    def n_classes(self) -> int:
        return {MULTICLASS: 4, BINARY: 2, REGRESSION: 0}[self.task]

    @property
    def lab_items(self) -> tuple[str, ...]:
        return tuple(f"lab{j}" for j in range(self.n_lab_items)) + (CATEGORICAL_ITEM,)

    @property
    def vital_items(self) -> tuple[str, ...]:
        return tuple(f"vital{j:02d}" for j in range(self.n_vital_items))

    @property
    def has_vitals(self) -> bool:
        return self.task != MULTICLASS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["class_prior"] = None if self.class_prior is None else list(self.class_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        if d.get("class_prior") is not None:
            d["class_prior"] = tuple(d["class_prior"])
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad cohort config: {e}") from None


@dataclass(eq=False)
class Subject:
    subject_id: str
    t_anchor: float
    static: np.ndarray
    labs: tuple[TimedObservation, ...]
    vitals: VitalsGrid | None
    ecg: tuple[EcgRecord, ...]
    label: float
    latent: dict | None = field(default=None, compare=False, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.t_anchor == other.t_anchor
                and np.array_equal(self.static, other.static) and self.labs == other.labs
                and self.vitals == other.vitals and self.ecg == other.ecg
                and self.label == other.label)


@dataclass(eq=False)
class CohortDataset:
    config: CohortConfig
    subjects: list[Subject]
    schema_version: int = SCHEMA_VERSION
    artifacts: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, CohortDataset):
            return NotImplemented
        return (self.config == other.config and self.schema_version == other.schema_version
                and self.subjects == other.subjects and self.artifacts == other.artifacts)

    def __len__(self):
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def labels(self) -> np.ndarray:
        y = np.array([s.label for s in self.subjects])
        return y.astype(np.int64) if self.config.task != REGRESSION else y

    def digest(self) -> str:
        return dataset_digest(self)


# ---------------------------------------------------------------- generator


def _loadings(seed: int, cfg: CohortConfig) -> dict:
    """Fixed per-cohort item parameters (shared by all subjects)."""
    r = np.random.default_rng([seed, 7919])
    L = cfg.n_lab_items
    V = cfg.n_vital_items
    base = np.full(L, cfg.lab_rate)
    if L > 2:
        base[-1] = cfg.lab_rate * 0.05  # one rarely measured item
    return {
        "static_load": r.uniform(0.6, 1.2, cfg.n_static) * r.choice([-1, 1], cfg.n_static),
        "lab_mu": r.uniform(5, 100, L), "lab_sd": r.uniform(1, 10, L),
        "lab_load": r.uniform(0.7, 1.0, L) * r.choice([-1, 1], L), "lab_base": base,
        "vit_mu": r.uniform(20, 120, V), "vit_sd": r.uniform(2, 15, V),
        "vit_level": r.uniform(0.6, 1.0, V) * r.choice([-1, 1], V),
        "vit_z": r.uniform(0.0, 0.3, V), "vit_phase": r.uniform(0, 2 * np.pi, V),
        "vit_obs": r.uniform(0.35, 0.95, V),
        "lead_phase": r.uniform(0, 2 * np.pi, (12, 3)), "lead_amp": r.uniform(0.2, 1.0, (12, 3)),
        "lead_gain": r.uniform(0.5, 1.5, 12),
        "feat_load": r.uniform(0.6, 1.0, cfg.n_ecg_features) * r.choice([-1, 1], cfg.n_ecg_features),
    }


def _draw_latents(rng, n: int) -> dict[str, np.ndarray]:
    z = rng.standard_normal((n, 5))
    return {"static": z[:, 0], "z0": z[:, 1], "slope": z[:, 2], "vitals": z[:, 3], "ecg": z[:, 4]}


def _multiclass_logits(lat: dict, cfg: CohortConfig) -> np.ndarray:
    ws, wl, _, we = cfg.weights
    s, l, e = lat["static"], lat["slope"], lat["ecg"]
    zero = np.zeros_like(s)
    return np.stack([
        zero,
        wl * 1.5 * l + ws * 0.4 * s + cfg.beta_x * l * e,
        ws * 1.5 * s + wl * 0.3 * l,
        we * 1.5 * e + ws * 0.3 * s,
    ], axis=1)


def _linear_predictor(lat: dict, cfg: CohortConfig) -> np.ndarray:
    ws, wl, wv, we = cfg.weights
    return (ws * lat["static"] + wl * lat["slope"] + wv * lat["vitals"] + we * lat["ecg"]
            + cfg.beta_x * lat["slope"] * lat["ecg"])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrate_intercepts(cfg: CohortConfig, n: int = 200_000) -> np.ndarray:
    """Intercepts matching the configured class prior on a fixed latent sample."""
    lat = _draw_latents(np.random.default_rng([cfg.seed, 2 ** 31 - 1]), n)
    prior = np.array(cfg.prior)
    if cfg.task == BINARY:
        eta = _linear_predictor(lat, cfg)
        lo, hi = -30.0, 30.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if _sigmoid(eta + mid).mean() < prior[1]:
                lo = mid
            else:
                hi = mid
        return np.array([0.5 * (lo + hi)])
    if cfg.task == MULTICLASS:
        logits = _multiclass_logits(lat, cfg)
        b = np.log(prior)
        for _ in range(500):
            z = logits + b
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            freq = p.mean(axis=0)
            b = b + np.log(prior / freq)
            b -= b[0]
            if np.abs(freq - prior).max() < 1e-10:
                break
        return b
    return np.array([np.log(3.5)])


def _label(lat: dict, cfg: CohortConfig, b: np.ndarray, rng) -> float:
    if cfg.task == BINARY:
        p = np.asarray(_sigmoid(_linear_predictor(lat, cfg) + b[0])).item()
        return float(rng.uniform() < p)
    if cfg.task == MULTICLASS:
        z = _multiclass_logits(lat, cfg)[0] + b
        p = np.exp(z - z.max())
        p /= p.sum()
        return float(rng.choice(4, p=p))
    mu = np.asarray(np.exp(b[0] + 0.35 * _linear_predictor(lat, cfg))).item()
    return float(rng.gamma(2.0, mu / 2.0))


def _labs(lat, cfg, P, rng, t_lo, t_hi):
    """MNAR lab sampling by thinning a Poisson process with rate ~ exp(gamma * z(t))."""
    z0, slope = float(lat["z0"][0]), float(lat["slope"][0])
    span = t_hi - t_lo
    g = cfg.mnar_gamma
    zmax = z0 + max(slope, 0.0)
    out = []
    for j in range(cfg.n_lab_items):
        lam_max = P["lab_base"][j] * np.exp(g * zmax)
        n = rng.poisson(lam_max)
        tau = np.sort(rng.uniform(0, 1, n))
        z = z0 + slope * tau
        keep = rng.uniform(size=n) < np.exp(g * (z - zmax))
        tau, z = tau[keep], z[keep]
        vals = P["lab_mu"][j] + P["lab_sd"][j] * (P["lab_load"][j] * z
                                                   + 0.4 * rng.standard_normal(len(z)))
        for t, v in zip(t_lo + span * tau, vals):
            out.append(TimedObservation("", f"lab{j}", float(t), float(v)))
    # a categorical lab: severity band
    n = rng.poisson(1.0 * np.exp(g * z0))
    for tau in np.sort(rng.uniform(0, 1, n)):
        z = z0 + slope * tau + 0.5 * rng.standard_normal()
        c = int(np.clip(np.floor(z + 2.5), 0, N_CATEGORIES - 1))
        out.append(TimedObservation("", CATEGORICAL_ITEM, float(t_lo + span * tau), c, True))
    return out


def _vitals(lat, cfg, P, rng) -> VitalsGrid:
    times = 60.0 * np.arange(24)
    tau = times / ICU_HORIZON
    z = float(lat["z0"][0]) + float(lat["slope"][0]) * tau
    lv = float(lat["vitals"][0])
    V = cfg.n_vital_items
    wave = 0.3 * np.sin(2 * np.pi * tau[None, :] + P["vit_phase"][:, None])
    val = (P["vit_mu"][:, None] + P["vit_sd"][:, None]
           * (P["vit_level"][:, None] * lv + P["vit_z"][:, None] * z[None, :] + wave
              + 0.5 * rng.standard_normal((V, 24))))
    mask = rng.uniform(size=(V, 24)) < P["vit_obs"][:, None]
    mask &= ~(rng.uniform(size=(V, 1)) < 0.05)  # occasionally an item is never charted
    return VitalsGrid(cfg.vital_items, times, np.where(mask, val, 0.0), mask)


def _signal(le: float, P, rng) -> np.ndarray:
    t = np.arange(SIGNAL_SHAPE[1]) / 125.0
    hr = 70.0 + 8.0 * np.tanh(0.5 * le) + 3.0 * rng.standard_normal()
    f = hr / 60.0
    base = np.zeros(SIGNAL_SHAPE)
    for h in range(3):
        base += P["lead_amp"][:, h:h + 1] * np.sin(2 * np.pi * (h + 1) * f * t[None, :]
                                                    + P["lead_phase"][:, h:h + 1])
    phase0 = rng.uniform(0, 1.0 / f)
    beats = np.arange(phase0, t[-1] + 1.0, 1.0 / f)
    amp = 1.0 + 0.6 * le + 0.2 * rng.standard_normal()
    spike = np.exp(-0.5 * ((t[None, :] - beats[:, None]) / 0.02) ** 2).sum(axis=0)
    sig = base + amp * P["lead_gain"][:, None] * spike[None, :]
    sig += 0.05 * rng.standard_normal(SIGNAL_SHAPE)
    return sig.astype(np.float32)


def _ecg(lat, cfg, P, rng, times) -> list[EcgRecord]:
    le = float(lat["ecg"][0])
    out = []
    for t in times:
        feats = P["feat_load"] * le + 0.5 * rng.standard_normal(cfg.n_ecg_features)
        n_terms = int(rng.integers(2, 6))
        p_abn = _sigmoid(1.5 * le - 1.0)
        normal_vocab = cfg.text_vocab - ABNORMAL_TERMS
        terms = sorted({int(rng.integers(normal_vocab, cfg.text_vocab)) if rng.uniform() < p_abn
                        else int(rng.integers(0, normal_vocab)) for _ in range(n_terms)})
        out.append(EcgRecord(_signal(le, P, rng), feats, tuple(terms), float(t)))
    return out


def _subject(i: int, cfg: CohortConfig, P: dict, b: np.ndarray) -> Subject:
    rng = np.random.default_rng([cfg.seed, i])
    lat = _draw_latents(rng, 1)
    sid = f"S{i:06d}"
    static = P["static_load"] * lat["static"][0] + 0.8 * rng.standard_normal(cfg.n_static)
    n_rec = 1 + min(3, int(rng.poisson(cfg.ecg_records_mean)))
    if cfg.task == MULTICLASS:
        # anchor is the latest ECG; labs cover the year before it
        t_anchor = 0.0
        times = [0.0] + (-rng.uniform(DAY, 2 * 365 * DAY, n_rec - 1)).round(3).tolist()
        labs = _labs(lat, cfg, P, rng, -LAB_HISTORY, 0.0)
        vitals = None
        ecg = _ecg(lat, cfg, P, rng, sorted(times))
    else:
        t_anchor = 0.0  # ICU admission
        labs = _labs(lat, cfg, P, rng, 0.0, ICU_HORIZON)
        vitals = _vitals(lat, cfg, P, rng)
        times = sorted(rng.uniform(-720.0, ICU_HORIZON, n_rec).round(3).tolist())
        ecg = _ecg(lat, cfg, P, rng, times)
        if rng.uniform() < cfg.ecg_missing:
            ecg = []
    labs = tuple(TimedObservation(sid, o.item_id, round(o.timestamp, 3), o.value, o.categorical)
                 for o in labs)
    label = _label(lat, cfg, b, rng)
    latent = {k: float(v[0]) for k, v in lat.items()}
    return Subject(sid, t_anchor, static, labs, vitals, tuple(ecg), label, latent)


def generate_cohort(cfg: CohortConfig) -> CohortDataset:
    P = _loadings(cfg.seed, cfg)
    b = calibrate_intercepts(cfg)
    subjects = [_subject(i, cfg, P, b) for i in range(cfg.n_subjects)]
    log.info("generated %d subjects (%s)", len(subjects), cfg.task)
    return CohortDataset(cfg, subjects)


# -------------------------------------------------------------- persistence


def _record_json(s: Subject, sig_index: list[int]) -> dict:
    d = {
        "id": s.subject_id, "t_anchor": s.t_anchor, "label": s.label,
        "static": s.static.tolist(),
        "labs": [[o.item_id, o.timestamp, o.value, int(o.categorical)] for o in s.labs],
        "ecg": [{"t": r.timestamp, "features": r.features.tolist(), "text": list(r.text_tokens),
                 "signal": k} for r, k in zip(s.ecg, sig_index)],
    }
    if s.vitals is not None:
        g = s.vitals
        d["vitals"] = {"items": list(g.items), "times": g.times.tolist(),
                       "values": [[float(v) if m else None for v, m in zip(row, mrow)]
                                  for row, mrow in zip(g.values, g.mask)]}
    return d


def _canonical(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _signal_bytes(r: EcgRecord) -> bytes:
    return np.ascontiguousarray(r.signal, dtype="<f4").tobytes()


def dataset_digest(ds: CohortDataset) -> str:
    h = hashlib.sha256()
    h.update(_canonical(ds.config.to_dict()).encode())
    k = 0
    for s in ds.subjects:
        idx = list(range(k, k + len(s.ecg)))
        k += len(s.ecg)
        h.update(_canonical(_record_json(s, idx)).encode())
        h.update(b"\n")
        for r in s.ecg:
            h.update(_signal_bytes(r))
    return h.hexdigest()


IDX_MAGIC = b"TFSI"
IDX_HEAD = struct.Struct("<4sIQ")
IDX_ENTRY = struct.Struct("<QII")


def write_dataset(ds: CohortDataset, path) -> str:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path / "subjects.jsonl", "w") as fj, open(path / "signals.bin", "wb") as fb:
        offset = 0
        for s in ds.subjects:
            idx = []
            for r in s.ecg:
                raw = _signal_bytes(r)
                fb.write(raw)
                entries.append((offset, *r.signal.shape))
                idx.append(len(entries) - 1)
                offset += len(raw)
            fj.write(_canonical(_record_json(s, idx)) + "\n")
    with open(path / "signals.idx", "wb") as fi:
        fi.write(IDX_HEAD.pack(IDX_MAGIC, SCHEMA_VERSION, len(entries)))
        for e in entries:
            fi.write(IDX_ENTRY.pack(*e))
    digest = dataset_digest(ds)
    manifest = {"schema_version": ds.schema_version, "config": ds.config.to_dict(),
                "n_subjects": len(ds), "digest": digest, "artifacts": ds.artifacts}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return digest


def _read_index(path: Path) -> list[tuple[int, int, int]]:
    blob = (path / "signals.idx").read_bytes()
    if len(blob) < IDX_HEAD.size:
        raise ParseError("signals.idx: truncated header")
    magic, version, n = IDX_HEAD.unpack_from(blob)
    if magic != IDX_MAGIC:
        raise ParseError("signals.idx: bad magic")
    if version != SCHEMA_VERSION:
        raise MigrationError(f"signals.idx version {version}, expected {SCHEMA_VERSION}")
    if len(blob) != IDX_HEAD.size + n * IDX_ENTRY.size:
        raise ParseError(f"signals.idx: expected {n} entries, file size {len(blob)} disagrees")
    return [IDX_ENTRY.unpack_from(blob, IDX_HEAD.size + i * IDX_ENTRY.size) for i in range(n)]


def _subject_from_json(d: dict, signals: memoryview, index, line: int) -> Subject:
    sid = d["id"]
    labs = tuple(TimedObservation(sid, it, float(t), (int(v) if c else float(v)), bool(c))
                 for it, t, v, c in d["labs"])
    ecg = []
    for e in d["ecg"]:
        k = e["signal"]
        if not 0 <= k < len(index):
            raise ParseError(f"subjects.jsonl line {line}: signal ref {k} out of range")
        off, rows, cols = index[k]
        end = off + 4 * rows * cols
        if end > len(signals):
            raise ParseError(f"signals.bin truncated at record {k} (subjects.jsonl line {line})")
        sig = np.frombuffer(signals[off:end], dtype="<f4").reshape(rows, cols)
        ecg.append(EcgRecord(sig.astype(np.float32), e["features"], e["text"], e["t"]))
    vit = None
    if "vitals" in d:
        v = d["vitals"]
        mask = np.array([[x is not None for x in row] for row in v["values"]], dtype=bool)
        vals = np.array([[0.0 if x is None else x for x in row] for row in v["values"]], dtype=float)
        vit = VitalsGrid(v["items"], v["times"], vals, mask)
    return Subject(sid, float(d["t_anchor"]), np.array(d["static"], dtype=float), labs, vit,
                   tuple(ecg), float(d["label"]))


def read_dataset(path) -> CohortDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no dataset at {path}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"manifest.json: {e}") from None
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise MigrationError(f"dataset schema version {version}, this build reads {SCHEMA_VERSION}")
    cfg = CohortConfig.from_dict(manifest["config"])
    index = _read_index(path)
    signals = memoryview((path / "signals.bin").read_bytes())
    subjects = []
    with open(path / "subjects.jsonl") as f:
        for line_no, line in enumerate(f, start=1):
            try:
                d = json.loads(line)
                subjects.append(_subject_from_json(d, signals, index, line_no))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                if isinstance(e, ParseError):
                    raise
                raise ParseError(f"subjects.jsonl line {line_no}: {type(e).__name__}: {e}") from None
    if len(subjects) != manifest.get("n_subjects"):
        raise ParseError(f"subjects.jsonl has {len(subjects)} records, manifest says "
                         f"{manifest.get('n_subjects')}")
    ds = CohortDataset(cfg, subjects, version, dict(manifest.get("artifacts", {})))
    if ds.digest() != manifest.get("digest"):
        raise ParseError("dataset content does not match the manifest digest")
    return ds


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class FoldRoles:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[FoldRoles, ...]
    seed: int
    n: int


def split_cross_subject(ds_or_n, folds: int = 5, ratios: Sequence[float] | None = None,
                        seed: int = 0) -> SplitPlan:
    """Subject-level k-fold plan: each subject is tested once; the rest splits train/val.

    Default ratios keep train:val at 4:1 (64/16/20 for five folds).
    """
    n = ds_or_n if isinstance(ds_or_n, int) else len(ds_or_n)
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    if ratios is None:
        rest = 1.0 - 1.0 / folds
        ratios = (0.8 * rest, 0.2 * rest, 1.0 / folds)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    if abs(ratios[2] - 1.0 / folds) > 1e-9:
        raise ConfigError(f"test ratio {ratios[2]} must equal 1/folds for {folds}-fold CV")
    if n < folds:
        raise SplitError(f"{n} subjects cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(perm, folds)
    n_val = int(round(ratios[1] * n))
    out = []
    for f in range(folds):
        test = chunks[f]
        rest = np.concatenate([c for g, c in enumerate(chunks) if g != f])
        rest = rest[np.random.default_rng([seed, f]).permutation(len(rest))]
        val, train = rest[:n_val], rest[n_val:]
        if len(train) == 0 or len(val) == 0:
            raise SplitError(f"fold {f}: {n} subjects leave an empty train or validation role")
        out.append(FoldRoles(tuple(sorted(int(i) for i in train)),
                             tuple(sorted(int(i) for i in val)),
                             tuple(sorted(int(i) for i in test))))
    return SplitPlan(tuple(out), seed, n)
