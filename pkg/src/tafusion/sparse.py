"""Imputation-free encoding of sparse, irregular series.

Pipeline per subject: each observation becomes a (value token, source token)
pair, is placed in a percentile-defined window of relative time, windows
accumulate all earlier tokens, each window is embedded as the mean of
value-embedding * source-embedding products, and a BiLSTM runs over the
window sequence (oldest first).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (ConfigError, EmptySequenceError, FitError, LeakageError, ParseError,
                     SchemeError, VocabularyError)
from .numerics import ParameterSet, Tensor, bilstm_forward, embedding_lookup, mean_pool
from .numerics.params import init_bilstm, init_embedding
from .numerics.tensor import matmul

ECG_RELATIVE = "ecg_relative"
ADMISSION_RELATIVE = "admission_relative"

# window percentiles for long-horizon (anchor = latest ECG) and ICU-style tasks
BIASED_PERCENTILES = (0, 5, 10, 20, 40, 80, 100)
DECILE_PERCENTILES = tuple(range(0, 101, 10))

DEFAULT_BINS = 16


@dataclass(frozen=True)
class TimedObservation:
    subject_id: str
    item_id: str
    timestamp: float
    value: float
    categorical: bool = False

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise ValueError(f"non-finite timestamp for {self.subject_id}/{self.item_id}")
        if not self.categorical and not np.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.subject_id}/{self.item_id}")


def fingerprint(subject_ids: Iterable[str]) -> str:
    h = hashlib.sha256()
    for sid in sorted(set(map(str, subject_ids))):
        h.update(sid.encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


class TrainingScope:
    """The set of training subjects a fitted artifact is allowed to learn from."""

    def __init__(self, train_ids: Iterable[str]):
        self.train_ids = frozenset(map(str, train_ids))
        self.fingerprint = fingerprint(self.train_ids)

    def admit(self, subject_ids: Iterable[str]):
        outside = {str(s) for s in subject_ids} - self.train_ids
        if outside:
            raise LeakageError(f"{len(outside)} non-training subject(s) offered for fitting, "
                               f"e.g. {sorted(outside)[0]!r}")

    def require(self, fitted_on: str, what: str):
        if fitted_on != self.fingerprint:
            raise LeakageError(f"{what} was fitted on {fitted_on}, not on training split "
                               f"{self.fingerprint}")


# ---------------------------------------------------------------- binning


@dataclass(frozen=True)
class QuantileBinner:
    item_id: str
    bin_count: int
    edges: tuple[float, ...]
    fitted_on: str = ""

    def bin(self, value) -> np.ndarray | int:
        # count of edges strictly below the value; clamps to [0, B-1] by construction
        out = np.searchsorted(np.asarray(self.edges), value, side="left")
        return int(out) if np.ndim(out) == 0 else out


def fit_quantile_bins(values: Sequence[float], B: int = DEFAULT_BINS, item_id: str = "",
                      scope: TrainingScope | None = None,
                      subject_ids: Sequence[str] | None = None) -> QuantileBinner:
    if B < 2:
        raise ConfigError(f"bin count must be >= 2, got {B}")
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise FitError(f"no values to fit bins for item {item_id!r}")
    fitted_on = ""
    if scope is not None:
        if subject_ids is None:
            raise LeakageError("scoped fit needs the subject id of every value")
        scope.admit(subject_ids)
        fitted_on = scope.fingerprint
    edges = np.quantile(vals, np.arange(1, B) / B)
    return QuantileBinner(item_id, B, tuple(float(e) for e in edges), fitted_on)


@dataclass(frozen=True)
class ItemSpec:
    item_id: str
    categorical: bool = False
    n_categories: int = 0


class SparseTokenizer:
    """Per-item contiguous value-token blocks plus one source token per item."""

    def __init__(self, items: Sequence[ItemSpec], binners: dict[str, QuantileBinner]):
        self.items = list(items)
        self.binners = dict(binners)
        self.source_index = {it.item_id: i for i, it in enumerate(self.items)}
        self.offsets: dict[str, int] = {}
        self.block_size: dict[str, int] = {}
        pos = 0
        for it in self.items:
            size = it.n_categories if it.categorical else self.binners[it.item_id].bin_count
            self.offsets[it.item_id] = pos
            self.block_size[it.item_id] = size
            pos += size
        self.value_vocab = pos
        self.spec = {it.item_id: it for it in self.items}

    @property
    def n_sources(self) -> int:
        return len(self.items)

    def fitted_on(self) -> set[str]:
        return {b.fitted_on for b in self.binners.values()}

    def tokenize(self, obs: TimedObservation) -> tuple[int, int]:
        it = self.spec.get(obs.item_id)
        if it is None:
            raise VocabularyError(f"unknown item {obs.item_id!r}")
        if it.categorical:
            cat = int(obs.value)
            if not 0 <= cat < it.n_categories:
                raise VocabularyError(f"category {cat} outside block of {it.n_categories} "
                                      f"for item {obs.item_id!r}")
            local = cat
        else:
            local = self.binners[obs.item_id].bin(obs.value)
        return self.offsets[obs.item_id] + local, self.source_index[obs.item_id]


def fit_tokenizer(observations: Sequence[TimedObservation], items: Sequence[ItemSpec],
                  B: int = DEFAULT_BINS, scope: TrainingScope | None = None) -> SparseTokenizer:
    by_item: dict[str, list[TimedObservation]] = {it.item_id: [] for it in items}
    for o in observations:
        if o.item_id in by_item:
            by_item[o.item_id].append(o)
    binners = {}
    for it in items:
        if it.categorical:
            continue
        obs = by_item[it.item_id]
        if not obs:
            # an item never seen in training still needs a block; it collapses to bin 0
            binners[it.item_id] = QuantileBinner(it.item_id, B, (0.0,) * (B - 1),
                                                 scope.fingerprint if scope else "")
            continue
        binners[it.item_id] = fit_quantile_bins([o.value for o in obs], B, it.item_id, scope,
                                                [o.subject_id for o in obs])
    return SparseTokenizer(items, binners)


def tokenize_value(binner: QuantileBinner | None, obs: TimedObservation,
                   tokenizer: SparseTokenizer) -> tuple[int, int]:
    """Single-observation form; ``binner`` (if given) must be the tokenizer's own."""
    if binner is not None and tokenizer.binners.get(obs.item_id) is not binner:
        raise VocabularyError(f"binner for {binner.item_id!r} is not part of this tokenizer")
    return tokenizer.tokenize(obs)


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class TimeWindowScheme:
    anchor_kind: str
    percentiles: tuple[float, ...]
    boundaries: tuple[float, ...]
    fitted_on: str = ""

    @property
    def window_count(self) -> int:
        return len(self.percentiles) - 1

    def delta(self, t_event, t_anchor):
        if self.anchor_kind == ECG_RELATIVE:
            return np.subtract(t_anchor, t_event)
        return np.subtract(t_event, t_anchor)

    def assign(self, delta) -> np.ndarray | int:
        """Chronological window index (0 = oldest) for relative time(s) ``delta``."""
        cuts = np.asarray(self.boundaries[1:-1])
        idx = np.searchsorted(cuts, delta, side="right")
        if self.anchor_kind == ECG_RELATIVE:
            # larger distance before the anchor is older
            idx = self.window_count - 1 - idx
        return int(idx) if np.ndim(idx) == 0 else idx


def build_time_windows(deltas: Sequence[float], percentiles: Sequence[float],
                       anchor_kind: str = ADMISSION_RELATIVE, scope: TrainingScope | None = None,
                       subject_ids: Sequence[str] | None = None) -> TimeWindowScheme:
    if anchor_kind not in (ECG_RELATIVE, ADMISSION_RELATIVE):
        raise ConfigError(f"unknown anchor kind {anchor_kind!r}")
    pct = tuple(float(p) for p in percentiles)
    if len(pct) < 2 or any(b < a for a, b in zip(pct, pct[1:])):
        raise ConfigError(f"percentiles must be >= 2 nondecreasing values, got {pct}")
    d = np.asarray(deltas, dtype=float)
    if d.size == 0:
        raise SchemeError("no observations to build time windows from")
    fitted_on = ""
    if scope is not None:
        if subject_ids is None:
            raise LeakageError("scoped scheme fit needs subject ids")
        scope.admit(subject_ids)
        fitted_on = scope.fingerprint
    bounds = np.percentile(d, pct)
    bounds = np.maximum.accumulate(bounds)
    return TimeWindowScheme(anchor_kind, pct, tuple(float(b) for b in bounds), fitted_on)


@dataclass
class WindowedTokenSet:
    windows: list[list[tuple[int, int]]] = field(default_factory=list)

    def __len__(self):
        return len(self.windows)


def assign_and_accumulate(observations: Sequence[TimedObservation], scheme: TimeWindowScheme,
                          tokenizer: SparseTokenizer, t_anchor: float) -> WindowedTokenSet:
    K = scheme.window_count
    own: list[list[tuple[int, int]]] = [[] for _ in range(K)]
    for o in observations:
        k = scheme.assign(scheme.delta(o.timestamp, t_anchor))
        own[k].append(tokenizer.tokenize(o))
    acc: list[tuple[int, int]] = []
    out = []
    for k in range(K):
        acc = acc + own[k]
        out.append(sorted(acc, key=lambda p: (p[1], p[0])))
    return WindowedTokenSet(out)


def embed_window(tokens: Sequence[tuple[int, int]], value_table: Tensor,
                 source_table: Tensor) -> Tensor:
    if not tokens:
        raise EmptySequenceError("embed_window needs at least one token; empty windows are zero")
    toks = sorted(tokens, key=lambda p: (p[1], p[0]))
    v = embedding_lookup(value_table, [p[0] for p in toks])
    s = embedding_lookup(source_table, [p[1] for p in toks])
    return mean_pool(v * s)


@dataclass
class SparseSeriesEmbedding:
    window_embeddings: Tensor
    steps: Tensor
    summary: Tensor


def encode_sparse_series(observations: Sequence[TimedObservation], scheme: TimeWindowScheme,
                         tokenizer: SparseTokenizer, params: ParameterSet, t_anchor: float,
                         prefix: str = "") -> SparseSeriesEmbedding:
    """Per-subject reference path; :class:`SparseSeriesEncoder` is the batched one."""
    from .numerics.tensor import stack

    wts = assign_and_accumulate(observations, scheme, tokenizer, t_anchor)
    vt, st = params[f"{prefix}value_emb"], params[f"{prefix}source_emb"]
    d = vt.shape[1]
    rows = [embed_window(w, vt, st) if w else Tensor(np.zeros(d)) for w in wts.windows]
    win = stack(rows, axis=0)
    steps, summary = bilstm_forward(win, params, f"{prefix}rnn")
    return SparseSeriesEmbedding(win, steps, summary)


# --------------------------------------------------------- batched encoder


@dataclass
class PreparedSeries:
    value_ids: np.ndarray
    source_ids: np.ndarray
    windows: np.ndarray


class SparseSeriesEncoder:
    """Batched encoder exposing one token per time window (the BiLSTM states)."""

    kind = "sparse"

    def __init__(self, tokenizer: SparseTokenizer, scheme: TimeWindowScheme, d: int = 16,
                 hidden: int = 16, seed: int = 0):
        self.tokenizer = tokenizer
        self.scheme = scheme
        self.d = d
        self.hidden = hidden
        self.params = ParameterSet(seed)
        init_embedding(self.params, "value_emb", tokenizer.value_vocab, d)
        init_embedding(self.params, "source_emb", tokenizer.n_sources, d)
        init_bilstm(self.params, "rnn", d, hidden)

    @property
    def n_tokens(self) -> int:
        return self.scheme.window_count

    @property
    def width(self) -> int:
        return 2 * self.hidden

    def prepare(self, observations: Sequence[TimedObservation], t_anchor: float) -> PreparedSeries:
        if not observations:
            z = np.zeros(0, dtype=np.int64)
            return PreparedSeries(z, z, z)
        toks = np.array([self.tokenizer.tokenize(o) for o in observations], dtype=np.int64)
        ts = np.array([o.timestamp for o in observations])
        win = np.asarray(self.scheme.assign(self.scheme.delta(ts, t_anchor)), dtype=np.int64)
        order = np.lexsort((toks[:, 0], toks[:, 1], win))
        return PreparedSeries(toks[order, 0], toks[order, 1], win[order])

    def collate(self, items: Sequence[PreparedSeries]) -> dict:
        B = len(items)
        K = self.n_tokens
        O = max(1, max(len(p.value_ids) for p in items))
        vid = np.zeros((B, O), dtype=np.int64)
        sid = np.zeros((B, O), dtype=np.int64)
        pool = np.zeros((B, K, O))
        for b, p in enumerate(items):
            n = len(p.value_ids)
            if not n:
                continue
            vid[b, :n] = p.value_ids
            sid[b, :n] = p.source_ids
            member = p.windows[None, :] <= np.arange(K)[:, None]
            counts = member.sum(axis=1, keepdims=True)
            pool[b, :, :n] = np.where(counts > 0, member / np.maximum(counts, 1), 0.0)
        return {"value_ids": vid, "source_ids": sid, "pool": pool}

    def window_embeddings(self, batch: dict) -> Tensor:
        v = embedding_lookup(self.params["value_emb"], batch["value_ids"])
        s = embedding_lookup(self.params["source_emb"], batch["source_ids"])
        return matmul(Tensor(batch["pool"]), v * s)

    def forward(self, batch: dict, with_summary: bool = False):
        steps, summary = bilstm_forward(self.window_embeddings(batch), self.params, "rnn")
        return (steps, summary) if with_summary else steps


# --------------------------------------------------------- text persistence

ARTIFACT_HEADER = "tafusion-artifacts 1"


def _hex(xs) -> str:
    return " ".join(float(x).hex() for x in xs)


def _unhex(parts) -> tuple[float, ...]:
    return tuple(float.fromhex(p) for p in parts)


def dump_artifacts(binners: dict[str, QuantileBinner] | None = None,
                   schemes: dict[str, TimeWindowScheme] | None = None,
                   stats: dict[str, dict[str, Sequence[float]]] | None = None,
                   items: Sequence[ItemSpec] | None = None) -> str:
    """Versioned line format; floats are hex so every f64 round-trips exactly."""
    lines = [ARTIFACT_HEADER]
    for it in items or ():
        lines.append(f"item {it.item_id} {'categorical' if it.categorical else 'numeric'} "
                     f"{it.n_categories}")
    for b in (binners or {}).values():
        lines.append(f"binner {b.item_id} {b.bin_count} {b.fitted_on or '-'} {_hex(b.edges)}")
    for name, s in (schemes or {}).items():
        lines.append(f"scheme {name} {s.anchor_kind} {s.fitted_on or '-'} "
                     f"{len(s.percentiles)} {_hex(s.percentiles)} {_hex(s.boundaries)}")
    for group, entries in (stats or {}).items():
        for key, vals in entries.items():
            lines.append(f"stat {group} {key} {_hex(vals)}")
    return "\n".join(lines) + "\n"


def load_artifacts(text: str):
    lines = text.splitlines()
    if not lines or lines[0] != ARTIFACT_HEADER:
        raise ParseError(f"bad artifact header: {lines[0] if lines else '<empty>'!r}")
    items, binners, schemes, stats = [], {}, {}, {}
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            tag = parts[0]
            if tag == "item":
                items.append(ItemSpec(parts[1], parts[2] == "categorical", int(parts[3])))
            elif tag == "binner":
                fo = "" if parts[3] == "-" else parts[3]
                binners[parts[1]] = QuantileBinner(parts[1], int(parts[2]), _unhex(parts[4:]), fo)
                if len(parts[4:]) != int(parts[2]) - 1:
                    raise ParseError("edge count does not match bin count")
            elif tag == "scheme":
                fo = "" if parts[3] == "-" else parts[3]
                m = int(parts[4])
                vals = _unhex(parts[5:])
                if len(vals) != 2 * m:
                    raise ParseError("percentile/boundary count mismatch")
                schemes[parts[1]] = TimeWindowScheme(parts[2], vals[:m], vals[m:], fo)
            elif tag == "stat":
                stats.setdefault(parts[1], {})[parts[2]] = _unhex(parts[3:])
            else:
                raise ParseError(f"unknown record {tag!r}")
        except (IndexError, ValueError) as exc:
            raise ParseError(f"line {n}: {exc}") from exc
    return items, binners, schemes, stats
