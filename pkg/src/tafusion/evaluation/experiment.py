"""Cross-validated experiments on a synthetic cohort.

Every fold fits its preprocessing (quantile bins, time windows, vitals
statistics) on the training subjects only, pretrains one encoder per
modality, and then trains the requested fusion variants on top.  Variants
inside a fold share the split, the fitted artifacts and the pretrained
encoders, so their differences come from the variant alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..fusion import (CLASSIFICATION, REGRESSION, FusionFlags, FusionModel, Modality,
                      MultimodalNet, StaticEncoder, predict_unimodal, pretrain_encoder,
                      task_loss)
from ..hier import EcgTimelineEncoder, SlidingWindowConfig, VitalsEncoder, fit_vitals_stats
from ..numerics import Tensor
from ..sparse import (ADMISSION_RELATIVE, BIASED_PERCENTILES, DECILE_PERCENTILES, ECG_RELATIVE,
                      ItemSpec, SparseSeriesEncoder, TrainingScope, build_time_windows,
                      fit_tokenizer)
from ..synthdata import (CATEGORICAL_ITEM, ICU_HORIZON, MULTICLASS, N_CATEGORIES, CohortDataset,
                         FoldRoles, SplitPlan, split_cross_subject)
from .metrics import classification_scores, regression_scores
from .training import TrainConfig, TrainResult, train_with_early_stopping

log = logging.getLogger(__name__)

STATIC, LABS, VITALS, ECG = "static", "labs", "vitals", "ecg"
ALL_MODALITIES = (STATIC, LABS, VITALS, ECG)
ECG_PERCENTILES = (0, 25, 50, 75, 100)
_SEED_OFFSET = {STATIC: 11, LABS: 12, VITALS: 13, ECG: 14, "fusion": 15}


def task_modalities(ds: CohortDataset) -> tuple[str, ...]:
    return ALL_MODALITIES if ds.config.has_vitals else (STATIC, LABS, ECG)


def task_head(ds: CohortDataset) -> str:
    return REGRESSION if ds.config.task == "regression" else CLASSIFICATION


@dataclass(frozen=True)
class ModelConfig:
    d_s: int = 16
    hidden: int = 32
    n_bins: int = 16
    static_tokens: int = 4
    static_width: int = 8
    sparse_d: int = 16
    sparse_hidden: int = 16
    vitals_d_a: int = 4
    vitals_c_hf: int = 8
    vitals_c_lf: int = 16
    ecg_c_sig: int = 8
    ecg_c_lf: int = 16
    # False: pretrained encoders are fine-tuned with the fusion head (only their
    # starting point differs from the no_pretrain ablation); True: kept fixed
    freeze_encoders: bool = False
    pretrain: TrainConfig = TrainConfig(max_epochs=10, batch_size=64, lr=3e-3, patience=3)
    fusion: TrainConfig = TrainConfig(max_epochs=40, batch_size=64, lr=3e-3, patience=5)
    # budget whenever encoders train jointly with the fusion head
    end_to_end: TrainConfig = TrainConfig(max_epochs=10, batch_size=64, lr=3e-3, patience=3)

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, pretrain=replace(self.pretrain, seed=seed),
                       fusion=replace(self.fusion, seed=seed),
                       end_to_end=replace(self.end_to_end, seed=seed))


# ------------------------------------------------------------ fold inputs


@dataclass
class FoldInputs:
    """Fitted preprocessing plus prepared per-subject encoder inputs for one fold."""

    roles: FoldRoles
    modalities: tuple[str, ...]
    artifacts: dict
    prepared: dict[str, list]
    present: dict[str, np.ndarray]
    y: np.ndarray
    head: str
    n_classes: int
    mcfg: ModelConfig
    seed: int

    def make_encoder(self, m: str):
        """A freshly initialised encoder for modality ``m`` (seeded, so repeatable)."""
        s = self.seed * 100 + _SEED_OFFSET[m]
        c = self.mcfg
        a = self.artifacts
        if m == STATIC:
            return StaticEncoder(a["n_static"], c.static_tokens, c.static_width, c.hidden, seed=s)
        if m == LABS:
            return SparseSeriesEncoder(a["tokenizer"], a["lab_scheme"], c.sparse_d,
                                       c.sparse_hidden, seed=s)
        if m == VITALS:
            return VitalsEncoder(a["vitals_stats"], a["vitals_cfg"], ICU_HORIZON, seed=s,
                                 d_a=c.vitals_d_a, c_hf=c.vitals_c_hf, c_lf=c.vitals_c_lf)
        if m == ECG:
            return EcgTimelineEncoder(a["ecg_scheme"], a["n_ecg_features"], seed=s,
                                      vocab=a["text_vocab"], c_sig=c.ecg_c_sig, c_lf=c.ecg_c_lf)
        raise ConfigError(f"unknown modality {m!r}")


def lab_items(ds: CohortDataset) -> list[ItemSpec]:
    return [ItemSpec(i, i == CATEGORICAL_ITEM, N_CATEGORIES if i == CATEGORICAL_ITEM else 0)
            for i in ds.config.lab_items]


def fit_fold_artifacts(ds: CohortDataset, roles: FoldRoles, modalities: Sequence[str],
                       mcfg: ModelConfig) -> dict:
    """Everything learned from data before training, fitted on training subjects only."""
    subs = [ds.subjects[i] for i in roles.train]
    scope = TrainingScope(s.subject_id for s in subs)
    multiclass = ds.config.task == MULTICLASS
    kind = ECG_RELATIVE if multiclass else ADMISSION_RELATIVE
    art = {"n_static": ds.config.n_static, "n_ecg_features": ds.config.n_ecg_features,
           "text_vocab": ds.config.text_vocab, "scope": scope.fingerprint}
    if LABS in modalities:
        obs = [o for s in subs for o in s.labs]
        art["tokenizer"] = fit_tokenizer(obs, lab_items(ds), mcfg.n_bins, scope)
        deltas = [o.timestamp - s.t_anchor if kind == ADMISSION_RELATIVE else s.t_anchor - o.timestamp
                  for s in subs for o in s.labs]
        ids = [s.subject_id for s in subs for _ in s.labs]
        pct = BIASED_PERCENTILES if multiclass else DECILE_PERCENTILES
        art["lab_scheme"] = build_time_windows(deltas, pct, kind, scope, ids)
    if VITALS in modalities:
        grids = [s.vitals for s in subs]
        art["vitals_stats"] = fit_vitals_stats(grids, scope, [s.subject_id for s in subs])
        art["vitals_cfg"] = SlidingWindowConfig(240, 120)
    if ECG in modalities:
        recs = [(s, r) for s in subs for r in s.ecg]
        deltas = [r.timestamp - s.t_anchor if kind == ADMISSION_RELATIVE else s.t_anchor - r.timestamp
                  for s, r in recs]
        art["ecg_scheme"] = build_time_windows(deltas, ECG_PERCENTILES, kind, scope,
                                               [s.subject_id for s, _ in recs])
    return art


def _present(ds: CohortDataset, m: str) -> np.ndarray:
    if m == STATIC:
        return np.ones(len(ds), dtype=bool)
    if m == LABS:
        return np.array([len(s.labs) > 0 for s in ds.subjects])
    if m == VITALS:
        return np.array([s.vitals is not None and bool(s.vitals.mask.any()) for s in ds.subjects])
    return np.array([len(s.ecg) > 0 for s in ds.subjects])


def prepare_modality(ds: CohortDataset, encoder, m: str) -> list:
    if m == STATIC:
        return [encoder.prepare(s.static) for s in ds.subjects]
    if m == LABS:
        return [encoder.prepare(s.labs, s.t_anchor) for s in ds.subjects]
    if m == VITALS:
        return [encoder.prepare(s.vitals) for s in ds.subjects]
    return [encoder.prepare(s.ecg, s.t_anchor) for s in ds.subjects]


def build_fold_inputs(ds: CohortDataset, roles: FoldRoles, modalities: Sequence[str] | None = None,
                      mcfg: ModelConfig | None = None, seed: int = 0) -> FoldInputs:
    modalities = tuple(modalities or task_modalities(ds))
    for m in modalities:
        if m not in task_modalities(ds):
            raise ConfigError(f"modality {m!r} is not available for task {ds.config.task!r}")
    mcfg = (mcfg or ModelConfig()).with_seed(seed)
    art = fit_fold_artifacts(ds, roles, modalities, mcfg)
    fi = FoldInputs(roles, modalities, art, {}, {}, ds.labels, task_head(ds),
                    max(ds.config.n_classes, 2), mcfg, seed)
    for m in modalities:
        fi.prepared[m] = prepare_modality(ds, fi.make_encoder(m), m)
        fi.present[m] = _present(ds, m)
    return fi


# --------------------------------------------------------------- training


def _scores(out: np.ndarray, y: np.ndarray, head: str) -> dict[str, float]:
    if head == REGRESSION:
        return regression_scores(out, y)
    return classification_scores(np.exp(out), y)


@dataclass
class FittedModel:
    net: MultimodalNet
    result: TrainResult
    cache: dict | None = None


def train_multimodal(net: MultimodalNet, fi: FoldInputs, cfg: TrainConfig,
                     label: str = "") -> FittedModel:
    """Train the trainable part of ``net`` on the fold's training subjects."""
    cache = net.precompute(fi.prepared, len(fi.y)) if net.frozen else None
    train_idx = np.asarray(fi.roles.train, dtype=np.int64)
    val_idx = np.asarray(fi.roles.val, dtype=np.int64)

    def batch_loss(idx):
        return task_loss(net.forward(fi.prepared, fi.present, idx, cache), fi.y[idx], fi.head)

    def val_loss():
        out = net.predict(fi.prepared, fi.present, val_idx, cache)
        return float(task_loss(Tensor(out), fi.y[val_idx], fi.head).data)

    res = train_with_early_stopping(net.trainable, train_idx, batch_loss, val_loss, cfg, label)
    return FittedModel(net, res, cache)


def pretrain_fold(fi: FoldInputs, modalities: Sequence[str] | None = None) -> dict:
    """Pretrained encoders (and their unimodal decoders) per modality."""
    out = {}
    for m in modalities or fi.modalities:
        enc = fi.make_encoder(m)
        pre = pretrain_encoder(m, enc, fi.prepared[m], fi.y, fi.roles.train, fi.roles.val,
                               fi.head, fi.mcfg.pretrain, fi.n_classes, fi.mcfg.hidden,
                               present=fi.present[m])
        log.info("pretrained %s: best epoch %d of %d", m, pre.result.best_epoch,
                 pre.result.epochs_run)
        out[m] = (enc, pre)
    return out


@dataclass(frozen=True)
class Variant:
    name: str
    modalities: tuple[str, ...]
    flags: FusionFlags = field(default_factory=FusionFlags)


def standard_variants(modalities: Sequence[str], kinds: Sequence[str]) -> list[Variant]:
    """Expand variant kinds into concrete variants.

    Kinds: ``full``, ``no_pretrain``, ``no_biattention``, ``no_shared``,
    ``unimodal`` (one variant per modality) and ``leave_one_out``.
    """
    mods = tuple(modalities)
    out = []
    for k in kinds:
        if k == "full":
            out.append(Variant("full", mods))
        elif k in ("no_pretrain", "no_biattention", "no_shared"):
            out.append(Variant(k, mods, FusionFlags(**{k: True})))
        elif k == "unimodal":
            out += [Variant(f"only_{m}", (m,)) for m in mods]
        elif k == "leave_one_out":
            out += [Variant(f"without_{m}", tuple(x for x in mods if x != m)) for m in mods
                    if len(mods) > 1]
        else:
            raise ConfigError(f"unknown variant kind {k!r}")
    names = [v.name for v in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate variants in grid: {names}")
    return out


def make_net(fi: FoldInputs, variant: Variant, pretrained: dict | None) -> MultimodalNet:
    """Fresh encoders, loaded with the pretrained weights unless the variant skips them."""
    encoders = {m: fi.make_encoder(m) for m in variant.modalities}
    frozen = False
    if not variant.flags.no_pretrain:
        if pretrained is None:
            raise ConfigError(f"variant {variant.name!r} needs pretrained encoders")
        for m, enc in encoders.items():
            enc.params.restore(pretrained[m][0].params.snapshot())
        frozen = fi.mcfg.freeze_encoders
    mods = [Modality(m, e.kind, e.width, e.n_tokens) for m, e in encoders.items()]
    fusion = FusionModel(mods, fi.head, fi.n_classes, fi.mcfg.d_s, fi.mcfg.hidden, variant.flags,
                         seed=fi.seed * 100 + _SEED_OFFSET["fusion"])
    return MultimodalNet(encoders, fusion, frozen=frozen)


@dataclass
class FoldOutcome:
    fold: int
    scores: dict[str, dict[str, float]]
    predictions: dict[str, np.ndarray]
    curves: dict[str, TrainResult]


def run_fold(ds: CohortDataset, plan: SplitPlan, fold: int, variants: Sequence[Variant],
             mcfg: ModelConfig | None = None, seed: int = 0,
             extra_unimodal: bool = False) -> FoldOutcome:
    roles = plan.folds[fold]
    needed = tuple(m for m in task_modalities(ds) if any(m in v.modalities for v in variants))
    fi = build_fold_inputs(ds, roles, needed, mcfg, seed + fold)
    pretrained = None
    if any(not v.flags.no_pretrain for v in variants):
        pretrained = pretrain_fold(fi, tuple(m for m in needed if any(
            m in v.modalities and not v.flags.no_pretrain for v in variants)))
    test_idx = np.asarray(roles.test, dtype=np.int64)
    y_test = fi.y[test_idx]
    out = FoldOutcome(fold, {}, {}, {})
    for v in variants:
        net = make_net(fi, v, pretrained)
        cfg = fi.mcfg.fusion if net.frozen else fi.mcfg.end_to_end
        fitted = train_multimodal(net, fi, cfg, label=f"fold{fold}/{v.name}")
        pred = fitted.net.predict(fi.prepared, fi.present, test_idx, fitted.cache)
        out.scores[v.name] = _scores(pred, y_test, fi.head)
        out.predictions[v.name] = pred
        out.curves[v.name] = fitted.result
        log.info("fold %d %s: %s", fold, v.name,
                 " ".join(f"{k}={x:.4f}" for k, x in out.scores[v.name].items()))
    if extra_unimodal and pretrained:
        # each pretrained encoder with its pretraining decoder is a unimodal model
        for m, (enc, pre) in pretrained.items():
            pred = predict_unimodal(enc, pre.decoder, fi.prepared[m], test_idx, fi.head)
            out.scores[f"unimodal_{m}"] = _scores(pred, y_test, fi.head)
            out.predictions[f"unimodal_{m}"] = pred
    return out


_POOL_DATA: dict = {}


def _pool_run(args):
    fold, variants, mcfg, seed, extra = args
    return run_fold(_POOL_DATA["ds"], _POOL_DATA["plan"], fold, variants, mcfg, seed, extra)


def run_ablation(ds: CohortDataset, variants: Sequence[Variant], mcfg: ModelConfig | None = None,
                 folds: int = 5, seed: int = 0, jobs: int = 1, fold_ids: Sequence[int] | None = None,
                 extra_unimodal: bool = False) -> tuple[SplitPlan, list[FoldOutcome]]:
    """All variants over one shared SplitPlan; folds may run in worker processes."""
    plan = split_cross_subject(ds, folds=folds, seed=seed)
    todo = list(range(folds) if fold_ids is None else fold_ids)
    args = [(f, list(variants), mcfg, seed, extra_unimodal) for f in todo]
    if jobs <= 1 or len(todo) <= 1:
        return plan, [run_fold(ds, plan, *a) for a in args]
    import multiprocessing as mp

    _POOL_DATA.update(ds=ds, plan=plan)
    try:
        with mp.get_context("fork").Pool(min(jobs, len(todo))) as pool:
            return plan, pool.map(_pool_run, args)
    finally:
        _POOL_DATA.clear()


def score_table(outcomes: Sequence[FoldOutcome]) -> list[tuple[str, int, str, float]]:
    """Rows of (variant, fold, metric, value) in a stable order."""
    rows = []
    for o in sorted(outcomes, key=lambda o: o.fold):
        for v in o.scores:
            for k, x in o.scores[v].items():
                rows.append((v, o.fold, k, float(x)))
    return rows


def mean_scores(outcomes: Sequence[FoldOutcome]) -> dict[str, dict[str, float]]:
    acc: dict[str, dict[str, list[float]]] = {}
    for v, _, k, x in score_table(outcomes):
        acc.setdefault(v, {}).setdefault(k, []).append(x)
    return {v: {k: float(np.mean(xs)) for k, xs in d.items()} for v, d in acc.items()}
