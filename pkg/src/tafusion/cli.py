"""Command-line entry point.

    tafusion gen       --out DATA
    tafusion pretrain  --data DATA --out CKPT
    tafusion train     --data DATA --checkpoints CKPT --out MODEL
    tafusion eval      --data DATA --bundle MODEL --out REPORT
    tafusion ablate    --data DATA --out REPORT
    tafusion gradcheck
    tafusion profile   --data DATA --out REPORT

Logs go to stderr and data products to files.  A failure prints one line
``error: <category>: <message>`` to stderr and exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, with_overrides
from .errors import ConfigError, NumericError, TafusionError
from .fusion import FusionFlags, MultimodalNet, load_bundle, save_bundle
from .numerics import ParameterSet

log = logging.getLogger("tafusion")

CHECKPOINT_META = "checkpoint.json"
TRAIN_META = "train.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for folds")
    p.add_argument("--task", choices=("multiclass", "binary", "regression"))
    p.add_argument("--modalities", help="comma-separated modality subset")
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--no-biattention", action="store_true")
    p.add_argument("--no-shared", action="store_true")
    p.add_argument("--log-level", default="INFO")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="tafusion", description="time-aware multimodal fusion experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic cohort")
    g.add_argument("--n-subjects", type=int)
    for name, helptext in (("pretrain", "pretrain one encoder per modality"),
                           ("train", "train the fusion model"),
                           ("eval", "score a trained model on its test fold"),
                           ("ablate", "cross-validated ablation grid"),
                           ("profile", "missingness profile of a cohort")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", required=True, help="dataset directory from 'gen'")
        if name in ("pretrain", "train"):
            s.add_argument("--fold", type=int, default=0)
        if name == "train":
            s.add_argument("--checkpoints", help="directory from 'pretrain'")
        if name == "eval":
            s.add_argument("--bundle", required=True, help="directory from 'train'")
        if name == "ablate":
            s.add_argument("--folds", type=int)
            s.add_argument("--variants", help="comma list of variant kinds")
        if name == "profile":
            s.add_argument("--intervals", type=int)
    sub.add_parser("gradcheck", parents=[common], help="verify gradients of all layers")
    return p


# ---------------------------------------------------------------- helpers


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def _run_config(args) -> tuple[RunConfig, str]:
    cfg, text = load_config(args.config)
    return with_overrides(cfg, args.seed, args.task), text


def _load_data(path):
    from .synthdata import read_dataset

    if not Path(path, "manifest.json").exists():
        raise ConfigError(f"no dataset at {path} (run 'tafusion gen' first)")
    return read_dataset(path)


def _modalities(args, ds) -> tuple[str, ...]:
    from .evaluation.experiment import task_modalities

    avail = task_modalities(ds)
    if not args.modalities:
        return avail
    mods = tuple(m.strip() for m in args.modalities.split(",") if m.strip())
    bad = [m for m in mods if m not in avail]
    if bad or not mods:
        raise ConfigError(f"modalities {bad or mods} not available; choose from {','.join(avail)}")
    return tuple(m for m in avail if m in mods)


def _flags(args) -> FusionFlags:
    return FusionFlags(no_pretrain=args.no_pretrain, no_biattention=args.no_biattention,
                       no_shared=args.no_shared)


def _variant_name(flags: FusionFlags) -> str:
    on = [k for k, v in vars(flags).items() if v]
    return "+".join(on) if on else "full"


def _manifest(args, cfg, text, ds=None, inputs=None):
    from .report import RunManifest

    return RunManifest(args.command, text, cfg.to_dict(), cfg.seed,
                       ds.digest() if ds is not None else "", dict(inputs or {}))


def _fold_inputs(ds, cfg: RunConfig, fold: int, mods):
    from .evaluation.experiment import build_fold_inputs
    from .synthdata import split_cross_subject

    plan = split_cross_subject(ds, folds=cfg.eval.folds, seed=cfg.seed)
    if not 0 <= fold < len(plan.folds):
        raise ConfigError(f"fold {fold} outside 0..{len(plan.folds) - 1}")
    return build_fold_inputs(ds, plan.folds[fold], mods, cfg.model, cfg.seed + fold)


def _curve_outputs(out: Path, curves: dict, mid: str, stem: str):
    from .evaluation.plotting import plot_loss_curves
    from .report import write_csv

    rows = [(name, e + 1, tr, va) for name, r in curves.items()
            for e, (tr, va) in enumerate(zip(r.train_curve, r.val_curve))]
    write_csv(out / f"{stem}.csv", ["model", "epoch", "train_loss", "val_loss"], rows, mid)
    plot_loss_curves({k: (r.train_curve, r.val_curve) for k, r in curves.items()},
                     out / f"{stem}.png")


def _metric_rows(variant: str, fold: int, scores: dict):
    return [(variant, fold, k, v) for k, v in scores.items()]


def _curve_points(pred, y, head):
    """(label, (x_roc, y_roc), (recall, precision)) per scored class."""
    from .evaluation.metrics import pr_points, roc_points

    if head == "regression":
        return []
    p = np.exp(pred)
    cols = [1] if p.shape[1] == 2 else range(p.shape[1])
    out = []
    for k in cols:
        yk = np.asarray(y) == k
        if 0 < yk.sum() < len(yk):
            out.append((f"class{k}", roc_points(p[:, k], yk), pr_points(p[:, k], yk)))
    return out


def _write_curves(out: Path, named_preds: dict, y, head, mid):
    from .evaluation.plotting import plot_curves
    from .report import write_csv

    roc_rows, pr_rows, roc, pr = [], [], {}, {}
    for name, pred in named_preds.items():
        for cls, (fx, fy), (rx, ry) in _curve_points(pred, y, head):
            roc_rows += [(name, cls, a, b) for a, b in zip(fx, fy)]
            pr_rows += [(name, cls, a, b) for a, b in zip(rx, ry)]
            label = name if cls == "class1" else f"{name} {cls}"
            roc[label], pr[label] = (fx, fy), (rx, ry)
    if not roc:
        return
    write_csv(out / "roc_points.csv", ["model", "class", "fpr", "tpr"], roc_rows, mid)
    write_csv(out / "pr_points.csv", ["model", "class", "recall", "precision"], pr_rows, mid)
    plot_curves(roc, out / "roc.png", "roc")
    plot_curves(pr, out / "pr.png", "pr")


# --------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .synthdata import generate_cohort, write_dataset

    out = _require_out(args)
    cfg, text = _run_config(args)
    if args.n_subjects is not None:
        cfg = replace(cfg, data=replace(cfg.data, n_subjects=args.n_subjects))
    ds = generate_cohort(cfg.data)
    man = _manifest(args, cfg, text)
    man.dataset_digest = write_dataset(ds, out)
    man.stage("generate")
    man.write(out)
    log.info("wrote %d subjects to %s (digest %s)", len(ds), out, man.dataset_digest[:16])
    return 0


def cmd_pretrain(args) -> int:
    from .evaluation.experiment import pretrain_fold
    from .report import write_json

    out = _require_out(args)
    cfg, text = _run_config(args)
    ds = _load_data(args.data)
    mods = _modalities(args, ds)
    man = _manifest(args, cfg, text, ds, {"fold": str(args.fold), "modalities": ",".join(mods)})
    fi = _fold_inputs(ds, cfg, args.fold, mods)
    man.stage("prepare")
    pre = pretrain_fold(fi, mods)
    out.mkdir(parents=True, exist_ok=True)
    for m, (enc, res) in pre.items():
        enc.params.save(out / f"encoder.{m}.pset")
        res.decoder.save(out / f"decoder.{m}.pset")
    write_json(out / CHECKPOINT_META, {
        "manifest_id": man.manifest_id, "dataset_digest": man.dataset_digest, "seed": cfg.seed,
        "fold": args.fold, "folds": cfg.eval.folds, "modalities": list(mods),
        "training_scope": fi.artifacts["scope"],
        "best_epoch": {m: r.result.best_epoch for m, (_, r) in pre.items()}})
    _curve_outputs(out, {m: r.result for m, (_, r) in pre.items()}, man.manifest_id,
                   "pretrain_curves")
    man.stage("pretrain")
    man.write(out)
    return 0


def _checkpoint_meta(path, ds, cfg: RunConfig, mods) -> dict:
    p = Path(path)
    if not (p / CHECKPOINT_META).is_file():
        raise ConfigError(f"no pretrained checkpoints at {p} (run 'tafusion pretrain' first "
                          "or pass --no-pretrain)")
    meta = json.loads((p / CHECKPOINT_META).read_text())
    if meta["dataset_digest"] != ds.digest():
        raise ConfigError(f"checkpoints at {p} were pretrained on a different dataset")
    if meta["seed"] != cfg.seed or meta["folds"] != cfg.eval.folds:
        raise ConfigError(f"checkpoints at {p} use seed {meta['seed']} with {meta['folds']} "
                          f"folds; this run has seed {cfg.seed} with {cfg.eval.folds}")
    missing = [m for m in mods if m not in meta["modalities"]]
    if missing:
        raise ConfigError(f"checkpoints at {p} lack modalities {missing}")
    return meta


def cmd_train(args) -> int:
    from .evaluation.experiment import Variant, make_net, train_multimodal
    from .report import digest_files

    out = _require_out(args)
    cfg, text = _run_config(args)
    ds = _load_data(args.data)
    mods = _modalities(args, ds)
    flags = _flags(args)
    fold = args.fold
    inputs = {"fold": str(fold), "modalities": ",".join(mods), "flags": _variant_name(flags)}
    if not flags.no_pretrain:
        if not args.checkpoints:
            raise ConfigError("train needs --checkpoints from 'tafusion pretrain' "
                              "(or --no-pretrain)")
        meta = _checkpoint_meta(args.checkpoints, ds, cfg, mods)
        if meta["fold"] != fold:
            raise ConfigError(f"checkpoints were pretrained on fold {meta['fold']}, not {fold}")
        inputs["checkpoints"] = digest_files(Path(args.checkpoints))
    man = _manifest(args, cfg, text, ds, inputs)
    fi = _fold_inputs(ds, cfg, fold, mods)
    man.stage("prepare")
    pretrained = None
    if not flags.no_pretrain:
        pretrained = {}
        for m in mods:
            enc = fi.make_encoder(m)
            enc.params.restore(ParameterSet.load(Path(args.checkpoints) / f"encoder.{m}.pset")
                               .snapshot())
            pretrained[m] = (enc, None)
    variant = Variant(_variant_name(flags), mods, flags)
    net = make_net(fi, variant, pretrained)
    budget = cfg.model.fusion if net.frozen else cfg.model.end_to_end
    fitted = train_multimodal(net, fi, budget, label=variant.name)
    man.stage("train")
    info = {"manifest_id": man.manifest_id, "dataset_digest": man.dataset_digest,
            "fold": fold, "modalities": list(mods), "variant": variant.name,
            "config": cfg.to_dict(), "best_epoch": fitted.result.best_epoch}
    save_bundle(out, net.fusion, net.encoders,
                extra={TRAIN_META: json.dumps(info, indent=1, sort_keys=True) + "\n"})
    _curve_outputs(out, {variant.name: fitted.result}, man.manifest_id, "train_curves")
    man.write(out)
    return 0


def cmd_eval(args) -> int:
    from .evaluation.experiment import _scores
    from .report import digest_files, write_csv, write_json

    out = _require_out(args)
    bundle = Path(args.bundle)
    if not (bundle / TRAIN_META).is_file():
        raise ConfigError(f"no trained model at {bundle} (run 'tafusion train' first)")
    info = json.loads((bundle / TRAIN_META).read_text())
    cfg = RunConfig.from_dict(info["config"])
    ds = _load_data(args.data)
    if info["dataset_digest"] != ds.digest():
        raise ConfigError(f"model at {bundle} was trained on a different dataset")
    man = _manifest(args, cfg, "", ds, {"bundle": digest_files(bundle)})
    fold, mods = info["fold"], tuple(info["modalities"])
    fi = _fold_inputs(ds, cfg, fold, mods)
    fusion, enc_params = load_bundle(bundle)
    encoders = {}
    for m in mods:
        enc = fi.make_encoder(m)
        enc.params.restore(enc_params[m].snapshot())
        encoders[m] = enc
    net = MultimodalNet(encoders, fusion, frozen=True)
    test = np.asarray(fi.roles.test, dtype=np.int64)
    pred = net.predict(fi.prepared, fi.present, test)
    scores = _scores(pred, fi.y[test], fi.head)
    man.stage("evaluate")
    mid = man.manifest_id
    name = info["variant"]
    write_csv(out / "metrics.csv", ["variant", "fold", "metric", "value"],
              _metric_rows(name, fold, scores), mid)
    ids = [ds.subjects[i].subject_id for i in test]
    cols = ["prediction"] if pred.ndim == 1 else [f"logp_{k}" for k in range(pred.shape[1])]
    rows = [(sid, fi.y[i].item(), *np.atleast_1d(p).tolist()) for sid, i, p in zip(ids, test, pred)]
    write_csv(out / "predictions.csv", ["subject_id", "label", *cols], rows, mid)
    _write_curves(out, {name: pred}, fi.y[test], fi.head, mid)
    write_json(out / "summary.json", {"manifest_id": mid, "dataset_digest": man.dataset_digest,
                                      "variant": name, "fold": fold, "scores": scores,
                                      "config": cfg.to_dict()})
    man.write(out)
    for k, v in scores.items():
        log.info("%s %s = %.4f", name, k, v)
    return 0


def _significance(outcomes, plan, ds, head, n_perm, seed):
    """Full model against every other entry on pooled test predictions."""
    from .evaluation.metrics import classification_scores
    from .evaluation.stats import paired_t_test, permutation_test

    ordered = sorted(outcomes, key=lambda o: o.fold)
    idx = np.concatenate([np.asarray(plan.folds[o.fold].test) for o in ordered])
    y = ds.labels[idx]
    pooled = {v: np.concatenate([o.predictions[v] for o in ordered])
              for v in ordered[0].predictions}
    if "full" not in pooled:
        return [], pooled, y
    rows = []
    for v, p in pooled.items():
        if v == "full":
            continue
        if head == "regression":
            r = paired_t_test(np.abs(pooled["full"] - y), np.abs(p - y))
            rows.append(("full", v, r.kind, "abs_error", r.statistic, r.p_value, r.n))
        else:
            def metric(s, lab):
                return classification_scores(np.exp(s), lab)["auroc"]
            r = permutation_test(metric, pooled["full"], p, y, n_perm=n_perm, seed=seed)
            rows.append(("full", v, r.kind, "auroc", r.statistic, r.p_value, r.n))
    return rows, pooled, y


def cmd_ablate(args) -> int:
    from .evaluation.experiment import mean_scores, run_ablation, score_table, standard_variants
    from .evaluation.plotting import plot_metric_bars
    from .report import write_csv, write_json

    out = _require_out(args)
    cfg, text = _run_config(args)
    if args.folds is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, folds=args.folds))
    ds = _load_data(args.data)
    mods = _modalities(args, ds)
    kinds = list(cfg.eval.variants)
    if args.variants:
        kinds = [k.strip() for k in args.variants.split(",") if k.strip()]
    picked = [k for k, on in (("no_pretrain", args.no_pretrain),
                              ("no_biattention", args.no_biattention),
                              ("no_shared", args.no_shared)) if on]
    if picked:
        kinds = ["full", *picked]
    variants = standard_variants(mods, kinds)
    man = _manifest(args, cfg, text, ds, {"modalities": ",".join(mods), "variants": ",".join(kinds)})
    plan, outcomes = run_ablation(ds, variants, cfg.model, folds=cfg.eval.folds, seed=cfg.seed,
                                  jobs=args.jobs, extra_unimodal=True)
    man.stage("ablate")
    mid = man.manifest_id
    write_csv(out / "scores.csv", ["variant", "fold", "metric", "value"], score_table(outcomes), mid)
    head = "regression" if ds.config.task == "regression" else "classification"
    sig, pooled, y = _significance(outcomes, plan, ds, head, cfg.eval.n_perm, cfg.seed)
    if sig:
        write_csv(out / "significance.csv",
                  ["reference", "variant", "test", "metric", "statistic", "p_value", "n"], sig, mid)
    means = mean_scores(outcomes)
    key = "mae" if head == "regression" else "auroc"
    sd = {v: float(np.std([o.scores[v][key] for o in outcomes])) for v in means}
    plot_metric_bars({v: d[key] for v, d in means.items()}, out / f"ablation_{key}.png", key, sd)
    _write_curves(out, pooled, y, head, mid)
    first = min(outcomes, key=lambda o: o.fold)
    _curve_outputs(out, first.curves, mid, f"train_curves_fold{first.fold}")
    write_json(out / "summary.json", {"manifest_id": mid, "dataset_digest": man.dataset_digest,
                                      "folds": cfg.eval.folds, "means": means,
                                      "config": cfg.to_dict()})
    man.write(out)
    for v, d in means.items():
        log.info("%-22s %s", v, " ".join(f"{k}={x:.4f}" for k, x in d.items()
                                         if "_c" not in k))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite
    from .report import write_csv

    seed = args.seed or 0
    results = run_suite(seed)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.name:22s} {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    print(f"max relative error: {worst:.3e}")
    if args.out:
        write_csv(Path(args.out) / "gradcheck.csv", ["case", "max_rel_error"],
                  [(r.name, r.max_rel_error) for r in results], f"gradcheck-{seed}")
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE}")
    return 0


def cmd_profile(args) -> int:
    from .evaluation.missingness import missingness_profile
    from .evaluation.plotting import plot_missingness
    from .report import write_csv

    out = _require_out(args)
    cfg, text = _run_config(args)
    n = args.intervals or cfg.eval.missing_intervals
    ds = _load_data(args.data)
    man = _manifest(args, cfg, text, ds, {"intervals": str(n)})
    prof = missingness_profile(ds, n)
    write_csv(out / "missingness.csv", ["item", "dt_lo", "dt_hi", "missing_ratio"],
              list(prof.rows()), man.manifest_id)
    plot_missingness(prof.items, prof.edges, prof.ratio, out / "missingness.png")
    man.stage("profile")
    man.write(out)
    return 0


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "profile": cmd_profile}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            stream=sys.stderr, format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except TafusionError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
