import numpy as np
import pytest

from tafusion.errors import ConfigError
from tafusion.evaluation.experiment import (ALL_MODALITIES, ModelConfig, build_fold_inputs,
                                            make_net, mean_scores, pretrain_fold, run_ablation,
                                            score_table, standard_variants, task_modalities)
from tafusion.evaluation.training import TrainConfig
from tafusion.synthdata import CohortConfig, generate_cohort, split_cross_subject

TINY = ModelConfig(d_s=4, hidden=8, n_bins=4, static_tokens=2, static_width=4, sparse_d=4,
                   sparse_hidden=3, vitals_d_a=2, vitals_c_hf=3, vitals_c_lf=4, ecg_c_sig=3,
                   ecg_c_lf=4, pretrain=TrainConfig(2, 32, 3e-3, 2),
                   fusion=TrainConfig(2, 32, 3e-3, 2), end_to_end=TrainConfig(2, 32, 3e-3, 2))


@pytest.fixture(scope="module")
def ds():
    return generate_cohort(CohortConfig(n_subjects=60, seed=2))


def test_variant_grid_is_exactly_the_request():
    mods = ALL_MODALITIES
    names = [v.name for v in standard_variants(mods, ["full", "no_shared", "unimodal",
                                                      "leave_one_out"])]
    assert names == ["full", "no_shared", "only_static", "only_labs", "only_vitals", "only_ecg",
                     "without_static", "without_labs", "without_vitals", "without_ecg"]
    loo = standard_variants(mods, ["leave_one_out"])
    assert all(len(v.modalities) == 3 for v in loo)
    assert standard_variants(mods, ["no_pretrain"])[0].flags.no_pretrain
    with pytest.raises(ConfigError):
        standard_variants(mods, ["full", "full"])
    with pytest.raises(ConfigError):
        standard_variants(mods, ["no_decoder"])


def test_task_modalities():
    mc = generate_cohort(CohortConfig(n_subjects=8, task="multiclass", seed=1))
    assert task_modalities(mc) == ("static", "labs", "ecg")
    with pytest.raises(ConfigError):
        build_fold_inputs(mc, split_cross_subject(mc, 2, seed=0).folds[0], ["vitals"], TINY)


def test_no_biattention_width(ds):
    roles = split_cross_subject(ds, 5, seed=0).folds[0]
    fi = build_fold_inputs(ds, roles, None, TINY, seed=0)
    pre = pretrain_fold(fi)
    for kind, width in (("full", 4 * 4 + 6 * 4), ("no_biattention", 4 * 4)):
        v = standard_variants(fi.modalities, [kind])[0]
        net = make_net(fi, v, pre)
        assert net.fusion.width == width
        assert net.fusion.params["decoder.0.W"].shape[0] == width
    # pretrained weights are copied, not shared
    net = make_net(fi, standard_variants(fi.modalities, ["full"])[0], pre)
    a = net.encoders["labs"].params["value_emb"]
    assert np.array_equal(a.data, pre["labs"][0].params["value_emb"].data)
    assert a is not pre["labs"][0].params["value_emb"]
    fresh = make_net(fi, standard_variants(fi.modalities, ["no_pretrain"])[0], None)
    assert not np.array_equal(fresh.encoders["labs"].params["value_emb"].data, a.data)
    with pytest.raises(ConfigError):
        make_net(fi, standard_variants(fi.modalities, ["full"])[0], None)


def test_fold_artifacts_fit_on_training_only(ds):
    roles = split_cross_subject(ds, 5, seed=0).folds[1]
    fi = build_fold_inputs(ds, roles, ["labs"], TINY, seed=1)
    from tafusion.sparse import fingerprint
    assert fi.artifacts["scope"] == fingerprint(ds.subjects[i].subject_id for i in roles.train)


def test_ablation_shares_plan_and_is_deterministic(ds):
    vs = standard_variants(("static", "labs"), ["full", "no_shared", "no_pretrain"])
    plan, outs = run_ablation(ds, vs, TINY, folds=5, seed=3, fold_ids=[0, 2], extra_unimodal=True)
    assert plan == split_cross_subject(ds, 5, seed=3)
    assert [o.fold for o in outs] == [0, 2]
    for o in outs:
        n_test = len(plan.folds[o.fold].test)
        assert set(o.scores) == {"full", "no_shared", "no_pretrain", "unimodal_static",
                                 "unimodal_labs"}
        assert all(p.shape[0] == n_test for p in o.predictions.values())
    again = run_ablation(ds, vs, TINY, folds=5, seed=3, fold_ids=[0, 2], extra_unimodal=True)[1]
    assert score_table(outs) == score_table(again)
    means = mean_scores(outs)
    assert means["full"]["auroc"] == pytest.approx(np.mean([o.scores["full"]["auroc"]
                                                            for o in outs]))


def test_worker_pool_matches_serial(ds):
    vs = standard_variants(("static",), ["full"])
    serial = run_ablation(ds, vs, TINY, folds=5, seed=0, fold_ids=[0, 1])[1]
    pooled = run_ablation(ds, vs, TINY, folds=5, seed=0, fold_ids=[0, 1], jobs=2)[1]
    assert score_table(serial) == score_table(pooled)
