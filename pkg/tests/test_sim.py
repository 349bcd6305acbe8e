import dataclasses as dc

import numpy as np
import pytest

from fedidm.attacks import AttackConfig
from fedidm.core import make_rng
from fedidm.data import gen_blobs
from fedidm.nn import NetParams, NetSpec, backward_ce, flatten, init_params, one_hot
from fedidm.sim import (InvariantViolation, MetricSummary, RoundRecord, build_world,
                        check_invariants, compute_rectification_metrics, compute_ter, local_train,
                        run_experiment, schedule_adversarial)


def test_schedule_adversarial():
    s = schedule_adversarial(60, 0.5, make_rng(0))
    assert len(s) == 30 and s <= set(range(1, 61))
    assert schedule_adversarial(10, 0.0, make_rng(0)) == set()
    assert schedule_adversarial(10, 1.0, make_rng(0)) == set(range(1, 11))
    assert schedule_adversarial(60, 0.5, make_rng(0)) == s
    with pytest.raises(ValueError):
        schedule_adversarial(10, 1.5, make_rng(0))


def test_local_train_trivial_cases():
    ds = gen_blobs(2, 3, 10, 4.0, make_rng(0))
    w = init_params(NetSpec((3, 4, 2)), make_rng(1))
    assert np.all(local_train(ds, w, 0, 0.1, make_rng(2)) == 0)
    assert np.all(local_train(ds, w, 3, 0.0, make_rng(2)) == 0)
    with pytest.raises(ValueError):
        local_train(ds.subset([]), w, 1, 0.1, make_rng(2))


def test_local_train_full_batch_is_lr_times_gradient():
    ds = gen_blobs(3, 4, 5, 4.0, make_rng(3))
    w = init_params(NetSpec((4, 3)), make_rng(4))
    g = local_train(ds, w, 1, 0.3, make_rng(5), batch_size=len(ds))
    _, grad = backward_ce(w, ds.X, one_hot(ds.y, 3))
    np.testing.assert_allclose(g, 0.3 * flatten(grad), atol=1e-13)


def test_compute_ter():
    ds = gen_blobs(4, 2, 25, 4.0, make_rng(0))
    const = NetParams(NetSpec((2, 4)), (np.zeros((2, 4)),), (np.array([1.0, 0, 0, 0]),))
    assert compute_ter(const, ds) == pytest.approx(0.75)
    ds10 = gen_blobs(10, 5, 200, 4.0, make_rng(1))
    ters = [compute_ter(init_params(NetSpec((5, 8, 10)), make_rng(s)), ds10) for s in range(10)]
    assert np.mean(ters) == pytest.approx(0.9, abs=0.05)


def test_rectification_metric_examples():
    m = compute_rectification_metrics([0, 1, 1, 0], [1, 1, 0, 0], [0, 1, 1, 1])
    # flipped points 0, 2, 3: fixed 0 and 2; clean point 1 unchanged
    assert m.rsr == pytest.approx(2 / 3) and m.fnr == pytest.approx(1 / 3) and m.fpr == 0.0
    assert m.n_flipped == 3 and m.n_clean == 1
    clean = compute_rectification_metrics([0, 0], [0, 1], [0, 1])
    assert clean.rsr is None and clean.fpr == 0.5


def test_clean_fedavg_learns(tiny_cfg):
    s = run_experiment(dc.replace(tiny_cfg, aggregator="fedavg"))
    assert s.final_ter <= 0.05 and len(s.ter) == 8 and s.rsr is None


def test_determinism(tiny_cfg, tmp_path):
    cfg = dc.replace(tiny_cfg, attack=AttackConfig(kind="SLF", malicious_fraction=0.3))
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("rounds.csv", "summary.json", "contributions.csv", "audit.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stage_exclusivity(tiny_cfg):
    s = run_experiment(tiny_cfg)
    for r in s.records:
        assert (r.stage == "ACDG") == (r.round <= 3)
        assert (r.audit is not None) == (r.stage == "ACDG")
        assert (r.report is not None) == (r.stage == "RA")


def test_non_adversarial_rounds_unaffected_by_attack(tiny_cfg):
    clean = run_experiment(tiny_cfg).ter
    idle = run_experiment(dc.replace(tiny_cfg, attack=AttackConfig(kind="LIE", adversarial_round_fraction=0.0)))
    assert idle.ter == clean
    cfg = dc.replace(tiny_cfg, attack=AttackConfig(kind="DYN_OPT"))
    first = min(build_world(cfg).adversarial_rounds)
    attacked = run_experiment(cfg).ter
    assert attacked[:first - 1] == clean[:first - 1]


def test_clean_iid_has_no_negative_contributions(tiny_cfg):
    cfg = dc.replace(tiny_cfg, data=dc.replace(tiny_cfg.data, concentration=1e4))
    s = run_experiment(cfg)
    assert all(r.rejected_negative == 0 for r in s.records)
    assert all(r.accepted >= 1 for r in s.records)


def test_skipped_round_keeps_model(tiny_cfg):
    # a loss threshold below any attainable loss rejects every candidate
    cfg = dc.replace(tiny_cfg, ra=dc.replace(tiny_cfg.ra, ell_o=-1.0))
    s = run_experiment(cfg)
    assert s.n_skipped == 5
    assert all(r.ter == s.records[2].ter for r in s.records[3:])


def test_config_validation(tiny_cfg):
    for kw in ({"stage_switch": 8}, {"aggregator": "median"}, {"clients_per_round": 7},
               {"no_ra_mode": "x"}, {"trim_fraction": 0.5}):
        with pytest.raises(ValueError):
            dc.replace(tiny_cfg, **kw).validate()


def test_partial_participation(tiny_cfg):
    s = run_experiment(dc.replace(tiny_cfg, clients_per_round=4, aggregator="multi_krum"))
    assert all(r.accepted <= 4 for r in s.records)


@pytest.mark.parametrize("agg", ["multi_krum", "trimmed_mean", "bulyan", "fltrust"])
def test_baselines_run_under_attack(tiny_cfg, agg):
    cfg = dc.replace(tiny_cfg, n_clients=8, clients_per_round=8, aggregator=agg,
                     attack=AttackConfig(kind="STAT_OPT", malicious_fraction=0.25))
    s = run_experiment(cfg)
    assert 0.0 <= s.final_ter <= 1.0


def test_invariant_checker_catches_bad_records(tiny_cfg):
    recs = [RoundRecord(t, "ACDG" if t <= 3 else "RA", False, 0.1) for t in range(1, 9)]
    check_invariants(MetricSummary(0.1, [0.1] * 8, None, None, None, 0, recs), tiny_cfg)
    recs[4].stage = "ACDG"
    with pytest.raises(InvariantViolation):
        check_invariants(MetricSummary(0.1, [0.1] * 8, None, None, None, 0, recs), tiny_cfg)
    with pytest.raises(InvariantViolation):
        check_invariants(MetricSummary(0.1, [], None, None, None, 0, recs[:5]), tiny_cfg)
