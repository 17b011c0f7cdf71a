"""Federation round loop: phase order, topology, determinism, failure
handling, and report shape."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import dflsim.sim as sim
from dflsim.config import from_dict
from dflsim.model import train_local
from dflsim.params import NumericalError
from dflsim.seeds import derive_seed
from dflsim.sim import Federation, resolve_data_path, run_experiment


def make_cfg(**overrides):
    raw = {
        "seed": 5,
        "dataset": {"kind": "synth_images", "samples_per_class": 60,
                    "image_hw": [8, 8]},
        "hidden_dims": [16],
        "federation": {"n_nodes": 4, "rounds": 2},
        "train": {"epochs_per_round": 1},
        "aggregator": {"kind": "fedavg"},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = raw[key] | value
        else:
            raw[key] = value
    return from_dict(raw)


def params_equal(a, b) -> bool:
    return a.names == b.names and all(
        np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))


# --- round mechanics -------------------------------------------------------

def test_single_node_is_pure_local_training():
    cfg = make_cfg(federation={"n_nodes": 1, "rounds": 1})
    fed = Federation(cfg)
    init = fed.nodes[0].params.copy()
    train_data = fed.nodes[0].data.train
    fed.run()
    expected = train_local(init, train_data,
                           replace(cfg.train,
                                   seed=derive_seed(cfg.seed, "train", 0, 1)))
    # aggregation over an empty neighborhood must be the identity
    assert params_equal(fed.nodes[0].params, expected)


def test_fedavg_full_topology_synchronizes_everyone():
    # with a full graph every node averages the same model multiset, so all
    # nodes hold identical params after each round
    cfg = make_cfg(federation={"n_nodes": 4, "rounds": 2})
    fed = Federation(cfg)
    for round_index in (1, 2):
        fed.run_round(round_index)
        for node in fed.nodes[1:]:
            assert params_equal(node.params, fed.nodes[0].params)


def test_full_topology_sees_all_other_models():
    cfg = make_cfg(federation={"n_nodes": 5, "rounds": 1},
                   aggregator={"kind": "sentinel", "tau_s": 0.5, "tau_l": 0.1})
    report = run_experiment(cfg)
    per_node = {}
    for entry in report.trace:
        per_node.setdefault(entry["node"], set()).add(entry["neighbor"])
    assert per_node == {i: set(range(5)) - {i} for i in range(5)}


def test_ring_topology_sees_two_neighbors():
    cfg = make_cfg(federation={"n_nodes": 5, "rounds": 1, "topology": "ring"},
                   aggregator={"kind": "sentinel", "tau_s": 0.5, "tau_l": 0.1})
    report = run_experiment(cfg)
    seen = {}
    for entry in report.trace:
        seen.setdefault(entry["node"], set()).add(entry["neighbor"])
    assert seen[0] == {1, 4}
    assert seen[2] == {1, 3}


def test_rounds_zero_reports_initialization_only():
    cfg = make_cfg(federation={"rounds": 0})
    report = run_experiment(cfg)
    assert len(report.rounds) == 1
    assert report.rounds[0].round_index == 0
    assert report.summary["final_round"] == 0
    assert report.trace == []


def test_round_zero_is_common_initialization():
    cfg = make_cfg()
    fed = Federation(cfg)
    first = fed.nodes[0].params
    assert all(params_equal(node.params, first) for node in fed.nodes)


def test_report_has_all_rounds_and_nodes():
    cfg = make_cfg(federation={"n_nodes": 3, "rounds": 2})
    report = run_experiment(cfg)
    assert [rr.round_index for rr in report.rounds] == [0, 1, 2]
    for rr in report.rounds:
        assert [m.node for m in rr.nodes] == [0, 1, 2]
        for m in rr.nodes:
            assert 0.0 <= m.f1 <= 1.0
            assert m.test_loss >= 0.0
            assert m.asr_lf is None and m.ba is None


@pytest.mark.parametrize("kind", ["fedavg", "coordinate_median", "trimmed_mean",
                                  "krum", "fltrust", "sentinel"])
def test_every_aggregator_runs_in_the_loop(kind):
    agg = {"kind": kind}
    if kind == "sentinel":
        agg |= {"tau_s": 0.5, "tau_l": 0.1}
    cfg = make_cfg(federation={"n_nodes": 4, "rounds": 1}, aggregator=agg)
    report = run_experiment(cfg)
    assert report.summary["aggregator"] == kind
    assert all(m.adopted for m in report.rounds[1].nodes)


# --- determinism -----------------------------------------------------------

def test_rerun_is_bit_identical():
    cfg = make_cfg(attack={"kind": "label_flip_untargeted", "pnr": 0.5},
                   aggregator={"kind": "sentinel", "tau_s": 0.5, "tau_l": 0.1})
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.malicious == b.malicious
    assert a.trace == b.trace
    assert a.summary == b.summary
    for ra, rb in zip(a.rounds, b.rounds):
        assert ra == rb


def test_parallel_matches_serial_bit_exact():
    serial = make_cfg(federation={"n_nodes": 4, "rounds": 2, "workers": 1},
                      aggregator={"kind": "sentinel", "tau_s": 0.5,
                                  "tau_l": 0.1})
    parallel = make_cfg(federation={"n_nodes": 4, "rounds": 2, "workers": 4},
                        aggregator={"kind": "sentinel", "tau_s": 0.5,
                                    "tau_l": 0.1})
    fed_s, fed_p = Federation(serial), Federation(parallel)
    rep_s, rep_p = fed_s.run(), fed_p.run()
    assert rep_s.rounds == rep_p.rounds
    assert rep_s.trace == rep_p.trace
    assert rep_s.summary == rep_p.summary
    for ns, np_ in zip(fed_s.nodes, fed_p.nodes):
        assert params_equal(ns.params, np_.params)


def test_seed_override_changes_run():
    cfg = make_cfg()
    a = run_experiment(cfg)
    b = run_experiment(cfg, seed=999)
    assert b.seed == 999
    assert (a.summary["metrics"]["test_loss"]["mean"]
            != b.summary["metrics"]["test_loss"]["mean"])


# --- attacks in the loop ---------------------------------------------------

def test_malicious_selection_respects_observer():
    cfg = make_cfg(federation={"n_nodes": 4, "observer": 0},
                   attack={"kind": "label_flip_untargeted", "pnr": 0.5})
    fed = Federation(cfg)
    assert 0 not in fed.malicious
    assert len(fed.malicious) == 2


def test_no_attack_means_no_malicious_nodes():
    fed = Federation(make_cfg())
    assert fed.malicious == ()
    assert all(not node.malicious for node in fed.nodes)


def test_flipped_training_data_static_and_test_clean():
    cfg = make_cfg(attack={"kind": "label_flip_untargeted", "pnr": 0.5})
    fed = Federation(cfg)
    clean = Federation(make_cfg())
    assert fed.malicious == tuple(sorted(fed.malicious)) and fed.malicious
    for nid in range(cfg.federation.n_nodes):
        poisoned = fed.nodes[nid].data
        reference = clean.nodes[nid].data
        if nid in fed.malicious:
            assert not np.array_equal(poisoned.train.labels,
                                      reference.train.labels)
        else:
            assert np.array_equal(poisoned.train.labels, reference.train.labels)
        # only the training split is attacker-controlled
        assert np.array_equal(poisoned.test.labels, reference.test.labels)
        assert np.array_equal(poisoned.val.labels, reference.val.labels)


def test_model_poison_touches_outgoing_copy_only():
    cfg = make_cfg(attack={"kind": "model_poison", "pnr": 0.5,
                           "noise_ratio": 0.5, "amplitude": 2.0})
    fed = Federation(cfg)
    trained_flags = fed._train_phase(1)
    trained = {nid: p for nid, (p, _) in trained_flags.items()}
    outgoing = fed._outgoing_phase(trained, 1)
    for nid in range(cfg.federation.n_nodes):
        if nid in fed.malicious:
            assert not params_equal(outgoing[nid], trained[nid])
        else:
            assert outgoing[nid] is trained[nid]


def test_targeted_flip_reports_asr():
    cfg = make_cfg(attack={"kind": "label_flip_targeted", "pnr": 0.25,
                           "source_class": 0, "target_class": 1})
    report = run_experiment(cfg)
    final = report.rounds[-1]
    assert any(m.asr_lf is not None for m in final.nodes)
    assert all(m.ba is None for m in final.nodes)
    assert "asr_lf" in report.summary["metrics"]


def test_backdoor_builds_eval_sets_and_reports_ba():
    cfg = make_cfg(attack={"kind": "backdoor", "pnr": 0.25, "target_class": 2,
                           "trigger": {"kind": "pixel_cross", "size": 3}})
    fed = Federation(cfg)
    for node in fed.nodes:
        assert node.backdoor_eval is not None
        assert len(node.backdoor_eval) == len(node.data.test)
        assert np.array_equal(node.backdoor_eval.labels, node.data.test.labels)
    report = fed.run()
    assert any(m.ba is not None for m in report.rounds[-1].nodes)
    assert "ba" in report.summary["metrics"]


# --- summary and failure handling ------------------------------------------

def test_summary_covers_benign_nodes_only():
    cfg = make_cfg(attack={"kind": "label_flip_untargeted", "pnr": 0.5})
    report = run_experiment(cfg)
    n_benign = cfg.federation.n_nodes - len(report.malicious)
    assert report.summary["metrics"]["f1"]["n"] == n_benign
    final = report.rounds[-1]
    expected = np.mean([m.f1 for m in final.nodes if m.benign])
    assert report.summary["metrics"]["f1"]["mean"] == pytest.approx(expected)
    assert report.summary["malicious"] == list(report.malicious)


def test_training_failure_keeps_pre_round_params(monkeypatch):
    cfg = make_cfg(federation={"n_nodes": 3, "rounds": 1})
    fed = Federation(cfg)
    before = fed.nodes[2].params.copy()
    real = train_local

    def flaky(params, dataset, train_cfg):
        if train_cfg.seed == derive_seed(cfg.seed, "train", 2, 1):
            raise NumericalError("synthetic divergence")
        return real(params, dataset, train_cfg)

    monkeypatch.setattr(sim, "train_local", flaky)
    report = fed.run()
    row = report.rounds[1].nodes[2]
    assert not row.adopted
    assert params_equal(fed.nodes[2].params, before)
    assert all(report.rounds[1].nodes[i].adopted for i in (0, 1))


# --- data path resolution ---------------------------------------------------

def test_relative_paths_resolve_against_env(monkeypatch, tmp_path):
    monkeypatch.setenv(sim.DATA_DIR_ENV, str(tmp_path))
    assert resolve_data_path("x.idx") == tmp_path / "x.idx"
    assert resolve_data_path("/abs/x.idx") == Path("/abs/x.idx")
    monkeypatch.delenv(sim.DATA_DIR_ENV)
    assert resolve_data_path("x.idx") == Path("x.idx")
