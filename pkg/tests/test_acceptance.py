"""One test per acceptance criterion; each prints a PASS/FAIL line with the measured values."""
import time

import numpy as np

from _gradcheck import TOL, check_seed
from _runs import TINY_STUDY, TINY_TRAIN, record, run, tree_digest
from roadlab.datalog import load_table8_fixture, record_columns
from roadlab.metrics import combined_score, dpi, permutation_test_corr_diff, whiteness
from roadlab.pilotnet import NetworkConfig
from roadlab.preprocess import encode_depth
from roadlab.simulator import ConstantPolicy, ReferencePolicy, SimConfig, gen_track, run_episode
from roadlab.study import StudyConfig, default_conditions, reproduce_table3, run_study
from roadlab.trainer import EarlyStopping, TrainConfig, train
from test_trainer import overfit_setup

PUBLISHED = {"mae_trajectory": -0.56, "failure_rate": -0.06, "w_on_policy": -0.56, "w_effective": -0.67,
             "w_off_policy": -0.72, "mae_steer": -0.76, "combined": -0.82}


def test_c01_table3_reproduction():
    t0 = time.perf_counter()
    table = reproduce_table3()
    elapsed = time.perf_counter() - t0
    misses = {k: round(table[k], 4) for k, v in PUBLISHED.items() if abs(table[k] - v) > 0.02}
    detail = ", ".join(f"{k} {table[k]:+.3f}" for k in PUBLISHED) + f"; {elapsed * 1e3:.1f} ms"
    if misses:
        detail += f"; outside +-0.02: {misses}"
    assert record("C1 Table III reproduction", not misses and elapsed < 1.0, detail)


def test_c02_combined_calibration():
    cols = record_columns(load_table8_fixture())
    ours = combined_score(cols["mae_steer"], cols["w_off_policy"])
    err = np.abs(ours - cols["combined"])
    worst = int(np.argmax(err))
    detail = (f"max row error {err.max():.4f} (row {worst + 1}); "
              f"Camera v1 BGR {ours[0]:.6f} vs printed {cols['combined'][0]:.6f}")
    assert record("C2 combined-column calibration", bool(np.all(err <= 1e-3)), detail)


def test_c03_permutation_test():
    cols = record_columns(load_table8_fixture())
    res = permutation_test_corr_diff(cols["combined"], cols["mae_steer"], cols["dpi"], n_perm=10_000, seed=0)
    ok = abs(res.mean_effect + 0.05) <= 0.03 and abs(res.p_value - 0.16) <= 0.07
    assert record("C3 permutation test", ok,
                  f"{res.method}: mean effect {res.mean_effect:+.4f}, p {res.p_value:.4f}")


def test_c04_gradient_check():
    t0 = time.perf_counter()
    errors = [check_seed(seed)[0] for seed in range(20)]
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    assert record("C4 gradient correctness", worst < TOL and elapsed < 30,
                  f"worst relative error {worst:.2e} over 20 seeds in {elapsed:.1f} s")


def test_c05_shape_contract():
    cfg = NetworkConfig()
    chain = cfg.spatial_chain()
    ok = chain == [(31, 127), (14, 62), (5, 29), (1, 13), (1, 11)] and cfg.flatten_width == 704
    assert record("C5 shape contract", ok, f"chain {chain}, flatten {cfg.flatten_width}")


def test_c06_training_sanity():
    ds, cfg = overfit_setup()
    _, hist = train(ds, ds, cfg, TrainConfig(batch_size=32, max_epochs=200, patience=199, seed=0))
    steps_to_target = next((row[0] for row in hist if row[1] < 0.5), None)
    stopper = EarlyStopping(10)
    stopped = next(e for e, v in enumerate([5.0] + [4.0] * 30, start=1) if stopper.update(e, v))
    # the run holds the best epoch plus `patience` further epochs
    epochs_from_best = stopped - stopper.best_epoch + 1
    ok = steps_to_target is not None and steps_to_target <= 200 and epochs_from_best == 10 + 1
    assert record("C6 training sanity", ok,
                  f"train MAE < 0.5 deg after {steps_to_target} steps (min {min(r[1] for r in hist):.3f}); "
                  f"plateau run stopped at epoch {stopped}, best epoch {stopper.best_epoch}")


def test_c07_closed_loop_oracle():
    cfg = SimConfig()
    t0 = time.perf_counter()
    ref_interventions, worst_lat, const_missing = 0, 0.0, []
    for seed in range(50):
        track = gen_track(1000 + seed, 1000.0)
        lg = run_episode(ReferencePolicy(cfg), track, cfg, seed)
        ref_interventions += len(lg.interventions)
        worst_lat = max(worst_lat, float(lg.meta["max_lateral_m"]))
        if np.max(np.abs(track.kappa)) > 0 and not run_episode(ConstantPolicy(0.0), track, cfg, seed).interventions:
            const_missing.append(seed)
    elapsed = time.perf_counter() - t0
    ok = ref_interventions == 0 and worst_lat < 0.3 and not const_missing and elapsed < 120
    assert record("C7 closed-loop oracle", ok,
                  f"reference: {ref_interventions} interventions, max offset {worst_lat:.3f} m; "
                  f"constant 0 deg without intervention on {len(const_missing)} tracks; {elapsed:.1f} s")


def test_c08_synthetic_correlation_signs():
    cfg = StudyConfig(seed=0, n_tracks=2, track_length=150, collect_tracks=3, collect_length=250,
                      max_epochs=3, patience=2, n_perm=1000)
    res = run_study(default_conditions(), cfg)
    r_mae, r_woff = res.table["mae_steer"], res.table["w_off_policy"]
    ok = len(res.records) >= 8 and r_mae < 0 and r_woff < 0
    assert record("C8 synthetic correlation signs", ok,
                  f"{len(res.records)} deployments; r(DpI, mae_steer) {r_mae:+.3f}, "
                  f"r(DpI, w_off_policy) {r_woff:+.3f}")


def test_c09_determinism(tmp_path):
    digests = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert run("collect", "--seed", 11, "--tracks", 2, "--length", 100, "--out", d / "collect") == 0
        assert run("train", "--seed", 11, "--data", d / "collect", *TINY_TRAIN, "--out", d / "train") == 0
        assert run("drive", "--seed", 11, "--checkpoint", d / "train" / "checkpoint", "--length", 100,
                   "--out", d / "drive") == 0
        assert run("study", "--seed", 11, *TINY_STUDY, "--out", d / "study") == 0
        digests[rep] = {name: tree_digest(d / name) for name in ("collect", "train", "drive", "study")}
    same = {name: digests["a"][name] == digests["b"][name] for name in digests["a"]}
    files = sum(len(v) for v in digests["a"].values())
    assert record("C9 determinism", all(same.values()), f"byte-identical per command {same}; {files} files")


def test_c10_metric_unit_oracles():
    vals = (whiteness([0, 1, 2, 3], 0.1), encode_depth(10), dpi(8442.5, 2))
    # 4221.25 is the printed 4221.3 before half-up rounding
    ok = vals[0] == 10.0 and vals[1] == 204 and vals[2] == 4221.25
    assert record("C10 metric unit oracles", ok,
                  f"whiteness {vals[0]!r}, encode_depth(10) {int(vals[1])}, dpi {vals[2]!r}")
