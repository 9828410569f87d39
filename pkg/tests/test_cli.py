import csv
import json

import numpy as np
import pytest

from raas.cli import SUMMARY_COLUMNS, default_config_dict, load_config, main, parse_config, parse_seeds
from raas.core import ValidationError
from raas.orchestrator import HISTORY_COLUMNS
from raas.policy import ARRIVAL_COLUMNS, BOUNDARY_COLUMNS, IDLE_COLUMNS, SLICE_COLUMNS
from raas.survival import RentalRecord, write_records_csv

SMALL_SOLVER = {
    "c_deg": {"lo": 0.0, "hi": 8.0, "n": 9},
    "c_rev": {"lo": 0.0, "hi": 1.0, "n": 5},
    "T": {"lo": 0.0, "hi": 50.0, "n": 6},
    "t": {"lo": 0.0, "hi": 400.0, "n": 5},
    "idle_c": {"lo": 0.0, "hi": 8.0, "n": 17},
    "idle_t": {"lo": 0.0, "hi": 400.0, "n": 9},
    "mc_samples": 128,
}


def small_config(tmp_path, N=300, seeds=(0, 1), **overrides):
    data = default_config_dict()
    data["solver"].update(SMALL_SOLVER)
    data["learning"]["K"] = 10
    data["truth"]["baseline"]["rate"] = 0.01
    data["metrics"] = {"window": 500.0, "time_step": 100.0, "customer_step": 50}
    data["N"] = N
    data["seeds"] = list(seeds)
    for k, v in overrides.items():
        data[k] = v
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_bundled_config_holds_reference_parameters():
    cfg = load_config(None)
    np.testing.assert_array_equal(cfg.truth.u, [0.37, 0.11, 0.34, 0.71])
    np.testing.assert_array_equal(cfg.truth.theta, [0.5, 0.2, 0.4, 0.3])
    assert cfg.truth.baseline.is_constant and cfg.truth.baseline.rate == 0.001
    assert (cfg.financial.h, cfg.financial.F, cfg.financial.R) == (0.02, 0.75, 1.5)
    assert cfg.N == 20000 and cfg.customers.d == 4 and cfg.seeds == tuple(range(10))
    assert cfg.learning.K == 100 and cfg.learning.n_samples == 2000 and cfg.learning.eps_u == 1e-4


def test_config_round_trip():
    cfg = load_config(None)
    assert parse_config(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d["financial"].update(h=-1.0), "h"),
    (lambda d: d["learning"].update(K=0), "K"),
    (lambda d: d.update(seeds=[1, 1]), "seeds"),
    (lambda d: d.update(N=0), "N"),
    (lambda d: d.update(bogus=1), "bogus"),
    (lambda d: d["truth"].update(theta=[0.1, -0.2, 0.0, 0.0]), "truth.theta"),
    (lambda d: d["customers"].update(d=3), "customers.d"),
])
def test_bad_config_names_field(tmp_path, capsys, mutate, field):
    data = default_config_dict()
    mutate(data)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ValidationError) as info:
        parse_config(data)
    assert field in str(info.value)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert field in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_malformed_json_exits_nonzero(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["oracle", "--config", str(path), "--quiet"]) == 2


def test_parse_seeds():
    assert parse_seeds("3,1,2") == (3, 1, 2)
    for bad in ("", "1,1", "a"):
        with pytest.raises(ValidationError):
            parse_seeds(bad)


def test_simulate_outputs_and_headers(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    names = set(p.name for p in out.iterdir())
    assert names == {
        "history_seed0.csv", "history_seed1.csv", "profit_rate.csv", "profit_rate_by_customer.csv",
        "estimation_errors.csv", "run_summary.csv",
    }
    header, rows = read_csv(out / "history_seed0.csv")
    assert tuple(header) == HISTORY_COLUMNS
    assert header == ["k", "wall_time", "event", "price", "reward_rate", "elapsed", "n_F", "n_R", "err_u",
                      "err_theta", "phase"]
    assert int(rows[-1][0]) == 300
    assert read_csv(out / "profit_rate.csv")[0] == ["time", "mean", "std", "n_runs"]
    assert read_csv(out / "profit_rate_by_customer.csv")[0] == ["k", "wall_time_mean", "mean", "std", "n_runs"]
    header, rows = read_csv(out / "estimation_errors.csv")
    assert header == ["k", "err_u_mean", "err_u_std", "err_theta_mean", "err_theta_std", "n_runs"]
    assert len(rows) == 301 and rows[0][0] == "0"
    # the starting estimate is the sampled centroid of the unit ball, close to 0
    assert float(rows[0][1]) == pytest.approx(0.87675823, abs=0.05)
    header, rows = read_csv(out / "run_summary.csv")
    assert tuple(header) == SUMMARY_COLUMNS and [r[0] for r in rows] == ["0", "1"]


def test_floats_written_losslessly(tmp_path):
    cfg = small_config(tmp_path, N=50, seeds=(0,))
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out / "history_seed0.csv")
    for r in rows:
        for cell in (r[1], r[3], r[4], r[5], r[8], r[9]):
            if cell:
                assert f"{float(cell):.17g}" == cell


def test_simulate_single_customer(tmp_path):
    cfg = small_config(tmp_path, N=1, seeds=(4,))
    out = tmp_path / "one"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out / "history_seed4.csv")
    assert {r[0] for r in rows} == {"1"}
    customer_events = ("priced_rejected", "rental_success", "rental_failure", "operator_rejected")
    assert sum(r[2] in customer_events for r in rows) == 1


def test_seeds_flag_overrides_config(tmp_path):
    cfg = small_config(tmp_path, N=20, seeds=(0, 1))
    out = tmp_path / "s"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--seeds", "7", "--quiet"]) == 0
    assert (out / "history_seed7.csv").exists() and not (out / "history_seed0.csv").exists()


def test_simulate_deterministic(tmp_path):
    cfg = small_config(tmp_path, N=150)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg), "--out", str(a), "--quiet"]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--quiet"]) == 0
    assert outputs(a) == outputs(b)


def test_oracle_outputs(tmp_path):
    cfg = small_config(tmp_path, N=100, seeds=(0,))
    out = tmp_path / "orc"
    assert main(["oracle", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    header, rows = read_csv(out / "oracle_arrival_policy.csv")
    assert tuple(header) == ARRIVAL_COLUMNS and len(rows) == 9 * 5 * 6 * 5
    header, rows = read_csv(out / "oracle_arrival_regions.csv")
    assert tuple(header) == SLICE_COLUMNS and len(rows) == 3 * 9 * 6 * 5
    assert sorted({r[0] for r in rows}) == ["10", "50", "90"]
    header, rows = read_csv(out / "oracle_idle_policy.csv")
    assert tuple(header) == IDLE_COLUMNS and len(rows) == 17 * 9
    header, rows = read_csv(out / "oracle_replacement_boundary.csv")
    assert header == list(BOUNDARY_COLUMNS) == ["t", "threshold"] and len(rows) == 9
    header, rows = read_csv(out / "oracle_history_seed0.csv")
    assert tuple(header) == HISTORY_COLUMNS
    assert {r[-1] for r in rows} == {"control"}
    assert all(float(r[8]) == 0.0 and float(r[9]) == 0.0 for r in rows)
    for name in ("oracle_profit_rate.csv", "oracle_estimation_errors.csv", "oracle_run_summary.csv"):
        assert (out / name).exists()


def test_oracle_deterministic(tmp_path):
    cfg = small_config(tmp_path, N=80, seeds=(2,))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["oracle", "--config", str(cfg), "--out", str(a), "--quiet"]) == 0
    assert main(["oracle", "--config", str(cfg), "--out", str(b), "--quiet"]) == 0
    assert outputs(a) == outputs(b)


def test_oracle_zero_cost_accepts_everywhere(tmp_path):
    path = small_config(tmp_path, N=5, seeds=(0,), financial={"h": 0.0, "F": 0.0, "R": 0.0})
    data = json.loads(path.read_text())
    data["solver"]["discounting"] = "epoch"
    data["solver"]["gamma"] = 0.95
    # a failure cuts a rental short, so free replacement alone does not make every rental harmless
    data["truth"]["baseline"]["rate"] = 0.0
    path.write_text(json.dumps(data))
    out = tmp_path / "z"
    assert main(["oracle", "--config", str(path), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out / "oracle_arrival_policy.csv")
    assert {r[-1] for r in rows} == {"accept"}


def test_estimate_demo_two_records(tmp_path):
    recs = [RentalRecord(np.array([0.3, 0.1]), 0.0, 5.0, True), RentalRecord(np.array([0.1, 0.4]), 0.0, 10.0, False)]
    path = tmp_path / "two.csv"
    write_records_csv(path, recs)
    out = tmp_path / "est"
    assert main(["estimate-demo", str(path), "--out", str(out), "--zero-theta", "--quiet"]) == 0
    header, rows = read_csv(out / "theta.csv")
    assert header == ["index", "theta"] and [float(r[1]) for r in rows] == [0.0, 0.0]
    header, rows = read_csv(out / "cumhaz.csv")
    assert header == ["age", "jump", "cum_hazard"]
    assert [[float(c) for c in r] for r in rows] == [[5.0, 0.5, 0.5]]
    header, rows = read_csv(out / "hazard.csv")
    assert header == ["age", "rate"] and len(rows) > 0


def test_estimate_demo_recovers_generator(tmp_path):
    from raas.core import BaselineHazard
    from raas.env import simulate_rentals

    Z, entry, exit_, failed = simulate_rentals(
        np.array([0.5, 0.2, 0.4, 0.3]), BaselineHazard.constant(0.05), 2000, np.random.default_rng(11)
    )
    recs = [RentalRecord(z, a, b, bool(f)) for z, a, b, f in zip(Z, entry, exit_, failed)]
    path = tmp_path / "gen.csv"
    write_records_csv(path, recs)
    out = tmp_path / "est"
    assert main(["estimate-demo", str(path), "--out", str(out), "--quiet"]) == 0
    _, rows = read_csv(out / "theta.csv")
    theta = np.array([float(r[1]) for r in rows])
    assert np.linalg.norm(theta - [0.5, 0.2, 0.4, 0.3]) < 0.3


def test_estimate_demo_errors(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["estimate-demo", str(empty), "--out", str(tmp_path / "e"), "--quiet"]) == 1
    header_only = tmp_path / "h.csv"
    header_only.write_text("z_1,entry_age,exit_age,failed\n")
    assert main(["estimate-demo", str(header_only), "--out", str(tmp_path / "e")]) == 1
    censored = tmp_path / "c.csv"
    write_records_csv(censored, [RentalRecord(np.array([0.2]), 0.0, 3.0, False)])
    assert main(["estimate-demo", str(censored), "--out", str(tmp_path / "e"), "--min-failures", "2"]) == 1
    assert "raas: error" in capsys.readouterr().err
    assert main(["estimate-demo", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "e")]) == 1
