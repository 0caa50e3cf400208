"""Tests for the batch front end: exit codes, artifacts, reproducibility.

Oracles: the documented exit-code contract (0 ok, 1 input, 2 numerical,
3 infeasible), file artifacts re-read through the library loaders, and
byte-for-byte determinism of seeded re-runs. The heavy pipeline runs
once per module at a reduced scale and every assertion shares it.
"""

import importlib.resources as resources
import json
import shutil

import numpy as np
import pytest

from vscopf import cli
from vscopf.cli import ConfigError, load_config
from vscopf.netmodel import load_case, serialize_case
from vscopf.scenarios import load_scenarios
from vscopf.surrogate import MlpSurrogate, ReducedSurrogate, load_surrogate

CASE14 = str(resources.files("vscopf") / "cases" / "case14.m")


def _config_text(out_dir, **over):
    """Small but complete run configuration; keyword overrides per test."""
    vals = {
        "case": CASE14.replace("\\", "/"),
        "out": str(out_dir).replace("\\", "/"),
        "n_scen": 300,
        "capacity": 40.0,
        "eps": 0.1,
        "sigma_min": 0.5,
        "n_samples": 400,
        "epochs": 60,
        "polish": 300,
        "pls_dim_threshold": 40,
        "skip_stability": "false",
        "k_max": 30,
        "extra": "",
    }
    vals.update(over)
    return f"""
[paths]
case = "{vals['case']}"
out = "{vals['out']}"

[scenarios]
n = {vals['n_scen']}
seed = 11
rank_corr = [[1.0, 0.5, 0.2], [0.5, 1.0, 0.4], [0.2, 0.4, 1.0]]

[[scenarios.plants]]
bus = 9
capacity_mw = {vals['capacity']}
family = "beta"
params = {{a = 2.0, b = 5.0}}

[[scenarios.plants]]
bus = 14
capacity_mw = {vals['capacity']}
family = "beta"
params = {{a = 2.5, b = 4.0}}

[[scenarios.plants]]
bus = 6
capacity_mw = {vals['capacity']}
family = "uniform"
params = {{lo = 0.1, hi = 0.7}}

[chance]
eps_p = {vals['eps']}
eps_q = {vals['eps']}
eps_v = {vals['eps']}
eps_i = {vals['eps']}
eps_sigma = {vals['eps']}
sigma_min = {vals['sigma_min']}

[apce]
max_degree = 2
max_interaction = 2
split_seed = 0

[dataset]
n_samples = {vals['n_samples']}
seed = 5

[surrogate]
epochs = {vals['epochs']}
polish_iters = {vals['polish']}
seed = 3

[pls]
dim_threshold = {vals['pls_dim_threshold']}

[solve]
k_max = {vals['k_max']}
skip_stability = {vals['skip_stability']}
{vals['extra']}
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """dataset -> train -> solve, shared by the read-only assertions."""
    root = tmp_path_factory.mktemp("pipeline")
    out = root / "run"
    cfg = root / "run.toml"
    cfg.write_text(_config_text(out))
    assert cli.main(["dataset", str(cfg)]) == 0
    assert cli.main(["train", str(cfg)]) == 0
    assert cli.main(["solve", str(cfg)]) == 0
    return cfg, out


# ---------------------------------------------------------------------------
# parse and pf


def test_parse_writes_normalized_case(tmp_path, capsys):
    rc = cli.main(["parse", CASE14, "--out", str(tmp_path)])
    assert rc == 0
    doc = json.loads((tmp_path / "case14.json").read_text())
    assert len(doc["buses"]) == 14
    assert "14 buses" in capsys.readouterr().out


def test_parse_corrupt_file_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text("mpc.baseMVA = 100;\nmpc.bus = [\n1 3 oops;\n];\n")
    rc = cli.main(["parse", str(bad), "--out", str(tmp_path)])
    assert rc == 1
    assert "line 3" in capsys.readouterr().err


def test_parse_flags_bad_limits(tmp_path, capsys):
    case = load_case(CASE14)
    doc = json.loads(serialize_case(case))
    doc["buses"][3]["v_min"] = 2.0  # above v_max
    target = tmp_path / "broken.json"
    target.write_text(json.dumps(doc))
    rc = cli.main(["parse", str(target), "--out", str(tmp_path)])
    assert rc == 1
    assert "v_min" in capsys.readouterr().err


def test_pf_bundled_case(tmp_path, capsys):
    rc = cli.main(["pf", CASE14, "--out", str(tmp_path)])
    assert rc == 0
    outtext = capsys.readouterr().out
    assert "sigma" in outtext
    with open(tmp_path / "pf_bus.csv") as fh:
        rows = fh.read().strip().splitlines()
    assert len(rows) == 15  # header + one row per bus
    first = rows[1].split(",")
    assert first[0] == "1" and float(first[1]) == pytest.approx(1.06)


def test_pf_missing_file_exits_1():
    assert cli.main(["pf", "/no/such/case.m"]) == 1


def test_pf_forced_nonconvergence_exits_2(tmp_path):
    rc = cli.main(["pf", CASE14, "--out", str(tmp_path), "--max-iter", "1"])
    assert rc == 2


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["pf", CASE14, "--no-such-flag"])
    assert exc.value.code == 1


# ---------------------------------------------------------------------------
# configuration schema


def test_config_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "c.toml"
    # lands inside [solve], which has no such key
    cfg.write_text(_config_text(tmp_path / "o", extra="enabld = true\n"))
    with pytest.raises(ConfigError, match="enabld"):
        load_config(cfg)


def test_config_requires_seeds(tmp_path):
    text = _config_text(tmp_path / "o").replace("seed = 5\n", "")
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    with pytest.raises(ConfigError, match="dataset.*seed|seed"):
        load_config(cfg)


def test_config_type_check(tmp_path):
    text = _config_text(tmp_path / "o").replace("n_samples = 400", 'n_samples = "lots"')
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    with pytest.raises(ConfigError, match="n_samples"):
        load_config(cfg)


def test_config_missing_case_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(_config_text(tmp_path / "o", case="/no/such/case.m"))
    with pytest.raises(ConfigError, match="not found"):
        load_config(cfg)


def test_config_missing_section_exits_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[paths]\ncase = 'x.m'\n")
    assert cli.main(["dataset", str(cfg)]) == 1


def test_config_json_equivalent(tmp_path):
    toml_cfg = tmp_path / "c.toml"
    toml_cfg.write_text(_config_text(tmp_path / "o"))
    a = load_config(toml_cfg)

    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    doc = tomllib.loads(toml_cfg.read_text())
    json_cfg = tmp_path / "c.json"
    json_cfg.write_text(json.dumps(doc))
    b = load_config(json_cfg)
    assert a.chance == b.chance
    assert a.apce == b.apce
    assert a.mlp == b.mlp
    assert a.dataset_seed == b.dataset_seed


# ---------------------------------------------------------------------------
# dataset and training


def test_dataset_artifacts(pipeline):
    cfg_path, out = pipeline
    assert (out / "scenarios.csv").is_file()
    assert (out / "dataset.npz").is_file()
    case = load_case(CASE14)
    scen = load_scenarios(out / "scenarios.csv", case.base_mva)
    assert scen.n_scenarios == 300
    assert scen.buses == [9, 14, 6]
    with np.load(out / "dataset.npz") as data:
        assert data["z"].shape[1] == 2 * 14 - 1
        assert data["sigma"].shape[0] == data["z"].shape[0]


def test_train_without_pls_block(pipeline):
    _, out = pipeline
    doc = json.loads((out / "model.json").read_text())
    assert doc["pls"] is None  # 27 states, threshold 40: compression off
    model = load_surrogate(out / "model.json")
    assert isinstance(model, MlpSurrogate)
    stats = json.loads((out / "model_stats.json").read_text())
    assert stats["pls"]["engaged"] is False
    assert 0.0 < stats["test_mae"] < 0.01
    assert stats["rho"] > 0.0


def test_train_reuses_dataset(pipeline, tmp_path, capsys):
    cfg_path, out = pipeline
    rc = cli.main(["train", str(cfg_path)])
    assert rc == 0
    assert "reusing dataset" in capsys.readouterr().out


def test_train_rerun_byte_identical(pipeline, tmp_path):
    cfg_path, out = pipeline
    first = (out / "model.json").read_bytes()
    # fresh output tree, same seeds: rebuild dataset and retrain
    out2 = tmp_path / "again"
    cfg2 = tmp_path / "again.toml"
    cfg2.write_text(_config_text(out2))
    assert cli.main(["dataset", str(cfg2)]) == 0
    assert cli.main(["train", str(cfg2)]) == 0
    assert (out2 / "model.json").read_bytes() == first


def test_train_engages_pls_over_threshold(pipeline, tmp_path):
    _, out = pipeline
    out2 = tmp_path / "pls"
    out2.mkdir()
    # reuse the prebuilt dataset; 27 states against a threshold of 10
    shutil.copy(out / "dataset.npz", out2 / "dataset.npz")
    cfg2 = tmp_path / "pls.toml"
    cfg2.write_text(_config_text(out2, pls_dim_threshold=10))
    assert cli.main(["train", str(cfg2)]) == 0
    model = load_surrogate(out2 / "model.json")
    assert isinstance(model, ReducedSurrogate)
    stats = json.loads((out2 / "model_stats.json").read_text())
    assert stats["pls"]["engaged"] is True
    assert stats["pls"]["components"] == model.pls.n_components >= 1


def test_train_dataset_case_mismatch(pipeline, tmp_path):
    _, out = pipeline
    out2 = tmp_path / "mismatch"
    out2.mkdir()
    with np.load(out / "dataset.npz") as data:
        np.savez(out2 / "dataset.npz", z=data["z"], sigma=data["sigma"],
                 col_labels=data["col_labels"], accepted=data["accepted"],
                 rejected=data["rejected"], case=np.array("case57"))
    cfg2 = tmp_path / "mismatch.toml"
    cfg2.write_text(_config_text(out2))
    assert cli.main(["train", str(cfg2)]) == 1


# ---------------------------------------------------------------------------
# solve


def test_solve_report_contents(pipeline):
    _, out = pipeline
    doc = json.loads((out / "report.json").read_text())
    assert doc["converged"] is True
    assert doc["case"] == "case14"
    assert doc["stability_included"] is True
    assert len(doc["eps_j"]) == len(doc["labels"])

    # each one-sided empirical rate stays within budget on the fitting set
    slack = 0.1 + 1 / doc["n_scenarios"] + 0.02
    for lo, hi in zip(doc["eps_lo"], doc["eps_hi"]):
        assert max(lo, hi) <= slack

    # cost never decreases along the tightening path
    costs = [h["cost"] for h in doc["history"]]
    assert all(b >= a - 1e-6 for a, b in zip(costs, costs[1:]))


def test_solve_distribution_csvs(pipeline):
    _, out = pipeline
    with open(out / "responses.csv") as fh:
        rows = fh.read().strip().splitlines()
    doc = json.loads((out / "report.json").read_text())
    assert len(rows) == doc["n_scenarios"] + 1
    header = rows[0].split(",")
    assert header[:2] == ["scenario", "converged"]
    assert header[2:] == doc["labels"]
    with open(out / "eps_table.csv") as fh:
        table = fh.read().strip().splitlines()
    assert len(table) == len(doc["labels"]) + 1
    assert (out / "history.csv").is_file()


def test_solve_threads_identical_outputs(pipeline, tmp_path):
    cfg_path, out = pipeline
    out2 = tmp_path / "threads2"
    out2.mkdir()
    for name in ("scenarios.csv", "dataset.npz", "model.json", "model_stats.json"):
        shutil.copy(out / name, out2 / name)
    cfg2 = tmp_path / "threads2.toml"
    cfg2.write_text(_config_text(out2))
    assert cli.main(["solve", str(cfg2), "--threads", "2"]) == 0
    assert (out2 / "responses.csv").read_bytes() == (out / "responses.csv").read_bytes()
    a = json.loads((out / "report.json").read_text())
    b = json.loads((out2 / "report.json").read_text())
    a.pop("timings"), b.pop("timings")
    assert a == b


def test_solve_skip_stability(pipeline, tmp_path, capsys):
    _, out = pipeline
    out2 = tmp_path / "nostab"
    out2.mkdir()
    # no model file on purpose: the baseline mode must not need one
    shutil.copy(out / "scenarios.csv", out2 / "scenarios.csv")
    cfg2 = tmp_path / "nostab.toml"
    cfg2.write_text(_config_text(out2))
    rc = cli.main(["solve", str(cfg2), "--skip-stability"])
    assert rc == 0
    assert "stability constraint: skipped" in capsys.readouterr().out
    doc = json.loads((out2 / "report.json").read_text())
    assert doc["stability_included"] is False
    assert all("sigma" not in lab for lab in doc["labels"])


def test_solve_without_model_exits_1(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(_config_text(tmp_path / "fresh"))
    assert cli.main(["solve", str(cfg)]) == 1


def test_solve_infeasible_exits_3(tmp_path, capsys):
    # giant plants at vanishing violation budget: full-range quantiles of
    # machine reactive output overshoot both sides of its narrow band
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        _config_text(tmp_path / "o", capacity=100.0, eps=1e-9, k_max=10,
                     skip_stability="true")
    )
    rc = cli.main(["solve", str(cfg)])
    assert rc == 3
    assert "infeasible" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# validate


def test_validate_on_fitting_set(pipeline, capsys):
    cfg_path, out = pipeline
    rc = cli.main([
        "validate", str(out / "report.json"), str(out / "scenarios.csv"),
        "--config", str(cfg_path),
    ])
    assert rc == 0
    rows = (out / "validation.csv").read_text().strip().splitlines()
    doc = json.loads((out / "report.json").read_text())
    assert len(rows) == len(doc["labels"]) + 1
    # fitting set: every within_budget flag should hold
    assert all(r.rsplit(",", 1)[1] == "1" for r in rows[1:])


def test_validate_heldout_scenarios(pipeline, tmp_path):
    cfg_path, out = pipeline
    from vscopf.scenarios import write_scenarios

    case = load_case(CASE14)
    scen = load_scenarios(out / "scenarios.csv", case.base_mva)
    rng = np.random.default_rng(99)
    held = scen.head(scen.n_scenarios)
    held.values = held.values[rng.permutation(scen.n_scenarios)] * 0.97
    held_path = tmp_path / "held.csv"
    write_scenarios(held_path, held, case.base_mva)
    rc = cli.main([
        "validate", str(out / "report.json"), str(held_path),
        "--config", str(cfg_path), "--out", str(tmp_path),
    ])
    assert rc == 0
    assert (tmp_path / "validation.csv").is_file()


def test_validate_empty_scenarios_exits_1(pipeline, tmp_path):
    cfg_path, out = pipeline
    empty = tmp_path / "empty.csv"
    empty.write_text("# nothing here\n9,14,6\n")
    rc = cli.main([
        "validate", str(out / "report.json"), str(empty),
        "--config", str(cfg_path),
    ])
    assert rc == 1


def test_validate_mismatched_report_exits_1(pipeline, tmp_path):
    cfg_path, out = pipeline
    doc = json.loads((out / "report.json").read_text())
    doc["operating_point"]["p_g"] = doc["operating_point"]["p_g"][:2]
    broken = tmp_path / "broken_report.json"
    broken.write_text(json.dumps(doc))
    rc = cli.main([
        "validate", str(broken), str(out / "scenarios.csv"),
        "--config", str(cfg_path),
    ])
    assert rc == 1


# ---------------------------------------------------------------------------
# standalone uncertainty propagation


def test_uq_quantiles_match_direct_order_statistics(tmp_path):
    rng = np.random.default_rng(4)
    xi = rng.uniform(-1.0, 1.0, size=(2000, 3))
    resp = 0.5 + 2.0 * xi[:, 0] + xi[:, 1] * xi[:, 2] - xi[:, 2] ** 2
    data = tmp_path / "bb.csv"
    with open(data, "w") as fh:
        fh.write("x1,x2,x3,y\n")
        for row in np.column_stack([xi, resp]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    rc = cli.main([
        "uq", str(data), "--inputs", "3", "--alpha", "0.01,0.05",
        "--out", str(tmp_path),
    ])
    assert rc == 0
    rows = (tmp_path / "uq_quantiles.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    cells = rows[1].split(",")
    got = dict(zip(header, cells))
    assert got["response"] == "y"

    # the expansion reproduces a quadratic exactly, so its quantiles are
    # the ceiling order statistics of the true response
    n = len(resp)
    srt = np.sort(resp)
    for a in (0.01, 0.05):
        lo = srt[max(int(np.ceil(a * n)), 1) - 1]
        hi = srt[max(int(np.ceil((1 - a) * n)), 1) - 1]
        assert float(got[f"q{a:g}"]) == pytest.approx(lo, abs=1e-8)
        assert float(got[f"q{1 - a:g}"]) == pytest.approx(hi, abs=1e-8)
    assert float(got["mean"]) == pytest.approx(resp.mean(), abs=1e-8)
    assert (tmp_path / "uq_model.json").is_file()


def test_uq_rejects_bad_column_split(tmp_path):
    data = tmp_path / "bb.csv"
    data.write_text("a,b\n1.0,2.0\n")
    assert cli.main(["uq", str(data), "--inputs", "2"]) == 1


def test_uq_rejects_nonnumeric(tmp_path):
    data = tmp_path / "bb.csv"
    data.write_text("a,b\n1.0,fish\n")
    assert cli.main(["uq", str(data), "--inputs", "1"]) == 1
