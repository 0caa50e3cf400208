"""Batch front end for the dispatch pipeline.

One TOML or JSON configuration document drives everything; it is checked
against a schema before any computation starts, and every random draw
takes its seed from the config, so a re-run reproduces its outputs bit
for bit. The three expensive phases (dataset construction, surrogate
training, tightening solve) write serialized artifacts and resume from
whatever already exists on disk.

Exit codes are a stable contract:

    0  success
    1  input error (unparseable files, schema violations, missing paths)
    2  numerical non-convergence (power flow, training, NLP, tightening)
    3  chance constraints jointly infeasible at the requested levels

Subcommands: parse, pf, dataset, train, solve, validate, uq. All outputs
land under ``--out DIR``; nothing is plotted, only plot-ready CSV.
"""

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .apce import (
    ApceError,
    build_basis,
    evaluate,
    fit_coefficients,
    model_to_json,
    quantile,
    reduced_indices,
)
from .ccopf import (
    ApceSettings,
    CalibrationParams,
    CcopfError,
    ChanceSpec,
    InfeasibleError,
    empirical_violation,
    initial_bounds,
    iterate,
    report_to_json,
)
from .ipm import IpmError
from .netmodel import CaseError, load_case, serialize_case, validate_case
from .powerflow import (
    OperatingPoint,
    PowerFlowError,
    assemble_jacobian,
    base_dispatch,
    injections_from_dispatch,
    solve_pf,
    vsi_msv,
)
from .scenarios import (
    PlantSpec,
    ScenarioError,
    ScenarioSynthSpec,
    VsiDataset,
    build_vsi_dataset,
    control_bounds,
    lhs_sample,
    load_scenarios,
    synth_scenarios,
    write_scenarios,
)
from .surrogate import (
    MlpConfig,
    SurrogateError,
    load_surrogate,
    save_surrogate,
    train_mlp,
    train_reduced,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_INFEASIBLE = 3


class ConfigError(ValueError):
    """Configuration document fails the schema or references missing files."""


# ---------------------------------------------------------------------------
# configuration schema
#
# section -> key -> (type tag, required, default). Unknown sections and
# unknown keys are rejected outright: a typo that silently falls back to
# a default is worse than an error. Seeds have no defaults on purpose.

_SCHEMA = {
    "paths": {
        "case": ("str", True, None),
        "out": ("str", False, "out"),
        "scenarios": ("str", False, None),
        "dataset": ("str", False, "dataset.npz"),
        "model": ("str", False, "model.json"),
    },
    "scenarios": {
        "n": ("int", True, None),
        "seed": ("int", True, None),
        "rank_corr": ("matrix", True, None),
        "plants": ("plants", True, None),
    },
    "chance": {
        "eps_p": ("float", False, 0.05),
        "eps_q": ("float", False, 0.05),
        "eps_v": ("float", False, 0.05),
        "eps_i": ("float", False, 0.05),
        "eps_sigma": ("float", False, 0.05),
        "sigma_min": ("float", True, None),
    },
    "apce": {
        "max_degree": ("int", False, 2),
        "max_interaction": ("int", False, 2),
        "holdout_fraction": ("float", False, 0.2),
        "split_seed": ("int", True, None),
    },
    "dataset": {
        "n_samples": ("int", True, None),
        "seed": ("int", True, None),
    },
    "surrogate": {
        "hidden_width": ("int", False, 32),
        "epochs": ("int", False, 300),
        "batch_size": ("int", False, 64),
        "learning_rate": ("float", False, 0.02),
        "polish_iters": ("int", False, 3000),
        "seed": ("int", True, None),
    },
    "pls": {
        "enabled": ("bool", False, True),
        "dim_threshold": ("int", False, 40),
        "variance_threshold": ("float", False, 0.999),
    },
    "calibration": {
        "enabled": ("bool", False, False),
        "rho": ("float", False, None),
        "delta": ("float", False, None),
    },
    "solve": {
        "k_max": ("int", False, 50),
        "margin_tol": ("float", False, 1e-6),
        "skip_stability": ("bool", False, False),
    },
}

# [scenarios] may be replaced by paths.scenarios pointing at a CSV
_REQUIRED_SECTIONS = ("paths", "chance", "apce", "dataset", "surrogate")

_PLANT_SCHEMA = {
    "bus": ("int", True, None),
    "capacity_mw": ("float", True, None),
    "family": ("str", True, None),
    "params": ("table", False, None),
}

_FAMILIES = ("beta", "lognormal", "uniform")


def _type_ok(tag, val):
    if tag == "str":
        return isinstance(val, str)
    if tag == "bool":
        return isinstance(val, bool)
    if tag == "int":
        return isinstance(val, int) and not isinstance(val, bool)
    if tag == "float":
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    if tag == "table":
        return isinstance(val, dict)
    return True  # matrix / plants get bespoke checks


def _check_keys(where, table, schema):
    for key in table:
        if key not in schema:
            raise ConfigError(f"{where}: unknown key '{key}'")
    out = {}
    for key, (tag, required, default) in schema.items():
        if key in table:
            val = table[key]
            if not _type_ok(tag, val):
                raise ConfigError(f"{where}.{key}: expected {tag}, got {val!r}")
            out[key] = val
        elif required:
            raise ConfigError(f"{where}: missing required key '{key}'")
        else:
            out[key] = default
    return out


def _check_plants(raw):
    if not isinstance(raw, list) or not raw:
        raise ConfigError("scenarios.plants: expected a non-empty list of tables")
    plants = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"scenarios.plants[{i}]: expected a table")
        row = _check_keys(f"scenarios.plants[{i}]", entry, _PLANT_SCHEMA)
        if row["family"] not in _FAMILIES:
            raise ConfigError(
                f"scenarios.plants[{i}].family: {row['family']!r} not in {_FAMILIES}"
            )
        params = row["params"] or {}
        for k, v in params.items():
            if not _type_ok("float", v):
                raise ConfigError(f"scenarios.plants[{i}].params.{k}: expected float")
        plants.append(
            PlantSpec(
                bus=row["bus"],
                capacity_mw=float(row["capacity_mw"]),
                family=row["family"],
                params={k: float(v) for k, v in params.items()},
            )
        )
    return plants


def _check_matrix(raw, k):
    bad = ConfigError(f"scenarios.rank_corr: expected a {k}x{k} numeric matrix")
    if not isinstance(raw, list) or len(raw) != k:
        raise bad
    for row in raw:
        if not isinstance(row, list) or len(row) != k:
            raise bad
        for v in row:
            if not _type_ok("float", v):
                raise bad
    return np.asarray(raw, dtype=float)


@dataclass
class RunConfig:
    """Validated configuration with every path resolved."""

    case_path: Path
    out_dir: Path
    scenario_path: Path
    dataset_path: Path
    model_path: Path
    synth: ScenarioSynthSpec
    n_scenarios: int
    scenario_seed: int
    chance: ChanceSpec
    apce: ApceSettings
    mlp: MlpConfig
    pls_enabled: bool
    pls_dim_threshold: int
    pls_variance_threshold: float
    calib_enabled: bool
    calib_rho: float
    calib_delta: float
    dataset_samples: int
    dataset_seed: int
    k_max: int
    margin_tol: float
    skip_stability: bool


def _read_document(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    elif p.suffix.lower() == ".toml":
        try:
            doc = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
    else:
        raise ConfigError(f"{p}: config must be a .toml or .json file")
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a table")
    return doc


def load_config(path, out_override=None):
    """Parse, schema-check, and resolve a run configuration."""
    p = Path(path)
    doc = _read_document(p)
    for section in doc:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '{section}'")
        if not isinstance(doc[section], dict):
            raise ConfigError(f"section '{section}' must be a table")
    for section in _REQUIRED_SECTIONS:
        if section not in doc:
            raise ConfigError(f"missing required section [{section}]")

    tables = {
        name: _check_keys(name, doc.get(name, {}), schema)
        for name, schema in _SCHEMA.items()
        if name != "scenarios"
    }

    base = p.parent
    paths = tables["paths"]
    case_path = (base / paths["case"]).resolve()
    if not case_path.is_file():
        raise ConfigError(f"paths.case: file not found: {case_path}")
    out_dir = Path(out_override).resolve() if out_override else (base / paths["out"]).resolve()

    synth = None
    n_scen = scen_seed = None
    if "scenarios" in doc:
        sc = _check_keys("scenarios", doc["scenarios"], _SCHEMA["scenarios"])
        plants = _check_plants(sc["plants"])
        corr = _check_matrix(sc["rank_corr"], len(plants))
        if sc["n"] < 2:
            raise ConfigError("scenarios.n: need at least 2 scenarios")
        synth = ScenarioSynthSpec(plants=plants, rank_corr=corr)
        n_scen, scen_seed = sc["n"], sc["seed"]
        scenario_path = (
            (base / paths["scenarios"]).resolve()
            if paths["scenarios"]
            else out_dir / "scenarios.csv"
        )
    else:
        if not paths["scenarios"]:
            raise ConfigError("either [scenarios] or paths.scenarios is required")
        scenario_path = (base / paths["scenarios"]).resolve()
        if not scenario_path.is_file():
            raise ConfigError(f"paths.scenarios: file not found: {scenario_path}")

    # derived artifacts live under the output directory unless absolute
    def _under_out(raw):
        q = Path(raw)
        return q.resolve() if q.is_absolute() else out_dir / q

    ch = tables["chance"]
    ap = tables["apce"]
    su = tables["surrogate"]
    try:
        chance = ChanceSpec(
            eps_p=float(ch["eps_p"]),
            eps_q=float(ch["eps_q"]),
            eps_v=float(ch["eps_v"]),
            eps_i=float(ch["eps_i"]),
            eps_sigma=float(ch["eps_sigma"]),
            sigma_min=float(ch["sigma_min"]),
        )
        apce_cfg = ApceSettings(
            max_interaction=ap["max_interaction"],
            max_degree=ap["max_degree"],
            holdout_fraction=float(ap["holdout_fraction"]),
            split_seed=ap["split_seed"],
        )
    except CcopfError as exc:
        raise ConfigError(str(exc)) from exc
    mlp = MlpConfig(
        hidden_width=su["hidden_width"],
        epochs=su["epochs"],
        batch_size=su["batch_size"],
        learning_rate=float(su["learning_rate"]),
        polish_iters=su["polish_iters"],
        seed=su["seed"],
    )
    ca = tables["calibration"]
    so = tables["solve"]
    if tables["dataset"]["n_samples"] < 1:
        raise ConfigError("dataset.n_samples: need at least one sample")
    return RunConfig(
        case_path=case_path,
        out_dir=out_dir,
        scenario_path=scenario_path,
        dataset_path=_under_out(paths["dataset"]),
        model_path=_under_out(paths["model"]),
        synth=synth,
        n_scenarios=n_scen,
        scenario_seed=scen_seed,
        chance=chance,
        apce=apce_cfg,
        mlp=mlp,
        pls_enabled=tables["pls"]["enabled"],
        pls_dim_threshold=tables["pls"]["dim_threshold"],
        pls_variance_threshold=float(tables["pls"]["variance_threshold"]),
        calib_enabled=ca["enabled"],
        calib_rho=None if ca["rho"] is None else float(ca["rho"]),
        calib_delta=None if ca["delta"] is None else float(ca["delta"]),
        dataset_samples=tables["dataset"]["n_samples"],
        dataset_seed=tables["dataset"]["seed"],
        k_max=so["k_max"],
        margin_tol=float(so["margin_tol"]),
        skip_stability=so["skip_stability"],
    )


# ---------------------------------------------------------------------------
# shared pipeline steps


def _say(msg):
    print(msg)


def _stats_path(model_path):
    return model_path.parent / (model_path.stem + "_stats.json")


def _get_scenarios(cfg, case):
    """Load the scenario CSV if it exists, else synthesize and write it."""
    if cfg.scenario_path.is_file():
        return load_scenarios(cfg.scenario_path, case.base_mva)
    if cfg.synth is None:
        raise ConfigError(f"scenario file not found: {cfg.scenario_path}")
    spec = ScenarioSynthSpec(
        plants=cfg.synth.plants, rank_corr=cfg.synth.rank_corr, base_mva=case.base_mva
    )
    scen = synth_scenarios(spec, cfg.n_scenarios, seed=cfg.scenario_seed)
    cfg.scenario_path.parent.mkdir(parents=True, exist_ok=True)
    write_scenarios(cfg.scenario_path, scen, case.base_mva)
    _say(f"wrote {scen.n_scenarios} scenarios to {cfg.scenario_path}")
    return scen


def _build_dataset(cfg, case, scen):
    ys = lhs_sample(control_bounds(case), cfg.dataset_samples, seed=cfg.dataset_seed)
    try:
        # train at the forecast-mean injection: the dispatch solver only
        # ever queries the surrogate on that network
        ds = build_vsi_dataset(case, ys, xi=scen.mean_injection())
    except ScenarioError as exc:
        # inputs were schema-checked already; the only failure left is
        # every control sample diverging, which is a numerical outcome
        raise PowerFlowError(str(exc)) from exc
    return ds


def _save_dataset(path, ds, case_name):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        z=ds.z,
        sigma=ds.sigma,
        col_labels=np.array(ds.col_labels),
        accepted=ds.accepted,
        rejected=ds.rejected,
        case=np.array(case_name),
    )


def _load_dataset(path):
    with np.load(path, allow_pickle=False) as data:
        z = data["z"]
        sigma = data["sigma"]
        labels = [str(s) for s in data["col_labels"]]
        accepted = int(data["accepted"])
        rejected = int(data["rejected"])
        case_name = str(data["case"])
    return VsiDataset(z=z, sigma=sigma, col_labels=labels,
                      accepted=accepted, rejected=rejected), case_name


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_parse(args):
    case = load_case(args.case)
    diags = validate_case(case)
    for d in diags:
        print(str(d), file=sys.stderr)
    _say(
        f"{case.name}: {case.n_bus} buses, {case.n_branch} branches, "
        f"{case.n_gen} generators, base {case.base_mva} MVA"
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{case.name}.json"
    target.write_text(serialize_case(case))
    _say(f"wrote {target}")
    return EXIT_INPUT if any(d.level == "error" for d in diags) else EXIT_OK


def cmd_pf(args):
    case = load_case(args.case)
    inj = injections_from_dispatch(case, base_dispatch(case))
    sol = solve_pf(case, inj, tol=args.tol, max_iter=args.max_iter)
    sigma = vsi_msv(assemble_jacobian(case, sol.v, sol.theta))
    _say(
        f"converged in {sol.iterations} iterations, residual {sol.residual:.3e}, "
        f"sigma {sigma:.6f}"
    )
    out = Path(args.out)
    _write_csv(
        out / "pf_bus.csv",
        ["bus", "v", "theta_rad", "p_inj", "q_inj"],
        [
            [b.id, _fmt(sol.v[i]), _fmt(sol.theta[i]), _fmt(sol.p_inj[i]), _fmt(sol.q_inj[i])]
            for i, b in enumerate(case.buses)
        ],
    )
    _write_csv(
        out / "pf_gen.csv",
        ["gen", "bus", "p_gen", "q_gen"],
        [
            [k, g.bus, _fmt(sol.p_gen[k]), _fmt(sol.q_gen[k])]
            for k, g in enumerate(case.generators)
        ],
    )
    return EXIT_OK


def cmd_dataset(args):
    cfg = load_config(args.config, out_override=args.out)
    case = load_case(cfg.case_path)
    scen = _get_scenarios(cfg, case)
    ds = _build_dataset(cfg, case, scen)
    _save_dataset(cfg.dataset_path, ds, case.name)
    _say(
        f"dataset: {ds.accepted} accepted, {ds.rejected} rejected, "
        f"sigma in [{ds.sigma.min():.6f}, {ds.sigma.max():.6f}]"
    )
    _say(f"wrote {cfg.dataset_path}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, out_override=args.out)
    case = load_case(cfg.case_path)
    if cfg.dataset_path.is_file():
        ds, ds_case = _load_dataset(cfg.dataset_path)
        if ds_case != case.name:
            raise ConfigError(
                f"dataset at {cfg.dataset_path} was built for case '{ds_case}', "
                f"not '{case.name}'"
            )
        _say(f"reusing dataset {cfg.dataset_path} ({ds.n_samples} samples)")
    else:
        scen = _get_scenarios(cfg, case)
        ds = _build_dataset(cfg, case, scen)
        _save_dataset(cfg.dataset_path, ds, case.name)
        _say(f"wrote {cfg.dataset_path}")

    n_state = ds.z.shape[1]
    engage_pls = cfg.pls_enabled and n_state > cfg.pls_dim_threshold
    if engage_pls:
        model, stats = train_reduced(
            ds,
            cfg.mlp,
            variance_threshold=cfg.pls_variance_threshold,
            dim_threshold=cfg.pls_dim_threshold,
        )
        pls_doc = {
            "engaged": True,
            "components": model.pls.n_components,
            "explained": [float(e) for e in model.pls.explained],
        }
    else:
        model, stats = train_mlp(ds, cfg.mlp)
        pls_doc = {"engaged": False}

    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    save_surrogate(cfg.model_path, model)
    stats_doc = {
        "train_mae": stats.train_mae,
        "test_mae": stats.test_mae,
        "rho": stats.rho,
        "n_state": n_state,
        "dataset": {"accepted": ds.accepted, "rejected": ds.rejected},
        "pls": pls_doc,
        "seed": cfg.mlp.seed,
    }
    _stats_path(cfg.model_path).write_text(json.dumps(stats_doc, indent=2))
    pls_note = f"on, {pls_doc['components']} components" if engage_pls else "off"
    _say(f"trained on {ds.n_samples} samples (state dim {n_state}, pls {pls_note})")
    _say(f"train mae {stats.train_mae:.3e}, test mae {stats.test_mae:.3e}, rho {stats.rho:.3e}")
    _say(f"wrote {cfg.model_path}")
    return EXIT_OK


def _resolve_calibration(cfg):
    if not cfg.calib_enabled:
        return CalibrationParams()
    rho = cfg.calib_rho
    if rho is None:
        sp = _stats_path(cfg.model_path)
        if not sp.is_file():
            raise ConfigError(
                "calibration.enabled needs calibration.rho or the training "
                f"stats file {sp}"
            )
        rho = float(json.loads(sp.read_text())["rho"])
    return CalibrationParams(rho=rho, delta=cfg.calib_delta, enabled=True)


def cmd_solve(args):
    cfg = load_config(args.config, out_override=args.out)
    case = load_case(cfg.case_path)
    scen = _get_scenarios(cfg, case)
    skip = cfg.skip_stability or args.skip_stability
    if skip:
        surrogate, calib = None, CalibrationParams()
    else:
        if not cfg.model_path.is_file():
            raise ConfigError(
                f"model file not found: {cfg.model_path} (run `vscopf train` first)"
            )
        surrogate = load_surrogate(cfg.model_path)
        calib = _resolve_calibration(cfg)

    report = iterate(
        case,
        scen,
        cfg.chance,
        surrogate,
        apce_cfg=cfg.apce,
        calib=calib,
        k_max=cfg.k_max,
        include_stability=not skip,
        margin_tol=cfg.margin_tol,
        threads=args.threads,
    )

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    doc = json.loads(report_to_json(report))
    doc["case"] = case.name
    (out / "report.json").write_text(json.dumps(doc, indent=2))

    _write_csv(
        out / "responses.csv",
        ["scenario", "converged"] + list(report.labels),
        [
            [i, int(report.response_ok[i])] + [_fmt(v) for v in report.responses[i]]
            for i in range(report.n_scenarios)
        ],
    )
    _write_csv(
        out / "eps_table.csv",
        ["label", "class", "lo0", "hi0", "lo", "hi", "eps",
         "eps_lo", "eps_hi", "eps_j", "tightened"],
        _eps_rows(report, cfg.chance),
    )
    _write_csv(
        out / "history.csv",
        ["k", "cost", "max_margin"],
        [[h["k"], _fmt(h["cost"]), _fmt(h["max_margin"])] for h in report.history],
    )
    _say(
        f"converged after {report.iterations} tightening iterations, "
        f"cost {report.cost:.4f}"
    )
    _say(
        f"max empirical violation {report.max_eps_j:.4f} over "
        f"{report.n_scenarios} scenarios ({report.n_unconverged} unconverged)"
    )
    if skip:
        _say("stability constraint: skipped")
    _say(f"wrote {out / 'report.json'}")
    return EXIT_OK


def _eps_rows(report, chance):
    b = report.bounds
    rows = []
    for r, lab in enumerate(report.labels):
        cls = str(report.classes[r])
        tightened = (b.lo[r] > b.lo0[r] + 1e-15) or (b.hi[r] < b.hi0[r] - 1e-15)
        rows.append(
            [
                lab,
                cls,
                _fmt(b.lo0[r]),
                _fmt(b.hi0[r]),
                _fmt(b.lo[r]),
                _fmt(b.hi[r]),
                _fmt(chance.eps_for(cls)),
                _fmt(report.eps_lo[r]),
                _fmt(report.eps_hi[r]),
                _fmt(report.eps_j[r]),
                int(tightened),
            ]
        )
    return rows


def cmd_validate(args):
    cfg = load_config(args.config, out_override=args.out)
    case = load_case(cfg.case_path)
    rp = Path(args.report)
    if not rp.is_file():
        raise ConfigError(f"report file not found: {rp}")
    try:
        doc = json.loads(rp.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{rp}: invalid JSON: {exc}") from exc
    for key in ("operating_point", "labels", "stability_included"):
        if key not in doc:
            raise ConfigError(f"{rp}: not a solve report (missing '{key}')")
    if doc.get("case") is not None and doc["case"] != case.name:
        raise ConfigError(
            f"report was produced for case '{doc['case']}', config names '{case.name}'"
        )
    op = OperatingPoint(
        p_g=np.asarray(doc["operating_point"]["p_g"], float),
        v_g=np.asarray(doc["operating_point"]["v_g"], float),
    )
    if op.p_g.size != case.n_gen or op.v_g.size != case.vset_bus_index.size:
        raise ConfigError(
            f"report operating point has {op.p_g.size} machines / {op.v_g.size} "
            f"setpoints; case '{case.name}' needs {case.n_gen} / "
            f"{case.vset_bus_index.size}"
        )
    include_stability = bool(doc["stability_included"])
    expected = initial_bounds(case, cfg.chance, include_stability).labels
    if list(doc["labels"]) != expected:
        raise ConfigError("report constraint registry does not match the case")

    scen = load_scenarios(args.scenarios, case.base_mva)
    rep = empirical_violation(
        case, op, scen, cfg.chance, include_stability=include_stability,
        threads=args.threads,
    )
    out = cfg.out_dir
    rows = []
    for r, lab in enumerate(rep.labels):
        cls = str(rep.classes[r])
        eps = cfg.chance.eps_for(cls)
        slack = eps + 1.0 / rep.n_scenarios
        # budget applies per side; each side is its own chance constraint
        within = max(rep.eps_lo[r], rep.eps_hi[r]) <= slack
        rows.append(
            [lab, cls, _fmt(eps), _fmt(rep.eps_lo[r]), _fmt(rep.eps_hi[r]),
             _fmt(rep.eps_j[r]), int(within)]
        )
    _write_csv(
        out / "validation.csv",
        ["label", "class", "eps", "eps_lo", "eps_hi", "eps_j", "within_budget"],
        rows,
    )
    _say(
        f"max empirical violation {rep.max_eps_j:.4f} over {rep.n_scenarios} "
        f"scenarios ({rep.n_unconverged} unconverged)"
    )
    _say(f"wrote {out / 'validation.csv'}")
    return EXIT_OK


def cmd_uq(args):
    xi, names, Y = _read_uq_csv(args.data, args.inputs)
    s = args.max_interaction if args.max_interaction else xi.shape[1]
    idx = reduced_indices(xi.shape[1], min(s, xi.shape[1]), args.max_degree)
    basis = build_basis(idx, xi)
    model = fit_coefficients(basis, xi, Y)
    alphas = _parse_alphas(args.alpha)

    pred = evaluate(model, xi)
    header = ["response", "mean", "std"]
    for a in alphas:
        header += [f"q{a:g}", f"q{1.0 - a:g}"]
    cols = [pred.mean(axis=0), pred.std(axis=0)]
    for a in alphas:
        cols += [quantile(model, xi, a), quantile(model, xi, 1.0 - a)]
    rows = [
        [names[j]] + [_fmt(c[j]) for c in cols]
        for j in range(len(names))
    ]
    out = Path(args.out)
    _write_csv(out / "uq_quantiles.csv", header, rows)
    (out / "uq_model.json").write_text(model_to_json(model))
    _say(
        f"fit {len(idx)} basis functions to {xi.shape[0]} samples, "
        f"{len(names)} responses"
    )
    _say(f"wrote {out / 'uq_quantiles.csv'}")
    return EXIT_OK


def _parse_alphas(raw):
    try:
        alphas = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--alpha: expected comma-separated floats, got {raw!r}") from None
    if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
        raise ConfigError("--alpha: levels must lie strictly inside (0, 1)")
    return alphas


def _read_uq_csv(path, n_inputs):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"data file not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and not row[0].lstrip().startswith("#")]
    if len(rows) < 2:
        raise ConfigError(f"{p}: need a header row and at least one data row")
    header = [c.strip() for c in rows[0]]
    try:
        data = np.array([[float(c) for c in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{p}: non-numeric data row: {exc}") from exc
    if data.shape[1] != len(header):
        raise ConfigError(f"{p}: ragged rows")
    if not 1 <= n_inputs < len(header):
        raise ConfigError(
            f"--inputs must leave at least one response column "
            f"(got {n_inputs} of {len(header)} columns)"
        )
    return data[:, :n_inputs], header[n_inputs:], data[:, n_inputs:]


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, but 2 means numerical failure in
    # this tool's contract; malformed invocations are input errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _build_parser():
    ap = _Parser(
        prog="vscopf",
        description="Stability-constrained stochastic dispatch pipeline.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="normalize a case file and report diagnostics")
    p.add_argument("case", help="MATPOWER .m or native .json case file")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("pf", help="solve the base-case power flow")
    p.add_argument("case")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=30)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("dataset", help="scenarios plus the stability training table")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="override paths.out from the config")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="fit the stability surrogate")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="run the chance-constraint tightening loop")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--skip-stability", action="store_true",
                   help="drop the stability floor (baseline mode)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for scenario power flows")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="empirical violation check of a solve report")
    p.add_argument("report", help="report.json from a solve run")
    p.add_argument("scenarios", help="scenario CSV (fitting or held-out)")
    p.add_argument("--config", required=True, dest="config")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("uq", help="standalone chaos-expansion fit on a CSV table")
    p.add_argument("data", help="CSV: input columns first, then response columns")
    p.add_argument("--inputs", type=int, required=True,
                   help="number of leading input columns")
    p.add_argument("--max-degree", type=int, default=2)
    p.add_argument("--max-interaction", type=int, default=0,
                   help="0 means no interaction limit")
    p.add_argument("--alpha", default="0.001,0.01,0.03",
                   help="comma-separated lower tail levels")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.set_defaults(func=cmd_uq)

    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CaseError, ScenarioError, ApceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (PowerFlowError, IpmError, SurrogateError, CcopfError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
