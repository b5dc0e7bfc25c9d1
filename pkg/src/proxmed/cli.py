"""Command-line entry point: estimate, diagnose, select-proxies, simulate,
bootstrap and influence."""
import argparse
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .dataset import RoleConfig, design_roles, encode, load_csv, split_indices
from .dataset import write_csv as write_design_csv
from .diagnostics import DiagnosticsConfig, run_all
from .estimator import EstimatorConfig, PipelineError, estimate_pipeline, fit_pipeline
from .proxy_select import SelectionConfig, choose_candidate, select_proxies
from .regress import residualize
from .report import write_csv, write_json
from .robust import (bootstrap, compare_influence_features, influence_scores,
                     minimal_influence_set, stratified_estimate, weak_ci)
from .semisynth import SynthParams, baseline_ols, evaluate, fit_generator, make_reference_table
from .semisynth import sample as synth_sample

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2


def _estimator_config(cfg):
    e = cfg["estimator"]
    return EstimatorConfig(alpha=e["alpha"], lasso_grid=e["lasso_grid"], n_splits=e["n_splits"],
                           alpha_level=e["alpha_level"], crossfit_folds=e["crossfit_folds"],
                           seed=cfg["seed"])


def _diagnostics_config(cfg):
    d = cfg["diagnostics"]
    return DiagnosticsConfig(alpha=cfg["estimator"]["alpha"], alpha_sig=d["alpha_sig"],
                             seed=cfg["seed"], tau_star=d["tau_star"], z_epsilon=d["z_epsilon"],
                             weak_variant=d["weak_variant"], n_mc=d["n_mc"])


def _selection_config(cfg):
    s = cfg["selection"]
    return SelectionConfig(K=s["K"], delta=s["delta"], iterations=s["iterations"],
                           c_sparse=s["c_sparse"], alpha_sig=cfg["diagnostics"]["alpha_sig"],
                           alpha=cfg["estimator"]["alpha"], n_mc=cfg["diagnostics"]["n_mc"],
                           noise_floor=s["noise_floor"], standardize=s["standardize"],
                           require_overidentification=s["require_overidentification"],
                           seed=cfg["seed"])


def _load_data(cfg):
    cfgmod.require(cfg, "data", "roles")
    raw = load_csv(cfg["data"]["path"], cfg["data"]["kinds"])
    return raw, encode(raw, RoleConfig.from_dict(cfg["roles"]))


def _out_dir(cfg, override):
    out = Path(override or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg, command):
    return {"tool": "proxmed", "version": __version__, "command": command, "config": cfg}


def _estimate_dict(est):
    return {"theta": est.theta, "se": est.se, "ci_low": est.ci_low, "ci_high": est.ci_high,
            "alpha_level": est.alpha_level}


def _selection(cfg, data, notes):
    """Run proxy selection; returns (selection record, data restricted to the chosen subsets)."""
    s = cfg["selection"]
    rows_sel = rows_est = np.arange(data.n)
    if s["holdout_fraction"]:
        rows_sel, rows_est = split_indices(data.n, s["holdout_fraction"], cfg["seed"])
    else:
        notes.append("proxy selection and estimation share the same rows")
    e = _estimator_config(cfg)
    res_sel = residualize(data.take(rows_sel), e.lasso_grid, e.n_splits, e.seed)
    candidates = select_proxies(res_sel, config=_selection_config(cfg))
    record = {"candidates": [c.to_dict() for c in candidates], "chosen": None,
              "chosen_estimate": None, "selection_rows": int(rows_sel.size),
              "estimation_rows": int(rows_est.size)}
    if not candidates:
        return record, None
    chosen, est = choose_candidate(candidates, res_sel, e.alpha, e.alpha_level)
    record["chosen"] = chosen.to_dict()
    record["chosen_estimate"] = _estimate_dict(est)
    sub = data.take(rows_est)
    xi, zi = list(chosen.x_indices), list(chosen.z_indices)
    sub.X, sub.x_labels = sub.X[:, xi], [sub.x_labels[i] for i in xi]
    sub.Z, sub.z_labels = sub.Z[:, zi], [sub.z_labels[i] for i in zi]
    return record, sub


def _report(cfg, command, fit, notes, selection=None, timing=None):
    w = cfg["weak_ci"]
    wci = weak_ci(fit.res, fit.nuisances.h, fit.nuisances.gamma, fit.config.alpha_level,
                  w["low"], w["high"], w["step"])
    nu = fit.nuisances
    out = _header(cfg, command)
    out.update({
        "n": int(fit.res.n),
        "x_proxies": list(fit.res.x_labels), "z_proxies": list(fit.res.z_labels),
        "estimate": _estimate_dict(fit.estimate),
        "weak_ci": wci.to_dict(),
        "nuisances": {"h": nu.h, "theta_pre": nu.theta_pre, "gamma": nu.gamma,
                      "alpha_primal": nu.alpha_primal, "alpha_dual": nu.alpha_dual},
        "diagnostics": fit.diagnostics.to_dict(),
        "valid": fit.diagnostics.valid,
        "selected_proxies": selection,
        "notes": notes,
        "timing": timing,
    })
    return out


def _run_estimate(cfg, command):
    notes = []
    t0 = time.perf_counter()
    _, data = _load_data(cfg)
    selection = None
    if cfg["selection"]["apply"]:
        selection, sub = _selection(cfg, data, notes)
        if sub is None:
            raise PipelineError("selection", ValueError("no admissible proxy sets found"))
        data = sub
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = estimate_pipeline(data, _estimator_config(cfg), _diagnostics_config(cfg))
    notes.extend(sorted({str(w.message) for w in caught}))
    timing = {"seconds": time.perf_counter() - t0} if cfg["record_timing"] else None
    return fit, _report(cfg, command, fit, notes, selection, timing)


def cmd_estimate(cfg, out):
    fit, rep = _run_estimate(cfg, "estimate")
    write_json(rep, out / "report.json")
    return EXIT_OK if rep["valid"] else EXIT_INVALID


def cmd_diagnose(cfg, out):
    _, data = _load_data(cfg)
    fit = fit_pipeline(data, _estimator_config(cfg))
    diag = run_all(fit.res, fit.nuisances, _diagnostics_config(cfg))
    rep = _header(cfg, "diagnose")
    rep.update({"n": int(fit.res.n), "diagnostics": diag.to_dict(), "valid": diag.valid})
    write_json(rep, out / "report.json")
    return EXIT_OK if diag.valid else EXIT_INVALID


def cmd_select_proxies(cfg, out):
    notes = []
    _, data = _load_data(cfg)
    record, _ = _selection(cfg, data, notes)
    rep = _header(cfg, "select-proxies")
    rep.update(record)
    rep["notes"] = notes
    write_json(rep, out / "candidates.json")
    return EXIT_OK


def cmd_bootstrap(cfg, out):
    _, data = _load_data(cfg)
    fit = fit_pipeline(data, _estimator_config(cfg))
    b = cfg["bootstrap"]
    thetas = bootstrap(fit, b["stage"], b["K"], b["fraction"], cfg["seed"])
    write_csv({"replicate": np.arange(thetas.size), "theta": thetas}, out / "replicates.csv")
    rep = _header(cfg, "bootstrap")
    rep.update({"estimate": _estimate_dict(fit.estimate), "replicates": int(thetas.size),
                "mean": float(np.mean(thetas)),
                "sd": float(np.std(thetas, ddof=1)) if thetas.size > 1 else 0.0,
                "quantiles": {"0.025": float(np.quantile(thetas, 0.025)),
                              "0.5": float(np.quantile(thetas, 0.5)),
                              "0.975": float(np.quantile(thetas, 0.975))}})
    if "strata" in cfg:
        raw, _ = _load_data(cfg)
        col = raw.columns[cfg["strata"]["column"]]
        labels = np.array(["" if v is None or (isinstance(v, float) and np.isnan(v)) else str(v)
                           for v in col], dtype=object)
        rows = stratified_estimate(fit, labels, cfg["strata"].get("min_size", 500))
        rep["strata"] = [{"label": r.label, "size": r.size, "note": r.note,
                          "estimate": _estimate_dict(r.estimate) if r.estimate else None}
                         for r in rows]
    write_json(rep, out / "bootstrap.json")
    return EXIT_OK


def cmd_influence(cfg, out):
    _, data = _load_data(cfg)
    fit = fit_pipeline(data, _estimator_config(cfg))
    nu = fit.nuisances
    table = influence_scores(fit.res, nu.h, nu.gamma, fit.estimate)
    write_csv(table.columns(), out / "influence.csv")
    mis = minimal_influence_set(fit.res, nu.h, nu.gamma, table, fit.estimate)
    rep = _header(cfg, "influence")
    top = cfg["influence"]["top"]
    rep.update({"estimate": _estimate_dict(fit.estimate),
                "top_rows": table.row[:top], "top_scores": table.score[:top],
                "minimal_set": {"size": int(mis.rows.size), "rows": mis.rows,
                                "initial_size": mis.initial_size, "confirmed": mis.confirmed,
                                "note": mis.note, "estimate": _estimate_dict(mis.estimate)}})
    if cfg["influence"]["compare_features"] and 0 < mis.rows.size < data.n:
        feats, labels = data.features()
        cmp = compare_influence_features(feats, labels, mis.rows, data.column_kinds)
        rep["feature_comparison"] = [{"feature": c.feature, "test": c.test,
                                      "statistic": c.statistic, "p_value": c.p_value,
                                      "direction": c.direction, "note": c.note} for c in cmp]
    write_json(rep, out / "influence_set.json")
    return EXIT_OK


def _replicate(args):
    model, params, est_cfg, diag_cfg = args
    data, M = synth_sample(model, params)
    fit = estimate_pipeline(data, est_cfg, diag_cfg)
    return (fit.estimate, fit.diagnostics, baseline_ols(data, M, "with_M"),
            baseline_ols(data, None, "with_Z"))


def cmd_simulate(cfg, out, threads=1):
    s = cfg["simulate"]
    seed = cfg["seed"]
    if s["source"] == "data":
        _, base = _load_data(cfg)
    else:
        raw, roles = make_reference_table(s["reference_n"], seed)
        base = encode(raw, roles)
    model = fit_generator(base, cfg["diagnostics"]["alpha_sig"], seed, cfg["diagnostics"]["n_mc"])
    params = SynthParams(theta=s["theta"], a=s["a"], b=s["b"], g=s["g"], sigma_y=s["sigma_y"],
                         binarize=s["binarize"], n=s["n"], seed=seed)
    data, _ = synth_sample(model, params)
    kinds = write_design_csv(data, out / "dataset.csv")
    est_cfg = {"data": {"path": str((out / "dataset.csv").resolve()), "kinds": kinds},
               "roles": design_roles(data).to_dict(), "seed": seed,
               "output_dir": str(out.resolve())}
    write_json(est_cfg, out / "estimate_config.json")
    rep = _header(cfg, "simulate")
    rep.update({"generator": {"K": model.K, "singular_values": model.singular_values,
                              "threshold": model.threshold, "sigma": model.sigma}})
    if s["replicates"]:
        seeds = [int(x.generate_state(1)[0])
                 for x in np.random.SeedSequence(seed).spawn(s["replicates"])]
        jobs = [(model, SynthParams(**{**params.__dict__, "seed": r}), _estimator_config(cfg),
                 _diagnostics_config(cfg)) for r in seeds]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(_replicate, jobs))
        else:
            results = [_replicate(j) for j in jobs]
        m = evaluate([r[0] for r in results], s["theta"], [r[1] for r in results])
        rep["metrics"] = dict(m.__dict__)
        rep["baselines"] = {"ols_with_M": float(np.mean([r[2] for r in results])),
                            "ols_with_Z": float(np.mean([r[3] for r in results]))}
        write_csv({"replicate": np.arange(len(results)),
                   "theta": [r[0].theta for r in results], "se": [r[0].se for r in results],
                   "valid": [int(r[1].valid) for r in results],
                   "ols_with_M": [r[2] for r in results], "ols_with_Z": [r[3] for r in results]},
                  out / "replicates.csv")
    write_json(rep, out / "metrics.json")
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "select-proxies": cmd_select_proxies,
    "simulate": cmd_simulate,
    "bootstrap": cmd_bootstrap,
    "influence": cmd_influence,
}


def build_parser():
    p = argparse.ArgumentParser(prog="proxmed", description=__doc__)
    p.add_argument("--version", action="version", version=f"proxmed {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=(name != "simulate"),
                       help="TOML or JSON analysis configuration")
        c.add_argument("--out", help="output directory (overrides output_dir)")
        c.add_argument("--threads", type=int, default=1, help="maximum worker processes")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.materialize({})
        out = _out_dir(cfg, args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if args.command == "simulate":
                return cmd_simulate(cfg, out, max(1, args.threads))
            return COMMANDS[args.command](cfg, out)
    except (cfgmod.ConfigError, PipelineError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"proxmed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
