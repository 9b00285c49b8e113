"""Command-line front end: orchestration and deterministic CSV emission.

Subcommands mirror the study's figure-shaped datasets:

* ``bayes-narrowing``  phase-distribution narrowing vs spectator count
* ``analytic-sweep``   closed-form fidelity and improvement-term tables
* ``simulate``         ensemble sweeps over attempts, spectator count,
                       protocol kind and memory initial state, plus
                       gate/measurement BVL ratio tables
* ``gate-sweep``       BVL vs rephasing wait, extracted optima, model fit
* ``strategy``         expected fidelity vs success probability
* ``fit``              least-squares fits of fidelity curves from CSV

Every output records tool version, seed, config hash and command line in
its header; reruns with identical inputs are byte-identical.  Exit codes:
0 success, 2 config error, 3 numeric failure, 4 resource limit.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys

import numpy as np

from . import __version__, analytic, dm_sim, phase_dist, strategy
from .config import (ConfigError, ExperimentManifest, build_readout,
                     build_register, build_sequence, config_sha256, get_bool,
                     get_float, get_grid, get_int, get_str, get_str_list,
                     load_config)
from .output import read_csv, write_csv, write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_RESOURCE = 4

_INIT_TAGS = {"+x": "x", "-x": "mx", "+y": "y", "-y": "my",
              "0": "z0", "+z": "z0", "1": "z1", "-z": "z1"}


def _init_tag(name: str) -> str:
    try:
        return _INIT_TAGS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown memory initial state {name!r}") from None


def _cell_seed(master: int, *parts) -> int:
    digest = hashlib.sha256(repr((master,) + parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def _meta(manifest: ExperimentManifest, parser, seed: int) -> dict[str, str]:
    return {
        "tool": f"spectatorsim {__version__}",
        "command": " ".join([manifest.command] + list(manifest.overrides)),
        "config": os.path.basename(manifest.config_path),
        "config-sha256": config_sha256(parser),
        "seed": str(seed),
    }


def _out(manifest: ExperimentManifest, name: str) -> str:
    return os.path.join(manifest.output_dir, name)


# ---------------------------------------------------------------------------
# bayes-narrowing


def run_bayes_narrowing(manifest: ExperimentManifest, parser) -> None:
    sigma0 = get_float(parser, "bayes", "sigma0", required=True)
    g_list = get_grid(parser, "bayes", "g_list", required=True)
    m_max = get_int(parser, "bayes", "m_max", len(g_list))
    policy = get_str(parser, "bayes", "policy", "perpendicular")
    n_points = get_int(parser, "bayes", "n_points", phase_dist.DEFAULT_N_POINTS)
    if m_max > len(g_list):
        raise ConfigError(f"m_max = {m_max} exceeds the {len(g_list)} g values")
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    meta = _meta(manifest, parser, seed)

    prior = phase_dist.gaussian_prior(sigma0, n_points=n_points)
    rows = []
    for m in range(m_max + 1):
        mean_sigma, f_avg = phase_dist.syndrome_average(prior, g_list[:m], policy)
        rows.append((m, mean_sigma, f_avg))
    write_csv(_out(manifest, "narrowing.csv"), meta,
              ["m", "mean_sigma", "f_avg"], rows)

    # Fixed-syndrome distribution dumps: outcome 1 on even-numbered
    # spectators, 0 on odd-numbered ones.
    syndrome = [(i + 1) % 2 for i in range(m_max)]
    grids = phase_dist.syndrome_posteriors(prior, g_list[:m_max], syndrome, policy)
    for m, grid in enumerate(grids):
        write_csv(_out(manifest, f"narrowing_pdf_M{m}.csv"), meta,
                  ["phi", "density"],
                  list(zip(grid.phis.tolist(), grid.density.tolist())))


# ---------------------------------------------------------------------------
# analytic-sweep


def run_analytic_sweep(manifest: ExperimentManifest, parser) -> None:
    a_par_te = get_float(parser, "analytic", "a_par_te", 0.0271)
    g_list = get_grid(parser, "analytic", "g_list", [0.0, 0.5, 0.84, 1.0, 1.49])
    n_grid = get_grid(parser, "analytic", "n_rea", None, integer=True, required=True)
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    meta = _meta(manifest, parser, seed)
    rows = []
    for g in g_list:
        model = analytic.DephasingModel(a_par_te=a_par_te, g=g)
        for n in n_grid:
            sigma = analytic.sigma_of_n(model, n)
            rows.append((g, n, sigma,
                         analytic.fidelity_one_spectator(model, sigma),
                         analytic.improvement_term(model, sigma)))
    write_csv(_out(manifest, "analytic_sweep.csv"), meta,
              ["g", "n_rea", "sigma", "fidelity", "improvement"], rows)


# ---------------------------------------------------------------------------
# simulate


def _protocol_for(kind: str, k: int, readout, feedforward: bool, policy: str):
    if kind == "none" or k == 0:
        return dm_sim.Protocol.none()
    if kind == "measurement":
        return dm_sim.Protocol.measurement(k, readout=readout,
                                           feedforward=feedforward, policy=policy)
    if kind == "gate":
        return dm_sim.Protocol.gate(k)
    raise ConfigError(f"unknown protocol kind {kind!r}")


def _role_permutations(register: dm_sim.Register, enabled: bool):
    if not enabled:
        return [(register.memory.label, register)]
    perms = []
    labels = [s.label for s in register.spins]
    for mem_label in labels:
        spins = tuple(
            dm_sim.NuclearSpinSpec(s.label, s.a_par_khz, s.a_perp_khz,
                                   "memory" if s.label == mem_label else "spectator")
            for s in register.spins)
        perms.append((mem_label, dm_sim.Register(spins=spins,
                                                 max_nuclei=register.max_nuclei)))
    return perms


def run_simulate(manifest: ExperimentManifest, parser) -> None:
    base_register = build_register(parser)
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    readout = build_readout(parser)
    kinds = get_str_list(parser, "protocol", "kinds", ["measurement"])
    k_values = get_grid(parser, "protocol", "k_values", [0, 1, 2], integer=True)
    inits = get_str_list(parser, "protocol", "memory_init", ["+x", "+y", "0"])
    feedforward = get_bool(parser, "protocol", "feedforward", True)
    policy = get_str(parser, "protocol", "policy", "perpendicular")
    n_grid = get_grid(parser, "sweep", "n_rea", None, integer=True, required=True)
    n_traj = get_int(parser, "sweep", "n_traj", 400)
    permutations = get_bool(parser, "sweep", "permutations", False)
    meta = _meta(manifest, parser, seed)

    columns = ["n_rea", "protocol", "k", "x", "y", "z", "bvl", "fidelity",
               "stderr_x", "stderr_y", "stderr_z", "n_traj", "seed", "analytic_f"]
    for mem_label, register in _role_permutations(base_register, permutations):
        cfg_perm = build_sequence(parser, register, seed)
        step = dm_sim.effective_a_par_te(register.memory.a_par_khz, cfg_perm)
        bvl_table = {}
        for init in inits:
            tag = _init_tag(init)
            rows = []
            for kind in kinds:
                for k in k_values:
                    if kind == "none" and k > 0:
                        continue
                    protocol = _protocol_for(kind, k, readout, feedforward, policy)
                    cell = _cell_seed(seed, mem_label, tag, kind, k)
                    for n in n_grid:
                        out = dm_sim.ensemble_run(
                            register, cfg_perm, n, protocol, n_traj,
                            seed=_cell_seed(cell, n),
                            initial_states={register.memory.label: init})
                        overlay = ""
                        if k == 0 and tag in ("x", "y"):
                            sigma = math.sqrt(n) * step
                            overlay = 0.5 + 0.5 * math.exp(-0.5 * sigma * sigma)
                        rows.append((n, kind, k, *out.bloch, out.bvl, out.fidelity,
                                     *out.stderr, out.n_traj, out.seed, overlay))
                        bvl_table[(tag, kind, k, n)] = out.bvl
            name = (f"simulate_mem_{mem_label}_init_{tag}.csv" if permutations
                    else f"simulate_init_{tag}.csv")
            write_csv(_out(manifest, name), meta, columns, rows)

        if "measurement" in kinds and "gate" in kinds:
            ratio_rows = []
            for k in k_values:
                for n in n_grid:
                    r_z = ""
                    if ("z0", "measurement", k, n) in bvl_table:
                        denom = bvl_table[("z0", "measurement", k, n)]
                        r_z = bvl_table[("z0", "gate", k, n)] / denom if denom > 1e-12 else ""
                    xy_meas = [bvl_table[(t, "measurement", k, n)]
                               for t in ("x", "y") if (t, "measurement", k, n) in bvl_table]
                    xy_gate = [bvl_table[(t, "gate", k, n)]
                               for t in ("x", "y") if (t, "gate", k, n) in bvl_table]
                    r_xy = ""
                    if xy_meas and np.mean(xy_meas) > 1e-12:
                        r_xy = float(np.mean(xy_gate) / np.mean(xy_meas))
                    ratio_rows.append((n, k, r_z, r_xy))
            name = (f"ratios_mem_{mem_label}.csv" if permutations else "ratios.csv")
            write_csv(_out(manifest, name), meta, ["n_rea", "k", "r_z", "r_xy"],
                      ratio_rows)


# ---------------------------------------------------------------------------
# gate-sweep


def first_maximum(xs, ys) -> float:
    """Location of the first local maximum, parabola-refined; argmax fallback."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    idx = None
    for i in range(1, len(ys) - 1):
        if ys[i] >= ys[i - 1] and ys[i] >= ys[i + 1]:
            idx = i
            break
    if idx is None:
        idx = int(np.argmax(ys))
    if 0 < idx < len(ys) - 1:
        x0, x1, x2 = xs[idx - 1:idx + 2]
        y0, y1, y2 = ys[idx - 1:idx + 2]
        num = (x1 - x0) ** 2 * (y1 - y2) - (x1 - x2) ** 2 * (y1 - y0)
        den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0)
        if den != 0.0:
            return float(x1 - 0.5 * num / den)
    return float(xs[idx])


def run_gate_sweep(manifest: ExperimentManifest, parser) -> None:
    register = build_register(parser)
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    cfg = build_sequence(parser, register, seed)
    n_list = get_grid(parser, "sweep", "gate_n_rea", None, integer=True, required=True)
    dt_grid_us = get_grid(parser, "sweep", "delta_t_us", None, required=True)
    n_traj = get_int(parser, "sweep", "n_traj", 400)
    init = get_str(parser, "protocol", "memory_init", "+x").split(",")[0].strip()
    meta = _meta(manifest, parser, seed)

    spect = register.spectator_indices[0]
    g_abs = abs(register.g_of(spect))
    step = dm_sim.effective_a_par_te(register.memory.a_par_khz, cfg)
    model = analytic.DephasingModel(a_par_te=step, g=g_abs)

    sweep_rows, opt_rows = [], []
    for n in n_list:
        bvls = []
        for dt_us in dt_grid_us:
            protocol = dm_sim.Protocol.gate(1, delta_ts_s=(dt_us * 1e-6,))
            out = dm_sim.ensemble_run(register, cfg, n, protocol, n_traj,
                                      seed=_cell_seed(seed, "gate", n, dt_us),
                                      initial_states={register.memory.label: init})
            err = math.sqrt(sum(se * se for se in out.stderr))
            sweep_rows.append((n, dt_us, out.bvl, err))
            bvls.append(out.bvl)
        dt_opt_us = first_maximum(dt_grid_us, bvls)
        dt_model_us = analytic.optimal_rephasing_time(
            model, n, abs(register.memory.a_par_khz)) * 1e6
        opt_rows.append((n, dt_opt_us, dt_model_us))
    write_csv(_out(manifest, "gate_sweep.csv"), meta,
              ["n_rea", "delta_t_us", "bvl", "stderr"], sweep_rows)
    write_csv(_out(manifest, "gate_opt.csv"), meta,
              ["n_rea", "delta_t_opt_us", "delta_t_model_us"], opt_rows)

    # Fit the extracted optima with the rephasing-time model, a_par_te free.
    a_mem = abs(register.memory.a_par_khz)

    def dt_model(nn, params):
        mdl = analytic.DephasingModel(a_par_te=params[0], g=g_abs)
        return np.array([analytic.optimal_rephasing_time(mdl, int(v), a_mem) * 1e6
                         for v in nn])

    try:
        fit = analytic.fit_custom(dt_model, ["a_par_te"], [step], ([1e-6], [1.0]),
                                  [(n, r[1]) for n, r in zip(n_list, opt_rows)])
        write_csv(_out(manifest, "gate_fit.csv"), meta,
                  ["parameter", "value", "uncertainty"],
                  [(n, v, u) for n, v, u in zip(fit.names, fit.values, fit.uncertainties)]
                  + [("chi_squared", fit.chi_squared, "")])
        write_text(_out(manifest, "gate_fit.txt"), meta,
                   analytic.fit_report(fit, "delta_t_opt(n_rea)"))
    except Exception as exc:  # fit failure must not lose the raw data
        write_text(_out(manifest, "gate_fit.txt"), meta, f"fit failed: {exc}")


# ---------------------------------------------------------------------------
# strategy


def run_strategy(manifest: ExperimentManifest, parser) -> None:
    k_values = get_grid(parser, "strategy", "k_values", [0, 1, 2], integer=True)
    p_grid = get_grid(parser, "strategy", "p_grid", None, required=True)
    tail_eps = get_float(parser, "strategy", "tail_eps", 1e-9)
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    meta = _meta(manifest, parser, seed)

    curves = {}
    for k in k_values:
        raw = get_str(parser, "strategy", f"curve_{k}", required=True)
        parts = [float(tok) for tok in raw.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"[strategy] curve_{k} must be 'a_par_te, a_spam, g'")
        curves[k] = strategy.curve_from_fit(parts[0], parts[1], parts[2])

    report = strategy.strategy_sweep(curves, p_grid, tail_eps)
    fbar_rows = [(p, k, report.fbar_by_k[k][i])
                 for i, p in enumerate(report.p_grid) for k in sorted(curves)]
    write_csv(_out(manifest, "strategy_fbar.csv"), meta, ["p", "k", "fbar"], fbar_rows)

    envelope = strategy.envelope_model(curves)
    best_rows = [(p, report.best_k[i],
                  report.fbar_by_k[report.best_k[i]][i],
                  strategy.expected_fidelity(envelope, p, tail_eps))
                 for i, p in enumerate(report.p_grid)]
    write_csv(_out(manifest, "strategy_best.csv"), meta,
              ["p", "best_k", "fbar_best", "fbar_envelope"], best_rows)
    write_csv(_out(manifest, "strategy_crossovers.csv"), meta,
              ["p", "k_low", "k_high"], list(report.crossovers))


# ---------------------------------------------------------------------------
# fit


def run_fit(manifest: ExperimentManifest, parser) -> None:
    path = get_str(parser, "fit", "input", required=True)
    if not os.path.isabs(path):
        path = os.path.join(os.path.dirname(os.path.abspath(manifest.config_path)), path)
    mode = get_str(parser, "fit", "mode", "xy")
    seed = manifest.seed if manifest.seed is not None else get_int(parser, "sequence", "seed", 0)
    meta = _meta(manifest, parser, seed)
    try:
        _, columns, raw_rows = read_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read fit input {path!r}: {exc}") from exc
    for required in ("n_rea", "fidelity"):
        if required not in columns:
            raise ConfigError(f"fit input needs a {required!r} column")
    n_i = columns.index("n_rea")
    f_i = columns.index("fidelity")
    e_i = columns.index("stderr") if "stderr" in columns else None
    data = []
    for row in raw_rows:
        err = float(row[e_i]) if e_i is not None and row[e_i] else None
        data.append((float(row[n_i]), float(row[f_i]), err))

    if mode == "xy":
        a_spam_raw = get_str(parser, "fit", "a_spam", "free")
        a_spam = None if a_spam_raw == "free" else float(a_spam_raw)
        result = analytic.fit_fidelity_xy(
            data, g=get_float(parser, "fit", "g", 0.0),
            vary_g=get_bool(parser, "fit", "vary_g", False), a_spam=a_spam)
    elif mode == "z":
        result = analytic.fit_fidelity_z(data)
    else:
        raise ConfigError(f"[fit] mode must be xy or z, got {mode!r}")

    write_csv(_out(manifest, "fit_result.csv"), meta,
              ["parameter", "value", "uncertainty"],
              [(n, v, u) for n, v, u in zip(result.names, result.values,
                                            result.uncertainties)]
              + [("chi_squared", result.chi_squared, ""),
                 ("reduced_chi_squared", result.reduced_chi_squared, "")])
    write_text(_out(manifest, "fit_report.txt"), meta,
               analytic.fit_report(result, f"{mode} fit of {os.path.basename(path)}"))


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "bayes-narrowing": run_bayes_narrowing,
    "analytic-sweep": run_analytic_sweep,
    "simulate": run_simulate,
    "gate-sweep": run_gate_sweep,
    "strategy": run_strategy,
    "fit": run_fit,
}


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectatorsim",
                                 description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--output-dir",
                       default=os.environ.get("SPECTATORSIM_OUTDIR", "out"),
                       help="output directory (env SPECTATORSIM_OUTDIR)")
        p.add_argument("--seed", type=int, default=None,
                       help="override [sequence] seed")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config key")
    return ap


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    manifest = ExperimentManifest(command=args.command, config_path=args.config,
                                  output_dir=args.output_dir, seed=args.seed,
                                  overrides=tuple(args.overrides))
    try:
        parser = load_config(manifest.config_path, manifest.overrides)
        os.makedirs(manifest.output_dir, exist_ok=True)
        _COMMANDS[manifest.command](manifest, parser)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except phase_dist.ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (ArithmeticError, np.linalg.LinAlgError,
            dm_sim.CorruptedStateError, phase_dist.ImpossibleOutcomeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
