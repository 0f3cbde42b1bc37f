"""Command-line entry point: ``ghzsource <command> [--config] [--seed] [--out] [--input]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Errors are also reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .compensation import optimize_compensation
from .polarization import DensityMatrix, fidelity, ghz_state
from .source import (
    ANCHORS,
    CoincidenceModel,
    calibrate_source,
    corrected_records,
    fidelity_rate_sweep,
    fuse_pairs,
    sweep_to_csv,
)
from .spectral import (
    FWHM_PER_SIGMA,
    HomFitError,
    apply_filter,
    build_jsa,
    fit_hom,
    hom_curve,
    hom_visibility,
    marginal_fwhm_nm,
    schmidt_purity,
)
from .tomography import (
    MonteCarloError,
    ReconstructionResult,
    dump_records,
    estimate,
    load_records,
    monte_carlo_errors,
)

log = logging.getLogger("ghzsource")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class InputError(ValueError):
    pass


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _efficiency_mode(cfg: dict, src):
    mode = cfg["tomography"]["efficiencies"]
    return {"calibrate": "calibrate", "known": src.port_efficiencies(), "none": None}[mode]


def _read_input(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read input {path}: {exc.strerror}") from None


# ---------------------------------------------------------------- commands


def cmd_tomography(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    src = cfgmod.source_config(cfg)
    tcfg = cfg["tomography"]
    if input_path is not None:
        try:
            records = load_records(_read_input(input_path))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"malformed counts file: {exc}") from None
        if not records:
            raise InputError("counts file holds no records")
    else:
        model = CoincidenceModel(src)
        if tcfg["rate_hz"] is not None:
            p = model.p_for_rate(tcfg["rate_hz"])
            p_top, p_bottom = p, p
        else:
            p_top, p_bottom = src.p_top, src.p_bottom
        acq = tcfg["acquisition_s"]
        if tcfg["mean_counts_per_setting"] is not None:
            rate = model.fourfold_rate(p_top, p_bottom)
            if rate <= 0:
                raise InputError("fourfold rate is zero; cannot reach the requested counts")
            acq = tcfg["mean_counts_per_setting"] / rate
        records = model.records(acq, p_top, p_bottom, seed=cfgmod.derive_seed(seed, "tomography/counts"))
        _write(out, "counts.jsonl", dump_records(records))

    n = records[0].setting.n_qubits
    target = ghz_state(n, src.delta if n == 4 else 0.0)
    eff = _efficiency_mode(cfg, src) if n == 4 else ("calibrate" if tcfg["efficiencies"] == "calibrate" else None)
    angle_sigma = np.radians(tcfg["angle_sigma_deg"])
    rho, h, eff_used = estimate(records, eff)
    _, err, failures = monte_carlo_errors(
        records, tcfg["mc_samples"], angle_sigma, cfgmod.derive_seed(seed, "tomography/mc"), target, eff,
        workers=tcfg["workers"],
    )
    result = ReconstructionResult(
        rho=rho,
        fidelity_to_ghz=fidelity(rho, target),
        fidelity_err=err,
        mc_samples=tcfg["mc_samples"],
        mc_failures=failures,
        efficiencies=None if eff_used is None else np.asarray(eff_used),
        lre_min_eigenvalue=float(np.linalg.eigvalsh(h).min()),
    )
    if all(r.fivefold is not None for r in records) and n == 4:
        alpha = src.default_alpha()
        rho_c = estimate(corrected_records(records, alpha), eff)[0]
        _, err_c, _ = monte_carlo_errors(
            records, tcfg["mc_samples"], angle_sigma, cfgmod.derive_seed(seed, "tomography/mc-corrected"), target,
            eff, alpha=alpha, workers=tcfg["workers"],
        )
        result.extra.update(alpha=alpha, fidelity_corrected=fidelity(rho_c, target), fidelity_corrected_err=err_c)
    _write(out, "rho.json", cfgmod.dumps(result.to_json()))
    labels = [format(i, f"0{n}b").replace("0", "H").replace("1", "V") for i in range(2**n)]
    rows = [",".join(["", *labels])]
    rows += [",".join([lab, *(repr(float(x)) for x in row)]) for lab, row in zip(labels, rho.matrix.real)]
    _write(out, "rho_real.csv", "\n".join(rows) + "\n")
    return {"fidelity": result.fidelity_to_ghz, "fidelity_err": err, **result.extra}


def cmd_sweep(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    src = cfgmod.source_config(cfg)
    scfg = cfg["sweep"]
    p_values, rates = scfg["p_values"], scfg["target_rates_hz"]
    if p_values is not None:
        rates = None
    elif rates is None:
        p_values = []
    if (p_values is not None and len(p_values) == 0) or (rates is not None and len(rates) == 0):
        points = []
    else:
        points = fidelity_rate_sweep(
            src,
            p_values=p_values,
            target_rates_hz=rates,
            acquisition_s=cfg["tomography"]["acquisition_s"],
            mc_samples=scfg["mc_samples"],
            angle_sigma=np.radians(cfg["tomography"]["angle_sigma_deg"]),
            seed=cfgmod.derive_seed(seed, "sweep"),
            min_counts=scfg["min_counts"],
        )
    _write(out, "sweep.csv", sweep_to_csv(points))
    detail = [
        {
            "p": pt.p,
            "rate_hz": pt.rate_hz,
            "fivefold_rate_hz": pt.fivefold_rate_hz,
            "fidelity_raw": pt.fidelity_raw,
            "fidelity_raw_err": pt.fidelity_raw_err,
            "fidelity_corrected": pt.fidelity_corrected,
            "fidelity_corrected_err": pt.fidelity_corrected_err,
            "fidelity_model": pt.fidelity_model,
        }
        for pt in points
    ]
    _write(out, "sweep.json", cfgmod.dumps({"alpha": src.default_alpha(), "points": detail}))
    return {"points": len(points)}


def cmd_hom(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    h = cfg["hom"]
    v = h["visibility"]
    if v is None:
        pump, pm_top, pm_bottom, filt, grid = cfgmod.spectral_objects(cfg)
        a = apply_filter(build_jsa(pump, pm_top, grid), filt, filt)
        b = apply_filter(build_jsa(pump, pm_bottom, grid), filt, filt)
        v = hom_visibility(a, b, cfg["spectral"]["jitter_ps"])
    sigma = h["tau_fwhm_ps"] / FWHM_PER_SIGMA
    delays = np.linspace(-h["delay_range_ps"], h["delay_range_ps"], h["n_points"])
    noise_seed = cfgmod.derive_seed(seed, "hom") if h["poisson"] else None
    scan = hom_curve(v, sigma, h["baseline_counts"], delays, noise_seed)
    fit = fit_hom(scan)
    _write(out, "hom_scan.csv", scan.to_csv())
    _write(out, "hom_fit.json", cfgmod.dumps({"input_visibility": v, "input_tau_fwhm_ps": h["tau_fwhm_ps"],
                                              **fit.to_json()}))
    return {"v": fit.v, "v_err": fit.v_err, "tau_fwhm_ps": fit.tau_fwhm}


def cmd_jsi(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    pump, pm_top, pm_bottom, filt, grid = cfgmod.spectral_objects(cfg)
    top = build_jsa(pump, pm_top, grid)
    bottom = build_jsa(pump, pm_bottom, grid)
    top_f = apply_filter(top, filt, filt)
    bottom_f = apply_filter(bottom, filt, filt)
    _write(out, "jsi_top_unfiltered.csv", top.to_csv())
    _write(out, "jsi_bottom_unfiltered.csv", bottom.to_csv())
    _write(out, "jsi_top_filtered.csv", top_f.to_csv())
    summary = {
        "step_nm": grid.step,
        "purity_top_unfiltered": schmidt_purity(top),
        "purity_bottom_unfiltered": schmidt_purity(bottom),
        "purity_top_filtered": schmidt_purity(top_f),
        "hom_visibility_filtered": hom_visibility(top_f, bottom_f, cfg["spectral"]["jitter_ps"]),
        "marginal_fwhm_nm_filtered": marginal_fwhm_nm(top_f),
    }
    _write(out, "jsi_summary.json", cfgmod.dumps(summary))
    return summary


def _rho_from_input(path) -> DensityMatrix:
    try:
        data = json.loads(_read_input(path))
        return ReconstructionResult.rho_from_json(data)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed rho file: {exc}") from None


def cmd_compensate(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    if input_path is not None:
        rho = _rho_from_input(input_path)
    else:
        rho = fuse_pairs(cfgmod.source_config(cfg), rates=False).rho4
    if rho.n_qubits != 4:
        raise InputError("compensation needs a 4-qubit state")
    plan = optimize_compensation(rho, seed=cfgmod.derive_seed(seed, "compensate") % 2**32)
    _write(out, "plan.json", cfgmod.dumps(plan.to_json()))
    return {"initial_fidelity": plan.initial_fidelity, "achieved_fidelity": plan.achieved_fidelity}


def cmd_calibrate(cfg: dict, seed: int, out: Path, input_path=None) -> dict:
    src = cfgmod.source_config(cfg)
    c = cfg["calibration"]
    anchors = tuple((a["rate_hz"], a["fidelity_raw"], a.get("fidelity_corrected")) for a in c["anchors"]) or ANCHORS
    res = calibrate_source(
        src, anchors, fit_alpha=c["fit_alpha"], acquisition_s=cfg["tomography"]["acquisition_s"], draws=c["draws"]
    )
    calibrated = cfgmod.deep_merge(cfg, {"source": cfgmod.source_to_json(res.config)})
    _write(out, "calibration.json", cfgmod.dumps(res.to_json()))
    _write(out, "calibrated_config.json", cfgmod.dumps(calibrated))
    return res.to_json()


COMMANDS = {
    "tomography": cmd_tomography,
    "sweep": cmd_sweep,
    "hom": cmd_hom,
    "jsi": cmd_jsi,
    "compensate": cmd_compensate,
    "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghzsource", description="Four-photon GHZ source simulation and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "tomography": "simulate (or load) 97-setting counts and reconstruct the state",
        "sweep": "fidelity against fourfold rate, raw and fivefold-corrected",
        "hom": "simulate and fit a HOM dip",
        "jsi": "joint spectral intensities, unfiltered and filtered",
        "compensate": "find waveplate settings undoing local rotations",
        "calibrate": "fit source parameters to the fidelity anchors",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None, help="JSON config (merged over the defaults)")
        p.add_argument("--seed", type=int, default=None, help="root seed, overrides the config")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--input", type=Path, default=None, help="counts JSONL (tomography) or rho JSON (compensate)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, exc: Exception) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    seed = cfg["root_seed"] if args.seed is None else args.seed
    if seed < 0:
        return _fail(EXIT_CONFIG, cfgmod.ConfigError("seed must be nonnegative"))
    try:
        summary = COMMANDS[args.command](cfg, seed, args.out, args.input)
    except (InputError, cfgmod.ConfigError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (MonteCarloError, HomFitError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
