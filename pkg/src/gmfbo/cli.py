"""Command-line interface: declarative YAML experiments over the harness.

Commands: calibrate, run, bench, ablation, nonstationary, truegrid.
Flags: --config, --method, --seed, --jobs, --strict, --out.

Every command writes a manifest.yaml holding the fully resolved configuration
(defaults applied, objective normalization resolved to numbers). A manifest is
itself a valid --config input: re-running the same command from it reproduces
the output CSVs byte for byte, at any --jobs value.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import bench as B
from .gmfbo import METHODS, NonStationaryEvent, RunConfig, run_method
from .plant import (
    ControllerGains,
    GainBox,
    ObjectiveSpec,
    PlantConfig,
    TwinMismatchConfig,
    evaluate_objective,
)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


_PLANT_KEYS = {f.name for f in fields(PlantConfig)}
_BOX_KEYS = {f.name for f in fields(GainBox)}
_MISMATCH_KEYS = {f.name for f in fields(TwinMismatchConfig)}
_OBJECTIVE_KEYS = {"weights", "noise_std", "probe_count", "calibration_seed",
                   "means", "stds", "calibration_file"}
_GMFBO_KEYS = {"n_iterations", "n0_is1", "n0_is2", "n_c", "s_prime", "alpha",
               "beta", "rho", "e_init", "dc_accumulate", "is3_at_init",
               "surrogate_restarts", "surrogate_max_evals",
               "correction_restarts", "correction_max_evals"}
_EVENT_KEYS = {"enabled", "friction_factor", "after_is1_evals"}
_BENCH_KEYS = {"n_exper", "margin", "grid_resolution", "threshold",
               "ablation_grid"}
_TRUEGRID_KEYS = {"resolution"}
_TOP_KEYS = {"seed", "output_dir", "methods", "plant", "box", "mismatch",
             "objective", "gmfbo", "event", "bench", "truegrid"}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        names = ", ".join(f"'{section}.{k}'" if section else f"'{k}'"
                          for k in unknown)
        raise ConfigError(f"unknown config key(s): {names}")


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    value = raw.get(name, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    _check_keys(name, value, allowed)
    return value


def _build(section: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: every field explicit, manifest-ready."""

    seed: int
    output_dir: str
    methods: list[str]
    plant: PlantConfig
    box: GainBox
    mismatch: TwinMismatchConfig
    objective: ObjectiveSpec
    gmfbo: dict
    event_enabled: bool
    event: NonStationaryEvent
    n_exper: int
    margin: float
    grid_resolution: int
    threshold: float | None
    ablation_grid: tuple[tuple[int, int], ...]
    truegrid_resolution: int
    calibration: B.CalibrationResult | None = None

    def run_config(self, method: str, seed: int | None = None) -> RunConfig:
        kwargs = dict(self.gmfbo)
        return _build("gmfbo", RunConfig, dict(
            method=method, seed=self.seed if seed is None else seed,
            box=self.box, plant=self.plant, mismatch=self.mismatch,
            objective=self.objective,
            event=self.event if self.event_enabled else None, **kwargs))

    def to_dict(self) -> dict:
        plant = {f.name: getattr(self.plant, f.name) for f in fields(PlantConfig)}
        box = {f.name: getattr(self.box, f.name) for f in fields(GainBox)}
        mm = {f.name: getattr(self.mismatch, f.name)
              for f in fields(TwinMismatchConfig)}
        mm["param_scales"] = dict(self.mismatch.param_scales)
        objective = {
            "weights": list(self.objective.weights),
            "noise_std": self.objective.noise_std,
            "means": list(self.objective.means),
            "stds": list(self.objective.stds),
        }
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "methods": list(self.methods),
            "plant": plant,
            "box": box,
            "mismatch": mm,
            "objective": objective,
            "gmfbo": dict(self.gmfbo),
            "event": {"enabled": self.event_enabled,
                      "friction_factor": self.event.friction_factor,
                      "after_is1_evals": self.event.after_is1_evals},
            "bench": {"n_exper": self.n_exper, "margin": self.margin,
                      "grid_resolution": self.grid_resolution,
                      "threshold": self.threshold,
                      "ablation_grid": [list(c) for c in self.ablation_grid]},
            "truegrid": {"resolution": self.truegrid_resolution},
        }


def _resolve_weights(value) -> tuple[float, ...]:
    if value is None:
        return B.DESK_WEIGHTS
    if isinstance(value, str):
        if value not in B.WEIGHT_PROFILES:
            raise ConfigError(
                f"unknown weight profile '{value}' for key 'objective.weights'; "
                f"choose from {sorted(B.WEIGHT_PROFILES)} or give 4 numbers")
        return B.WEIGHT_PROFILES[value]
    try:
        weights = tuple(float(w) for w in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'objective.weights': {exc}") from exc
    if len(weights) != 4:
        raise ConfigError("'objective.weights' needs exactly 4 numbers")
    return weights


def _resolve_objective(obj: dict, plant: PlantConfig,
                       box: GainBox) -> tuple[ObjectiveSpec, B.CalibrationResult | None]:
    weights = _resolve_weights(obj.get("weights"))
    noise_std = float(obj.get("noise_std", 0.02))
    means, stds = obj.get("means"), obj.get("stds")
    calibration_file = obj.get("calibration_file")
    if calibration_file is not None:
        try:
            with open(calibration_file) as fh:
                data = yaml.safe_load(fh)
            means, stds = data["means"], data["stds"]
            weights = tuple(float(w) for w in data["weights"])
        except (OSError, KeyError, TypeError, yaml.YAMLError) as exc:
            raise ConfigError(
                f"cannot load 'objective.calibration_file': {exc}") from exc
    if (means is None) != (stds is None):
        raise ConfigError("'objective.means' and 'objective.stds' must be "
                          "given together")
    if means is not None:
        spec = _build("objective", ObjectiveSpec, dict(
            weights=weights, means=tuple(float(v) for v in means),
            stds=tuple(float(v) for v in stds), noise_std=noise_std))
        return spec, None
    cal = B.calibrate_weights(plant,
                              probe_count=int(obj.get("probe_count", 10)),
                              seed=int(obj.get("calibration_seed", 0)),
                              weights=weights, box=box)
    return cal.to_spec(noise_std), cal


def load_config(path: str | Path, command: str,
                seed_override: int | None = None,
                out_override: str | None = None,
                method_override: str | None = None) -> ExperimentConfig:
    """Parse and validate a YAML experiment file (or a manifest of `command`)."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config top level must be a mapping")
    if "command" in raw and "config" in raw:
        manifest_cmd = raw["command"]
        if manifest_cmd != command:
            raise ConfigError(
                f"manifest was written by command '{manifest_cmd}', "
                f"not '{command}'")
        raw = raw["config"]
        if not isinstance(raw, dict):
            raise ConfigError("manifest 'config' must be a mapping")
    _check_keys("", raw, _TOP_KEYS)
    if "plant" not in raw:
        raise ConfigError("missing required section 'plant'")

    plant = _build("plant", PlantConfig, _section(raw, "plant", _PLANT_KEYS))
    box = _build("box", GainBox, _section(raw, "box", _BOX_KEYS))
    mismatch = _build("mismatch", TwinMismatchConfig,
                      _section(raw, "mismatch", _MISMATCH_KEYS))
    objective, calibration = _resolve_objective(
        _section(raw, "objective", _OBJECTIVE_KEYS), plant, box)
    gm = _section(raw, "gmfbo", _GMFBO_KEYS)
    ev = _section(raw, "event", _EVENT_KEYS)
    event = _build("event", NonStationaryEvent, dict(
        friction_factor=float(ev.get("friction_factor", 2.0)),
        after_is1_evals=int(ev.get("after_is1_evals", 4))))
    bn = _section(raw, "bench", _BENCH_KEYS)
    tg = _section(raw, "truegrid", _TRUEGRID_KEYS)

    methods = raw.get("methods", ["bo_ei", "gmfbo"])
    if method_override is not None:
        methods = [method_override]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("'methods' must be a non-empty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method '{m}' in 'methods'; "
                              f"choose from {sorted(METHODS)}")

    grid = bn.get("ablation_grid")
    if grid is None:
        grid = B.DEFAULT_ABLATION_GRID
    else:
        try:
            grid = tuple((int(a), int(b)) for a, b in grid)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"invalid 'bench.ablation_grid': {exc}") from exc

    threshold = bn.get("threshold")
    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0) if seed_override is None else seed_override),
        output_dir=str(out_override or raw.get("output_dir", "out")),
        methods=list(methods),
        plant=plant, box=box, mismatch=mismatch, objective=objective,
        gmfbo=dict(gm),
        event_enabled=bool(ev.get("enabled", False)),
        event=event,
        n_exper=int(bn.get("n_exper", B.DEFAULT_N_EXPER)),
        margin=float(bn.get("margin", B.DEFAULT_MARGIN)),
        grid_resolution=int(bn.get("grid_resolution", B.DEFAULT_GRID)),
        threshold=None if threshold is None else float(threshold),
        ablation_grid=grid,
        truegrid_resolution=int(tg.get("resolution", B.DEFAULT_GRID)),
        calibration=calibration,
    )
    cfg.run_config(methods[0])  # surface invalid gmfbo keys now, not mid-run
    return cfg


def _write_manifest(cfg: ExperimentConfig, command: str, out_dir: Path) -> Path:
    path = out_dir / "manifest.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump({"command": command, "config": cfg.to_dict()}, fh,
                       sort_keys=True)
    return path


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_calibrate(cfg: ExperimentConfig) -> int:
    cal = cfg.calibration or B.calibrate_weights(cfg.plant, box=cfg.box)
    out = _out_dir(cfg)
    with open(out / "calibration.yaml", "w") as fh:
        yaml.safe_dump({"means": list(cal.means), "stds": list(cal.stds),
                        "weights": list(cal.weights),
                        "probe_count": cal.probe_count}, fh, sort_keys=True)
    _write_manifest(cfg, "calibrate", out)
    print(f"calibration written to {out / 'calibration.yaml'}")
    return 0


def cmd_run(cfg: ExperimentConfig) -> int:
    method = cfg.methods[0]
    rc = cfg.run_config(method)
    result = run_method(rc)
    out = _out_dir(cfg)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    B.write_run_csv(result, runs / f"{method}_seed{rc.seed}.csv")
    summary = {
        "method": method, "seed": rc.seed,
        "best_kp": float(result.best_gains.kp),
        "best_kd": float(result.best_gains.kd),
        "best_objective": float(result.best_objective),
        "final_e_is2": float(result.final_e),
        "unbiased_cost": float(result.records[-1].cumulative_cost),
        "is1_evaluations": result.is1_evaluations(),
        "fallback_fits": result.fallback_fits,
    }
    if cfg.threshold is not None:
        n = result.is1_evals_to_threshold(cfg.threshold)
        summary["is1_evals_to_threshold"] = (
            n if n is not None else f">{rc.n0_is1 + rc.n_iterations}")
    with open(out / "run_summary.yaml", "w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=True)
    _write_manifest(cfg, "run", out)
    print(f"best gains kp={result.best_gains.kp:.2f} kd={result.best_gains.kd:.2f} "
          f"objective={result.best_objective:.4f}; logs in {out}")
    return 0


def _strict_censored(outcomes, strict: bool) -> int:
    if not strict:
        return 0
    bad = []
    for name, o in outcomes.items():
        for s, c in zip(o.seeds, o.censored):
            if c:
                bad.append(f"{name} seed {s}")
    if bad:
        print("strict mode: censored runs never reached the threshold: "
              + "; ".join(bad), file=sys.stderr)
        return 1
    return 0


def cmd_bench(cfg: ExperimentConfig, jobs: int, strict: bool) -> int:
    rc = cfg.run_config(cfg.methods[0])
    summary = B.monte_carlo(cfg.methods, rc, n_exper=cfg.n_exper,
                            seed=cfg.seed, margin=cfg.margin,
                            threshold=cfg.threshold,
                            grid_resolution=cfg.grid_resolution, jobs=jobs)
    out = _out_dir(cfg)
    B.export_summary(summary, out)
    _write_manifest(cfg, "bench", out)
    for m in cfg.methods:
        o = summary.outcomes[m]
        print(f"{m}: mean n* = {o.n_star_display(summary.is1_budget)} "
              f"(censored {sum(o.censored)}/{len(o.censored)})")
    return _strict_censored(summary.outcomes, strict)


def cmd_ablation(cfg: ExperimentConfig, jobs: int, strict: bool) -> int:
    rc = cfg.run_config(cfg.methods[0])
    table = B.ablation_grid(rc, methods=cfg.methods, grid=cfg.ablation_grid,
                            n_exper=cfg.n_exper, seed=cfg.seed,
                            margin=cfg.margin,
                            grid_resolution=cfg.grid_resolution, jobs=jobs)
    out = _out_dir(cfg)
    B.export_ablation(table, out)
    _write_manifest(cfg, "ablation", out)
    print(f"ablation table written to {out / 'ablation.csv'}")
    code = 0
    for cell in table.grid:
        code = max(code, _strict_censored(table.cells[cell].outcomes, strict))
    return code


def cmd_nonstationary(cfg: ExperimentConfig, jobs: int, strict: bool) -> int:
    # plant change always happens here, whatever event.enabled says
    rc = dataclasses.replace(cfg.run_config(cfg.methods[0]), event=cfg.event)
    summary = B.nonstationary_scenario(
        rc, methods=cfg.methods, n_exper=cfg.n_exper, seed=cfg.seed,
        margin=cfg.margin, grid_resolution=cfg.grid_resolution, jobs=jobs)
    out = _out_dir(cfg)
    B.export_summary(summary, out)
    _write_manifest(cfg, "nonstationary", out)
    print(f"nonstationary scenario (friction x{cfg.event.friction_factor} "
          f"after {cfg.event.after_is1_evals} real evaluations) written to {out}")
    return _strict_censored(summary.outcomes, strict)


def cmd_truegrid(cfg: ExperimentConfig) -> int:
    res = cfg.truegrid_resolution
    out = _out_dir(cfg)
    kps = np.linspace(cfg.box.kp_min, cfg.box.kp_max, res)
    kds = np.linspace(cfg.box.kd_min, cfg.box.kd_max, res)
    rel_errs = []
    with open(out / "truegrid_objective.csv", "w", newline="") as f1, \
            open(out / "truegrid_error.csv", "w", newline="") as f2:
        w1, w2 = csv.writer(f1), csv.writer(f2)
        w1.writerow(["kp", "kd", "objective"])
        w2.writerow(["kp", "kd", "rel_error"])
        for kp in kps:
            for kd in kds:
                g = ControllerGains(float(kp), float(kd))
                v1 = evaluate_objective(g, cfg.plant, cfg.objective)
                v2 = evaluate_objective(g, cfg.plant, cfg.objective,
                                        mismatch=cfg.mismatch)
                rel = abs(v2 - v1) / max(abs(v1), 1e-9)
                rel_errs.append(rel)
                w1.writerow([repr(float(kp)), repr(float(kd)), repr(v1)])
                w2.writerow([repr(float(kp)), repr(float(kd)), repr(rel)])
    _write_manifest(cfg, "truegrid", out)
    print(f"true objective and twin error grids ({res}x{res}) written to {out}; "
          f"mean twin relative error {float(np.mean(rel_errs)):.3f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gmfbo",
        description="Guided multi-fidelity controller tuning experiments")
    parser.add_argument("command",
                        choices=["calibrate", "run", "bench", "ablation",
                                 "nonstationary", "truegrid"])
    parser.add_argument("--config", required=True,
                        help="YAML experiment file (or a manifest.yaml)")
    parser.add_argument("--method", default=None, choices=sorted(METHODS))
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config master seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers; output is identical for any value")
    parser.add_argument("--strict", action="store_true",
                        help="exit nonzero if any run never reaches the threshold")
    parser.add_argument("--out", default=None,
                        help="override the config output directory")
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.command,
                          seed_override=args.seed, out_override=args.out,
                          method_override=args.method)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, args.jobs, args.strict)
        if args.command == "ablation":
            return cmd_ablation(cfg, args.jobs, args.strict)
        if args.command == "nonstationary":
            return cmd_nonstationary(cfg, args.jobs, args.strict)
        return cmd_truegrid(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
