"""Command-line front end: ingestion, estimation, simulation, validation.

Every subcommand emits a JSON document carrying a provenance block
(package version, seed, config hash) and is deterministic given its
inputs, config, and seed.  Failures are reported as a machine-readable
error object in place of — never alongside — the result payload, with
distinct exit codes: 0 success, 2 input error, 3 degenerate estimation
problem, 4 unreliable inference.
"""

import dataclasses
import hashlib
import json
import multiprocessing
import sys
import warnings
from pathlib import Path

import click
import numpy as np
from scipy.special import ndtri

from . import __version__, estimator, simulate
from .data import (
    BootstrapSpec,
    DegenerateCaseError,
    DiagnosticsBundle,
    EstimationConfig,
    InputError,
    KernelKind,
    LevelCurve,
    NoiseModel,
    QuadratureSpec,
    Sample,
    Side,
    UnreliableInferenceError,
    config_hash,
    config_to_dict,
    emit_report,
    load_sample,
    reorient,
    write_sample_csv,
)
from .kernels import kernel_eval
from .smoothers import intercept_weights, local_linear

EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_UNRELIABLE = 4

_ERROR_KINDS = {
    InputError: ("input", EXIT_INPUT),
    DegenerateCaseError: ("degenerate", EXIT_DEGENERATE),
    UnreliableInferenceError: ("unreliable_inference", EXIT_UNRELIABLE),
}

_PRESETS = {
    "calibrated-recovery": simulate.calibrated_recovery_spec,
    "calibrated-application": simulate.calibrated_application_spec,
}


def _write_text(destination: str | None, text: str) -> None:
    if destination in (None, "-"):
        click.echo(text)
    else:
        Path(destination).write_text(text + "\n", encoding="utf-8")


def _fail(destination: str | None, err: Exception, provenance: dict) -> None:
    """Emit the error object (no result payload) and exit with its code."""
    kind, code = "internal", 1
    for exc_type, (name, exc_code) in _ERROR_KINDS.items():
        if isinstance(err, exc_type):
            kind, code = name, exc_code
            break
    body = {
        "schema_version": 1,
        "provenance": provenance,
        "error": {"kind": kind, "exit_code": code, "message": str(err)},
    }
    _write_text(destination, json.dumps(body, indent=2))
    sys.exit(code)


def _provenance(seed: int | None, config: EstimationConfig | None = None, **extra) -> dict:
    block = {"version": __version__, "seed": seed}
    if config is not None:
        block["config_hash"] = config_hash(config)
    block.update(extra)
    return block


def _spec_hash(spec) -> str:
    canonical = json.dumps(json.loads(simulate.spec_to_json(spec)), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared option stacks


def _sample_options(command):
    for option in reversed(
        [
            click.argument("input_path", metavar="SAMPLE_CSV", type=click.Path(exists=True)),
            click.option("--treatment-col", default="x", show_default=True),
            click.option("--outcome-col", default="y", show_default=True),
            click.option("--bunch-value", type=float, default=0.0, show_default=True),
            click.option(
                "--control-col",
                "control_cols",
                multiple=True,
                help="Control column (repeatable; pair with --control-kind).",
            ),
            click.option(
                "--control-kind",
                "control_kinds",
                multiple=True,
                type=click.Choice(["continuous", "discrete"]),
            ),
            click.option("--match-tolerance", type=float, default=0.0, show_default=True),
            click.option("--delimiter", default=",", show_default=True),
            click.option(
                "--side",
                type=click.Choice([s.value for s in Side]),
                default=Side.LEFT_BOUNDARY.value,
                show_default=True,
                help="Orientation of the bunch point; non-left data are reflected.",
            ),
        ]
    ):
        command = option(command)
    return command


def _config_options(command):
    for option in reversed(
        [
            click.option("--config", "config_path", type=click.Path(exists=True), default=None),
            click.option("--h1", default=None, help="Bandwidth, or comma list for a sweep."),
            click.option("--h2", type=float, default=None),
            click.option("--h3", type=float, default=None),
            click.option("--h4", type=float, default=None),
            click.option("--kernel1", type=click.Choice([k.value for k in KernelKind]), default=None),
            click.option("--kernel2", type=click.Choice([k.value for k in KernelKind]), default=None),
            click.option("--kernel3", type=click.Choice([k.value for k in KernelKind]), default=None),
            click.option("--kernel4", type=click.Choice([k.value for k in KernelKind]), default=None),
            click.option("--theta-tolerance", type=float, default=None),
            click.option("--theta-se-z", type=float, default=None),
            click.option("--bootstrap", "bootstrap_b", type=int, default=None, help="Replications."),
            click.option("--bootstrap-seed", type=int, default=None),
            click.option(
                "--noise-model",
                type=click.Choice([m.value for m in NoiseModel]),
                default=None,
            ),
            click.option("--xi-max", type=float, default=None),
            click.option("--nodes", type=int, default=None),
        ]
    ):
        command = option(command)
    return command


def _load(input_path, treatment_col, outcome_col, bunch_value, control_cols, control_kinds,
          match_tolerance, delimiter, side):
    sample, report = load_sample(
        input_path,
        treatment_col,
        outcome_col,
        bunch_value,
        control_cols=control_cols,
        control_kinds=control_kinds,
        match_tolerance=match_tolerance,
        delimiter=delimiter,
        require_above=side == Side.LEFT_BOUNDARY.value,
    )
    side = Side(side)
    if side is not Side.LEFT_BOUNDARY:
        sample = reorient(sample, side)
    return sample, report


def config_from_dict(document: dict) -> EstimationConfig:
    """Build an :class:`EstimationConfig` from its JSON-dictionary form."""
    known = {f.name for f in dataclasses.fields(EstimationConfig)}
    unknown = set(document) - known
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    values = dict(document)
    if "quadrature" in values:
        values["quadrature"] = QuadratureSpec(**values["quadrature"])
    if "bootstrap" in values:
        values["bootstrap"] = BootstrapSpec(**values["bootstrap"])
    try:
        config = EstimationConfig(**values)
    except TypeError as err:
        raise InputError(f"malformed config document: {err}") from None
    config.validate()
    return config


def _build_config(config_path, overrides) -> tuple[EstimationConfig, list[float] | None]:
    """Merge a config file with command-line overrides (flags win).

    Returns the config plus the parsed h1 sweep list when --h1 held more
    than one value (the config itself then carries the first entry).
    """
    document: dict = {}
    if config_path is not None:
        try:
            document = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise InputError(f"{config_path}: invalid JSON ({err})") from None
        if not isinstance(document, dict):
            raise InputError(f"{config_path}: config document must be a JSON object")

    sweep = None
    h1_raw = overrides.pop("h1", None)
    if h1_raw is not None:
        try:
            values = [float(tok) for tok in str(h1_raw).split(",") if tok.strip()]
        except ValueError:
            raise InputError(f"--h1 expects a number or comma list, got {h1_raw!r}") from None
        if not values:
            raise InputError("--h1 received an empty list")
        document["h1"] = values[0]
        if len(values) > 1:
            sweep = values

    for key in ("h2", "h3", "h4", "kernel1", "kernel2", "kernel3", "kernel4",
                "theta_tolerance", "theta_se_z", "noise_model"):
        if overrides.get(key) is not None:
            document[key] = overrides[key]
    bootstrap = dict(document.get("bootstrap", {}))
    if overrides.get("bootstrap_b") is not None:
        bootstrap["replications"] = overrides["bootstrap_b"]
    if overrides.get("bootstrap_seed") is not None:
        bootstrap["seed"] = overrides["bootstrap_seed"]
    if bootstrap:
        document["bootstrap"] = bootstrap
    quadrature = dict(document.get("quadrature", {}))
    if overrides.get("xi_max") is not None:
        quadrature["xi_max"] = overrides["xi_max"]
    if overrides.get("nodes") is not None:
        quadrature["nodes"] = overrides["nodes"]
    if quadrature:
        document["quadrature"] = quadrature
    return config_from_dict(document), sweep


def _load_spec(spec_path, preset):
    if (spec_path is None) == (preset is None):
        raise InputError("provide exactly one of SPEC_JSON or --preset")
    if preset is not None:
        return _PRESETS[preset]()
    return simulate.spec_from_json(Path(spec_path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# subcommands


@click.group()
@click.version_option(version=__version__)
def main():
    """Bunching-design estimation of marginal treatment effects."""


@main.command()
@_sample_options
@_config_options
@click.option("--output", default="-", show_default=True, help="Report path or - for stdout.")
def estimate(input_path, treatment_col, outcome_col, bunch_value, control_cols, control_kinds,
             match_tolerance, delimiter, side, config_path, output, **overrides):
    """Estimate the average marginal effect at the bunch point."""
    provenance = {"version": __version__, "seed": None}
    try:
        config, sweep = _build_config(config_path, overrides)
        provenance = _provenance(config.bootstrap.seed, config, input=str(input_path))
        sample, _ = _load(input_path, treatment_col, outcome_col, bunch_value,
                          control_cols, control_kinds, match_tolerance, delimiter, side)
        if sweep is None:
            estimates = {"ame": estimator.ame(sample, config=config)}
        else:
            estimates = {
                "sweep": [
                    (h1, estimator.ame(sample, config=dataclasses.replace(config, h1=h1)))
                    for h1 in sweep
                ]
            }
        _write_text(output, emit_report(estimates, config, provenance))
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        _fail(output, err, provenance)


@main.command("att-curve")
@_sample_options
@_config_options
@click.option("--xs", default=None, help="Comma list of evaluation points.")
@click.option("--max-x", type=int, default=None,
              help="Integer grid from the bunch point up to this offset.")
@click.option("--degree", type=click.IntRange(1, 2), default=1, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
@click.option("--output", default="-", show_default=True)
def att_curve(input_path, treatment_col, outcome_col, bunch_value, control_cols, control_kinds,
              match_tolerance, delimiter, side, config_path, xs, max_x, degree, fmt, output,
              **overrides):
    """Extrapolated treatment effects on a grid above the bunch point."""
    provenance = {"version": __version__, "seed": None}
    try:
        config, sweep = _build_config(config_path, overrides)
        if sweep is not None:
            raise InputError("att-curve takes a single h1, not a sweep list")
        provenance = _provenance(config.bootstrap.seed, config, input=str(input_path))
        sample, _ = _load(input_path, treatment_col, outcome_col, bunch_value,
                          control_cols, control_kinds, match_tolerance, delimiter, side)
        if (xs is None) == (max_x is None):
            raise InputError("provide exactly one of --xs or --max-x")
        if xs is not None:
            try:
                grid = sorted(float(tok) for tok in xs.split(",") if tok.strip())
            except ValueError:
                raise InputError(f"--xs expects a comma list of numbers, got {xs!r}") from None
            if not grid:
                raise InputError("--xs received an empty list")
        else:
            if max_x < 0:
                raise InputError("--max-x must be nonnegative")
            grid = [sample.bunch_point + i for i in range(max_x + 1)]
        curve = estimator.att_curve(sample, grid, degree=degree, config=config)
        if fmt == "json":
            _write_text(output, emit_report({"att": list(curve)}, config, provenance))
        else:
            _write_text(output, _att_csv(curve))
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        _fail(output if fmt == "json" else "-", err, provenance)


def _att_csv(curve) -> str:
    degree = max(point.degree for point in curve)
    header = ["x", "degree", "att", "m_at_x"]
    header += [f"correction_{k + 1}" for k in range(degree)]
    has_se = any(point.se is not None for point in curve)
    if has_se:
        header += ["se", "ci_lo", "ci_hi"]
    lines = [",".join(header)]
    for point in sorted(curve, key=lambda p: p.x):
        row = [repr(point.x), str(point.degree), repr(point.att), repr(point.m_at_x)]
        row += [repr(term) for term in point.correction_terms]
        row += [""] * (degree - len(point.correction_terms))
        if has_se:
            row += (
                [repr(point.se), repr(point.ci[0]), repr(point.ci[1])]
                if point.se is not None
                else ["", "", ""]
            )
        lines.append(",".join(row))
    return "\n".join(lines)


@main.command()
@click.argument("spec_path", metavar="[SPEC_JSON]", required=False,
                type=click.Path(exists=True))
@click.option("--preset", type=click.Choice(sorted(_PRESETS)), default=None)
@click.option("--n", "n_obs", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sample-out", required=True, type=click.Path())
@click.option("--latent-out", default=None, type=click.Path(),
              help="Defaults to SAMPLE_OUT with a .latent.csv suffix.")
def simulate_cmd(spec_path, preset, n_obs, seed, sample_out, latent_out):
    """Draw a sample from a DGP spec; write sample and latent CSVs."""
    try:
        spec = _load_spec(spec_path, preset)
        if n_obs <= 0:
            raise InputError("--n must be positive")
        sample, latent = simulate.sample_dgp(spec, n_obs, seed=seed)
        if latent_out is None:
            base = Path(sample_out)
            latent_out = str(base.with_suffix(".latent" + (base.suffix or ".csv")))
        write_sample_csv(sample, sample_out)
        simulate.write_latent_csv(latent, latent_out)
        body = {
            "schema_version": 1,
            "provenance": {
                "version": __version__,
                "seed": seed,
                "spec_hash": _spec_hash(spec),
            },
            "sample_csv": str(sample_out),
            "latent_csv": str(latent_out),
            "n": int(sample.n),
            "n_bunched": int(sample.n_bunched),
            "n_above": int(sample.n_above),
        }
        click.echo(json.dumps(body, indent=2))
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        _fail("-", err, {"version": __version__, "seed": seed})


main.add_command(simulate_cmd, name="simulate")


def _validate_replicate(payload):
    """One simulate+estimate cycle; runs in a worker when --jobs > 1."""
    spec_json, n_obs, rep_seed, config_document = payload
    spec = simulate.spec_from_json(spec_json)
    config = config_from_dict(config_document)
    if config.bootstrap.replications > 0:
        config = dataclasses.replace(
            config, bootstrap=dataclasses.replace(config.bootstrap, seed=rep_seed)
        )
    sample, _ = simulate.sample_dgp(spec, n_obs, seed=rep_seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = estimator.ame(sample, config=config)
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        return {"failed": f"{type(err).__name__}: {err}"}
    out = {"ame": est.ame, "theta": int(est.theta)}
    if est.ci is not None:
        out["ci"] = [est.ci[0], est.ci[1]]
    return out


@main.command()
@click.argument("spec_path", metavar="[SPEC_JSON]", required=False,
                type=click.Path(exists=True))
@click.option("--preset", type=click.Choice(sorted(_PRESETS)), default=None)
@_config_options
@click.option("--replications", "-R", "n_reps", type=int, required=True)
@click.option("--n", "n_obs", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes for the replication loop.")
@click.option("--output", default="-", show_default=True)
def validate(spec_path, preset, config_path, n_reps, n_obs, seed, jobs, output, **overrides):
    """Monte Carlo check of the estimator against the simulator's truth."""
    provenance = {"version": __version__, "seed": seed}
    try:
        config, sweep = _build_config(config_path, overrides)
        if sweep is not None:
            raise InputError("validate takes a single h1, not a sweep list")
        spec = _load_spec(spec_path, preset)
        if n_reps < 1:
            raise InputError("--replications must be at least 1")
        if n_obs <= 0:
            raise InputError("--n must be positive")
        provenance = _provenance(seed, config, spec_hash=_spec_hash(spec))
        truth = simulate.true_ame(spec)

        spec_json = simulate.spec_to_json(spec)
        document = config_to_dict(config)
        payloads = [(spec_json, n_obs, seed + rep, document) for rep in range(n_reps)]
        if jobs > 1:
            with multiprocessing.Pool(jobs) as pool:
                results = pool.map(_validate_replicate, payloads)
        else:
            results = [_validate_replicate(payload) for payload in payloads]

        failures = [r["failed"] for r in results if "failed" in r]
        if len(failures) > 0.10 * n_reps:
            raise UnreliableInferenceError(
                f"{len(failures)} of {n_reps} replications failed; first: {failures[0]}"
            )
        kept = [r for r in results if "failed" not in r]
        ames = np.array([r["ame"] for r in kept])
        thetas = [r["theta"] for r in kept]
        covered = [r["ci"][0] <= truth <= r["ci"][1] for r in kept if "ci" in r]
        summary = {
            "truth": truth,
            "replications": n_reps,
            "n": n_obs,
            "seed": seed,
            "n_failed": len(failures),
            "mean_ame": float(np.mean(ames)),
            "bias": float(np.mean(ames) - truth),
            "sd": float(np.std(ames, ddof=1)) if ames.size > 1 else 0.0,
            "rmse": float(np.sqrt(np.mean((ames - truth) ** 2))),
            "theta_share": {
                "-1": thetas.count(-1) / len(kept),
                "0": thetas.count(0) / len(kept),
                "+1": thetas.count(1) / len(kept),
            },
            "coverage": (sum(covered) / len(covered)) if covered else None,
        }
        _write_text(output, emit_report({"validation": summary}, config, provenance))
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        _fail(output, err, provenance)


# ---------------------------------------------------------------------------
# diagnostics


def diagnostics_bundle(
    sample: Sample,
    *,
    kde_bandwidth: float = 100.0,
    levels=None,
    min_level_count: int = 10,
    grid_points: int = 50,
    mean_bandwidth: float | None = None,
) -> tuple[DiagnosticsBundle, list[float]]:
    """Descriptive curves for a sample: conditional mean, per-level KDE, QQ.

    Levels default to the distinct treatment values; any level with fewer
    than ``min_level_count`` observations is skipped (returned in the
    second element) with a warning.  The conditional mean uses the exact
    level average wherever a grid point is a mass point of the treatment
    and a local-linear fit elsewhere.
    """
    if kde_bandwidth <= 0:
        raise InputError("KDE bandwidth must be positive")
    x, y = sample.treatment, sample.outcome
    if levels is None:
        levels = np.unique(x)
    kept, skipped = [], []
    for level in levels:
        count = int(np.sum(x == level))
        if count >= min_level_count:
            kept.append(float(level))
        else:
            skipped.append(float(level))
            warnings.warn(
                f"level {level:g} has {count} < {min_level_count} observations; skipped",
                stacklevel=2,
            )

    unique = np.unique(x)
    if unique.size <= grid_points:
        grid = unique.astype(float)
    else:
        grid = np.linspace(float(x.min()), float(x.max()), grid_points)
    if mean_bandwidth is None:
        spread = float(np.std(x))
        mean_bandwidth = 1.06 * (spread if spread > 0 else 1.0) * x.size ** (-0.2)
    rows = []
    for g in grid:
        at_level = y[x == g]
        if at_level.size >= 2:
            # mass point: the exact level mean beats any smoother here
            mean = float(at_level.mean())
            half = 1.959963984540054 * float(at_level.std(ddof=1)) / np.sqrt(at_level.size)
        else:
            try:
                fit = local_linear(x, y, g, mean_bandwidth)
            except (InputError, DegenerateCaseError):
                continue  # isolated grid point with no local support
            mean = fit.intercept
            weights = intercept_weights(x, g, mean_bandwidth)
            residual = y - (fit.intercept + fit.slope * (x - g))
            variance = float(np.sum(weights**2 * residual**2))
            half = 1.959963984540054 * np.sqrt(variance)
        rows.append((float(g), mean, mean - half, mean + half))
    conditional_mean = np.array(rows)

    kde_levels, qq_levels = [], []
    for level in kept:
        values = np.sort(y[x == level])
        lo = values[0] - kde_bandwidth
        hi = values[-1] + kde_bandwidth
        out_grid = np.linspace(lo, hi, 256)
        u = (out_grid[:, None] - values[None, :]) / kde_bandwidth
        density = kernel_eval(KernelKind.EPANECHNIKOV, u).mean(axis=1) / kde_bandwidth
        kde_levels.append(LevelCurve(level=level, grid=out_grid, values=density))

        k = min(99, values.size)
        probs = (np.arange(1, k + 1) - 0.5) / k
        theoretical = values.mean() + values.std(ddof=1) * ndtri(probs)
        empirical = np.quantile(values, probs)
        qq_levels.append(LevelCurve(level=level, grid=theoretical, values=empirical))

    bundle = DiagnosticsBundle(
        conditional_mean=conditional_mean,
        kde_levels=tuple(kde_levels),
        qq_levels=tuple(qq_levels),
    )
    return bundle, skipped


def _write_level_csv(path: Path, curves, grid_name: str, value_name: str) -> None:
    lines = [f"level,{grid_name},{value_name}"]
    for curve in curves:
        for g, v in zip(curve.grid, curve.values):
            lines.append(f"{float(curve.level)!r},{float(g)!r},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@main.command()
@_sample_options
@click.option("--outdir", required=True, type=click.Path())
@click.option("--kde-bandwidth", type=float, default=100.0, show_default=True,
              help="Epanechnikov KDE half-width in outcome units.")
@click.option("--levels", default=None, help="Comma list of treatment levels.")
@click.option("--min-level-count", type=int, default=10, show_default=True)
@click.option("--grid-points", type=int, default=50, show_default=True)
@click.option("--mean-bandwidth", type=float, default=None)
def diagnostics(input_path, treatment_col, outcome_col, bunch_value, control_cols, control_kinds,
                match_tolerance, delimiter, side, outdir, kde_bandwidth, levels,
                min_level_count, grid_points, mean_bandwidth):
    """Write conditional-mean, per-level KDE, and QQ CSVs for a sample."""
    try:
        sample, _ = _load(input_path, treatment_col, outcome_col, bunch_value,
                          control_cols, control_kinds, match_tolerance, delimiter, side)
        if levels is not None:
            try:
                levels = [float(tok) for tok in levels.split(",") if tok.strip()]
            except ValueError:
                raise InputError(f"--levels expects a comma list of numbers, got {levels!r}") from None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            bundle, skipped = diagnostics_bundle(
                sample,
                kde_bandwidth=kde_bandwidth,
                levels=levels,
                min_level_count=min_level_count,
                grid_points=grid_points,
                mean_bandwidth=mean_bandwidth,
            )
        for message in caught:
            click.echo(f"warning: {message.message}", err=True)
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        mean_path = out / "conditional_mean.csv"
        mean_lines = ["x,mean_y,ci_lo,ci_hi"]
        mean_lines += [",".join(repr(float(v)) for v in row) for row in bundle.conditional_mean]
        mean_path.write_text("\n".join(mean_lines) + "\n", encoding="utf-8")
        _write_level_csv(out / "kde.csv", bundle.kde_levels, "outcome", "density")
        _write_level_csv(out / "qq.csv", bundle.qq_levels, "theoretical", "empirical")
        body = {
            "schema_version": 1,
            "provenance": {"version": __version__, "seed": None, "input": str(input_path)},
            "files": [str(mean_path), str(out / "kde.csv"), str(out / "qq.csv")],
            "levels": [curve.level for curve in bundle.kde_levels],
            "levels_skipped": skipped,
        }
        click.echo(json.dumps(body, indent=2))
    except (InputError, DegenerateCaseError, UnreliableInferenceError) as err:
        _fail("-", err, {"version": __version__, "seed": None})


if __name__ == "__main__":
    main()
