"""Command line interface.

Verbs: `presets` lists the built-in experiments, `generate` writes
synthetic boundary measurements, `reconstruct` runs the inversion and
writes its artifacts, `verify` runs the acceptance test suite. All output
files embed the configuration hash, and a rerun with an unchanged
configuration overwrites them with identical bytes.

Settings resolve in three layers: preset defaults, then a `--config` file
(INI-style sections of key = value pairs), then command-line flags.
"""

from __future__ import annotations

import configparser
import json
import logging
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from .inversion import (
    ConfigError,
    EpsilonSchedule,
    ReconstructionError,
    reconstruct,
    threshold_and_compare,
)
from .mesh import build_square_mesh
from .presets import PRESETS, get_preset
from .synth import NoiseSpec, generate_measurements, load_case_from_file, write_measurement


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logs.")
def main(verbose):
    """Cavity identification from boundary displacement measurements."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _preset_or_fail(name):
    try:
        return get_preset(name)
    except KeyError as exc:
        raise click.UsageError(str(exc)) from None


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % text)


def _parse_schedule(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts or len(parts) > 2:
        raise ValueError("expected 'switch_iteration[, divisor]', got %r" % text)
    divisor = float(parts[1]) if len(parts) == 2 else 4.0
    return EpsilonSchedule(int(parts[0]), divisor)


def _parse_sides(text):
    sides = tuple(p for p in text.replace(",", " ").split() if p)
    if not sides:
        raise ValueError("no sides given")
    return sides


_CONFIG_KEYS = {
    "preset": str,
    "output_dir": str,
    "resolution": int,
    "generator_resolution": int,
    "noise": float,
    "seed": int,
    "snapshot_every": int,
    "threshold": float,
    "mu": float,
    "lam": float,
    "delta": float,
    "alpha_tilde": float,
    "tau": float,
    "epsilon": float,
    "tol": float,
    "d_band": float,
    "refine_period": int,
    "refine_fraction": float,
    "epsilon_schedule": _parse_schedule,
    "max_iterations": int,
    "stop_norm": str,
    "backtracking": _parse_bool,
    "dirichlet_sides": _parse_sides,
}

# keys that map straight onto RunConfig fields
_RUN_KEYS = frozenset(
    (
        "mu", "lam", "delta", "alpha_tilde", "tau", "epsilon", "tol",
        "resolution", "d_band", "refine_period", "refine_fraction",
        "epsilon_schedule", "max_iterations", "stop_norm", "backtracking",
        "dirichlet_sides", "seed",
    )
)


def _read_config_file(path):
    """Flat key = value settings grouped under arbitrary [sections]."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise click.UsageError("cannot read config file %s: %s" % (path, exc))
    items = list(parser.defaults().items())
    for section in parser.sections():
        items.extend(parser.items(section))
    values = {}
    for key, raw in items:
        key = key.replace("-", "_")
        if key == "max_iter":
            key = "max_iterations"
        if key not in _CONFIG_KEYS:
            raise click.UsageError("unknown config key %r in %s" % (key, path))
        try:
            values[key] = _CONFIG_KEYS[key](raw)
        except (ValueError, ConfigError) as exc:
            raise click.UsageError("config key %r in %s: %s" % (key, path, exc))
    return values


def _resolve_preset(preset_name, fileconf):
    name = preset_name or fileconf.get("preset")
    if name is None:
        raise click.UsageError(
            "either --preset or a config file naming one is required"
        )
    return _preset_or_fail(name)


def _write_phase_csv(path, mesh, values):
    with open(path, "w") as fh:
        fh.write("vertex,x,y,v\n")
        for i, ((x, y), val) in enumerate(zip(mesh.vertices, values)):
            fh.write("%d,%.17g,%.17g,%.17g\n" % (i, x, y, val))


@main.command("presets")
def list_presets():
    """List the built-in experiment presets."""
    for p in PRESETS.values():
        click.echo("%-8s %s" % (p.name, p.description))
        click.echo(
            "         mu=%g lam=%g delta=%g alpha=%g tau=%g eps=%.6g "
            "refine=%d noise=%g%%"
            % (
                p.mu,
                p.lam,
                p.delta,
                p.alpha_tilde,
                p.tau,
                p.epsilon,
                p.refine_period,
                p.noise_level,
            )
        )
        for i, expr in enumerate(p.tractions, start=1):
            click.echo("         g%d = %s" % (i, expr))
        click.echo("         target: %s" % p.target.describe())


@main.command()
@click.option("--preset", "preset_name", default=None, help="Experiment preset name.")
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Settings file; command-line flags override it.",
)
@click.option("--output-dir", type=click.Path(file_okay=False), default=None)
@click.option("--resolution", type=int, default=None, help="Working mesh cells per side.")
@click.option("--generator-resolution", type=int, default=None)
@click.option("--noise", type=float, default=None, help="Noise level in percent.")
@click.option("--seed", type=int, default=None)
def generate(preset_name, config_file, output_dir, resolution, generator_resolution, noise, seed):
    """Write synthetic boundary measurements for a preset."""
    fileconf = _read_config_file(config_file) if config_file else {}
    preset = _resolve_preset(preset_name, fileconf)
    resolution = resolution if resolution is not None else fileconf.get("resolution", preset.resolution)
    generator_resolution = (
        generator_resolution
        if generator_resolution is not None
        else fileconf.get("generator_resolution", preset.generator_resolution)
    )
    if generator_resolution <= resolution:
        raise click.UsageError("generator resolution must exceed the working resolution")
    seed = seed if seed is not None else fileconf.get("seed", 0)
    out = Path(output_dir if output_dir is not None else fileconf.get("output_dir", "."))
    overrides = {k: v for k, v in fileconf.items() if k in _RUN_KEYS}
    overrides["resolution"] = resolution
    overrides["seed"] = seed
    try:
        config = preset.config(**overrides)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    level = preset.noise_level if noise is None else noise
    if noise is None and "noise" in fileconf:
        level = fileconf["noise"]
    spec = NoiseSpec(level, seed=seed) if level > 0 else None

    mesh = build_square_mesh(resolution, config.dirichlet_sides)
    cases = generate_measurements(
        preset.target,
        preset.load_definitions(),
        generator_resolution,
        mesh,
        config.params,
        dirichlet_sides=config.dirichlet_sides,
        noise=spec,
        d0=config.d_band,
    )

    out.mkdir(parents=True, exist_ok=True)
    header = {
        "preset": preset.name,
        "mesh-resolution": resolution,
        "generator-resolution": generator_resolution,
        "target": preset.target.describe(),
        "noise-level-percent": level,
        "noise-seed": seed,
        "config-hash": config.hash(),
    }
    for case in cases:
        path = out / ("measurement_load%d.txt" % case.id)
        write_measurement(path, mesh, case.id, case.measurement, header)
        click.echo("wrote %s" % path)


@main.command("reconstruct")
@click.option("--preset", "preset_name", default=None, help="Experiment preset name.")
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Settings file; command-line flags override it.",
)
@click.option(
    "--data",
    "data_files",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Measurement files; omitted means measurements are synthesized in memory.",
)
@click.option("--output-dir", type=click.Path(file_okay=False), default=None)
@click.option("--max-iter", type=int, default=None)
@click.option("--tol", type=float, default=None)
@click.option("--stop-norm", type=click.Choice(["l2", "max"]), default=None)
@click.option("--resolution", type=int, default=None)
@click.option(
    "--snapshot-every",
    type=int,
    default=None,
    help="Snapshot period in iterations (0 disables; default 1000).",
)
@click.option("--threshold", type=float, default=None, help="Cavity threshold for metrics.")
@click.option("--seed", type=int, default=None)
def reconstruct_cmd(
    preset_name,
    config_file,
    data_files,
    output_dir,
    max_iter,
    tol,
    stop_norm,
    resolution,
    snapshot_every,
    threshold,
    seed,
):
    """Reconstruct the cavity of a preset from boundary measurements."""
    fileconf = _read_config_file(config_file) if config_file else {}
    preset = _resolve_preset(preset_name, fileconf)
    overrides = {k: v for k, v in fileconf.items() if k in _RUN_KEYS}
    overrides["seed"] = seed if seed is not None else fileconf.get("seed", 0)
    if max_iter is not None:
        overrides["max_iterations"] = max_iter
    if tol is not None:
        overrides["tol"] = tol
    if stop_norm is not None:
        overrides["stop_norm"] = stop_norm
    if resolution is not None:
        overrides["resolution"] = resolution
    try:
        config = preset.config(**overrides)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if snapshot_every is None:
        snapshot_every = fileconf.get("snapshot_every", 1000)
    if threshold is None:
        threshold = fileconf.get("threshold", 0.5)
    out = Path(output_dir if output_dir is not None else fileconf.get("output_dir", "."))

    mesh = build_square_mesh(config.resolution, config.dirichlet_sides)
    definitions = dict(preset.load_definitions())
    if data_files:
        loads = []
        for path in data_files:
            case = load_case_from_file(path, mesh, traction=None)
            if case.id not in definitions:
                raise click.UsageError(
                    "file %s names load %d, but the preset defines loads %s"
                    % (path, case.id, sorted(definitions))
                )
            loads.append(
                type(case)(case.id, definitions[case.id], case.measurement, case.source_trace)
            )
    else:
        noise_level = fileconf.get("noise", preset.noise_level)
        spec = NoiseSpec(noise_level, seed=config.seed) if noise_level > 0 else None
        loads = generate_measurements(
            preset.target,
            preset.load_definitions(),
            fileconf.get("generator_resolution", preset.generator_resolution),
            mesh,
            config.params,
            dirichlet_sides=config.dirichlet_sides,
            noise=spec,
            d0=config.d_band,
        )

    out.mkdir(parents=True, exist_ok=True)

    last_nv = [mesh.n_vertices]

    def snapshot(record, current_mesh, phase):
        if current_mesh.n_vertices != last_nv[0]:
            last_nv[0] = current_mesh.n_vertices
            path = out / ("mesh_refined_%06d.vtk" % (record.iteration - 1))
            current_mesh.export_vtk(
                path,
                point_data={"v": phase.values},
                title="refined mesh after iteration %d, config %s"
                % (record.iteration - 1, config.hash()),
            )
        if snapshot_every and record.iteration % snapshot_every == 0:
            stem = "snapshot_%06d" % record.iteration
            current_mesh.export_vtk(
                out / (stem + ".vtk"),
                point_data={"v": phase.values},
                title="phase field, iteration %d, config %s"
                % (record.iteration, config.hash()),
            )
            _write_phase_csv(out / (stem + ".csv"), current_mesh, phase.values)

    history = None
    failure = None
    try:
        history = reconstruct(mesh, loads, config, on_iteration=snapshot)
    except ReconstructionError as exc:
        history = exc.history
        failure = str(exc)
        click.echo("reconstruction failed: %s" % failure, err=True)

    if history is not None and history.records:
        history.write_jsonl(out / "history.jsonl")
        metrics = {"config": config.to_dict(), "run": history.summary()}
        if failure is not None:
            metrics["error"] = failure
        if history.final_phase is not None:
            final = history.final_phase
            final.mesh.export_vtk(
                out / "final.vtk",
                point_data={"v": final.values},
                title="phase field, final, config %s" % config.hash(),
            )
            _write_phase_csv(out / "final.csv", final.mesh, final.values)
            quality = threshold_and_compare(final, preset.target, level=threshold)
            metrics["reconstruction"] = {
                "threshold": threshold,
                "empty": quality.empty,
                "area": quality.area,
                "centroid": None
                if quality.centroid is None
                else [float(c) for c in quality.centroid],
                "centroid_distance": None
                if not np.isfinite(quality.centroid_distance)
                else quality.centroid_distance,
                "jaccard": quality.jaccard,
                "n_components": quality.n_components,
            }
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo("wrote %s" % (out / "metrics.json"))

    if failure is not None:
        raise SystemExit(1)
    summary = history.summary()
    click.echo(
        "converged=%s iterations=%d objective=%.6e"
        % (summary["converged"], summary["iterations"], summary["final_objective"])
    )


@main.command(context_settings={"ignore_unknown_options": True})
@click.argument("pytest_args", nargs=-1, type=click.UNPROCESSED)
def verify(pytest_args):
    """Run the acceptance test suite (extra arguments go to pytest)."""
    root = Path(__file__).resolve().parents[2]
    suite = root / "tests" / "test_acceptance.py"
    if not suite.exists():
        raise click.ClickException("acceptance suite not found at %s" % suite)
    cmd = [sys.executable, "-m", "pytest", str(suite), "-v", *pytest_args]
    raise SystemExit(subprocess.call(cmd))


if __name__ == "__main__":
    main()
