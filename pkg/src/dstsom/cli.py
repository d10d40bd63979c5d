"""Command-line front end: ``dstsom {simulate,fit,predict,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .design import Variant, build_design, covariate_vector
from .inference import ConvergenceError, GridConfig, fit, predict
from .io import (
    DataError,
    RunConfig,
    fit_hash,
    load_fit,
    read_controls,
    read_grid,
    read_observations,
    save_fit,
    write_controls,
    write_csv,
    write_json,
    write_observations,
)
from .ordinal import Link, OrdinalScale
from .simulate import GroundTruth, simulate_dataset
from .spacetime import ARParams, MaternParams

log = logging.getLogger("dstsom")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3


def _grid_config(config: RunConfig, threads: int) -> GridConfig:
    g = config.raw["grid"]
    return GridConfig(
        z=tuple(float(v) for v in g.get("z", GridConfig.z)),
        dic_nodes=int(g.get("dic_nodes", GridConfig.dic_nodes)),
        threads=threads,
    )


def _load_data(config: RunConfig, spec):
    obs = read_observations(config.path("observations"))
    controls = read_controls(config.path("controls"))
    species = config.raw.get("species")
    if species is None:
        found = sorted({o.species for o in obs})
        if len(found) != 1:
            raise DataError(f"observations contain species {found}; set 'species' in the config")
        species = found[0]
    obs = [o for o in obs if o.species == species]
    controls = [e for e in controls if e.species == species]
    if not obs:
        raise DataError(f"no observations for species {species!r}")
    bad = [o.score for o in obs if not 1 <= o.score <= spec.scale.C]
    if bad:
        raise DataError(f"scores {sorted(set(bad))} outside 1..{spec.scale.C}")
    return obs, controls


def _fit_variant(config: RunConfig, variant: str | None, seed: int, threads: int):
    spec = config.model_spec(variant)
    obs, controls = _load_data(config, spec)
    try:
        design = build_design(obs, controls, spec)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    result = fit(design, spec, _grid_config(config, threads), seed=seed)
    return spec, result


def cmd_simulate(config: RunConfig, out: Path, seed: int) -> None:
    s = config.raw["simulation"]
    spec = config.model_spec()
    rng = np.random.default_rng(seed)
    truth = GroundTruth.random_sites(
        int(s["n_sites"]),
        float(s["extent_km"]),
        rng,
        matern=MaternParams(float(s["sigma"]), float(s["range"])),
        ar=ARParams(float(s["rho"])),
        beta_cut=s["beta_cut"],
        beta_global=s["beta_global"],
        scale=OrdinalScale(spec.scale.C),
        link=Link(spec.link),
        p_forest=float(s["p_forest"]),
        p_control=float(s["p_control"]),
        species=s["species"],
        seed=seed,
    )
    data = simulate_dataset(truth, s["years"], int(s["n_obs"]), rng)
    write_observations(out / "observations.csv", data.observations)
    write_controls(out / "controls.csv", data.controls)
    write_json(out / "truth.json", {**truth.to_dict(), "years": list(map(int, s["years"])), "n_obs": int(s["n_obs"])})
    log.info("wrote %d observations and %d control events to %s", len(data.observations), len(data.controls), out)


def cmd_fit(config: RunConfig, out: Path, seed: int, threads: int) -> None:
    spec, result = _fit_variant(config, None, seed, threads)
    write_csv(out / "summary.csv", ("parameter", "q0.025", "q0.50", "q0.975"), result.summary)
    write_csv(out / "dic.csv", ("model", "DIC"), [(spec.variant.value, result.dic.dic)])
    save_fit(out / "fit.npz", result, fit_hash(config, spec))
    log.info("fit %s: DIC %.3f over %d grid points", spec.variant.value, result.dic.dic, len(result.weights))


def cmd_predict(config: RunConfig, out: Path, seed: int, fit_path: Path | None) -> None:
    archive = fit_path or out / "fit.npz"
    result, stored = load_fit(archive)
    if stored != fit_hash(config, config.model_spec()):
        raise DataError(f"{archive} was fitted to different data or settings; rerun fit")
    grid_path = config.path("prediction_grid")
    if grid_path is None:
        raise DataError("config has no prediction_grid")
    grid = read_grid(grid_path)
    years = config.raw.get("prediction_years") or [int(y) for y in result.years]
    n = len(grid.locations)
    locs = np.tile(grid.locations, (len(years), 1))
    yrs = np.repeat(np.asarray(years, dtype=int), n)
    cov = np.array(
        [
            covariate_vector(grid.ctrl[i % n], grid.d[i % n], yrs[i], result.year_mid, grid.habitat[i % n], grid.access_km[i % n])
            for i in range(len(yrs))
        ]
    )
    pred = predict(result, locs, yrs, cov, n_draws=int(config.raw["samples"]), seed=seed)
    labels = result.spec.scale.labels
    rows = []
    for i in range(len(yrs)):
        for c, label in enumerate(labels):
            rows.append((float(locs[i, 0]), float(locs[i, 1]), int(yrs[i]), label, *map(float, pred.quantiles[i, c])))
    write_csv(out / "predictions.csv", ("x_km", "y_km", "year", "category", "q0.05", "q0.50", "q0.95"), rows)
    write_json(out / "predict_audit.json", {"max_abs_prob_sum_error": pred.max_sum_error, "draws": int(config.raw["samples"]), "targets": int(len(yrs))})
    if pred.max_sum_error >= 1e-10:
        log.warning("category probabilities deviate from 1 by %.3g", pred.max_sum_error)


def cmd_compare(config: RunConfig, out: Path, seed: int, threads: int, variants: list[str]) -> int:
    if len(variants) < 2:
        raise DataError("compare needs at least two variants")
    for v in variants:
        try:
            Variant(v)
        except ValueError:
            raise DataError(f"unknown variant {v!r}") from None
    done: list[tuple[str, float]] = []
    for v in variants:
        try:
            _, result = _fit_variant(config, v, seed, threads)
        except ConvergenceError as exc:
            if done:
                write_csv(out / "dic_compare.csv", ("model", "DIC"), sorted(done, key=lambda r: r[1]))
            print(f"error: variant {v} failed ({exc}); partial results for {[d[0] for d in done]}", file=sys.stderr)
            return EXIT_CONVERGENCE
        done.append((v, result.dic.dic))
    table = sorted(done, key=lambda r: r[1])
    write_csv(out / "dic_compare.csv", ("model", "DIC"), table)
    for name, value in table:
        print(f"{name},{value:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstsom", description="Spatio-temporal sequential ordinal models.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
    common.add_argument("--threads", type=int, default=1, help="workers for grid evaluation")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("fit", parents=[common], help="fit the configured model")
    p = sub.add_parser("predict", parents=[common], help="category probabilities on a grid")
    p.add_argument("--fit", type=Path, default=None, help="fit archive (default: OUT/fit.npz)")
    c = sub.add_parser("compare", parents=[common], help="DIC table over model variants")
    c.add_argument("--variants", nargs="+", default=["M1", "M2", "M3"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        config = RunConfig.load(args.config)
        seed = config.seed if args.seed is None else args.seed
        out = args.out or config.path("output_dir")
        if args.threads < 1:
            raise DataError("--threads must be at least 1")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "simulate":
                cmd_simulate(config, out, seed)
            elif args.command == "fit":
                cmd_fit(config, out, seed, args.threads)
            elif args.command == "predict":
                cmd_predict(config, out, seed, args.fit)
            else:
                return cmd_compare(config, out, seed, args.threads, args.variants)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        for key, val in (getattr(exc, "diagnostics", None) or {}).items():
            print(f"  {key}: {val}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
