"""Command-line entry point.

Subcommands: ``run``, ``shape-fit``, ``report`` and ``selftest``.
"""
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import scenario, shape
from .correlation import LandmarkDatabase
from .errors import ConfigError, SnacError
from .harmonics import fibonacci_sphere

log = logging.getLogger("snac")


def _cmd_run(args):
    config = scenario.ScenarioConfig.from_yaml(args.config)
    if args.orbits is not None:
        config.n_orbits = args.orbits
        config.validate()
    run_dir = args.out or os.path.join("runs", os.path.splitext(os.path.basename(args.config))[0])
    os.makedirs(run_dir, exist_ok=True)
    start = time.perf_counter()

    def progress(k, n, nav):
        if not args.quiet and (k % 25 == 0 or k == n):
            print(f"epoch {k}/{n}  landmarks {len(nav.est.landmark_ids)}  database {len(nav.db)}  {time.perf_counter() - start:.0f}s", flush=True)

    rep = scenario.run(config, run_dir, progress)
    print(rep.to_json())
    print(f"outputs written to {run_dir}")
    return 0


def _cmd_shape_fit(args):
    db = LandmarkDatabase.read_csv(args.landmark_db)
    pts, covs = db.positions()
    if len(pts) == 0:
        raise ConfigError(f"{args.landmark_db} holds no landmarks")
    var = None if args.unweighted else shape.radius_covariance(pts, covs)
    fit = shape.fit_shape(pts, args.degree, args.alpha, var, args.method)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.landmark_db)), f"shape_fit_deg{args.degree}.txt")
    fit.coeffs.write(out, args.alpha, fit.nu)
    result = {"n_points": int(len(pts)), "degree": args.degree, "alpha": args.alpha, "method": args.method, "nu": float(fit.nu), "coefficients": out}
    if args.truth:
        truth = shape.ShapeCoefficients.read(args.truth)
        lon, lat = fibonacci_sphere(20000)
        ref = truth.evaluate(lon, lat)
        rmse = shape.shape_rmse(fit.coeffs, lon, lat, ref)
        result["rmse"] = rmse
        result["rmse_fraction_of_radius"] = rmse / float(np.mean(ref))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _cmd_report(args):
    if not os.path.isfile(os.path.join(args.run_dir, "config.yaml")):
        raise ConfigError(f"{args.run_dir} is not a run directory")
    rep = scenario.report(args.run_dir)
    if args.write:
        rep.write(os.path.join(args.run_dir, "report.json"))
        scenario.emit_plots(args.run_dir)
    print(rep.to_json())
    return 0


def _check(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
    return bool(ok)


def _cmd_selftest(args):
    from . import kernels, stereo
    from .dynamics import gravity
    from .kernels import _gravity_py

    rng = np.random.default_rng(0)
    results = []

    field = gravity.GravityField.zeros(4.4628e5, 16000.0, 8)
    Cbar = field.Cbar.copy()
    Sbar = field.Sbar.copy()
    for n in range(2, 9):
        Cbar[n, : n + 1] = rng.normal(0.0, 0.01, n + 1)
        Sbar[n, 1 : n + 1] = rng.normal(0.0, 0.01, n)
    field = gravity.GravityField(field.mu, field.ref_radius, Cbar, Sbar)
    pos = rng.normal(0.0, 1.0, (64, 3))
    pos = 45000.0 * pos / np.linalg.norm(pos, axis=1)[:, None]
    a = gravity.gravity_accel_body(field, pos)
    kernels_backup = kernels.sh_accel_body
    try:
        kernels.sh_accel_body = _gravity_py.sh_accel_body
        b = gravity.gravity_accel_body(field, pos)
    finally:
        kernels.sh_accel_body = kernels_backup
    err = float(np.max(np.abs(a - b) / np.linalg.norm(b, axis=1)[:, None]))
    results.append(_check(f"gravity kernel ({kernels.BACKEND}) matches numpy reference", err < 1e-12, f"max rel diff {err:.1e}"))

    lon, lat = fibonacci_sphere(400)
    pts = 8000.0 * np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    fit = shape.fit_shape(pts, 4, method="none")
    r_fit = fit.coeffs.evaluate(lon, lat)
    results.append(_check("sphere recovered by shape fit", np.max(np.abs(r_fit - 8000.0)) < 1e-6, f"max radius error {np.max(np.abs(r_fit - 8000.0)):.1e} m"))

    from .frames import CameraModel, intrinsic_matrix, nadir_camera_attitude, project

    K = intrinsic_matrix(2500.0, 1024.0, 768.0)
    L = np.array([100.0, -200.0, 8000.0])
    cams = []
    for x in (0.0, 10000.0):
        p = np.array([x, 0.0, 45000.0])
        R = nadir_camera_attitude(p, np.array([1.0, 0.0, 0.0]))
        cams.append(CameraModel(K, 2048, 1536, p, R))
    pix = [project(c, L).as_array() for c in cams]
    est = stereo.triangulate_linear(cams, pix)
    results.append(_check("two-view triangulation of an exact point", np.linalg.norm(est - L) < 1e-3, f"error {np.linalg.norm(est - L):.1e} m"))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="snac", description="Swarm navigation and small-body characterization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario from a YAML config")
    p.add_argument("config")
    p.add_argument("-o", "--out", help="run directory (default runs/<config name>)")
    p.add_argument("--orbits", type=float, help="override the number of orbits")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("shape-fit", help="fit shape coefficients to a landmark database CSV")
    p.add_argument("landmark_db")
    p.add_argument("--degree", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.84, help="power-law exponent of the shape spectrum")
    p.add_argument("--method", choices=("power", "identity", "none"), default="power")
    p.add_argument("--unweighted", action="store_true", help="ignore landmark covariances")
    p.add_argument("--truth", help="truth shape coefficient file, for an RMSE figure")
    p.add_argument("-o", "--out", help="coefficient output path")
    p.set_defaults(func=_cmd_shape_fit)

    p = sub.add_parser("report", help="recompute the run report from persisted logs")
    p.add_argument("run_dir")
    p.add_argument("--write", action="store_true", help="also rewrite report.json and plot CSVs")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest", help="quick numerical consistency checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SnacError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
