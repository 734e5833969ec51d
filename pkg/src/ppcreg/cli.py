"""``ppcreg`` command line: phantom, render, gen-dataset, register, evaluate, loss-selftest.

Every subcommand takes an optional ``--config`` JSON file; explicit flags
override it. The effective configuration is printed as JSON and embedded in
the outputs. Exit codes: 0 success, 1 numeric/internal failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import losses
from .contour import ContourPointSet, canny3d
from .correspondence import CorrespondenceParams
from .drr import INTENSITY_MAPS, RenderStyle, load_image, render, write_pgm
from .errors import FormatError, InvalidArgumentError, PPCRegError
from .evaluation import SUCCESS_THRESHOLD, EvaluationRecord, export_report, mrpd
from .geometry import ProjectionGeometry, RigidTransform, carm_geometry, compose
from .ppc import RegistrationParams, register, write_overlay
from .simlab import DatasetConfig, generate_dataset, load_manifest, record_targets, view_transform
from .volume import PRESETS, PhantomSpec, load_volume, make_phantom, write_raw

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATA_DIR = Path(__file__).parent / "data"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling

GEOMETRY_DEFAULTS = {
    "source_isocenter": 750.0,
    "source_detector": 1200.0,
    "detector_size": [256, 256],
    "pixel_spacing": [1.2, 1.2],
}
STYLE_DEFAULTS = {"style": "bone", "threshold": 0.01, "intensity": "line_integral", "step": None}
CANNY_DEFAULTS = {"canny_sigma": 1.0, "canny_low": 0.0025, "canny_high": 0.005}

RENDER_DEFAULTS = {**GEOMETRY_DEFAULTS, **STYLE_DEFAULTS, "view": "AP"}
REGISTER_DEFAULTS = {
    **GEOMETRY_DEFAULTS, **CANNY_DEFAULTS,
    "style": "bone", "threshold": 0.01, "step": None,
    "max_iterations": 10, "stop_tol": 0.1, "angle_tol": 20.0, "max_points": 1024, "seed": 0,
    "robust": True, "patch": 11, "search_range": 30.0, "search_step": 0.5, "min_score": 0.3,
    "tie_tol": 0.01,
}
EVALUATE_DEFAULTS = {"threshold": SUCCESS_THRESHOLD, "targets": "contour"}


def effective_config(defaults: dict, config_path, overrides: dict) -> dict:
    """Defaults <- JSON file <- explicit flags; unknown keys are rejected."""
    cfg = dict(defaults)
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def echo(cfg: dict) -> None:
    print(json.dumps({"effective_config": cfg}, sort_keys=True))


def compact(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def geometry_from(cfg: dict) -> ProjectionGeometry:
    return carm_geometry(float(cfg["source_isocenter"]), float(cfg["source_detector"]),
                         tuple(int(v) for v in cfg["detector_size"]),
                         tuple(float(v) for v in cfg["pixel_spacing"]))


def style_from(cfg: dict) -> RenderStyle:
    return RenderStyle(cfg["style"], float(cfg["threshold"]), cfg.get("intensity", "line_integral"),
                       cfg["step"])


def read_pose(path) -> RigidTransform:
    """4x4 row-major matrix, bare or under a ``transform`` key."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read pose {path}: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("transform")
    return RigidTransform.from_matrix(doc)


def need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    if (args.spec is None) == (args.preset is None):
        raise UsageError("give exactly one of --spec or --preset")
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; known: {sorted(PRESETS)}")
        spec = PRESETS[args.preset]()
    else:
        try:
            spec = PhantomSpec.from_json(need_file(args.spec))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"invalid phantom spec: {exc}") from exc
    cfg = {"phantom": spec.to_dict()}
    echo(cfg)
    vol = make_phantom(spec)
    write_raw(args.out, vol.data, vol.spacing, vol.origin, {"name": vol.name, "config": compact(cfg)})
    print(f"wrote {args.out}")
    print(f"checksum {vol.checksum()}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = effective_config(RENDER_DEFAULTS, args.config, {
        "view": args.view, "style": args.style, "threshold": args.threshold,
        "intensity": args.intensity, "step": args.step,
        "detector_size": args.size, "pixel_spacing": args.pixel_spacing,
        "source_isocenter": args.sid, "source_detector": args.sdd,
    })
    vol = load_volume(need_file(args.volume))
    if cfg["view"] not in ("AP", "LAT"):
        raise UsageError("view must be AP or LAT")
    base = view_transform(cfg["view"], vol)
    T = base if args.pose is None else compose(read_pose(args.pose), base)
    cfg["pose"] = T.to_list()
    echo(cfg)
    img = render(vol, geometry_from(cfg), T, style_from(cfg))
    out = Path(args.out)
    write_raw(out.with_suffix(".img"), img.data.T[:, :, None], (*img.pixel_spacing, 1.0), (0, 0, 0),
              {"style": img.style, "config": compact(cfg)})
    write_pgm(out.with_suffix(".pgm"), img.data)
    print(f"wrote {out.with_suffix('.img')} {out.with_suffix('.pgm')}")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    defaults = DatasetConfig().to_dict()
    cfg = effective_config(defaults, args.config, {
        "n_samples": args.n_samples, "seed": args.seed,
        "mtre_range": args.mtre_range, "views": args.views, "styles": args.styles,
    })
    if int(cfg["n_samples"]) < 1:
        raise UsageError("n_samples must be >= 1")
    dcfg = DatasetConfig.from_dict(cfg)
    echo(dcfg.to_dict())
    if args.volume:
        vols = [load_volume(need_file(p)) for p in args.volume]
    else:
        vols = [make_phantom(PRESETS[args.preset]())]
    generate_dataset(vols, dcfg, args.out)
    print(f"manifest {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def registration_params(cfg: dict) -> RegistrationParams:
    corr = CorrespondenceParams(int(cfg["patch"]), float(cfg["search_range"]), float(cfg["search_step"]),
                                float(cfg["min_score"]), float(cfg["tie_tol"]))
    style = RenderStyle(cfg["style"], float(cfg["threshold"]), "line_integral", cfg["step"])
    return RegistrationParams(int(cfg["max_iterations"]), style, corr, float(cfg["stop_tol"]),
                              float(cfg["angle_tol"]), int(cfg["max_points"]), int(cfg["seed"]),
                              bool(cfg["robust"]))


def _register_one(vol, contours, fixed, T_init, geom, params, cfg, out_dir: Path, name: str) -> dict:
    try:
        result = register(vol, contours, fixed, T_init, geom, params)
    except PPCRegError as exc:
        doc = {"sample_id": name, "failed": True, "error": str(exc), "initial": T_init.to_list(),
               "transform": T_init.to_list(), "n_iterations": params.max_iterations,
               "effective_config": cfg}
        (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
        print(f"{name}: registration failed: {exc}")
        return doc
    result.to_json(out_dir / f"{name}.json", {"sample_id": name, "failed": False, "effective_config": cfg})
    write_overlay(out_dir / f"{name}_overlay.pgm", fixed, contours, geom, T_init, result.transform)
    print(f"{name}: converged={result.converged} iterations={len(result.iterations)} "
          f"wall_ms={result.wall_ms:.0f}")
    return result.to_dict()


def cmd_register(args) -> int:
    cfg = effective_config(REGISTER_DEFAULTS, args.config, {
        "max_iterations": args.max_iterations, "stop_tol": args.stop_tol,
        "search_range": args.search_range, "patch": args.patch, "min_score": args.min_score,
        "seed": args.seed, "threshold": args.threshold,
    })
    params = registration_params(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.manifest is not None:
        manifest_path = need_file(args.manifest)
        doc, records = load_manifest(manifest_path)
        root = manifest_path.parent
        geom = ProjectionGeometry.from_dict(doc["geometry"])
        cfg["geometry"] = geom.to_dict()
        echo(cfg)
        if args.limit is not None:
            records = records[: args.limit]
        cache = {}
        failures = 0
        for rec in records:
            if rec.volume_id not in cache:
                vol = load_volume(need_file(root / rec.files["volume"]))
                cache[rec.volume_id] = (vol, ContourPointSet.from_csv(need_file(root / rec.files["contours"]),
                                                                      rec.volume_id))
            vol, cs = cache[rec.volume_id]
            fixed = load_image(need_file(root / rec.files["fixed"]))
            res = _register_one(vol, cs, fixed, rec.T_j, geom, params, cfg, out, rec.sample_id)
            failures += bool(res.get("failed"))
        print(f"registered {len(records)} samples ({failures} failed)")
        return EXIT_OK

    for name in ("volume", "fixed", "init"):
        if getattr(args, name) is None:
            raise UsageError(f"--{name} is required without --manifest")
    vol = load_volume(need_file(args.volume))
    fixed = load_image(need_file(args.fixed))
    T_init = read_pose(need_file(args.init))
    geom = geometry_from(cfg)
    if args.contours is not None:
        cs = ContourPointSet.from_csv(need_file(args.contours), vol.name)
    else:
        cs = canny3d(vol, float(cfg["canny_sigma"]), float(cfg["canny_low"]), float(cfg["canny_high"]))
    echo(cfg)
    res = _register_one(vol, cs, fixed, T_init, geom, params, cfg, out, "result")
    return EXIT_FAIL if res.get("failed") else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = effective_config(EVALUATE_DEFAULTS, args.config,
                           {"threshold": args.threshold, "targets": args.targets})
    if cfg["targets"] not in ("contour", "corners"):
        raise UsageError("targets must be 'contour' or 'corners'")
    manifest_path = need_file(args.manifest)
    doc, records = load_manifest(manifest_path)
    root = manifest_path.parent
    geom = ProjectionGeometry.from_dict(doc["geometry"])
    results = Path(args.results)
    found = sorted(results.glob("*.json")) if results.is_dir() else []
    if not found:
        raise UsageError(f"no result files in {results}")
    echo(cfg)
    by_id = {r.sample_id: r for r in records}
    points = {}
    evals = []
    for path in found:
        res = json.loads(path.read_text())
        rec = by_id.get(res.get("sample_id"))
        if rec is None:
            continue
        if rec.volume_id not in points:
            vol = load_volume(need_file(root / rec.files["volume"]))
            cs = ContourPointSet.from_csv(need_file(root / rec.files["contours"]))
            points[rec.volume_id] = (vol, cs)
        vol, cs = points[rec.volume_id]
        if cfg["targets"] == "corners":
            targets = vol.corners()
        else:
            targets = record_targets(rec, cs.points, vol)
        T_est = RigidTransform.from_matrix(res["transform"])
        err = mrpd(T_est, rec.T_i, targets, geom)
        evals.append(EvaluationRecord(rec.sample_id, rec.mtre_init, err, int(res.get("n_iterations", 0)),
                                      float(res.get("wall_ms", 0.0)), float(cfg["threshold"])))
    if not evals:
        raise UsageError("no result file matches a manifest sample")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = export_report(evals, out / "records.csv", out / "summary.json", out / "ecdf.csv",
                            float(cfg["threshold"]),
                            {"targets": cfg["targets"], "effective_config": cfg})
    print(f"SR {summary.ratio:.4f} ({summary.n_success}/{summary.n}) "
          f"mRPD {summary.mrpd_mean:.3f} +- {summary.mrpd_std:.3f} mm (successes)")
    return EXIT_OK


def loss_selftest_values(fixture_dir=DATA_DIR) -> list[tuple[str, float, float]]:
    """``(name, computed, expected)`` for every loss kernel on the committed fixtures."""
    fx = np.load(Path(fixture_dir) / "loss_fixtures.npz")
    expected = json.loads((Path(fixture_dir) / "loss_expected.json").read_text())
    T = RigidTransform.from_matrix(fx["T"])
    T_hat = RigidTransform.from_matrix(fx["T_hat"])
    l_reg = losses.registration_loss(T, T_hat, fx["points"])
    l_flow = losses.flow_loss(fx["flow_pred"], fx["flow_gt"], fx["valid"])
    l_m = losses.motion_reg_loss(fx["dv"])
    l_dirn = losses.dirn_loss(l_reg, l_flow, l_m)
    l_bt = losses.barlow_twins_loss(fx["Z1"], fx["Z2"])
    l_afe = losses.adversarial_feature_loss(fx["p_sim"], fx["p_real"])
    computed = {
        "registration_loss": l_reg, "flow_loss": l_flow, "motion_reg_loss": l_m,
        "dirn_loss": l_dirn, "barlow_twins_loss": l_bt, "adversarial_feature_loss": l_afe,
        "total_loss": losses.total_loss(l_dirn, l_afe, l_bt),
    }
    return [(k, computed[k], float(expected[k])) for k in expected]


def cmd_loss_selftest(args) -> int:
    rows = loss_selftest_values(args.fixtures or DATA_DIR)
    bad = 0
    for name, got, want in rows:
        ok = abs(got - want) <= 1e-9 * max(1.0, abs(want))
        bad += not ok
        print(f"{name:26s} {got!r:>24} expected {want!r:>24} {'ok' if ok else 'MISMATCH'}")
    return EXIT_OK if bad == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppcreg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap kernel threads (default: PPCREG_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="build a phantom volume from a JSON spec or preset")
    s.add_argument("--spec")
    s.add_argument("--preset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("render", help="render a DRR (raw + PGM)")
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--config")
    s.add_argument("--pose", help="JSON 4x4 pose applied after the view preset")
    s.add_argument("--view", choices=("AP", "LAT"))
    s.add_argument("--style", choices=("bone", "realistic"))
    s.add_argument("--threshold", type=float)
    s.add_argument("--intensity", choices=INTENSITY_MAPS)
    s.add_argument("--step", type=float)
    s.add_argument("--size", type=int, nargs=2)
    s.add_argument("--pixel-spacing", type=float, nargs=2)
    s.add_argument("--sid", type=float, help="source-isocentre distance (mm)")
    s.add_argument("--sdd", type=float, help="source-detector distance (mm)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gen-dataset", help="generate a self-supervised sample set")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--volume", action="append", help="volume file (repeatable)")
    s.add_argument("--preset", default="vertebra-stack", choices=sorted(PRESETS))
    s.add_argument("--n-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mtre-range", type=float, nargs=2)
    s.add_argument("--views", nargs="+")
    s.add_argument("--styles", nargs="+")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("register", help="register a volume to a fixed image (or a whole manifest)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--limit", type=int)
    s.add_argument("--volume")
    s.add_argument("--fixed")
    s.add_argument("--init", help="JSON 4x4 initial pose")
    s.add_argument("--contours", help="contour CSV (default: run 3D Canny)")
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--stop-tol", type=float)
    s.add_argument("--search-range", type=float)
    s.add_argument("--patch", type=int)
    s.add_argument("--min-score", type=float)
    s.add_argument("--threshold", type=float, help="bone threshold of the moving DRR")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", help="score registration results against a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--results", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--threshold", type=float)
    s.add_argument("--targets", choices=("contour", "corners"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("loss-selftest", help="evaluate the loss kernels on committed fixtures")
    s.add_argument("--fixtures", help="fixture directory (default: bundled)")
    s.set_defaults(func=cmd_loss_selftest)
    return p


def set_threads(n) -> None:
    import numba

    if n is None:
        env = os.environ.get("PPCREG_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"PPCREG_THREADS must be an integer, got {env!r}") from None
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"thread count must be in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        set_threads(args.threads)
        return args.func(args)
    except (UsageError, InvalidArgumentError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PPCRegError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
