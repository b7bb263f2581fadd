"""Command line frontend: phantoms, segmentation runs, mesh inspection.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical abort
(the report of the last consistent state is still written).
"""

import argparse
import json
import sys


from .driver import RunAborted, RunConfig, run, surface_metrics
from .fem import TimeStepControl
from .mesh import SurfaceSet, export_obj, import_obj, make_seed
from .quality import QualityParams
from .topology import DetectionParams
from .voxels import VoxelImageError, load_raw, make_phantom, save_raw

CONFIG_ERROR = 2
NUMERICAL_ERROR = 3


def _parse_dims(text):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError("dims must look like 100x60x60")
    return tuple(int(p) for p in parts)


def _parse_box(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise ValueError("domain must be xmin,ymin,zmin,xmax,ymax,zmax")
    return (vals[0], vals[1], vals[2]), (vals[3], vals[4], vals[5])


def cmd_phantom(args):
    params = {}
    if args.radius is not None:
        params["radius"] = args.radius
    if args.center is not None:
        params["center"] = tuple(float(v) for v in args.center.split(","))
    if args.ring_radius is not None:
        params["ring_radius"] = args.ring_radius
    if args.tube_radius is not None:
        params["tube_radius"] = args.tube_radius
    domain = _parse_box(args.domain) if args.domain else None
    grid = make_phantom(args.kind, _parse_dims(args.dims), domain, **params)
    header, payload = save_raw(grid, args.out + ".json", args.out + ".raw")
    print("wrote %s and %s (%d voxels)" % (header, payload, grid.n_voxels))
    return 0


def _seed_from_spec(spec, index):
    shape = spec.get("shape")
    params = dict(spec.get("params", {}))
    mesh = make_seed(shape, **params)
    mesh.surface_id = int(spec.get("surface_id", index + 1))
    regions = spec.get("regions", (1, 2))
    return mesh, (int(regions[0]), int(regions[1]))


def build_run_setup(config):
    """RunConfig plus seed surfaces from one parsed JSON document."""
    control = TimeStepControl.with_tau_bounds(
        config["control"]["dxn_min"],
        config["control"]["dxn_max"],
        int(config["control"].get("lam_t", 10)),
        float(config["tau0"]),
    )
    detection = DetectionParams(**config["detection"])
    quality = QualityParams(**config["quality"]) if config.get("quality") else None
    run_config = RunConfig(
        sigma=float(config["sigma"]),
        lam=float(config["lam"]),
        tau0=float(config["tau0"]),
        control=control,
        detection=detection,
        quality=quality,
        band_width=int(config.get("band_width", 3)),
        max_steps=int(config.get("max_steps", 500)),
        stop_eps=config.get("stop_eps"),
        stop_consecutive=int(config.get("stop_consecutive", 10)),
        solver=config.get("solver", "cg"),
    )
    seeds = config.get("seeds", [])
    if not seeds:
        raise ValueError("config must list at least one seed surface")
    meshes, topo = [], []
    for i, spec in enumerate(seeds):
        mesh, regions = _seed_from_spec(spec, i)
        meshes.append(mesh)
        topo.append(regions)
    return run_config, SurfaceSet(meshes, topo)


def cmd_segment(args):
    try:
        with open(args.config) as fh:
            config = json.load(fh)
        run_config, seeds = build_run_setup(config)
        grid = load_raw(args.image)
    except (OSError, ValueError, KeyError, TypeError, VoxelImageError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return CONFIG_ERROR

    try:
        surfaces, report = run(grid, seeds, run_config)
        code = 0
    except RunAborted as aborted:
        surfaces, report = aborted.surfaces, aborted.report
        print("numerical abort: %s" % aborted.cause, file=sys.stderr)
        code = NUMERICAL_ERROR

    export_obj(surfaces, args.out_prefix + ".obj")
    with open(args.out_prefix + ".report.json", "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    if code == 0:
        print(
            "finished after %d steps (%s); %d surfaces, %d events"
            % (report.steps, report.stop_reason, surfaces.n_surfaces, len(report.events))
        )
    return code


def cmd_mesh_info(args):
    surfaces = import_obj(args.mesh)
    print(json.dumps(surface_metrics(surfaces), indent=2, sort_keys=True))
    return 0


def cmd_export(args):
    params = json.loads(args.params) if args.params else {}
    mesh = make_seed(args.shape, **params)
    export_obj(SurfaceSet([mesh], [(1, 2)]), args.out)
    print("wrote %s (%d faces)" % (args.out, mesh.n_faces))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="surfseg",
        description="3D image segmentation with evolving triangulated surfaces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic binary volume")
    p.add_argument("--kind", required=True,
                   choices=["two_balls", "one_ball", "ball", "torus"])
    p.add_argument("--dims", required=True, help="e.g. 100x60x60")
    p.add_argument("--domain", help="xmin,ymin,zmin,xmax,ymax,zmax")
    p.add_argument("--radius", type=float)
    p.add_argument("--center", help="cx,cy,cz")
    p.add_argument("--ring-radius", dest="ring_radius", type=float)
    p.add_argument("--tube-radius", dest="tube_radius", type=float)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment", help="run a segmentation from a config file")
    p.add_argument("--image", required=True, help="volume header (.json)")
    p.add_argument("--config", required=True, help="run configuration (.json)")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("mesh-info", help="print metrics of an OBJ surface file")
    p.add_argument("--mesh", required=True)
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("export", help="write a seed surface as OBJ")
    p.add_argument("--shape", required=True, choices=["sphere", "capsule", "torus"])
    p.add_argument("--params", help='JSON, e.g. {"radius": 0.8, "subdivisions": 3}')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CONFIG_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (VoxelImageError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
