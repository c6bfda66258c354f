"""
Command-line entry point: model initialization, deformation, parameter dumps, scan fitting,
multi-view reconstruction, evaluation, synthetic cases, weight export and
run reports.
"""

import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from sqlalchemy.orm import Session

from asm_model import AsmParams, asm_forward, export_params_text, load_params, param_count, save_params
from camera import pose_to_vector
from consts import (
    DATABASE_URL,
    DEFAULT_THREADS,
    DEMO_ANNOTATIONS,
    DEMO_SKELETON,
    DEMO_TEMPLATE,
    GENERATED_DIR,
    KEYPOINT_LABELS,
    LOG_LEVEL,
    NOSE_TIP_INDEX,
    TAU_DIM,
    UV_RESOLUTION,
)
from database import get_run, init_database, list_runs, put_run, store_loss_history
from demo_assets import ensure_demo_assets
from errors import AsmError
from file_utils import read_json, write_json
from gmm_skinning import (
    bake_weight_texture,
    init_from_weight_map,
    init_isotropic,
    init_random,
    load_weight_map,
    normalized_weights,
)
from image_io import write_pgm
from mesh_core import Mesh, to_numpy
from mesh_io import load_obj, load_points, save_obj
from models import KeypointsFile, RunConfig, RunSummary, TemplateAnnotations
from multiview_recon import load_views, reconstruct, vertex_rmse
from pdf_generator import generate_run_report_pdf
from registration import Scan, fit_mesh, fit_scan, nme, rigid_init
from skeleton_rig import Skeleton, load_skeleton
from synth import make_case, write_case


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asm", description="Adaptive skinning face model toolkit.")
    parser.add_argument("--config", type=Path, help="RunConfig JSON; flags override its fields")
    parser.add_argument("--template", type=Path, help="template OBJ with UVs (default: bundled demo head)")
    parser.add_argument("--skeleton", type=Path, help="skeleton JSON (default: bundled 84-bone rig)")
    parser.add_argument("--annotations", type=Path, help="template keypoint / landmark annotations JSON")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--threads", type=int, help=f"torch thread count (default {DEFAULT_THREADS}, env ASM_THREADS)")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="loguru level (env ASM_LOG_LEVEL)")
    parser.add_argument("--db", default=DATABASE_URL, help="run ledger database URL (env ASM_DATABASE_URL)")
    parser.add_argument("--no-db", action="store_true", help="do not record runs in the ledger")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a model file with neutral parameters")
    p.add_argument("--K", type=int, help="Gaussian components per bone")
    p.add_argument("--weights", type=Path, help="per-vertex weight map JSON to fit the mixtures to")
    p.add_argument("--random-init", action="store_true", help="random mixtures instead of isotropic ones")
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "model.asmp")

    p = sub.add_parser("deform", help="apply parameters to the template")
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "deformed.obj")

    p = sub.add_parser("dump-params", help="per-bone JSON dump of a model file, for diffing")
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "params.json")

    p = sub.add_parser("fit-scan", help="register the model to a scan")
    p.add_argument("--scan", type=Path, required=True, help="scan points (PLY or OBJ)")
    p.add_argument("--keypoints", type=Path, required=True, help="keypoints JSON")
    p.add_argument("--init", type=Path, help="starting parameters (default: neutral)")
    p.add_argument("--K", type=int)
    p.add_argument("--variant", choices=("asm", "dbb", "ssm"))
    p.add_argument("--zeta-prior", choices=("init", "origin"))
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--crop-radius", type=float)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "fit_scan")

    p = sub.add_parser("reconstruct", help="multi-view reconstruction")
    p.add_argument("--views", type=Path, required=True, help="view manifest JSON")
    p.add_argument("--init", type=Path, help="starting parameters (default: neutral)")
    p.add_argument("--init-mesh", type=Path, help="predicted mesh (template topology) to register first")
    p.add_argument("--gt", type=Path, help="ground-truth OBJ for the vertex RMSE")
    p.add_argument("--K", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--optimize-focal", action="store_true")
    p.add_argument("--literal-photometric", action="store_true", help="use mean LNCC itself as the photometric term")
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "reconstruct")

    p = sub.add_parser("eval", help="vertex RMSE against a reference mesh, or NME against a scan")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--reference", type=Path, help="reference OBJ with the same vertex order")
    p.add_argument("--scan", type=Path)
    p.add_argument("--keypoints", type=Path)
    p.add_argument("--crop-radius", type=float)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "eval")

    p = sub.add_parser("synth", help="generate a synthetic case with ground truth")
    p.add_argument("--mode", choices=("scan", "views"), default="scan")
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--n-points", type=int, default=2000)
    p.add_argument("--K", type=int)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "synth")

    p = sub.add_parser("export-weights", help="bake skinning weights into UV textures")
    p.add_argument("--params", type=Path, help="parameters (default: neutral)")
    p.add_argument("--K", type=int)
    p.add_argument("--bone", default="all", help="bone name or 'all'")
    p.add_argument("--resolution", type=int, default=UV_RESOLUTION)
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "weights")

    p = sub.add_parser("report", help="PDF report of a recorded run")
    p.add_argument("--run-id", type=int, help="run to report (default: latest)")
    p.add_argument("--out", type=Path, default=GENERATED_DIR / "Run_Report.pdf")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = RunConfig.model_validate_json(args.config.read_text()) if args.config else RunConfig()
    updates = {}
    for name in ("template", "skeleton", "seed", "threads", "K"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    reg, mv = {}, {}
    for flag, field in (("variant", "variant"), ("zeta_prior", "zeta_prior"), ("crop_radius", "crop_radius")):
        value = getattr(args, flag, None)
        if value is not None:
            reg[field] = value
    if args.command == "fit-scan":
        if args.lr is not None:
            reg["learning_rate"] = args.lr
        if args.iterations is not None:
            reg["iterations"] = args.iterations
    if args.command == "reconstruct":
        if args.lr is not None:
            mv["lr"] = args.lr
        if args.iterations is not None:
            mv["iterations"] = args.iterations
        if args.optimize_focal:
            mv["optimize_focal"] = True
        if args.literal_photometric:
            mv["photometric_literal"] = True
    if reg:
        updates["reg"] = config.reg.model_copy(update=reg)
    if mv:
        updates["mv"] = config.mv.model_copy(update=mv)
    config = RunConfig.model_validate({**config.model_dump(), **updates})
    config.check_paths()
    return config


class Assets:
    """Template, skeleton and annotations a command works on."""

    def __init__(self, config: RunConfig, annotations_path: Optional[Path]):
        if config.template is None or config.skeleton is None or annotations_path is None:
            ensure_demo_assets()
        self.mesh: Mesh = load_obj(config.template or DEMO_TEMPLATE)
        self.skeleton: Skeleton = load_skeleton(config.skeleton or DEMO_SKELETON, self.mesh)
        self.annotations = TemplateAnnotations.model_validate(read_json(annotations_path or DEMO_ANNOTATIONS))

    def params_or_neutral(self, path: Optional[Path], K: int) -> AsmParams:
        if path is not None:
            return load_params(path, self.skeleton, self.mesh)
        return AsmParams.neutral(self.mesh, self.skeleton, K)

    def vertices(self, params: AsmParams) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(asm_forward(self.mesh, self.skeleton, params).vertices)


def read_keypoints(path: Path, annotations: TemplateAnnotations) -> Tuple[np.ndarray, List[int]]:
    keypoints = KeypointsFile.model_validate(read_json(path))
    model_ids = [keypoints.model[label] for label in KEYPOINT_LABELS] if keypoints.model else annotations.keypoint_vertices()
    return np.array(keypoints.scan_points(), dtype=np.float64), model_ids


def keypoint_span(points: np.ndarray) -> float:
    diffs = points[:, None, :] - points[None, :, :]
    return float(np.linalg.norm(diffs, axis=-1).max())


def cmd_init(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    mesh, skeleton = assets.mesh, assets.skeleton
    if args.weights:
        gmm = init_from_weight_map(mesh, skeleton, load_weight_map(args.weights, mesh, skeleton), config.K)
    elif args.random_init:
        gmm = init_random(mesh, skeleton, config.K, np.random.default_rng(config.seed))
    else:
        gmm = init_isotropic(mesh, skeleton, config.K)
    params = AsmParams(gmm, torch.zeros(skeleton.bone_count, TAU_DIM, dtype=torch.float64))
    normalized_weights(mesh, params.gmm)
    save_params(args.out, params, skeleton, mesh)
    count = param_count(skeleton.bone_count, config.K)
    print(f"param_count: {count} (J={skeleton.bone_count}, K={config.K})")
    return RunSummary(command="init", wall_time=time.perf_counter() - started, details={"param_count": count})


def cmd_deform(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    params = load_params(args.params, assets.skeleton, assets.mesh)
    save_obj(args.out, assets.vertices(params), assets.mesh)
    return RunSummary(command="deform", wall_time=time.perf_counter() - started)


def cmd_dump_params(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    params = load_params(args.params, assets.skeleton, assets.mesh)
    export_params_text(args.out, params, assets.skeleton)
    logger.info(f"Parameter dump written to {args.out}")
    return RunSummary(command="dump-params", wall_time=time.perf_counter() - started, details={"bones": params.bone_count})


def cmd_fit_scan(args, config: RunConfig, assets: Assets) -> Tuple[RunSummary, List[float]]:
    points, normals = load_points(args.scan)
    scan_keypoints, model_ids = read_keypoints(args.keypoints, assets.annotations)
    scan = Scan(points, scan_keypoints, normals)
    init = assets.params_or_neutral(args.init, config.K)
    result = fit_scan(assets.mesh, assets.skeleton, scan, config.reg, init, model_ids)

    out: Path = args.out
    save_params(out / "fitted.asmp", result.params, assets.skeleton, assets.mesh)
    with torch.no_grad():
        fitted = asm_forward(assets.mesh, assets.skeleton, result.params)
    save_obj(out / "fitted.obj", result.pose.apply(to_numpy(fitted.vertices)), assets.mesh)
    write_json(out / "pose.json", {"pose": result.pose.to_vector().tolist()})
    error = nme(fitted, scan, result.pose, config.reg.crop_radius, model_ids[NOSE_TIP_INDEX])
    return RunSummary(
        command="fit-scan",
        final_loss=result.final_loss,
        metric_name="nme",
        metric=error,
        iterations=len(result.history) - 1,
        wall_time=result.wall_time,
        details={"nme_over_keypoint_span": error / keypoint_span(scan_keypoints), "initial_loss": result.history[0]},
    ), result.history


def cmd_reconstruct(args, config: RunConfig, assets: Assets) -> Tuple[RunSummary, List[float]]:
    mesh, skeleton = assets.mesh, assets.skeleton
    init = assets.params_or_neutral(args.init, config.K)
    if args.init_mesh:
        target = load_obj(args.init_mesh)
        logger.info(f"Registering the model onto {args.init_mesh} before reconstruction.")
        init = fit_mesh(mesh, skeleton, target.vertices, config.mv.prior, init).params
    landmark_ids = assets.annotations.landmarks68
    views = load_views(args.views, model_landmarks=assets.vertices(init)[landmark_ids])
    result = reconstruct(mesh, skeleton, views, config.mv, init, landmark_ids)

    out: Path = args.out
    save_params(out / "recon.asmp", result.params, skeleton, mesh)
    vertices = assets.vertices(result.params)
    save_obj(out / "recon.obj", vertices, mesh)
    cameras = [
        {"pose": pose_to_vector(r, t).tolist(), "f": f} for (r, t), f in zip(result.poses, result.focals)
    ]
    write_json(out / "cameras.json", {"views": cameras})
    summary = RunSummary(
        command="reconstruct",
        final_loss=min(result.history),
        iterations=len(result.history) - 1,
        wall_time=result.wall_time,
        details={"views": len(views), "initial_loss": result.history[0]},
    )
    if args.gt:
        reference = load_obj(args.gt).vertices
        summary.metric_name = "vertex_rmse"
        summary.metric = vertex_rmse(vertices, reference)
        summary.details["initial_vertex_rmse"] = vertex_rmse(assets.vertices(init), reference)
    return summary, result.history


def cmd_eval(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    mesh = load_obj(args.mesh)
    if args.reference:
        value = vertex_rmse(mesh.vertices, load_obj(args.reference).vertices)
        name = "vertex_rmse"
    elif args.scan and args.keypoints:
        points, normals = load_points(args.scan)
        scan_keypoints, model_ids = read_keypoints(args.keypoints, assets.annotations)
        scan = Scan(points, scan_keypoints, normals)
        pose = rigid_init(mesh.vertices[model_ids], scan_keypoints)
        value = nme(mesh, scan, pose, config.reg.crop_radius, model_ids[NOSE_TIP_INDEX])
        name = "nme"
    else:
        raise AsmError("eval needs --reference, or --scan together with --keypoints")
    print(f"{name}: {value:.9g}")
    return RunSummary(command="eval", metric_name=name, metric=value, wall_time=time.perf_counter() - started)


def cmd_synth(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    case = make_case(
        assets.mesh,
        assets.skeleton,
        assets.annotations,
        config.K,
        config.seed,
        mode=args.mode,
        magnitude=args.magnitude,
        n_views=args.n_views,
        n_points=args.n_points,
    )
    write_case(args.out, case, assets.mesh, assets.skeleton)
    return RunSummary(command="synth", wall_time=time.perf_counter() - started, details={"magnitude": case.magnitude})


def cmd_export_weights(args, config: RunConfig, assets: Assets) -> RunSummary:
    started = time.perf_counter()
    params = assets.params_or_neutral(args.params, config.K)
    with torch.no_grad():
        weights = to_numpy(normalized_weights(assets.mesh, params.gmm).weights)
    names = assets.skeleton.names if args.bone == "all" else [args.bone]
    for name in names:
        j = assets.skeleton.index(name)
        texture = bake_weight_texture(assets.mesh, weights[:, j], args.resolution)
        # image rows run top-down, v runs bottom-up
        write_pgm(args.out / f"{name}.pgm", np.flipud(texture))
    logger.info(f"Exported {len(names)} weight textures to {args.out}")
    return RunSummary(command="export-weights", wall_time=time.perf_counter() - started, details={"bones": len(names)})


def cmd_report(args, session_factory) -> None:
    session: Session = session_factory()
    try:
        run_id = args.run_id
        if run_id is None:
            runs = list_runs(session)
            if not runs:
                raise AsmError("no runs recorded yet")
            run_id = runs[-1]["run_id"]
        if get_run(session, run_id) is None:
            raise AsmError(f"run with ID {run_id} not found")
        args.out.parent.mkdir(parents=True, exist_ok=True)
        generate_run_report_pdf(session, run_id, args.out)
        print(f"report: {args.out}")
    finally:
        session.close()


COMMANDS = {
    "init": cmd_init,
    "deform": cmd_deform,
    "dump-params": cmd_dump_params,
    "fit-scan": cmd_fit_scan,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "export-weights": cmd_export_weights,
}
RECORDED = ("fit-scan", "reconstruct", "eval")


def record_run(session_factory, summary: RunSummary, history: List[float], seed: int, artifact: Path) -> int:
    session: Session = session_factory()
    try:
        run_id = put_run(session, summary, seed=seed, artifact=str(artifact))
        if history:
            store_loss_history(session, run_id, history)
        return run_id
    finally:
        session.close()


def print_summary(summary: RunSummary) -> None:
    rows = [("command", summary.command), ("status", summary.status)]
    if summary.final_loss is not None:
        rows.append(("final loss", f"{summary.final_loss:.9g}"))
    if summary.metric is not None:
        rows.append((summary.metric_name, f"{summary.metric:.9g}"))
    rows += [("iterations", str(summary.iterations)), ("wall time [s]", f"{summary.wall_time:.2f}")]
    rows += [(k, f"{v:.9g}") for k, v in sorted(summary.details.items())]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key.ljust(width)}  {value}")


def run(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    session_factory = None if args.no_db else init_database(args.db)
    if args.command == "report":
        if session_factory is None:
            raise AsmError("report needs the run ledger; drop --no-db")
        cmd_report(args, session_factory)
        return

    assets = Assets(config, args.annotations)
    logger.info(f"Running '{args.command}' with seed={config.seed}, threads={config.threads}")
    outcome = COMMANDS[args.command](args, config, assets)
    summary, history = outcome if isinstance(outcome, tuple) else (outcome, [])

    out: Path = args.out
    summary_dir = out if out.suffix == "" else out.parent
    write_json(summary_dir / "summary.json", summary.model_dump(mode="json"))
    if summary_dir == out:
        write_json(summary_dir / "config.json", config.model_dump(mode="json"))
    print_summary(summary)
    if session_factory is not None and args.command in RECORDED:
        run_id = record_run(session_factory, summary, history, config.seed, out)
        logger.info(f"Run recorded with ID {run_id}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except AsmError as err:
        logger.error(f"{type(err).__name__}: {err}")
        return 1
    except Exception as err:
        logger.exception(f"Unexpected failure: {err}")
        return 2
    logger.info("Program finished.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
