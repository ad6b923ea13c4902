"""Command-line entry point composing scene generation, training, attacks, defenses and evaluation."""
import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ..attack.objectives import AttackConfig
from ..attack.universal import random_mesh, run_universal_attack, with_box_size, write_attack_log
from ..core.dataset import load_dataset, load_index, save_dataset, split_scenes
from ..core.insertion import host_pose, insert_adversary
from ..core.scene import Scene, generate_scenes
from ..defense.adversarial_training import free_adv_train
from ..defense.compression import compression_preprocess
from ..detector.checkpoint import load_checkpoint, save_checkpoint
from ..detector.model import DetectorConfig, DetectorParams
from ..detector.training import TrainingSample, train_detector
from ..evaluation.metrics import attack_success_rates
from ..evaluation.report import write_asr_csv, write_evaluation, write_json
from ..evaluation.runner import evaluate_attack, evaluate_clean_ap
from ..geometry.mesh import TexturedMesh
from ..geometry.mesh_io import load_mesh, save_mesh, texture_sidecar
from ..sensors.sensor_io import save_image_bundle, save_sweep
from ..utils.config import Config, ExperimentConfig
from ..utils.logger import ExperimentLogger
from ..utils.manifest import RunManifest

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "detector.advf"
TARGETS = {"lidar": ["lidar"], "image": ["image"], "both": ["lidar", "image"]}


@dataclass
class RunContext:
    command: str
    config: Config
    experiment: ExperimentConfig
    out: Path
    quiet: bool
    written: List[Path] = field(default_factory=list)


# dataset helpers

def _load_split(data_dir: str, ctx: RunContext) -> Tuple[List[Scene], List[Scene], Dict]:
    meta = load_index(data_dir).get("metadata", {})
    scenes = load_dataset(data_dir)
    eval_count = int(meta.get("eval_scenes", ctx.experiment.scene.eval_scenes))
    split = split_scenes(scenes, eval_count)
    return split["train"], split["eval"], meta


def _scene_cfg(ctx: RunContext, meta: Dict):
    profile = meta.get("sensor_profile", ctx.experiment.scene.sensor_profile)
    return ctx.experiment.scene.with_profile(profile)


def _attack_cfg(ctx: RunContext, args) -> AttackConfig:
    cfg = ctx.experiment.attack
    if getattr(args, "target", None):
        cfg = replace(cfg, target_modalities=frozenset(TARGETS[args.target]))
    if getattr(args, "steps", None):
        cfg = replace(cfg, steps=args.steps)
    return cfg


def _validation_split(train: List[Scene], cfg: AttackConfig) -> Tuple[List[Scene], List[Scene]]:
    """Hold the tail of the training scenes out for attack validation when there are enough of them."""
    if cfg.val_scenes <= 0 or len(train) <= cfg.val_scenes:
        return train, []
    return train[:-cfg.val_scenes], train[-cfg.val_scenes:]


def _save_mesh(mesh: TexturedMesh, path: Path, ctx: RunContext) -> None:
    path = save_mesh(mesh, path)
    ctx.written += [path, texture_sidecar(path)]


# commands

def cmd_gen_scenes(args, ctx: RunContext) -> None:
    cfg = ctx.experiment.scene
    if args.sensor_profile:
        cfg = cfg.with_profile(args.sensor_profile)
    train = cfg.train_scenes if args.train is None else args.train
    held_out = cfg.eval_scenes if args.eval is None else args.eval
    seed = ctx.experiment.seeds["dataset"] if args.seed is None else args.seed
    scenes = generate_scenes(cfg, train + held_out, seed=seed, workers=args.workers or cfg.workers)
    metadata = {"seed": seed, "sensor_profile": cfg.sensor_profile, "train_scenes": train, "eval_scenes": held_out}
    ctx.written += save_dataset(scenes, ctx.out, metadata)
    print(f"Generated {len(scenes)} scenes in {ctx.out}")


def cmd_train_detector(args, ctx: RunContext) -> None:
    train, held_out, _ = _load_split(args.data, ctx)
    cfg = ctx.experiment.detector
    if args.lidar_only:
        cfg = replace(cfg, use_image=False)
    params, history = train_detector([TrainingSample.from_scene(s) for s in train], cfg, steps=args.steps,
                                     quiet=ctx.quiet)
    ctx.written += list(save_checkpoint(params, cfg, ctx.out / CHECKPOINT_NAME,
                                        {"lidar_only": bool(args.lidar_only), "steps": len(history)}))
    ap = evaluate_clean_ap(held_out, params, cfg, ctx.experiment.evaluation)
    ctx.written.append(write_json({"clean_ap": {str(k): v for k, v in ap.items()},
                                   "final_loss": history[-1].loss if history else None},
                                  ctx.out / "clean_ap.json"))
    print(f"Trained detector for {len(history)} steps; clean AP {ap}")


def _attack_once(cfg: AttackConfig, train: List[Scene], held_out: List[Scene], params: DetectorParams,
                 det_cfg: DetectorConfig, scene_cfg, ctx: RunContext, random_baseline: bool,
                 out_dir: Path) -> Tuple[TexturedMesh, list]:
    if random_baseline:
        mesh = random_mesh(cfg)
    else:
        fit, val = _validation_split(train, cfg)
        result = run_universal_attack(fit, params, det_cfg, cfg, val, ctx.experiment.evaluation,
                                      scene_cfg.raster_config(), scene_cfg.max_range, quiet=ctx.quiet)
        mesh = result.mesh
        ctx.written.append(write_attack_log(result.log, out_dir / "attack_log.csv"))
    _save_mesh(mesh, out_dir / "mesh.obj", ctx)
    records = evaluate_attack(held_out, mesh, params, det_cfg, ctx.experiment.evaluation,
                              scene_cfg.raster_config(), scene_cfg.max_range,
                              use_band_centroid=cfg.use_band_centroid)
    return mesh, records


def cmd_attack(args, ctx: RunContext) -> None:
    train, held_out, meta = _load_split(args.data, ctx)
    params, det_cfg, _ = load_checkpoint(args.checkpoint)
    scene_cfg = _scene_cfg(ctx, meta)
    base = _attack_cfg(ctx, args)
    runs = [(None, base)] if not args.box_size else [(s, with_box_size(base, s)) for s in args.box_size]
    rows = []
    for size, cfg in runs:
        label = f"L={size:g}" if size is not None else (args.target or "both")
        out_dir = ctx.out if size is None else ctx.out / f"box_{size:g}"
        _, records = _attack_once(cfg, train, held_out, params, det_cfg, scene_cfg, ctx, args.random_baseline,
                                  out_dir)
        rates = attack_success_rates(records)
        rows.append((label, rates.fn_asr, rates.fp_asr, rates.asr))
        ctx.written += write_evaluation(records, ctx.experiment.evaluation, out_dir, label,
                                        {"attack": cfg.to_dict(), "random_baseline": bool(args.random_baseline)})
    if len(rows) > 1:
        ctx.written.append(write_asr_csv(rows, ctx.out / "asr_sweep.csv"))
    for row in rows:
        print("{}: FN ASR {} FP ASR {} ASR {}".format(*row))


def cmd_evaluate(args, ctx: RunContext) -> None:
    _, held_out, meta = _load_split(args.data, ctx)
    params, det_cfg, _ = load_checkpoint(args.checkpoint)
    scene_cfg = _scene_cfg(ctx, meta)
    preprocess = compression_preprocess(args.compression_quality) if args.compression_quality else None
    mesh = load_mesh(args.mesh)
    eval_cfg = ctx.experiment.evaluation
    records = evaluate_attack(held_out, mesh, params, det_cfg, eval_cfg, scene_cfg.raster_config(),
                              scene_cfg.max_range, preprocess, ctx.experiment.attack.use_band_centroid)
    ap = evaluate_clean_ap(held_out, params, det_cfg, eval_cfg, preprocess)
    ctx.written += write_evaluation(records, eval_cfg, ctx.out, args.label,
                                    {"clean_ap": {str(k): v for k, v in ap.items()}})
    rates = attack_success_rates(records)
    print(f"FN ASR {rates.fn_asr} FP ASR {rates.fp_asr} ASR {rates.asr}; clean AP {ap}")


def _defense_row(kind: str, records, ap: Dict) -> tuple:
    rates = attack_success_rates(records)
    ap07 = ap.get(0.7)
    return kind, rates.fn_asr, rates.fp_asr, rates.asr, ap07 * 100.0 if ap07 is not None else None


def cmd_defend(args, ctx: RunContext) -> None:
    train, held_out, meta = _load_split(args.data, ctx)
    params, det_cfg, _ = load_checkpoint(args.checkpoint)
    scene_cfg = _scene_cfg(ctx, meta)
    def_cfg = replace(ctx.experiment.defense, kind=args.kind)
    if args.model_steps:
        def_cfg = replace(def_cfg, model_steps=args.model_steps)
    attack_cfg = _attack_cfg(ctx, args)
    eval_cfg = ctx.experiment.evaluation
    raster, max_range = scene_cfg.raster_config(), scene_cfg.max_range
    preprocess = None
    if def_cfg.kind == "compression":
        preprocess = compression_preprocess(def_cfg.compression_quality)
        if args.mesh:
            mesh = load_mesh(args.mesh)
        else:
            mesh = run_universal_attack(train, params, det_cfg, attack_cfg, (), eval_cfg, raster, max_range,
                                        quiet=ctx.quiet).mesh
    else:
        hardened = free_adv_train(train, params, det_cfg, attack_cfg, def_cfg, raster, max_range, quiet=ctx.quiet)
        params, det_cfg = hardened.params, hardened.det_cfg
        ctx.written += list(save_checkpoint(params, det_cfg, ctx.out / CHECKPOINT_NAME,
                                            {"defense": def_cfg.to_dict(), "source_checkpoint": args.checkpoint}))
        # robustness is measured against a fresh attack on the hardened weights
        mesh = run_universal_attack(train, params, det_cfg, attack_cfg, (), eval_cfg, raster, max_range,
                                    quiet=ctx.quiet).mesh
    _save_mesh(mesh, ctx.out / "mesh.obj", ctx)
    records = evaluate_attack(held_out, mesh, params, det_cfg, eval_cfg, raster, max_range, preprocess,
                              attack_cfg.use_band_centroid)
    ap = evaluate_clean_ap(held_out, params, det_cfg, eval_cfg, preprocess)
    row = _defense_row(def_cfg.kind, records, ap)
    ctx.written += write_evaluation(records, eval_cfg, ctx.out, def_cfg.kind,
                                    {"defense": def_cfg.to_dict(), "clean_ap": {str(k): v for k, v in ap.items()}})
    ctx.written.append(write_asr_csv([row], ctx.out / "defense.csv",
                                     ["defense", "FN ASR", "FP ASR", "ASR", "AP@0.7"]))
    print("{}: FN ASR {} FP ASR {} ASR {} AP@0.7 {}".format(*row))


def cmd_transfer(args, ctx: RunContext) -> None:
    mesh = load_mesh(args.mesh)
    rows = []
    for name, data, checkpoint in (("source", args.source_data, args.source_checkpoint),
                                   ("target", args.target_data, args.target_checkpoint)):
        _, held_out, meta = _load_split(data, ctx)
        params, det_cfg, _ = load_checkpoint(checkpoint)
        scene_cfg = _scene_cfg(ctx, meta)
        records = evaluate_attack(held_out, mesh, params, det_cfg, ctx.experiment.evaluation,
                                  scene_cfg.raster_config(), scene_cfg.max_range,
                                  use_band_centroid=ctx.experiment.attack.use_band_centroid)
        rates = attack_success_rates(records)
        rows.append((args.source_name, args.target_name if name == "target" else args.source_name,
                     rates.fn_asr, rates.fp_asr, rates.asr))
        ctx.written += write_evaluation(records, ctx.experiment.evaluation, ctx.out / name, name)
    ctx.written.append(write_asr_csv(rows, ctx.out / "transfer.csv",
                                     ["source", "target", "FN ASR", "FP ASR", "ASR"]))
    for row in rows:
        print("{} -> {}: FN ASR {} FP ASR {} ASR {}".format(*row))


def cmd_export_debug(args, ctx: RunContext) -> None:
    scenes = load_dataset(args.data)
    matches = [s for s in scenes if s.index == args.scene]
    if not matches:
        raise ValueError(f"Scene {args.scene} not found in {args.data}")
    scene = matches[0]
    meta = load_index(args.data).get("metadata", {})
    scene_cfg = _scene_cfg(ctx, meta)
    image, sweep = scene.image, scene.sweep
    if args.mesh:
        mesh = load_mesh(args.mesh)
        if scene.host_index is None:
            raise ValueError(f"Scene {args.scene} has no host vehicle for the adversary")
        pose = host_pose(scene, scene.host_index, ctx.experiment.attack.use_band_centroid)
        inputs = insert_adversary(scene, mesh, pose, scene_cfg.raster_config(), scene_cfg.max_range)
        image, sweep = inputs.image, inputs.sweep
        _save_mesh(mesh, ctx.out / "mesh.obj", ctx)
        ctx.written.append(save_sweep(inputs.adversary_sweep, ctx.out / "adversary.ply"))
    ctx.written.append(save_sweep(sweep, ctx.out / "sweep.ply"))
    ctx.written += list(save_image_bundle(image.pixels.data, scene.image.dense_depth, ctx.out))
    print(f"Exported scene {scene.index} to {ctx.out}")


# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advfusion", description="Multi-sensor adversarial mesh toolkit")
    parser.add_argument("--config-dir", default="config", help="Directory of per-section JSON configs")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    parser.add_argument("--verbose", action="store_true", help="Debug-level log files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="Generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, help="Training scene count")
    p.add_argument("--eval", type=int, help="Held-out scene count")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--sensor-profile", help="Sensor profile name from sensors.json")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train-detector", help="Train the fusion detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lidar-only", action="store_true", help="Drop the image branch")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("attack", help="Optimise a universal adversarial mesh")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", choices=sorted(TARGETS), default="both")
    p.add_argument("--box-size", type=float, nargs="+", help="Sweep over box half-widths (meters)")
    p.add_argument("--random-baseline", action="store_true", help="Random mesh, no optimisation")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="Evaluate a mesh against a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="attack")
    p.add_argument("--compression-quality", type=int, help="Compress images before detection")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("defend", help="Measure a defense")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["compression", "adv-train", "adv-train-fd"], required=True)
    p.add_argument("--mesh", help="Existing mesh for the compression defense")
    p.add_argument("--target", choices=sorted(TARGETS), default="both")
    p.add_argument("--steps", type=int, help="Attack steps")
    p.add_argument("--model-steps", type=int, help="Adversarial training model updates")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("transfer", help="Evaluate a mesh on another sensor configuration")
    p.add_argument("--mesh", required=True)
    p.add_argument("--source-data", required=True)
    p.add_argument("--source-checkpoint", required=True)
    p.add_argument("--target-data", required=True)
    p.add_argument("--target-checkpoint", required=True)
    p.add_argument("--source-name", default="A")
    p.add_argument("--target-name", default="B")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("export-debug", help="Write a scene (optionally attacked) in standard formats")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--mesh")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_debug)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on failure, 2 on usage errors."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    out = Path(args.out)
    run_log = ExperimentLogger("src", str(out / "logs" / f"{args.command}.log"),
                               logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = Config(config_dir=args.config_dir)
        ctx = RunContext(args.command, config, config.experiment(), out, args.quiet)
        args.func(args, ctx)
        manifest = RunManifest(args.command, argv, config.to_dict(), ctx.experiment.seeds)
        manifest.add_artifacts(ctx.written, root=out)
        manifest.write(out)
        return 0
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        run_log.error(f"{args.command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        return 1
    finally:
        run_log.close()
