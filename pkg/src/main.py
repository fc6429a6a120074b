#!/usr/bin/env python3
"""
Visual-inertial capture toolkit - Main Entry Point

Stages communicate through files in the configured output directory:
simulate -> calibrate / sync -> track -> train-filter -> refine -> eval / render.
"""

import argparse
import sys
import typing
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from .config import PipelineConfig, default_threads, load_pipeline_config, logging_settings
from .diffusion import DiffusionSchedule, MlpDenoiser, load_denoiser, refine_sequence, save_denoiser
from .errors import ConfigValidationError, ImhoiError, NumericalFailure
from .evaluation import evaluate_sequence
from .geometry import PoseSequence
from .imu import calibrate_spatial, detect_sync_event
from .interaction import capture_states, make_windows, states_to_results
from .logging_config import get_logger, log_error, setup_logging
from .optimize import TrackProblem, perturb_poses, track
from .output import (FILTER_FILE, IMU_FILE, SKELETON_FILE, SYNC_IMU_FILE, TRAJECTORY_FILE, OutputManager,
                     trajectory_from_dict, load_json_file)
from .render import overlay, render_soft_silhouette
from .simulate import generate_scene, jitter_scene
from .skeleton import SkeletonMotion, default_skeleton
from .training import TrainSettings, train_category_filters
from .utils import seed_everything

logger = get_logger(__name__)

TRACK_TRAJECTORY = 'track/trajectory.json'
TRACK_DIAGNOSTICS = 'track/diagnostics.json'
FILTER_EMA_FILE = 'filter/denoiser_ema.bin'
FILTER_DIAGNOSTICS = 'filter/training.json'
REFINE_TRAJECTORY = 'refine/trajectory.json'
REFINE_SKELETON = 'refine/skeleton.json'

DIAGNOSTICS_FILES = {'track': TRACK_DIAGNOSTICS, 'train-filter': FILTER_DIAGNOSTICS}


# ---------------------------------------------------------------------------
# Flags generated from the configuration model
# ---------------------------------------------------------------------------

def _parse_range(text: str) -> List[int]:
    try:
        start, end = text.split(':')
        return [int(start), int(end)]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected START:END, got {text!r}') from None


def _unwrap_optional(annotation: Any) -> Any:
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return annotation


def _is_model(annotation: Any) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def _argument_options(annotation: Any) -> Optional[Dict[str, Any]]:
    """argparse keyword arguments for a field type; None when it has no flag form."""
    annotation = _unwrap_optional(annotation)
    origin = typing.get_origin(annotation)
    if annotation is bool:
        return {'action': argparse.BooleanOptionalAction}
    if annotation in (int, float, str):
        return {'type': annotation}
    if origin is typing.Literal:
        choices = typing.get_args(annotation)
        return {'type': type(choices[0]), 'choices': choices}
    if origin in (list, List):
        (item,) = typing.get_args(annotation)
        if item in (int, float):
            return {'type': item, 'nargs': '+'}
        if typing.get_origin(item) is tuple:
            return {'type': _parse_range, 'nargs': '*', 'metavar': 'START:END'}
    return None


def add_model_arguments(parser: argparse.ArgumentParser, model: type, path: Tuple[str, ...],
                        flag_prefix: Tuple[str, ...] = ()) -> None:
    """One flag per configuration key of ``model``; nested sections add their name to the flag."""
    for name, info in model.model_fields.items():
        annotation = _unwrap_optional(info.annotation)
        if _is_model(annotation):
            add_model_arguments(parser, annotation, path + (name,), flag_prefix + (name,))
            continue
        options = _argument_options(info.annotation)
        if options is None:
            continue
        flag = '--' + '-'.join(flag_prefix + (name,)).replace('_', '-')
        default = info.get_default(call_default_factory=True)
        description = info.description or name.replace('_', ' ')
        parser.add_argument(flag, dest='cfg.' + '.'.join(path + (name,)), default=None,
                            help=f'{description} (config: {".".join(path + (name,))}, default: {default})',
                            **options)


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {dest[4:]: value for dest, value in vars(args).items()
            if dest.startswith('cfg.') and value is not None}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    scene = generate_scene(cfg.scene, cfg.seed, threads)
    out.save_trajectory(scene.trajectory)
    out.save_imu(scene.imu)
    out.save_masks(scene.masks)
    out.save_motion(scene.skeleton, scene.motion)
    out.save_camera(scene.camera)
    out.save_mesh(scene.mesh)
    if scene.sync_stream is not None:
        out.save_imu(scene.sync_stream, SYNC_IMU_FILE)
    out.save_scene_info({
        'trajectory': cfg.scene.trajectory,
        'frames': len(scene),
        'fps': cfg.scene.fps,
        'category': cfg.diffusion.category,
        'imu_to_world': scene.imu_to_world.reshape(-1).tolist(),
        'occlusion_windows': [list(w) for w in cfg.scene.occlusion_windows],
        'sync_index': scene.sync_index,
    })
    print(f'Simulated {len(scene)} frames into {out.root}')
    return 0


def cmd_calibrate(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    world_path = Path(args.world) if args.world else out.path(TRAJECTORY_FILE)
    world = trajectory_from_dict(load_json_file(world_path, 'run simulate or pass --world'))
    imu = out.load_imu(args.imu or IMU_FILE, hint='run simulate or pass --imu')
    stride = cfg.calibration.stride
    count = min(len(world), len(imu))
    if stride + 2 > count:
        problem = f'calibration.stride: {stride} needs at least {stride + 2} frames, the sequence has {count}'
        raise ConfigValidationError(f'Configuration validation failed:\n- {problem}', [problem])
    result = calibrate_spatial(world.rotations[:count], imu.rotations[:count], stride)
    out.save_calibration(result)
    print(f'residual: {np.degrees(result.residual):.6g} deg')
    return 0


def cmd_sync(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    stream = out.load_imu(args.imu or SYNC_IMU_FILE, hint='simulate with scene.sync_stream = true or pass --imu')
    event = detect_sync_event(stream, free_fall_ratio=cfg.sync.free_fall_ratio)
    out.save_sync(event)
    print(f'sync event at sample {event.index} (t = {event.timestamp:.4f} s, '
          f'{"confident" if event.confident else "low confidence"})')
    return 0


def _imu_to_world(out: OutputManager) -> np.ndarray:
    calibration = out.load_calibration()
    if calibration is None:
        logger.warning('No calibration.json; treating the IMU frame as the world frame')
        return np.eye(3)
    return calibration.transform


def cmd_track(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    tc = cfg.tracking
    reference = out.load_trajectory()
    initial = perturb_poses(reference, tc.init_rotation_noise_deg, tc.init_translation_noise, cfg.seed + 1)
    problem = TrackProblem(
        mesh=out.load_mesh(), camera=out.load_camera(), masks=tuple(out.load_masks()),
        imu=out.load_imu(rate=reference.fps), initial=initial, w_visual=tc.w_visual, w_imu=tc.w_imu,
        sigma=tc.sigma, lr=tc.effective_lr(reference.fps), iterations=tc.iterations, mode=tc.mode,
        imu_to_world=_imu_to_world(out), feedback_iterations=tc.feedback_iterations,
        feedback_samples=tc.feedback_samples, area_weight=tc.area_weight, skip_empty=tc.skip_empty_masks,
        seed=cfg.seed, face_chunk=tc.face_chunk)
    result = track(problem, threads)
    out.save_trajectory(result.poses, TRACK_TRAJECTORY)
    out.write_diagnostics(TRACK_DIAGNOSTICS, result.diagnostics())
    print(f'Tracked {len(result.poses)} frames, final energy {result.best_trace[-1]:.6e}')
    return 0


def _schedule(cfg: PipelineConfig) -> DiffusionSchedule:
    d = cfg.diffusion
    return DiffusionSchedule.build(d.schedule, d.steps, d.beta_start, d.beta_end)


def cmd_train_filter(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    d = cfg.diffusion
    skel = default_skeleton(cfg.scene.skeleton)
    windows = []
    frame_interval = 1.0 / cfg.scene.fps
    for k in range(d.train_scenes):
        scene = generate_scene(jitter_scene(cfg.scene, cfg.seed + k), cfg.seed + k, threads, render=False)
        states = capture_states(skel, scene.motion, scene.trajectory, scene.imu, scene.imu_to_world)
        windows.append(make_windows(states, d.window, d.window_stride))
    dataset = np.concatenate(windows)
    logger.info(f'Built {len(dataset)} training windows from {d.train_scenes} simulated captures')

    schedule = _schedule(cfg)
    torch.manual_seed(cfg.seed)
    results = train_category_filters(
        {d.category: dataset}, lambda: MlpDenoiser(d.window, d.hidden, d.layers), schedule,
        TrainSettings.from_section(d, cfg.seed), skel, cfg.scene.body_scale, frame_interval)
    result = results[d.category]
    extra = {'category': d.category, 'frame_interval': frame_interval}
    save_denoiser(out.path(FILTER_FILE), result.denoiser, schedule, cfg.seed, extra)
    save_denoiser(out.path(FILTER_EMA_FILE), result.ema, schedule, cfg.seed, {**extra, 'ema': True})
    out.write_diagnostics(FILTER_DIAGNOSTICS, {'loss_trace': result.loss_trace, 'epochs': result.epoch_losses})
    print(f'Trained filter {d.category!r} on {len(dataset)} windows, final loss {result.loss_trace[-1]:.6f}'
          if result.loss_trace else f'Saved untrained filter {d.category!r} (0 epochs)')
    return 0


def cmd_refine(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    d = cfg.diffusion
    denoiser, header = load_denoiser(out.path(FILTER_EMA_FILE if d.use_ema else FILTER_FILE))
    schedule = _schedule(cfg)
    if header['schedule']['digest'] != schedule.digest:
        problem = 'diffusion schedule differs from the one the filter was trained with'
        raise ConfigValidationError(f'Configuration validation failed:\n- diffusion: {problem}', [problem])
    tracked = out.load_trajectory(TRACK_TRAJECTORY, 'run track first')
    skel, motion = out.load_motion()
    imu = out.load_imu(rate=tracked.fps)
    states = capture_states(skel, motion, tracked, imu, _imu_to_world(out))
    refined = refine_sequence(states, denoiser, schedule, d.start_level, denoiser.config()['window'],
                              hand_valid=not d.infill_hands, seed=cfg.seed)
    trajectory, refined_motion = states_to_results(refined, skel, tracked.frame_interval, motion.scale)
    out.save_trajectory(trajectory, REFINE_TRAJECTORY)
    out.save_motion(skel, refined_motion, REFINE_SKELETON)
    print(f'Refined {len(trajectory)} frames from noise level {d.start_level}')
    return 0


def load_prediction(out: OutputManager, which: str) -> Tuple[PoseSequence, Optional[SkeletonMotion], str]:
    """Predicted trajectory (and refined motion when available) of the chosen stage."""
    if which == 'auto':
        which = 'refine' if out.exists(REFINE_TRAJECTORY) else 'track'
    if which == 'refine':
        _, motion = out.load_motion(REFINE_SKELETON, 'run refine first')
        return out.load_trajectory(REFINE_TRAJECTORY, 'run refine first'), motion, which
    return out.load_trajectory(TRACK_TRAJECTORY, 'run track first'), None, which


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    ev = cfg.evaluation
    gt_trajectory = out.load_trajectory()
    skel, gt_motion = out.load_motion(SKELETON_FILE)
    pred_trajectory, pred_motion, stage = load_prediction(out, ev.prediction)
    report = evaluate_sequence(
        pred_trajectory, pred_motion or gt_motion, gt_trajectory, gt_motion, skel, out.load_mesh(),
        sequence_id=f'{cfg.scene.trajectory}-{stage}-seed{cfg.seed}', window_seconds=ev.window_seconds,
        clip_short=ev.clip_short_sequences, with_scale=ev.with_scale, object_samples=ev.object_samples,
        human_radius=ev.human_radius, human_samples_per_joint=ev.human_samples_per_joint, seed=cfg.seed,
        threads=threads)
    out.save_report(report)
    print(report.format_text())
    return 0


def cmd_render(args: argparse.Namespace, cfg: PipelineConfig, out: OutputManager, threads: int) -> int:
    rc = cfg.render
    trajectory, _, stage = load_prediction(out, rc.prediction)
    masks = out.load_masks()
    mesh, camera = out.load_mesh(), out.load_camera()
    written = 0
    for k in range(0, min(len(trajectory), len(masks)), rc.every):
        predicted = render_soft_silhouette(mesh, trajectory.frames[k], camera, rc.sigma)
        out.save_overlay(overlay(predicted, masks[k]), k)
        written += 1
    print(f'Rendered {written} overlays of the {stage} poses')
    return 0


Handler = Callable[[argparse.Namespace, PipelineConfig, OutputManager, int], int]

SUBCOMMANDS: Dict[str, Tuple[Handler, Tuple[str, ...], str]] = {
    'simulate': (cmd_simulate, ('scene',), 'Generate a synthetic capture'),
    'calibrate': (cmd_calibrate, ('calibration',), 'Solve the inertial-to-world rotation'),
    'sync': (cmd_sync, ('sync',), 'Detect the jump landing in an ankle IMU stream'),
    'track': (cmd_track, ('tracking',), 'Track object poses from masks and IMU'),
    'train-filter': (cmd_train_filter, ('diffusion', 'scene'), 'Train an interaction diffusion filter'),
    'refine': (cmd_refine, ('diffusion',), 'Refine tracked results with the trained filter'),
    'eval': (cmd_eval, ('evaluation',), 'Chamfer-distance evaluation against ground truth'),
    'render': (cmd_render, ('render',), 'Overlay predicted silhouettes on target masks'),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='python -m src.main', description='Visual-inertial capture toolkit')
    parser.add_argument('--log-json', action='store_true', help='Emit JSON-lines logs')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], default=None,
                        help='Logging level (default: LOG_LEVEL or INFO)')
    parser.add_argument('--threads', type=int, default=None,
                        help='Worker cap for parallel stages (default: IMHOI_THREADS or CPU count, max 8)')
    subparsers = parser.add_subparsers(dest='command', required=True)

    for name, (_, sections, help_text) in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument('--config', type=str, default=None, help='Pipeline TOML file')
        for field_name in ('seed', 'output_dir'):
            info = PipelineConfig.model_fields[field_name]
            sub.add_argument('--' + field_name.replace('_', '-'), dest=f'cfg.{field_name}', default=None,
                             type=info.annotation, help=f'{info.description} (default: {info.default})')
        if name == 'calibrate':
            sub.add_argument('--world', type=str, default=None,
                             help=f'Trajectory JSON with world rotations (default: <output_dir>/{TRAJECTORY_FILE})')
            sub.add_argument('--imu', type=str, default=None, help=f'IMU CSV inside the output directory (default: {IMU_FILE})')
        if name == 'sync':
            sub.add_argument('--imu', type=str, default=None,
                             help=f'IMU CSV inside the output directory (default: {SYNC_IMU_FILE})')
        for section in sections:
            add_model_arguments(sub, PipelineConfig.model_fields[section].annotation, (section,))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = logging_settings()
    if args.log_json:
        settings['enable_json'] = True
    if args.log_level:
        settings['log_level'] = args.log_level
    # the log file lives in the output directory, known once the config is loaded
    setup_logging(**{**settings, 'enable_file': False}, stage=args.command)
    threads = args.threads or default_threads()
    torch.set_num_threads(threads)

    handler = SUBCOMMANDS[args.command][0]
    out: Optional[OutputManager] = None
    try:
        cfg = load_pipeline_config(args.config, collect_overrides(args))
        if settings['enable_file']:
            setup_logging(**settings, log_dir=cfg.output_dir, stage=args.command)
        seed_everything(cfg.seed)
        out = OutputManager(cfg.output_dir)
        out.write_resolved_config(args.command, cfg.model_dump(mode='json'))
        return handler(args, cfg, out, threads)
    except ImhoiError as e:
        log_error(e, {'subcommand': args.command})
        if isinstance(e, NumericalFailure) and out is not None:
            target = DIAGNOSTICS_FILES.get(args.command, f'{args.command}_diagnostics.json')
            out.write_diagnostics(target, e.diagnostics())
            print(f'Diagnostics written to {out.path(target)}', file=sys.stderr)
        print(f'Error: {e}', file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info('Received interrupt signal, shutting down...')
        return 130
    except Exception as e:
        log_error(e, {'subcommand': args.command})
        print(f'Unexpected error: {e}', file=sys.stderr)
        return 1


def run():
    """Entry point for package execution"""
    sys.exit(main())


if __name__ == '__main__':
    run()
