#!/usr/bin/env python3
"""
Speckle registration command line.

Subcommands:
    gen        write a synthetic sequence (frames, masks, truth, metadata)
    register   run coarse-to-fine self-supervised registration on sequences
    pretrain   optimize per-scale checkpoints over a training set
    eval       score flows against a sequence (MSE, Mean CC, EPE)
    viz        render flows as colour-wheel PPM images
    selftest   gradient, oracle and field-algebra checks

Hyperparameters default to the selected profile (``--config prod`` holds the
reference values); flags override the profile.

Usage:
    python cli.py gen --kind vortex --frames 8 --size 128 --seed 7 --output seq/
    python cli.py --config dev register seq/ --output results/
    python cli.py eval seq/ results/
    python cli.py selftest

Exit codes: 0 success, 1 selftest failure, 2 input error, 3 numeric divergence.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

# Add the scripts directory to the path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import structlog

from registration.errors import ContractError, DivergenceError, InvalidShapeError, ParseError
from registration.io_viz import (
    flow_name, flow_to_color, read_checkpoint, read_flow_dir, read_sequence,
    write_flow_dir, write_ppm, write_sequence,
)
from registration.metrics import evaluate_sequence
from registration.pipeline import (
    ImageSequence, Init, RegistrationSettings, ScaleSchedule, Variant, WarmStart,
    checkpoint_name, pretrain, run_nmsr, write_run_manifest,
)
from registration.selftest import SUITES, run_selftest
from registration.synth import FlowSpec, circulation_for_max_speed, generate
from registration.unet import ArchDescriptor
from utils.config_utils import ConfigurationError, RegistrationConfig, load_config, setup_logging_from_config
from utils.data_utils import save_dataframe_to_multiple_formats, save_json_data, summarize_loss_curve
from utils.text_utils import parse_scale, parse_scale_list, scale_slug

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_SELFTEST_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_DIVERGED = 3

INPUT_ERRORS = (ParseError, InvalidShapeError, ContractError, ConfigurationError, OSError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Neural multi-scale self-supervised registration of speckle sequences')
    parser.add_argument(
        '--config',
        default='prod',
        help='Configuration to use (prod, dev, testing, or path to config file)'
    )
    parser.add_argument('--log-file', help='Also log to this file (overrides the profile)')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Write a synthetic sequence with ground-truth flow')
    gen.add_argument('--kind', default='translation',
                     choices=['translation', 'rotation', 'lamb_oseen', 'vortex', 'radial_contraction'])
    gen.add_argument('--frames', type=int, default=8)
    gen.add_argument('--size', type=int, default=64, help='Square frame size (overridden by --height/--width)')
    gen.add_argument('--height', type=int)
    gen.add_argument('--width', type=int)
    gen.add_argument('--u', type=float, default=0.0, help='Translation dx per frame')
    gen.add_argument('--v', type=float, default=0.0, help='Translation dy per frame')
    gen.add_argument('--omega', type=float, default=0.0, help='Rotation in radians per frame')
    gen.add_argument('--center-x', type=float)
    gen.add_argument('--center-y', type=float)
    gen.add_argument('--circulation', type=float, help='Lamb-Oseen circulation')
    gen.add_argument('--max-speed', type=float, default=2.0,
                     help='Lamb-Oseen peak speed in px/frame when --circulation is not given')
    gen.add_argument('--core-radius', type=float, default=20.0)
    gen.add_argument('--rate', type=float, default=0.0, help='Radial contraction fraction per frame')
    gen.add_argument('--noise', type=float, help='Additive noise sigma (profile default)')
    gen.add_argument('--grain-size', type=float, help='Speckle grain size in px (profile default)')
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--output', required=True, help='Sequence directory to write')

    for name, help_text in (('register', 'Register consecutive frames of one or more sequences'),
                            ('pretrain', 'Optimize per-scale checkpoints over training sequences')):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('sequences', nargs='+', help='Sequence directories')
        cmd.add_argument('--output', required=True, help='Results (register) or checkpoint (pretrain) directory')
        cmd.add_argument('--scales', help='Comma-separated scales, e.g. 1/8,1/4,1/2,1')
        cmd.add_argument('--steps', type=int, help='Optimization steps per scale')
        cmd.add_argument('--lambda', dest='smoothness_weight', type=float, help='Smoothness weight')
        cmd.add_argument('--ncc-radius', type=int)
        cmd.add_argument('--lr', type=float, help='Adam learning rate')
        cmd.add_argument('--seed', type=int)
        cmd.add_argument('--warm-start', choices=[w.value for w in WarmStart])
        cmd.add_argument('--log-every', type=int)

    register = sub.choices['register']
    register.add_argument('--variant', choices=[v.value for v in Variant])
    register.add_argument('--init', choices=[i.value for i in Init], default=Init.FRESH.value)
    register.add_argument('--checkpoint-dir', help='Directory holding checkpoint_<a>-<b>.nmsr files')
    register.add_argument('--save-intermediate', action='store_true',
                          help='Also write the accumulated fields after every scale')
    register.add_argument('--jobs', type=int, default=1, help='Sequences registered in parallel')

    pretrain_cmd = sub.choices['pretrain']
    pretrain_cmd.add_argument('--iterations', type=int,
                              help='Steps per scale (default: steps × number of sequences)')

    evaluate = sub.add_parser('eval', help='Score flows against a sequence')
    evaluate.add_argument('sequence', help='Sequence directory')
    evaluate.add_argument('flows', help='Directory of flow_NNNN.flo files')
    evaluate.add_argument('--output', help='Report directory (default: the flows directory)')
    evaluate.add_argument('--radius', type=int, help='Mean CC window radius (profile default)')

    viz = sub.add_parser('viz', help='Render flows as colour-wheel images')
    viz.add_argument('flows', help='Directory of flow_NNNN.flo files')
    viz.add_argument('--output', help='Image directory (default: the flows directory)')
    viz.add_argument('--max-mag', type=float, help='Fixed magnitude for full saturation')

    selftest = sub.add_parser('selftest', help='Run the verification suites')
    selftest.add_argument('--suite', action='append', choices=list(SUITES), help='Suite to run (repeatable)')
    selftest.add_argument('--inject-fault', metavar='OP', help='Corrupt the backward pass of OP (negative control)')
    selftest.add_argument('--seed', type=int, default=0)

    return parser


# ---------------------------------------------------------------------------
# Settings from profile + flags
# ---------------------------------------------------------------------------

def settings_from_args(config: RegistrationConfig, args: argparse.Namespace) -> RegistrationSettings:
    settings = RegistrationSettings.from_config(config)
    loss = settings.loss
    settings.loss = replace(
        loss,
        ncc_radius=args.ncc_radius if args.ncc_radius is not None else loss.ncc_radius,
        smoothness_weight=args.smoothness_weight if args.smoothness_weight is not None else loss.smoothness_weight,
    )
    if args.lr is not None:
        settings.learning_rate = args.lr
    if args.seed is not None:
        settings.seed = args.seed
    if args.log_every is not None:
        settings.log_every = args.log_every
    return settings


def schedule_from_args(config: RegistrationConfig, args: argparse.Namespace) -> ScaleSchedule:
    try:
        scales = parse_scale_list(args.scales) if args.scales else [parse_scale(s) for s in config.scales]
    except ValueError as e:
        raise ConfigurationError(f"Invalid scales: {e}") from e
    return ScaleSchedule(
        scales=tuple(scales),
        steps=args.steps if args.steps is not None else config.steps_per_scale,
        warm_start=WarmStart(args.warm_start or config.warm_start),
    )


def _echo_args(args: argparse.Namespace) -> Dict[str, object]:
    return {f"arg.{key}": value for key, value in sorted(vars(args).items())}


def load_checkpoints(directory: str, scales: List[Fraction], arch: ArchDescriptor) -> Dict[Fraction, object]:
    return {scale: read_checkpoint(Path(directory) / checkpoint_name(scale), expected_arch=arch)
            for scale in scales}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(config: RegistrationConfig, args: argparse.Namespace) -> int:
    height = args.height or args.size
    width = args.width or args.size
    center = None
    if args.center_x is not None or args.center_y is not None:
        center = (args.center_x if args.center_x is not None else (width - 1) / 2.0,
                  args.center_y if args.center_y is not None else (height - 1) / 2.0)
    circulation = args.circulation
    if circulation is None:
        circulation = circulation_for_max_speed(args.max_speed, args.core_radius)

    spec = FlowSpec(
        kind=args.kind, frames=args.frames, height=height, width=width,
        u=args.u, v=args.v, center=center, omega=args.omega,
        circulation=circulation, core_radius=args.core_radius, rate=args.rate,
        noise_sigma=args.noise if args.noise is not None else config.noise_sigma,
        grain_size=args.grain_size if args.grain_size is not None else config.grain_size,
        seed=args.seed,
    )
    synthetic = generate(spec)
    write_sequence(args.output, synthetic.to_sequence_dir())
    logger.info("sequence written", path=args.output, kind=spec.kind, frames=spec.frames)
    print(f"+ Wrote {spec.frames} frames ({height}×{width}, {spec.kind}) to {args.output}")
    return EXIT_OK


def _register_one(config: RegistrationConfig, args: argparse.Namespace, sequence_path: str,
                  output_dir: str) -> Dict[str, object]:
    """Register one sequence directory and write its results."""
    settings = settings_from_args(config, args)
    sched = schedule_from_args(config, args)
    variant = Variant(args.variant or config.variant)
    init_mode = Init(args.init)

    checkpoints = None
    if init_mode == Init.CHECKPOINT or sched.warm_start == WarmStart.FROM_CHECKPOINT:
        if not args.checkpoint_dir:
            raise ConfigurationError("--checkpoint-dir is required for checkpoint initialization")
        scales = [Fraction(1)] if variant == Variant.SINGLE_SCALE else list(sched.scales)
        checkpoints = load_checkpoints(args.checkpoint_dir, scales, settings.arch)

    seq = ImageSequence.from_sequence_dir(read_sequence(sequence_path))
    result = run_nmsr(seq, sched, variant, init_mode, settings, checkpoints)

    out = Path(output_dir)
    write_flow_dir(out, result.fields)
    extra: Dict[str, object] = {'profile': config.config_file}
    for label, curve in result.loss_curves.items():
        slug = scale_slug(parse_scale(label))
        save_dataframe_to_multiple_formats(curve, f"loss_{slug}", str(out), config.output_formats)
        trend = summarize_loss_curve(curve)
        extra[f"loss_first_mean_{slug}"] = repr(trend['first_mean'])
        extra[f"loss_last_mean_{slug}"] = repr(trend['last_mean'])
        logger.info("loss curve summary", sequence=seq.sequence_id, scale=label, **trend)
    if args.save_intermediate:
        for label, fields in result.scale_fields.items():
            write_flow_dir(out / f"scale_{scale_slug(parse_scale(label))}", fields)

    extra.update(_echo_args(args))
    write_run_manifest(str(out / "manifest.txt"), result, extra)
    save_json_data(result.config, "config_snapshot", str(out))
    return {'sequence': seq.sequence_id, 'output': str(out), 'pairs': len(result.fields),
            'seconds': sum(result.scale_seconds.values())}


def _register_worker(config: RegistrationConfig, args: argparse.Namespace, sequence_path: str,
                     output_dir: str) -> Dict[str, object]:
    # worker processes start without the parent's logging setup
    setup_logging_from_config(config, args.log_file)
    return _register_one(config, args, sequence_path, output_dir)


def cmd_register(config: RegistrationConfig, args: argparse.Namespace) -> int:
    config.print_summary()
    if len(args.sequences) == 1:
        targets = [(args.sequences[0], args.output)]
    else:
        targets = [(path, os.path.join(args.output, Path(path).name)) for path in args.sequences]

    if args.jobs > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_register_worker, config, args, path, out) for path, out in targets]
            summaries = [f.result() for f in futures]
    else:
        summaries = [_register_one(config, args, path, out) for path, out in targets]

    for summary in summaries:
        print(f"+ {summary['sequence']}: {summary['pairs']} fields in {summary['seconds']:.1f}s -> {summary['output']}")
    return EXIT_OK


def cmd_pretrain(config: RegistrationConfig, args: argparse.Namespace) -> int:
    settings = settings_from_args(config, args)
    sched = schedule_from_args(config, args)
    train_set = [ImageSequence.from_sequence_dir(read_sequence(path)) for path in args.sequences]
    iterations = args.iterations or sched.steps * len(train_set)
    params = pretrain(train_set, sched, iterations, settings, output_dir=args.output)
    print(f"+ Wrote {len(params)} checkpoints to {args.output}")
    return EXIT_OK


def cmd_eval(config: RegistrationConfig, args: argparse.Namespace) -> int:
    seq = read_sequence(args.sequence)
    flows = read_flow_dir(args.flows)
    radius = args.radius if args.radius is not None else config.mean_cc_radius
    report = evaluate_sequence(seq.frames, flows, seq.masks, seq.flows, radius=radius,
                               epsilon=config.eval_epsilon)

    out = args.output or args.flows
    os.makedirs(out, exist_ok=True)
    save_dataframe_to_multiple_formats(report.pairs, "eval_pairs", out, config.output_formats)
    save_dataframe_to_multiple_formats(report.summary(), "eval_summary", out, config.output_formats)
    text = report.to_text()
    with open(os.path.join(out, "eval_report.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_viz(config: RegistrationConfig, args: argparse.Namespace) -> int:
    flows = read_flow_dir(args.flows)
    out = Path(args.output or args.flows)
    out.mkdir(parents=True, exist_ok=True)
    for index, flow in enumerate(flows, start=1):
        write_ppm(out / flow_name(index).replace(".flo", ".ppm"), flow_to_color(flow, args.max_mag))
    print(f"+ Rendered {len(flows)} fields to {out}")
    return EXIT_OK


def cmd_selftest(config: RegistrationConfig, args: argparse.Namespace) -> int:
    report = run_selftest(args.suite, inject_fault=args.inject_fault, seed=args.seed)
    print(report.to_text(), end="")
    if not report.passed:
        logger.error("selftest failed", failures=[f"{r.suite}/{r.name}" for r in report.failures()])
        return EXIT_SELFTEST_FAILED
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'register': cmd_register,
    'pretrain': cmd_pretrain,
    'eval': cmd_eval,
    'viz': cmd_viz,
    'selftest': cmd_selftest,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function."""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config)
        setup_logging_from_config(config, args.log_file)
        return COMMANDS[args.command](config, args)

    except DivergenceError as e:
        logger.error("optimization diverged", scale=e.scale, step=e.step, value=e.value)
        print(f"\nx Divergence at scale {e.scale}, step {e.step}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except INPUT_ERRORS as e:
        logger.error("input error", error=str(e), kind=type(e).__name__)
        print(f"\nx {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
