"""Command line: phantom, skeletonize, synth, train, infer, eval and repair.

Exit codes: 0 success, 1 usage, 2 storage, 3 validation, 4 numeric.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from tuberepair.checkpoint import load_checkpoint
from tuberepair.config import apply_config, read_config
from tuberepair.dataset import collect_samples, generate_dataset, load_datasets, write_phantom_set
from tuberepair.errors import StorageError, TubeRepairError
from tuberepair.heatmap import DEFAULT_SIGMA, render_gaussian
from tuberepair.inference import (MODES, InferenceConfig, NetModel, OracleModel, detect_whole_volume,
                                  evaluate_fixed_crops, oracle_for, pair_components, read_pairs, result_document,
                                  write_result)
from tuberepair.metrics import DEFAULT_LAMBDA, ZERO_VISIBLE_MODES, MetricsConfig, full_report, write_report_csv, \
    write_samples_csv
from tuberepair.network import NetConfig
from tuberepair.repair import graph_radii, repair_volume, write_repair_log
from tuberepair.skeleton import export_graph_json, extract_graph, read_graph
from tuberepair.synth import PhantomParams, SynthConfig
from tuberepair.training import TrainConfig, save_training, train
from tuberepair.util import atomic_write_bytes, read_json, write_json
from tuberepair.visualize import heatmap_figure, save_heatmap_figure
from tuberepair.volume import VoxelCoord, read_volume, write_volume

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def extent_type(text: str) -> tuple:
    """``32`` or ``32,32,48`` -> (d, h, w)."""
    try:
        sizes = tuple(int(part) for part in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid extent {text!r}") from None
    if len(sizes) == 1:
        sizes = sizes * 3
    if len(sizes) != 3 or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"extent needs one or three positive sizes, got {text!r}")
    return sizes


def split_type(text: str) -> tuple:
    """``7:1:2`` -> (7, 1, 2)."""
    try:
        parts = tuple(int(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"split needs three parts train:val:test, got {text!r}")
    return parts


# Subcommands


def cmd_phantom(args: argparse.Namespace) -> None:
    params = PhantomParams(dims=args.dims, depth=args.depth, root_radius=args.root_radius, seed=args.seed)
    index = write_phantom_set(args.out, args.count, params, args.jobs, args.force)
    logger.info("%d phantoms written to %s", len(index["phantoms"]), args.out)


def cmd_skeletonize(args: argparse.Namespace) -> None:
    vol = read_volume(args.input)
    _, graph = extract_graph(vol)
    atomic_write_bytes(args.out, export_graph_json(graph))
    logger.info("graph %s: %d nodes, %d edges%s", args.out, len(graph.nodes), len(graph.edges),
                ", contains cycles" if graph.contains_cycles else "")


def cmd_synth(args: argparse.Namespace) -> None:
    config = SynthConfig(branches_per_volume=args.branches, split_ratio=args.split, seed=args.seed,
                         min_sep=args.min_sep, max_sep=args.max_sep)
    generate_dataset(args.volumes, args.out, config, args.jobs, args.force)


def cmd_train(args: argparse.Namespace) -> None:
    datasets = load_datasets(args.data)
    train_samples = collect_samples(datasets, "train")
    val_samples = collect_samples(datasets, "val")
    logger.info("%d training and %d validation samples from %d datasets", len(train_samples), len(val_samples),
                len(datasets))
    net_config = NetConfig(in_channels=2 if args.variant == "two" else 1, base_width=args.base_width,
                           seed=args.seed)
    config = TrainConfig(batch_size=args.batch_size, crop_extent=args.crop, epochs=args.epochs,
                         patience=args.patience, seed=args.seed, lr=args.lr, max_steps=args.max_steps,
                         init_from=args.init_from)
    result = train(train_samples, val_samples, net_config, config)
    echo = {"net": dataclasses.asdict(net_config), "train": dataclasses.asdict(config),
            "data": [str(path) for path in args.data]}
    save_training(result, args.out, args.seed, echo)


def _oracle_from_meta(path: str, in_channels: int) -> OracleModel:
    try:
        meta = read_json(path)
        pair = (VoxelCoord(*meta["kp1"]), VoxelCoord(*meta["kp2"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StorageError(f"cannot read oracle keypoints from {path}: {exc}") from exc
    return OracleModel([pair], DEFAULT_SIGMA, in_channels)


def cmd_infer(args: argparse.Namespace) -> None:
    vol = read_volume(args.volume)
    if args.ckpt:
        model = NetModel(load_checkpoint(args.ckpt).build_net())
    else:
        model = _oracle_from_meta(args.oracle, 2)
    config = InferenceConfig(crops_per_component=args.crops_per_component, crop_extent=args.crop, mode=args.mode,
                             seed=args.seed, raw_input=args.raw_input)
    result = detect_whole_volume(vol, model, config)
    pairs = pair_components(result)
    extra = {"volume": str(args.volume), "checkpoint": args.ckpt, "oracle": args.oracle}
    write_result(args.out, result_document(result, pairs, config, extra))
    logger.info("%d keypoint pairs written to %s", len(pairs), args.out)


def _figure_writer(directory: Path, limit: int, extent: tuple, lam: float) -> Callable:
    directory.mkdir(parents=True, exist_ok=True)
    written = [0]

    def on_crop(inputs, heatmap, target, record) -> None:
        if written[0] >= limit:
            return
        gt = render_gaussian(target, extent, DEFAULT_SIGMA)
        figure = heatmap_figure(inputs, heatmap, gt, target, record, lam)
        name = f"{record.sample_id.replace(':', '_')}_crop{record.crop_index}.png"
        save_heatmap_figure(figure, directory / name)
        written[0] += 1
    return on_crop


def cmd_eval(args: argparse.Namespace) -> None:
    datasets = load_datasets(args.data)
    samples = collect_samples(datasets, args.split)
    logger.info("%d %s samples", len(samples), args.split)
    if args.oracle:
        model_for, variant = oracle_for, "oracle"
    else:
        net = load_checkpoint(args.ckpt).build_net()
        model = NetModel(net)
        model_for, variant = (lambda sample: model), net.config.variant
    metrics_config = MetricsConfig(lam=args.lam, zero_visible=args.zero_visible)
    on_crop = _figure_writer(Path(args.figures), args.max_figures, args.crop, args.lam) if args.figures else None
    records = evaluate_fixed_crops(samples, model_for, args.crop, DEFAULT_SIGMA, on_crop)
    report = full_report(records, metrics_config)
    out = Path(args.out)
    echo = {"data": [str(path) for path in args.data], "split": args.split, "variant": variant,
            "checkpoint": args.ckpt, "crop_extent": list(args.crop), "metrics": dataclasses.asdict(metrics_config)}
    write_json(out, report.document({"seed": datasets[0].seed, "config": echo}))
    write_report_csv(out.with_suffix(".csv"), [(variant, report)])
    write_samples_csv(out.with_suffix(".samples.csv"), records, args.lam)
    logger.info("AP %s, AP50 %s, E_d %s over %d crops", report.AP, report.AP50, report.E_d, len(records))


def _pair_radii(args: argparse.Namespace, pairs) -> Optional[List[Optional[float]]]:
    if args.radius is not None:
        return [args.radius] * len(pairs)
    if args.meta:
        try:
            radius = float(read_json(args.meta)["branch_mean_radius"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise StorageError(f"cannot read branch radius from {args.meta}: {exc}") from exc
        return [radius] * len(pairs)
    if args.graph:
        return graph_radii(read_graph(args.graph), pairs)
    return None


def cmd_repair(args: argparse.Namespace) -> None:
    vol = read_volume(args.volume)
    pairs = read_pairs(args.detections)
    radii = _pair_radii(args, pairs)
    repaired, entries = repair_volume(vol, pairs, radii).run()
    write_volume(repaired, args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".repair.json"))
    write_repair_log(log_path, entries, {"volume": str(args.volume), "detections": str(args.detections),
                                         "radius": args.radius, "meta": args.meta, "graph": args.graph})
    logger.info("%d pairs bridged, repaired volume %s", len(entries), args.out)


# Parser


def _add_phantom(commands) -> None:
    p = commands.add_parser("phantom", help="Generate procedural tube tree volumes with their branch graphs.")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--count", type=int, default=10, help="Number of phantoms")
    p.add_argument("--dims", type=extent_type, default=(96, 96, 96), help="Volume size, D or D,H,W")
    p.add_argument("--depth", type=int, default=3, help="Bifurcation generations")
    p.add_argument("--root-radius", type=float, default=4.0, help="Trunk radius in voxels")
    p.add_argument("--seed", type=int, default=0, help="Base seed; phantom i uses seed + i")
    p.add_argument("--jobs", type=int, default=1, help="Worker processes")
    p.add_argument("--force", action="store_true", help="Write into a non-empty output directory")
    p.set_defaults(handler=cmd_phantom)


def _add_skeletonize(commands) -> None:
    p = commands.add_parser("skeletonize", help="Extract the branch graph of a volume.")
    p.add_argument("--in", dest="input", required=True, help="Input volume (.btv)")
    p.add_argument("--out", required=True, help="Output graph JSON")
    p.set_defaults(handler=cmd_skeletonize)


def _add_synth(commands) -> None:
    p = commands.add_parser("synth", help="Synthesize a disconnection dataset from intact volumes.")
    p.add_argument("--volumes", required=True, help="Directory of intact .btv volumes")
    p.add_argument("--out", required=True, help="Dataset directory")
    p.add_argument("--branches", type=int, default=30, help="Disconnections per volume")
    p.add_argument("--split", type=split_type, default=(7, 1, 2), help="train:val:test volume ratio")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-sep", type=int, default=4, help="Minimum keypoint separation along the branch")
    p.add_argument("--max-sep", type=int, default=12, help="Maximum keypoint separation along the branch")
    p.add_argument("--jobs", type=int, default=1, help="Worker processes")
    p.add_argument("--force", action="store_true", help="Write into a non-empty output directory")
    p.set_defaults(handler=cmd_synth)


def _add_train(commands) -> None:
    p = commands.add_parser("train", help="Train a keypoint detector.")
    p.add_argument("--data", nargs="+", required=True, help="Dataset directories or manifests, concatenated")
    p.add_argument("--variant", choices=("one", "two"), default="two", help="Input channels")
    p.add_argument("--crop", type=extent_type, default=(32, 32, 32), help="Crop extent")
    p.add_argument("--base-width", type=int, default=16, help="Channels of the first encoder stage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-from", default=None, help="Checkpoint to start from")
    p.add_argument("--out", required=True, help="Checkpoint path")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5, help="Epochs without validation improvement")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(handler=cmd_train)


def _add_infer(commands) -> None:
    p = commands.add_parser("infer", help="Detect disconnection keypoints in a whole volume.")
    p.add_argument("--volume", required=True, help="Disconnected volume (.btv)")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", default=None, help="Trained checkpoint")
    source.add_argument("--oracle", default=None, help="Sample meta.json whose keypoints are rendered instead")
    p.add_argument("--mode", choices=MODES, default="pooled")
    p.add_argument("-T", "--crops-per-component", type=int, default=3, help="Crops per candidate component")
    p.add_argument("--crop", type=extent_type, default=(32, 32, 32), help="Crop extent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-input", action="store_true", help="Feed the raw crop in every channel")
    p.add_argument("--out", required=True, help="Result JSON")
    p.set_defaults(handler=cmd_infer)


def _add_eval(commands) -> None:
    p = commands.add_parser("eval", help="Score a detector on the fixed crops of a dataset split.")
    p.add_argument("--data", nargs="+", required=True, help="Dataset directories or manifests")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", default=None, help="Trained checkpoint")
    source.add_argument("--oracle", action="store_true", help="Render the ground-truth keypoints")
    p.add_argument("--crop", type=extent_type, default=(32, 32, 32), help="Crop extent")
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA, help="OKS lambda")
    p.add_argument("--zero-visible", choices=ZERO_VISIBLE_MODES, default="exclude",
                   help="Crops with no visible keypoint: exclude or count as OKS 0")
    p.add_argument("--out", required=True, help="Report JSON; .csv and .samples.csv are written next to it")
    p.add_argument("--figures", default=None, help="Directory for heatmap slice figures")
    p.add_argument("--max-figures", type=int, default=20)
    p.set_defaults(handler=cmd_eval)


def _add_repair(commands) -> None:
    p = commands.add_parser("repair", help="Bridge detected keypoint pairs.")
    p.add_argument("--volume", required=True, help="Disconnected volume (.btv)")
    p.add_argument("--detections", required=True, help="Result JSON of infer")
    p.add_argument("--out", required=True, help="Repaired volume (.btv)")
    radius = p.add_mutually_exclusive_group()
    radius.add_argument("--radius", type=float, default=None, help="Bridge radius; default reads the tube radius at kp1")
    radius.add_argument("--meta", default=None, help="Sample meta.json whose branch_mean_radius is the bridge radius")
    radius.add_argument("--graph", default=None, help="Graph JSON; each pair uses the branch running nearest to kp1")
    p.add_argument("--log", default=None, help="Repair log JSON, default <out>.repair.json")
    p.set_defaults(handler=cmd_repair)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tuberepair", description="Repair disconnections in tubular tree volumes.")
    parser.add_argument("--config", default=None, help="key = value file; flags override it")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    commands = parser.add_subparsers(dest="command", required=True)
    for add in (_add_phantom, _add_skeletonize, _add_synth, _add_train, _add_infer, _add_eval, _add_repair):
        add(commands)
    return parser


def subcommand_parsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parses argv with config file values as defaults: built-in default < config file < flag."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        apply_config([parser, *subcommand_parsers(parser).values()], read_config(known.config))
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except TubeRepairError as exc:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error("%s", exc)
        return exc.exit_code
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        args.handler(args)
    except TubeRepairError as exc:
        logger.error("%s: %s", args.command, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s: %s", args.command, exc)
        return StorageError.exit_code
    return 0
