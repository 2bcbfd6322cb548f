"""The ``histomil`` command line.

Every command validates its inputs, runs one pipeline stage and writes a
run-metadata JSON (command, effective configuration, seeds, package
versions and input hashes) next to its outputs. Exit codes: ``0`` on
success, ``2`` on invalid usage or input (schema violations included),
``1`` on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import importlib_metadata
import numpy as np
import pandas as pd
from PIL import Image

from . import app
from .config import ConfigurationError, load_settings_file, resolve_settings
from .exceptions import HistoMILError
from .explain import (
    align_to_grid,
    attention_rollout,
    load_thumbnail,
    per_head_class_attention,
    per_patch_class_scores,
    quantile_clamp_normalize,
    render_heatmap,
    save_heatmap,
)
from .features import (
    featurize_tiles,
    load_manifest,
    read_bag,
    write_bag,
)
from .imaging import (
    DEFAULT_TARGET_MPP,
    DEFAULT_TILE_PX,
    Tile,
    filter_grid,
    load_raster,
    read_grid_manifest,
    read_tiles,
    tessellate,
    tile_file_name,
    write_tiles,
)
from .metrics import (
    evaluation_report,
    read_scores_csv,
    write_curves,
    write_scores_csv,
)
from .model import bag_tensor, load_checkpoint, save_checkpoint
from .settings import effective_train_config
from .stain import (
    default_reference_profile,
    estimate_slide_profile,
    normalize_tile,
    read_profile,
    write_profile,
)
from .synth import DEFAULT_TARGET, SyntheticMILTask, write_synthetic_split
from .train import (
    cross_validate,
    load_labelled_bags,
    make_folds,
    score_patients,
    sweep,
    train_loop,
)
from .utils import file_sha256

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

# =============================================================================
# CONSTANTS
# =============================================================================

EXIT_OK: Final[int] = 0

EXIT_RUNTIME_ERROR: Final[int] = 1

EXIT_USAGE_ERROR: Final[int] = 2

RUN_METADATA_NAME: Final[str] = "run_metadata.json"

_VERSIONED_DISTRIBUTIONS: Final[tuple[str, ...]] = (
    "sghi-histomil",
    "numpy",
    "scipy",
    "scikit-image",
    "pillow",
    "torch",
    "pandas",
    "matplotlib",
)

_logger = logging.getLogger(__name__)


# =============================================================================
# RUN METADATA
# =============================================================================


def _jsonable(value: Any) -> Any:  # noqa: ANN401
    if is_dataclass(value) and not isinstance(value, type):
        return {
            _f.name: _jsonable(getattr(value, _f.name)) for _f in fields(value)
        }
    if isinstance(value, dict):
        return {str(_k): _jsonable(_v) for _k, _v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(_v) for _v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _versions() -> dict[str, str | None]:
    versions: dict[str, str | None] = {}
    for _name in _VERSIONED_DISTRIBUTIONS:
        try:
            versions[_name] = importlib_metadata.version(_name)
        except importlib_metadata.PackageNotFoundError:
            versions[_name] = None
    return versions


def _input_hashes(paths: Iterable[Path]) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for _path in paths:
        members = sorted(_path.rglob("*")) if _path.is_dir() else [_path]
        hashes.update(
            {str(_m): file_sha256(_m) for _m in members if _m.is_file()},
        )
    return hashes


def write_run_metadata(
    out: Path,
    args: argparse.Namespace,
    inputs: Iterable[Path],
) -> Path:
    """Write the run metadata of ``args.command`` for the output ``out``:
    ``<out>.meta.json`` for files, ``<out>/run_metadata.json`` for
    directories.
    """
    target = (
        out / RUN_METADATA_NAME if out.is_dir() else Path(f"{out}.meta.json")
    )
    metadata = {
        "command": args.command,
        "arguments": {
            _k: _jsonable(_v)
            for _k, _v in sorted(vars(args).items())
            if _k != "handler"
        },
        "config": _jsonable(app.conf.as_dict()),
        "seed": app.conf.SEED,
        "versions": _versions(),
        "inputs": _input_hashes(inputs),
    }
    target.write_text(
        json.dumps(metadata, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    return target


def _output_file(raw: str | Path) -> Path:
    path = Path(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(payload: Any, path: Path) -> None:  # noqa: ANN401
    _output_file(path)
    path.write_text(json.dumps(_jsonable(payload), indent=2), encoding="utf-8")


def _tile_paths(tiles_dir: Path) -> list[Path]:
    if not tiles_dir.is_dir():
        _err_msg = f"Tile directory '{tiles_dir}' does not exist."
        raise FileNotFoundError(_err_msg)
    return sorted(
        _p
        for _p in tiles_dir.glob("*.png")
        if not _p.stem.endswith("_thumbnail")
    )


# =============================================================================
# COMMANDS
# =============================================================================


def _cmd_preprocess(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    image = load_raster(args.image, mpp=args.mpp)
    slide_id = args.slide_id or Path(args.image).stem
    grid = tessellate(image, args.target_mpp, args.tile_px, slide_id=slide_id)
    grid = filter_grid(grid, app.conf.TILE_FILTER, threads=app.conf.THREADS)
    write_tiles(grid, args.out, app.conf.TILE_FILTER)
    return Path(args.out), [Path(args.image)]


def _load_tile(path: Path) -> Tile:
    with Image.open(path) as img:
        return Tile(
            pixels=np.asarray(img.convert("RGB"), dtype=np.uint8).copy(),
            grid_x=0,
            grid_y=0,
        )


def _cmd_stain_estimate(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    if args.tiles:
        inputs = [Path(args.tiles)]
        tiles = [_t for _, _t in read_tiles(_tile_paths(inputs[0]))]
    else:
        inputs = [Path(_p) for _p in args.tile]
        tiles = [_load_tile(_p) for _p in inputs]
    profile = estimate_slide_profile(
        tiles,
        alpha_percentile=app.conf.STAIN_ALPHA,
        beta=app.conf.STAIN_BETA,
    )
    out = _output_file(args.out)
    write_profile(profile, out)
    return out, inputs


def _cmd_stain_normalize(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    paths = _tile_paths(Path(args.tiles))
    tiles = read_tiles(paths)
    reference = (
        read_profile(args.reference)
        if args.reference
        else default_reference_profile()
    )
    alpha, beta = app.conf.STAIN_ALPHA, app.conf.STAIN_BETA
    source = None
    if app.conf.STAIN_PER_SLIDE:
        source = estimate_slide_profile(
            [_t for _, _t in tiles],
            alpha_percentile=alpha,
            beta=beta,
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    passed_through = 0
    for _slide_id, _tile in tiles:
        result = normalize_tile(
            _tile,
            reference,
            alpha_percentile=alpha,
            beta=beta,
            source=source,
            emit_stains=args.emit_stains,
        )
        passed_through += not result.normalized
        name = tile_file_name(_slide_id, _tile)
        Image.fromarray(result.tile.pixels).save(out / name)
        for _folder, _stain in (
            ("hematoxylin", result.hematoxylin),
            ("eosin", result.eosin),
        ):
            if _stain is not None:
                (out / _folder).mkdir(exist_ok=True)
                Image.fromarray(_stain.pixels).save(out / _folder / name)
    if passed_through:
        _logger.warning(
            "%d tile(s) passed through unnormalized.",
            passed_through,
        )
    inputs = [Path(args.tiles)]
    if args.reference:
        inputs.append(Path(args.reference))
    return out, inputs


def _cmd_featurize(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    loaded = read_tiles(_tile_paths(Path(args.tiles)))
    if not loaded:
        _err_msg = f"No tiles found in '{args.tiles}'."
        raise FileNotFoundError(_err_msg)
    slide_id = args.slide_id or loaded[0][0]
    bag = featurize_tiles(
        slide_id,
        [_t for _, _t in loaded],
        seed=app.conf.SEED,
        threads=app.conf.THREADS,
        patient_id=args.patient_id,
    )
    out = _output_file(args.out)
    write_bag(bag, out)
    return out, [Path(args.tiles)]


def _cmd_synth(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    task = SyntheticMILTask(
        dim=args.dim,
        shift=args.shift,
        prevalence=args.prevalence,
        task_seed=app.conf.SEED,
    )
    out = Path(args.out)
    write_synthetic_split(
        task.sample(args.bags, seed=app.conf.SEED, prefix="train"),
        out,
        "train",
        target=args.target_name,
    )
    if args.test_bags:
        write_synthetic_split(
            task.sample(args.test_bags, seed=app.conf.SEED + 1, prefix="test"),
            out,
            "test",
            target=args.target_name,
        )
    return out, []


def _cmd_train(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    cfg = effective_train_config(app.conf)
    targets = args.target
    manifest = load_manifest(args.manifest)
    bags = load_labelled_bags(manifest, targets, threads=app.conf.THREADS)
    inputs = [Path(args.manifest)]
    if args.val_manifest:
        val_manifest = load_manifest(args.val_manifest)
        val = list(load_labelled_bags(val_manifest, targets).values())
        train = list(bags.values())
        inputs.append(Path(args.val_manifest))
    else:
        folds = make_folds(
            manifest.subset(bags),
            targets[0],
            k=5,
            seed=cfg.seed,
        ).folds
        val = [bags[_p] for _p in folds[0]]
        train = [bags[_p] for _fold in folds[1:] for _p in _fold]
    cfg = cfg.replace(model=cfg.model.replace(num_targets=len(targets)))
    checkpoint = train_loop(train, val, cfg, targets=targets)
    out = _output_file(args.out)
    save_checkpoint(checkpoint, out)
    return out, inputs


def _cmd_crossval(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    cfg = effective_train_config(app.conf)
    cfg = cfg.replace(model=cfg.model.replace(num_targets=len(args.target)))
    out = Path(args.out)
    result = cross_validate(
        load_manifest(args.manifest),
        args.target,
        cfg,
        k=args.folds,
        seed=cfg.seed,
        out_dir=out,
        external=load_manifest(args.external) if args.external else None,
        threads=app.conf.THREADS,
    )
    _write_json(result.as_dict(), out / "results.json")
    inputs = [Path(args.manifest)]
    if args.external:
        inputs.append(Path(args.external))
    return out, inputs


def _cmd_sweep(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    cfg = effective_train_config(app.conf)
    cfg = cfg.replace(model=cfg.model.replace(num_targets=len(args.target)))
    result = sweep(
        load_manifest(args.manifest),
        args.target,
        cfg,
        sizes=args.sizes,
        repeats=args.repeats,
        seed=cfg.seed,
        test=load_manifest(args.test_manifest) if args.test_manifest else None,
        threads=app.conf.THREADS,
    )
    _write_json(result.as_dict(), Path(args.out))
    inputs = [Path(args.manifest)]
    if args.test_manifest:
        inputs.append(Path(args.test_manifest))
    return Path(args.out), inputs


def _cmd_predict(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    targets = list(checkpoint.targets or manifest.target_names)
    missing = set(targets) - set(manifest.target_names)
    if missing:
        _err_msg = (
            f"Manifest lacks target column(s): {', '.join(sorted(missing))}."
        )
        raise ValueError(_err_msg)
    bags = load_labelled_bags(
        manifest,
        targets,
        patients=manifest.patients(),
        threads=app.conf.THREADS,
    )
    out = _output_file(args.out)
    write_scores_csv(score_patients(checkpoint, bags, targets), out)
    return out, [Path(args.checkpoint), Path(args.manifest)]


def _cmd_evaluate(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    out = Path(args.out)
    curves_dir = Path(args.curves_dir) if args.curves_dir else out.parent
    scored = read_scores_csv(args.scores)
    report: dict[str, Any] = {}
    for _target, _set in scored.items():
        report[_target] = evaluation_report(_set, args.gmean_threshold)
        prefix = "" if len(scored) == 1 else f"{_target}_"
        write_curves(_set, curves_dir, prefix=prefix)
    _write_json(report, out)
    return out, [Path(args.scores)]


def _cmd_explain(args: argparse.Namespace) -> tuple[Path, list[Path]]:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.to_model()
    bag = read_bag(args.bag)
    if bag.coords is None:
        _err_msg = f"Bag '{args.bag}' carries no tile coordinates."
        raise ValueError(_err_msg)
    coords = bag.coords
    grid_path = Path(args.grid)
    grid = read_grid_manifest(grid_path)
    raw_grid = json.loads(grid_path.read_text(encoding="utf-8"))
    cell_px = int(raw_grid.get("thumbnail_cell_px", 16))
    thumbnail_path = grid_path.parent / raw_grid.get("thumbnail", "")
    thumbnail = (
        load_thumbnail(thumbnail_path) if thumbnail_path.is_file() else None
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def render(scores: np.ndarray, mode: str, name: str) -> None:
        aligned = align_to_grid(grid, coords, scores)
        if mode != "class_score":
            aligned = quantile_clamp_normalize(aligned)
        image = render_heatmap(
            grid,
            aligned,
            mode=mode,  # type: ignore[arg-type]
            cell_px=cell_px,
            thumbnail=thumbnail,
        )
        save_heatmap(image, out / name)

    columns: dict[str, np.ndarray] = {}
    class_scores = per_patch_class_scores(
        bag,
        model,
        target=args.target_index,
        threads=app.conf.THREADS,
    )
    columns["class_score"] = class_scores
    render(class_scores, "class_score", "class_scores.png")

    output = model(bag_tensor(bag, model.dtype), capture=True)
    if output.trace is not None and output.trace.num_class_tokens:
        rollout = attention_rollout(output.trace, target=args.target_index)
        columns["rollout"] = rollout
        render(rollout, "attention", "rollout.png")
        heads = per_head_class_attention(
            output.trace,
            target=args.target_index,
        )
        for _head, _scores in enumerate(heads, start=1):
            columns[f"head_{_head}"] = _scores
            render(_scores, "attention", f"head_{_head}.png")
    elif output.instance_weights is not None:
        weights = output.instance_weights.double().numpy()
        columns["attention"] = weights
        render(weights, "attention", "attention.png")

    frame = pd.DataFrame(
        {
            "GRID_X": coords[:, 0],
            "GRID_Y": coords[:, 1],
            **{_k.upper(): _v for _k, _v in columns.items()},
        },
    )
    frame.to_csv(out / "tile_scores.csv", index=False)
    return out, [Path(args.checkpoint), Path(args.bag), grid_path]


# =============================================================================
# ARGUMENT PARSING
# =============================================================================


def _sizes(raw: str) -> list[int]:
    try:
        sizes = [int(_s) for _s in raw.split(",") if _s.strip()]
    except ValueError:
        _err_msg = f"'{raw}' is not a comma-separated list of integers."
        raise argparse.ArgumentTypeError(_err_msg) from None
    if not sizes:
        raise argparse.ArgumentTypeError("At least one size is required.")
    return sizes


def _add_command(
    subparsers: Any,  # noqa: ANN401
    name: str,
    handler: Callable[[argparse.Namespace], tuple[Path, list[Path]]],
    help_text: str,
    common: argparse.ArgumentParser,
) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, help=help_text, parents=[common])
    parser.set_defaults(handler=handler)
    return parser


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--manifest",
        required=True,
        help="Labelled CSV manifest.",
    )
    parser.add_argument(
        "--target",
        action="append",
        required=True,
        help="Target column to train on; repeat for multi-target models.",
    )
    parser.add_argument(
        "--preset",
        choices=("transformer", "attention_mil", "mean_pool"),
        help="Training preset (default: transformer).",
    )
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--eval-interval", type=int)


def build_parser() -> argparse.ArgumentParser:
    """Create the ``histomil`` argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file.")
    common.add_argument(
        "--threads",
        type=int,
        help="Worker cap for parallel maps.",
    )
    common.add_argument(
        "--seed",
        type=int,
        help="Seed for every random component.",
    )
    common.add_argument(
        "--log-level",
        choices=("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"),
    )

    parser = argparse.ArgumentParser(
        prog="histomil",
        description=(
            "Weakly-supervised biomarker prediction from slide images."
        ),
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    cmd = _add_command(
        subparsers,
        "preprocess",
        _cmd_preprocess,
        "Tessellate a raster and drop uninformative tiles.",
        common,
    )
    cmd.add_argument("--input", "--image", dest="image", required=True)
    cmd.add_argument(
        "--mpp",
        type=float,
        required=True,
        help="Source microns/pixel.",
    )
    cmd.add_argument("--target-mpp", type=float, default=DEFAULT_TARGET_MPP)
    cmd.add_argument(
        "--tile",
        "--tile-px",
        dest="tile_px",
        type=int,
        default=DEFAULT_TILE_PX,
        help="Tile edge in pixels at the target resolution.",
    )
    cmd.add_argument("--slide-id")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "stain-estimate",
        _cmd_stain_estimate,
        "Estimate a stain profile from one tile or a directory of tiles.",
        common,
    )
    source = cmd.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--tile",
        action="append",
        help="Tile PNG; repeatable.",
    )
    source.add_argument("--tiles", help="Directory of tile PNGs.")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "stain-normalize",
        _cmd_stain_normalize,
        "Normalize tiles to a reference stain profile.",
        common,
    )
    cmd.add_argument("--tiles", required=True)
    cmd.add_argument(
        "--reference",
        help="Profile JSON (default: bundled template).",
    )
    cmd.add_argument(
        "--per-slide",
        action="store_true",
        default=None,
        help="Estimate one source profile per slide instead of per tile.",
    )
    cmd.add_argument("--emit-stains", action="store_true")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "featurize",
        _cmd_featurize,
        "Embed tiles with the stub extractor into a bag file.",
        common,
    )
    cmd.add_argument("--tiles", required=True)
    cmd.add_argument("--slide-id")
    cmd.add_argument("--patient-id")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "synth",
        _cmd_synth,
        "Generate a synthetic multiple-instance dataset.",
        common,
    )
    cmd.add_argument("--bags", type=int, default=500)
    cmd.add_argument("--test-bags", type=int, default=200)
    cmd.add_argument("--dim", type=int, default=768)
    cmd.add_argument("--shift", type=float, default=1.5)
    cmd.add_argument("--prevalence", type=float, default=0.15)
    cmd.add_argument("--target-name", default=DEFAULT_TARGET)
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "train",
        _cmd_train,
        "Train one model.",
        common,
    )
    _add_training_flags(cmd)
    cmd.add_argument(
        "--val-manifest",
        help="Validation cohort (default: 1/5 held out).",
    )
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "crossval",
        _cmd_crossval,
        "Rotating k-fold cross-validation.",
        common,
    )
    _add_training_flags(cmd)
    cmd.add_argument("--folds", type=int, default=5)
    cmd.add_argument("--external", help="External cohort manifest.")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "sweep",
        _cmd_sweep,
        "Data-efficiency sweep over training-set sizes.",
        common,
    )
    _add_training_flags(cmd)
    cmd.add_argument("--sizes", type=_sizes, required=True)
    cmd.add_argument("--repeats", type=int, default=5)
    cmd.add_argument("--test-manifest")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "predict",
        _cmd_predict,
        "Score a manifest with a checkpoint.",
        common,
    )
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--manifest", required=True)
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "evaluate",
        _cmd_evaluate,
        "Metrics, thresholds and curves for a scores CSV.",
        common,
    )
    cmd.add_argument("--scores", required=True)
    cmd.add_argument(
        "--gmean-threshold",
        type=float,
        help="Use this (e.g. validation-selected) threshold for F1 (gmean).",
    )
    cmd.add_argument("--curves-dir")
    cmd.add_argument("--out", required=True)

    cmd = _add_command(
        subparsers,
        "explain",
        _cmd_explain,
        "Heatmaps of rollout, per-head attention and per-tile scores.",
        common,
    )
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--bag", required=True)
    cmd.add_argument("--grid", required=True)
    cmd.add_argument("--target-index", type=int, default=0)
    cmd.add_argument("--out", required=True)
    return parser


def _flag_settings(args: argparse.Namespace) -> dict[str, Any]:
    train = {
        "preset": getattr(args, "preset", None),
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "eval_interval": getattr(args, "eval_interval", None),
    }
    return {
        "SEED": args.seed,
        "THREADS": args.threads,
        "LOG_LEVEL": args.log_level,
        "STAIN_PER_SLIDE": getattr(args, "per_slide", None),
        "TRAIN": {_k: _v for _k, _v in train.items() if _v is not None},
    }


def _report(message: str) -> None:
    print(message, file=sys.stderr)  # noqa: T201


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, set up the configuration and run the command.

    :return: The process exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exp:
        return EXIT_OK if exp.code in (0, None) else EXIT_USAGE_ERROR

    try:
        file_settings = load_settings_file(args.config) if args.config else {}
        app.setup(resolve_settings(file_settings, _flag_settings(args)))
        out, inputs = args.handler(args)
        write_run_metadata(out, args, inputs)
    except (
        ValueError,
        TypeError,
        ConfigurationError,
        FileNotFoundError,
    ) as exp:
        _logger.debug("Invalid input.", exc_info=exp)
        _report(f"histomil {args.command}: error: {exp}")
        return EXIT_USAGE_ERROR
    except (HistoMILError, OSError, LookupError, RuntimeError) as exp:
        _logger.error("Command '%s' failed.", args.command, exc_info=exp)
        _report(f"histomil {args.command}: failed: {exp}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


def main() -> None:  # pragma: no cover
    sys.exit(run())


__all__ = [
    "EXIT_OK",
    "EXIT_RUNTIME_ERROR",
    "EXIT_USAGE_ERROR",
    "build_parser",
    "main",
    "run",
    "write_run_metadata",
]
