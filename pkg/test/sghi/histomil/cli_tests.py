from __future__ import annotations

import json
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
import torch
from PIL import Image

from sghi.histomil.cli import (
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    EXIT_USAGE_ERROR,
    build_parser,
    run,
)
from sghi.histomil.explain import attention_rollout, per_head_class_attention
from sghi.histomil.features import read_bag
from sghi.histomil.model import (
    Checkpoint,
    ModelConfig,
    bag_tensor,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from sghi.histomil.stain import read_profile, template_tile

if TYPE_CHECKING:
    from pathlib import Path

# =============================================================================
# TESTS HELPERS
# =============================================================================

_MINIMAL_ARGUMENTS: dict[str, list[str]] = {
    "preprocess": ["--input", "i.png", "--mpp", "0.5", "--out", "o"],
    "stain-estimate": ["--tile", "t.png", "--out", "o"],
    "stain-normalize": ["--tiles", "t", "--out", "o"],
    "featurize": ["--tiles", "t", "--out", "o"],
    "synth": ["--out", "o"],
    "train": ["--manifest", "m", "--target", "MSI", "--out", "o"],
    "crossval": ["--manifest", "m", "--target", "MSI", "--out", "o"],
    "sweep": "--manifest m --target MSI --sizes 4 --out o".split(),
    "predict": ["--checkpoint", "c", "--manifest", "m", "--out", "o"],
    "evaluate": ["--scores", "s", "--out", "o"],
    "explain": "--checkpoint c --bag b --grid g --out o".split(),
}


def _write_config(path: Path, settings: dict[str, object]) -> Path:
    path.write_text(json.dumps(settings), encoding="utf-8")
    return path


def _checkerboard_raster(path: Path) -> Path:
    yy, xx = np.mgrid[0:256, 0:256]
    board = (((yy // 8) + (xx // 8)) % 2 * 255).astype(np.uint8)
    pixels = np.repeat(board[..., None], 3, axis=-1)
    pixels[:64, :64] = 255
    Image.fromarray(pixels).save(path)
    return path


def _template_tiles(directory: Path) -> Path:
    directory.mkdir(parents=True)
    for _x in range(2):
        for _y in range(2):
            tile = template_tile(size=64, seed=10 * _x + _y)
            path = directory / f"slide_{_x}_{_y}.png"
            Image.fromarray(tile.pixels).save(path)
    return directory


# =============================================================================
# TESTS
# =============================================================================


def test_parser_knows_every_command() -> None:
    """Every pipeline stage should be a sub-command."""
    parser = build_parser()

    for _command, _arguments in _MINIMAL_ARGUMENTS.items():
        assert parser.parse_args([_command, *_arguments]).command == _command

    args = parser.parse_args(
        "sweep --manifest m --target MSI --target BRAF --sizes 8,16 "
        "--out o --seed 3".split(),
    )
    assert args.target == ["MSI", "BRAF"]
    assert args.sizes == [8, 16]
    assert args.seed == 3

    args = parser.parse_args(
        "preprocess --image i.png --mpp 0.5 --tile-px 32 --out o".split(),
    )
    assert (args.image, args.tile_px) == ("i.png", 32)
    args = parser.parse_args("stain-estimate --tiles t --out o".split())
    assert args.tiles == "t"


def test_usage_errors_exit_with_two(tmp_path: Path) -> None:
    """Bad flags, missing inputs and invalid settings are usage errors."""
    assert run(["--help"]) == EXIT_OK
    assert run([]) == EXIT_USAGE_ERROR
    assert run(["train", "--out", "x"]) == EXIT_USAGE_ERROR
    bad_sizes = [*_MINIMAL_ARGUMENTS["sweep"][:-4], "--sizes", "a,b"]
    assert run(["sweep", *bad_sizes]) == EXIT_USAGE_ERROR
    missing = tmp_path / "missing.csv"
    assert run(["evaluate", "--scores", str(missing), "--out", "r.json"]) == (
        EXIT_USAGE_ERROR
    )
    assert run(["synth", "--out", str(tmp_path), "--threads", "0"]) == (
        EXIT_USAGE_ERROR
    )
    config = _write_config(tmp_path / "bad.json", {"stain_beta": -1})
    assert run(["synth", "--out", str(tmp_path), "--config", str(config)]) == (
        EXIT_USAGE_ERROR
    )


def test_runtime_failures_exit_with_one(tmp_path: Path) -> None:
    """Failures of valid requests, e.g. a raster smaller than one tile,
    exit with one.
    """
    raster = tmp_path / "tiny.png"
    Image.fromarray(np.full((8, 8, 3), 128, dtype=np.uint8)).save(raster)

    code = run(
        [
            "preprocess",
            *("--input", str(raster), "--mpp", "0.5", "--target-mpp", "0.5"),
            *("--tile", "32", "--out", str(tmp_path / "tiles")),
        ],
    )

    assert code == EXIT_RUNTIME_ERROR


def test_schema_violations_exit_with_two(tmp_path: Path) -> None:
    """Malformed manifests and bag files are invalid input."""
    bad_bag = tmp_path / "bad.emb"
    bad_bag.write_bytes(b"NOPE" + bytes(16))
    manifests = {
        "columns.csv": "PATIENT,PATH,t\np1,a.emb,1\n",
        "duplicates.csv": (
            "PATIENT_ID,FEATURE_PATH,t\np1,a.emb,1\np2,a.emb,0\n"
        ),
        "labels.csv": "PATIENT_ID,FEATURE_PATH,t\np1,a.emb,x\n",
        "magic.csv": "PATIENT_ID,FEATURE_PATH,t\np1,bad.emb,1\n",
    }
    for _name, _text in manifests.items():
        manifest = tmp_path / _name
        manifest.write_text(_text, encoding="utf-8")

        code = run(
            [
                "train",
                *("--manifest", str(manifest), "--target", "t"),
                *("--out", str(tmp_path / "model.ckpt")),
            ],
        )

        assert code == EXIT_USAGE_ERROR, _name

    checkpoint = tmp_path / "bad.ckpt"
    checkpoint.write_bytes(b"\x00")
    assert run(
        [
            "predict",
            *("--checkpoint", str(checkpoint)),
            *("--manifest", str(tmp_path / "m.csv")),
            *("--out", str(tmp_path / "scores.csv")),
        ],
    ) == EXIT_USAGE_ERROR


def test_synthetic_train_predict_evaluate(tmp_path: Path) -> None:
    """A small synthetic run should go from data to an evaluation report,
    with run metadata next to every output.
    """
    data, out = tmp_path / "data", tmp_path / "out"
    config = _write_config(
        tmp_path / "config.json",
        {
            "train": {"preset": "mean_pool", "epochs": 3, "lr": 0.01},
            "model": {"input_dim": 16},
            "log_level": "WARNING",
        },
    )
    common = ["--config", str(config), "--seed", "3", "--threads", "2"]

    assert run(
        [
            "synth",
            *common,
            *("--bags 40 --test-bags 20 --dim 16 --shift 2.0".split()),
            *("--prevalence 0.5 --out".split()),
            str(data),
        ],
    ) == EXIT_OK
    assert run(
        [
            "train",
            *common,
            *("--manifest", str(data / "train.csv"), "--target", "MSI"),
            *("--eval-interval", "40", "--out", str(out / "model.ckpt")),
        ],
    ) == EXIT_OK
    assert run(
        [
            "predict",
            *common,
            *("--checkpoint", str(out / "model.ckpt")),
            *("--manifest", str(data / "test.csv")),
            *("--out", str(out / "scores.csv")),
        ],
    ) == EXIT_OK
    assert run(
        [
            "evaluate",
            *common,
            *("--scores", str(out / "scores.csv")),
            *("--out", str(out / "report.json")),
        ],
    ) == EXIT_OK

    checkpoint = load_checkpoint(out / "model.ckpt")
    scores = pd.read_csv(out / "scores.csv")
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    metadata = json.loads(
        (out / "model.ckpt.meta.json").read_text(encoding="utf-8"),
    )

    assert checkpoint.model_config.architecture == "mean_pool"
    assert checkpoint.model_config.input_dim == 16
    assert checkpoint.seed == 3
    assert checkpoint.targets == ("MSI",)
    assert len(scores) == 20
    assert report["MSI"]["n"] == 20
    assert 0.0 <= report["MSI"]["auroc"] <= 1.0
    assert (out / "roc.csv").exists()
    assert (out / "pr.png").exists()
    assert (data / "run_metadata.json").exists()
    assert metadata["command"] == "train"
    assert metadata["seed"] == 3
    assert metadata["config"]["TRAIN"]["epochs"] == 3
    assert str(data / "train.csv") in metadata["inputs"]


def test_stain_commands(tmp_path: Path) -> None:
    """Stain estimation should write a profile; normalization should write
    one tile per input plus the separated stains.
    """
    tiles = _template_tiles(tmp_path / "tiles")
    profile_path = tmp_path / "profile.json"
    normalized = tmp_path / "normalized"

    assert run(
        ["stain-estimate", "--tiles", str(tiles), "--out", str(profile_path)],
    ) == EXIT_OK
    assert run(
        [
            "stain-normalize",
            *("--tiles", str(tiles), "--reference", str(profile_path)),
            *("--per-slide", "--emit-stains", "--out", str(normalized)),
        ],
    ) == EXIT_OK

    profile = read_profile(profile_path)
    names = sorted(_p.name for _p in normalized.glob("*.png"))

    assert profile.stain_matrix.shape == (3, 2)
    assert names == sorted(_p.name for _p in tiles.glob("*.png"))
    assert len(list((normalized / "hematoxylin").glob("*.png"))) == 4
    assert len(list((normalized / "eosin").glob("*.png"))) == 4
    assert (normalized / "run_metadata.json").exists()
    missing = ["--tiles", str(tmp_path / "x"), "--out", "p"]
    assert run(["stain-estimate", *missing]) == EXIT_USAGE_ERROR


def test_preprocess_featurize_explain(tmp_path: Path) -> None:
    """Tiles, a bag and heatmaps should flow from a raster."""
    raster = _checkerboard_raster(tmp_path / "slide.png")
    tiles, heatmaps = tmp_path / "tiles", tmp_path / "maps"
    bag_path = tmp_path / "s1.emb"
    checkpoint_path = tmp_path / "model.ckpt"
    cfg = ModelConfig(
        input_dim=768,
        latent_dim=8,
        layers=1,
        heads=2,
        mlp_hidden=16,
    )
    save_checkpoint(
        Checkpoint.of_model(build_model(cfg, seed=0), 0, 0.5, seed=0),
        checkpoint_path,
    )

    assert run(
        [
            "preprocess",
            *("--input", str(raster), "--mpp", "0.5", "--target-mpp", "0.5"),
            *("--tile", "64", "--slide-id", "s1", "--out", str(tiles)),
        ],
    ) == EXIT_OK
    assert run(
        [
            "featurize",
            *("--tiles", str(tiles), "--patient-id", "p1"),
            *("--out", str(bag_path)),
        ],
    ) == EXIT_OK
    assert run(
        [
            "explain",
            *("--checkpoint", str(checkpoint_path), "--bag", str(bag_path)),
            *("--grid", str(tiles / "grid.json"), "--out", str(heatmaps)),
        ],
    ) == EXIT_OK

    grid = json.loads((tiles / "grid.json").read_text(encoding="utf-8"))
    bag = read_bag(bag_path)
    scores = pd.read_csv(heatmaps / "tile_scores.csv")

    assert (grid["kept"], grid["rejected"]) == (15, 1)
    assert bag.n == 15
    assert bag.d == 768
    assert bag.patient_id == "p1"
    maps = ("rollout.png", "class_scores.png", "head_1.png", "head_2.png")
    for _name in maps:
        with Image.open(heatmaps / _name) as image:
            assert image.size == (64, 64)
    assert list(scores.columns) == [
        "GRID_X",
        "GRID_Y",
        "CLASS_SCORE",
        "ROLLOUT",
        "HEAD_1",
        "HEAD_2",
    ]
    assert len(scores) == 15

    model = load_checkpoint(checkpoint_path).to_model().eval()
    with torch.no_grad():
        trace = model(bag_tensor(bag, model.dtype), capture=True).trace
    assert trace is not None
    np.testing.assert_allclose(
        scores["ROLLOUT"],
        attention_rollout(trace),
        rtol=1e-9,
    )
    np.testing.assert_allclose(
        scores[["HEAD_1", "HEAD_2"]].to_numpy().T,
        per_head_class_attention(trace),
        rtol=1e-9,
    )
    assert scores["ROLLOUT"].sum() <= 1.0 + 1e-9


def test_documented_stain_estimate_takes_one_tile(tmp_path: Path) -> None:
    """``stain-estimate --tile`` should accept a single PNG of any name."""
    tile = tmp_path / "reference.png"
    Image.fromarray(template_tile(size=64, seed=1).pixels).save(tile)
    profile_path = tmp_path / "profile.json"

    assert run(
        ["stain-estimate", "--tile", str(tile), "--out", str(profile_path)],
    ) == EXIT_OK
    assert read_profile(profile_path).stain_matrix.shape == (3, 2)
    assert run(
        [
            "stain-estimate",
            *("--tile", str(tmp_path / "missing.png"), "--out", "p"),
        ],
    ) == EXIT_USAGE_ERROR
