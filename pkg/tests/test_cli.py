import json

import numpy as np
import pytest
from PIL import Image

from nada.cli import run_command
from nada.embedding import save_text_table
from nada.generator import load_checkpoint
from nada.trainer import AdaptationConfig, save_config

from helpers import color_task


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A toy source checkpoint, a text table, and a short adaptation run."""
    root = tmp_path_factory.mktemp("cli")
    assert run_command(["init-toy", "--out", str(root / "source.ckpt")]) == 0
    G = load_checkpoint(root / "source.ckpt")
    backend = color_task(G)
    table = {p: backend.encode_text([p])[0].tolist() for p in ("source", "target")}
    save_text_table(table, root / "table.tsv")
    cfg = AdaptationConfig(source_text="source", target_text="target", iterations=4, snapshot_every=4,
                           backends=["mock:3"], text_table=str(root / "table.tsv"),
                           source_checkpoint=str(root / "source.ckpt"), grid_size=4, learning_rate=0.05)
    save_config(cfg, root / "config.json")
    assert run_command(["adapt", "--config", str(root / "config.json"), "--out-dir", str(root / "run")]) == 0
    return root


def test_adapt_writes_run(workspace):
    run = workspace / "run"
    assert (run / "checkpoints" / "iter_000004.ckpt").exists()
    assert (run / "grids" / "iter_000004.png").exists()
    assert len((run / "run.log").read_text().splitlines()) == 4


def test_dry_run_prints_resolved_config(workspace, capsys):
    assert run_command(["adapt", "--config", str(workspace / "config.json"), "--preset", "sketch",
                        "--iterations", "7", "--dry-run"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["iterations"] == 7 and printed["learning_rate"] == 0.002
    assert not (workspace / "run_dry").exists()


def test_sample_grid(workspace, tmp_path):
    out = tmp_path / "grid.png"
    assert run_command(["sample", "--ckpt", str(workspace / "source.ckpt"), "--n", "6", "--cols", "3",
                        "--out", str(out)]) == 0
    assert np.asarray(Image.open(out)).shape == (64, 96, 3)


def test_interpolate_endpoints_match_sample(workspace, tmp_path):
    a, b = workspace / "source.ckpt", workspace / "run" / "checkpoints" / "iter_000004.ckpt"
    assert run_command(["interpolate", "--ckpt-a", str(a), "--ckpt-b", str(b), "--steps", "4",
                        "--seed", "2", "--out-dir", str(tmp_path / "frames")]) == 0
    frames = sorted((tmp_path / "frames").glob("frame_*.png"))
    assert [f.name for f in frames] == [f"frame_{i:03d}.png" for i in range(4)]
    for ckpt, frame in ((a, frames[0]), (b, frames[-1])):
        single = tmp_path / "single.png"
        assert run_command(["sample", "--ckpt", str(ckpt), "--n", "1", "--seed", "2", "--out", str(single)]) == 0
        assert np.array_equal(np.asarray(Image.open(single)), np.asarray(Image.open(frame)))


def test_rank_layers_output(workspace, capsys):
    assert run_command(["rank-layers", "--ckpt", str(workspace / "source.ckpt"), "--target-text", "target",
                        "--backend", "mock:3", "--text-table", str(workspace / "table.tsv"), "--k", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split("\t")[0] for l in lines[:4]] == [f"layer {i}" for i in range(4)]
    assert lines[-1].startswith("selected\t")


def test_map_train_and_export(workspace, tmp_path):
    mapper = tmp_path / "m.ckpt"
    assert run_command(["map-train", "--ckpt", str(workspace / "source.ckpt"), "--target-text", "target",
                        "--steps", "2", "--backend", "mock:3", "--text-table", str(workspace / "table.tsv"),
                        "--out", str(mapper)]) == 0
    out = tmp_path / "export"
    assert run_command(["export-samples", "--ckpt", str(workspace / "source.ckpt"), "--mapper", str(mapper),
                        "--n", "3", "--out-dir", str(out)]) == 0
    assert len(list(out.glob("img_*.png"))) == 3
    assert "count: 3" in (out / "manifest.txt").read_text()


def test_embed_analyze_and_diversity(workspace, tmp_path, capsys):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(5):
        Image.fromarray(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)).save(imgs / f"{i}.png")
    assert run_command(["embed-analyze", "--images", str(imgs), "--texts", "source", "target",
                        "--backend", "mock:3", "--text-table", str(workspace / "table.tsv"),
                        "--out-dir", str(tmp_path / "emb")]) == 0
    coords = (tmp_path / "emb" / "coords.tsv").read_text().splitlines()
    assert coords[0] == "label\tkind\tpc1\tpc2" and len(coords) == 8
    assert (tmp_path / "emb" / "scatter.png").exists()
    capsys.readouterr()
    assert run_command(["diversity", "--images", str(imgs), "--k", "2", "--perceptual", "l2"]) == 0
    assert capsys.readouterr().out.startswith("diversity: ")


def test_catchup(workspace, tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    Image.fromarray(np.full((32, 32, 3), 100, np.uint8)).save(imgs / "a.png")
    assert run_command(["catchup", "--ckpt", str(workspace / "source.ckpt"), "--images", str(imgs),
                        "--steps", "2", "--out", str(tmp_path / "d.ckpt")]) == 0
    assert (tmp_path / "d.ckpt").exists()


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as info:
        run_command(["frobnicate"])
    assert info.value.code == 2


def test_missing_checkpoint_is_clean_error(tmp_path, capsys):
    assert run_command(["sample", "--ckpt", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "x.png")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("nada sample: error:") and len(err.strip().splitlines()) == 1


def test_unknown_prompt_is_clean_error(workspace, tmp_path, capsys):
    assert run_command(["rank-layers", "--ckpt", str(workspace / "source.ckpt"), "--target-text", "Giraffe"]) == 1
    assert "Giraffe" in capsys.readouterr().err
