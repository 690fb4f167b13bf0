import json
from pathlib import Path

import pytest
import yaml

from tests.conftest import TINY_CONFIG, write_dataset
from threemti.cli import SourceSpec, main, select_records
from threemti.config import load_config, short_hash
from threemti.errors import ConfigError
from threemti.imaging import load_rgb, load_thermal, read_png_provenance
from threemti.logs import FORMAT_VERSION
from threemti.manifest import load_manifest


def cli(*args) -> int:
    return main(["--quiet", *map(str, args)])


def gen_toy(out: Path, count: int = 5, size: int = 64) -> Path:
    assert cli("gen-toy", "--count", count, "--size", size, "--out", out) == 0
    return out / "manifest.jsonl"


def emitted(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-toy", "--count", "0", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-toy", "--count", "3", "--test-fraction", "1.5", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_gen_toy_is_byte_deterministic(tmp_path, capsys):
    a = gen_toy(tmp_path / "a")
    info = emitted(capsys)
    b = gen_toy(tmp_path / "b")
    assert (info["count"], info["test"], info["size"]) == (5, 1, 64)
    assert info["config_hash"] == short_hash(load_config(None, "toy"))
    assert read_png_provenance(tmp_path / "a" / "rgb" / "toy-00000.png") == {
        "format_version": str(FORMAT_VERSION),
        "config_hash": info["config_hash"],
        "seed": "0",
    }
    assert a.read_bytes() == b.read_bytes()
    for sub in ("rgb", "thermal"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    manifest = load_manifest(a)
    assert [r.id for r in manifest.records] == [f"toy-{i:05d}" for i in range(5)]
    assert [r.split for r in manifest.records] == ["train"] * 4 + ["test"]


def test_seed_changes_the_scenes(tmp_path):
    gen_toy(tmp_path / "a")
    assert cli("gen-toy", "--count", 5, "--size", 64, "--seed", 7, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "rgb" / "toy-00000.png").read_bytes()
    assert a != (tmp_path / "b" / "rgb" / "toy-00000.png").read_bytes()


def test_prepare_applies_toy_geometry(tmp_path, capsys):
    src = gen_toy(tmp_path / "src", size=128)
    out = tmp_path / "prepared"
    assert cli("prepare", "--src-manifest", src, "--test-warp", "--out", out) == 0
    capsys.readouterr()
    manifest = load_manifest(out / "manifest.jsonl")
    rec = manifest.get("toy-00000")
    assert load_thermal(manifest.resolve(rec.lr_thermal_path)).shape == (1, 32, 32)
    assert load_rgb(manifest.resolve(rec.rgb_ref_path)).shape == (3, 128, 128)
    assert load_thermal(manifest.resolve(rec.gt_thermal_path)).shape == (1, 128, 128)
    for r in manifest.records:
        assert r.warp.is_identity == (r.split == "train")


def test_prepare_mixes_named_sources(tmp_path, capsys):
    src = gen_toy(tmp_path / "src", size=64)
    capsys.readouterr()
    out = tmp_path / "mixed"
    sizes = ["--set", "data.lr_size=8", "--set", "data.ref_size=32"]
    sources = ["--src-manifest", f"a={src}:3", "--src-manifest", f"b={src}"]
    assert cli("prepare", *sizes, *sources, "--out", out) == 0
    assert emitted(capsys)["count"] == 8
    ids = [r.id for r in load_manifest(out / "manifest.jsonl").records]
    assert sum(i.startswith("a-") for i in ids) == 3
    assert sum(i.startswith("b-") for i in ids) == 5


def test_source_spec_parsing():
    assert SourceSpec.parse("data/m.jsonl") == SourceSpec("", Path("data/m.jsonl"), None)
    assert SourceSpec.parse("flir=data/m.jsonl") == SourceSpec("flir", Path("data/m.jsonl"))
    assert SourceSpec.parse("flir=data/m.jsonl:40") == SourceSpec("flir", Path("data/m.jsonl"), 40)


def test_select_records_is_seeded_subset(tmp_path):
    manifest = load_manifest(gen_toy(tmp_path / "src"))
    spec = SourceSpec("x", manifest.path, 3)
    picked = select_records(manifest, spec, seed=0)
    assert len(picked) == 3
    assert picked == select_records(manifest, spec, seed=0)
    assert set(r.id for r in picked) <= {r.id for r in manifest.records}
    assert select_records(manifest, SourceSpec("x", manifest.path), 0) == manifest.records
    with pytest.raises(ConfigError):
        select_records(manifest, SourceSpec("x", manifest.path, 6), seed=0)


@pytest.fixture
def tiny_yaml(tmp_path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG), encoding="utf-8")
    return path


@pytest.fixture
def trained(tmp_path, tiny_yaml, cfg, capsys) -> tuple[Path, Path]:
    manifest = write_dataset(tmp_path / "data", cfg, count=6, n_test=2)
    out = tmp_path / "run"
    assert cli("train", "--config", tiny_yaml, "--manifest", manifest.path, "--out", out) == 0
    info = emitted(capsys)
    assert info["steps"] == 3
    return Path(info["checkpoint"]), manifest.path


def test_eval_oracle(tmp_path, trained, capsys):
    ckpt, manifest = trained
    out = tmp_path / "eval"
    assert cli("eval", "--checkpoint", ckpt, "--manifest", manifest, "--oracle", "--out", out) == 0
    info = emitted(capsys)
    assert info["count"] == 2
    assert info["psnr_db"]["mean"] == float("inf")
    assert info["ssim"]["mean"] == pytest.approx(1.0)
    assert (out / "reports" / "metrics_aligned.json").is_file()


def test_eval_warped(tmp_path, trained, capsys):
    ckpt, manifest = trained
    out = tmp_path / "eval"
    args = ["--checkpoint", ckpt, "--manifest", manifest, "--warp-test", "--out", out]
    assert cli("eval", *args) == 0
    assert emitted(capsys)["condition"] == "warped"
    assert (out / "reports" / "metrics_warped.csv").is_file()


def test_eval_settings_layer_over_the_checkpoint(tmp_path, trained, capsys):
    ckpt, manifest = trained
    base = ["eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", tmp_path / "eval"]
    assert cli(*base, "--set", "eval.warp_test=true") == 0
    assert emitted(capsys)["condition"] == "warped"
    assert cli(*base, "--set", "eval.warp_test=true", "--no-warp-test") == 0
    assert emitted(capsys)["condition"] == "aligned"
    assert cli(*base, "--preset", "paper-geometry", "--set", "eval.sample_grids=0") == 0
    assert emitted(capsys)["count"] == 2
    assert cli(*base, "--set", "unet.heads=4") == 1
    assert "architecture" in capsys.readouterr().err


def test_infer(tmp_path, trained, capsys):
    ckpt, manifest = trained
    data = manifest.parent
    out = tmp_path / "infer"
    base = ["infer", "--checkpoint", ckpt, "--thermal", data / "lr" / "toy-00000.png"]
    with pytest.raises(SystemExit) as exc:
        cli(*base, "--out", out)
    assert exc.value.code == 2

    assert cli(*base, "--no-reference", "--out", out) == 0
    info = emitted(capsys)
    assert info["references"] == 0
    plain = Path(info["output"])
    assert plain == out / "samples" / "toy-00000_sr.png"
    assert load_thermal(plain).shape == (1, 32, 32)
    assert (out / "config.yaml").is_file()

    guided = tmp_path / "guided.png"
    ref = data / "ref" / "toy-00000.png"
    args = ["--reference", ref, "--seed", 3, "--out", out, "--output", guided]
    assert cli(*base, *args) == 0
    info = emitted(capsys)
    assert info["references"] == 1
    assert load_thermal(guided).shape == (1, 32, 32)
    assert read_png_provenance(guided) == {
        "format_version": str(FORMAT_VERSION),
        "config_hash": info["config_hash"],
        "seed": "3",
    }
    assert read_png_provenance(plain)["seed"] == "0"
    assert cli(*base, "--reference", ref, "--no-reference", "--out", out) == 1


def test_runtime_errors_exit_1(tmp_path, tiny_yaml, capsys):
    missing = tmp_path / "missing.jsonl"
    base = ["train", "--config", tiny_yaml, "--manifest", missing, "--out", tmp_path / "run"]
    assert cli(*base) == 1
    assert "missing.jsonl" in capsys.readouterr().err
    assert cli(*base, "--set", "train.bogus=1") == 1
    assert "bogus" in capsys.readouterr().err
