import struct

import pytest
import torch

from threemti.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    load_checkpoint,
    module_checksum,
    read_header,
    save_checkpoint,
    tensor_checksum,
)
from threemti.errors import CheckpointFormatError


def tensors():
    g = torch.Generator().manual_seed(0)
    return {
        "unet.w": torch.randn(4, 3, generator=g),
        "unet.b": torch.randn(3, generator=g, dtype=torch.float64),
        "codec.steps": torch.arange(5),
        "codec.mask": torch.tensor([True, False]),
        "codec.empty": torch.zeros(2, 0, 0, 0),
    }


def save(path, data=None, **kw):
    return save_checkpoint(
        path,
        data if data is not None else tensors(),
        components=["codec", "unet"],
        config={"train": {"seed": 1}},
        config_hash="abc",
        seed=1,
        step=kw.get("step", 10),
        extra=kw.get("extra"),
    )


def test_round_trip_is_bitwise(tmp_path):
    path = save(tmp_path / "c.3mti", extra={"lora": {}})
    ckpt = load_checkpoint(path)
    original = tensors()
    assert set(ckpt.tensors) == set(original)
    for name, value in original.items():
        assert ckpt.tensors[name].dtype == value.dtype
        assert torch.equal(ckpt.tensors[name], value)
    assert ckpt.components == ["codec", "unet"]
    assert ckpt.config == {"train": {"seed": 1}}
    assert ckpt.header["lora"] == {}
    assert set(ckpt.component_state("unet")) == {"w", "b"}


def test_header_fields(tmp_path):
    header = read_header(save(tmp_path / "c.3mti", step=42))
    assert header["format_version"] == FORMAT_VERSION
    assert (header["config_hash"], header["seed"], header["step"]) == ("abc", 1, 42)
    entry = next(e for e in header["tensors"] if e["name"] == "unet.w")
    assert entry["shape"] == [4, 3]
    assert entry["dtype"] == "float32"
    assert entry["nbytes"] == 48


def test_file_starts_with_magic_and_version(tmp_path):
    raw = save(tmp_path / "c.3mti").read_bytes()
    magic, version, length = struct.unpack("<4sIQ", raw[:16])
    assert magic == MAGIC
    assert version == FORMAT_VERSION
    assert length > 0
    assert not (tmp_path / "c.3mti.tmp").exists()


def test_bad_magic_version_and_truncation(tmp_path):
    path = save(tmp_path / "c.3mti")
    raw = path.read_bytes()
    (tmp_path / "magic.3mti").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "version.3mti").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    (tmp_path / "short.3mti").write_bytes(raw[:10])
    (tmp_path / "cut.3mti").write_bytes(raw[:-4])
    for name in ("magic", "version", "short", "cut"):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / f"{name}.3mti")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.3mti")


def test_tensor_checksum():
    a = tensors()
    b = dict(reversed(list(tensors().items())))
    assert tensor_checksum(a) == tensor_checksum(b)
    assert tensor_checksum(a).startswith("sha256:")
    a["unet.w"][0, 0] += 1.0
    assert tensor_checksum(a) != tensor_checksum(b)


def test_module_checksum_tracks_weights():
    layer = torch.nn.Linear(3, 2)
    before = module_checksum(layer)
    assert module_checksum(layer) == before
    with torch.no_grad():
        layer.bias.add_(1.0)
    assert module_checksum(layer) != before
