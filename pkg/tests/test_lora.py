import pytest
import torch
import torch.nn as nn

from threemti.checkpoint import module_checksum
from threemti.csm_unet import count_params
from threemti.errors import AdaptersAbsent, ConfigError, NoMatch
from threemti.lora import (
    LoraAdapter,
    inject,
    is_adaptable,
    lora_sites,
    lora_spec,
    merge,
    restore_sites,
)


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.proj = nn.Linear(64, 64)
        self.mix = nn.Conv2d(8, 8, 1)
        self.conv = nn.Conv2d(8, 8, 3, padding=1)
        self.head = nn.Linear(64, 10)

    def forward(self, x: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
        vec = self.head(self.proj(x)).flatten(1)
        return torch.cat([vec, self.conv(self.mix(img)).flatten(1)], dim=1)


def inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(4, 64, generator=g), torch.randn(4, 8, 5, 5, generator=g)


def test_adaptable_layers():
    assert is_adaptable(nn.Linear(2, 3))
    assert is_adaptable(nn.Conv2d(2, 3, 1))
    assert not is_adaptable(nn.Conv2d(2, 3, 3))
    assert not is_adaptable(nn.Conv2d(2, 3, 1, stride=2))
    with pytest.raises(TypeError):
        LoraAdapter(nn.Conv2d(2, 3, 3), rank=1)
    with pytest.raises(ConfigError):
        LoraAdapter(nn.Linear(2, 3), rank=0)


def test_parameter_count_formula():
    torch.manual_seed(0)
    model = Block()
    before = count_params(model)
    assert inject(model, "proj", rank=16) == ["proj"]
    assert count_params(model) - before == 16 * (64 + 64)
    assert count_params(model, trainable_only=True) == before - (64 * 64 + 64) + 2048
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert {"proj.lora_A", "proj.lora_B"} <= trainable
    assert "proj.base.weight" not in trainable


def test_adapter_init():
    adapter = LoraAdapter(nn.Linear(64, 32), rank=16)
    assert adapter.lora_A.shape == (16, 64)
    assert adapter.lora_B.shape == (32, 16)
    assert torch.count_nonzero(adapter.lora_B) == 0
    assert adapter.scale == 1.0
    assert LoraAdapter(nn.Linear(4, 4), rank=4, alpha=8.0).scale == 2.0


def test_identity_at_injection_is_bitwise():
    torch.manual_seed(0)
    model = Block()
    x, img = inputs()
    before = model(x, img)
    inject(model, ["proj", "mix"], rank=4)
    assert torch.equal(model(x, img), before)


def test_no_match():
    with pytest.raises(NoMatch):
        inject(Block(), "*.nothing", rank=4)
    with pytest.raises(NoMatch):
        inject(Block(), "conv", rank=4)


def test_reinjection_skips_existing_adapters():
    model = Block()
    inject(model, "proj", rank=4)
    with pytest.raises(NoMatch):
        inject(model, "proj*", rank=4)
    assert set(lora_sites(model)) == {"proj"}


def test_merge_right_after_injection_keeps_weights():
    torch.manual_seed(0)
    model = Block()
    weight = model.proj.weight.detach().clone()
    inject(model, "proj", rank=4)
    merge(model)
    assert isinstance(model.proj, nn.Linear)
    assert torch.equal(model.proj.weight, weight)
    assert model.proj.weight.requires_grad


def test_merge_matches_adapted_forward_after_training():
    torch.manual_seed(0)
    model = Block()
    inject(model, ["proj", "mix", "head"], rank=4, alpha=8.0)
    base_sums = {n: module_checksum(a.base) for n, a in lora_sites(model).items()}
    frozen = module_checksum(model.conv)
    model.conv.requires_grad_(False)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    for step in range(100):
        x, img = inputs(step)
        loss = model(x, img).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert {n: module_checksum(a.base) for n, a in lora_sites(model).items()} == base_sums
    assert module_checksum(model.conv) == frozen
    assert torch.count_nonzero(model.proj.lora_B) > 0

    probes = [inputs(1000 + i) for i in range(10)]
    with torch.no_grad():
        adapted = [model(x, img) for x, img in probes]
        merge(model)
        assert lora_sites(model) == {}
        for (x, img), ref in zip(probes, adapted):
            assert (model(x, img) - ref).abs().max() < 1e-5
    with pytest.raises(AdaptersAbsent):
        merge(model)


def test_spec_and_restore():
    torch.manual_seed(0)
    model = Block()
    inject(model, ["proj", "mix"], rank=3, alpha=6.0)
    with torch.no_grad():
        model.proj.lora_B.normal_()
    spec = lora_spec(model)
    assert spec == {"proj": {"rank": 3, "alpha": 6.0}, "mix": {"rank": 3, "alpha": 6.0}}

    fresh = Block()
    restore_sites(fresh, spec)
    fresh.load_state_dict(model.state_dict())
    x, img = inputs()
    assert torch.equal(fresh(x, img), model(x, img))
