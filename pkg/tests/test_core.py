import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from aclgan.core import (
    PRESETS,
    ConfigError,
    Hyperparameters,
    composite_with_mask,
    hparams_from_dict,
    load_config,
    sample_noise,
    save_config,
    validate_hparams,
)


def test_sample_noise_is_seeded():
    a = sample_noise(3, 8, torch.Generator().manual_seed(7))
    b = sample_noise(3, 8, torch.Generator().manual_seed(7))
    assert a.shape == (3, 8)
    assert torch.equal(a, b)


def test_sample_noise_differs_across_seeds():
    a = sample_noise(3, 8, torch.Generator().manual_seed(7))
    b = sample_noise(3, 8, torch.Generator().manual_seed(8))
    assert not torch.equal(a, b)


def test_sample_noise_moments():
    z = sample_noise(10_000, 8, torch.Generator().manual_seed(1), dtype=torch.float64)
    assert torch.all(z.mean(0).abs() < 0.05)
    assert torch.all((z.var(0) - 1).abs() < 0.1)


@pytest.mark.parametrize("count,d_z", [(0, 8), (3, 0), (-1, 2)])
def test_sample_noise_rejects_bad_sizes(count, d_z):
    with pytest.raises(ValueError):
        sample_noise(count, d_z, torch.Generator().manual_seed(1))


def test_composite_identity_cases():
    g = torch.Generator().manual_seed(0)
    raw = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    src = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    ones = torch.ones(2, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(composite_with_mask(raw, ones, src), raw)
    assert torch.equal(composite_with_mask(raw, ones * 0, src), src)


def test_composite_half_mask():
    out = composite_with_mask(torch.ones(1, 3, 2, 2), torch.full((1, 1, 2, 2), 0.5), torch.zeros(1, 3, 2, 2))
    assert torch.all(out == 0.5)


def test_composite_shape_mismatch():
    with pytest.raises(ValueError):
        composite_with_mask(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 2, 2))
    with pytest.raises(ValueError):
        composite_with_mask(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 2, 2), torch.zeros(1, 3, 4, 4))


unit = st.floats(-1, 1, allow_nan=False)
frac = st.floats(0, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(unit, min_size=4, max_size=4), st.lists(unit, min_size=4, max_size=4),
       st.lists(frac, min_size=4, max_size=4), st.lists(frac, min_size=4, max_size=4), frac)
def test_composite_affine_and_range(raw, src, m1, m2, alpha):
    def t(v, c=3):
        return torch.tensor(v, dtype=torch.float64).view(1, 1, 2, 2).expand(1, c, 2, 2).contiguous()

    raw, src = t(raw), t(src)
    m1, m2 = t(m1, 1), t(m2, 1)
    mixed = composite_with_mask(raw, alpha * m1 + (1 - alpha) * m2, src)
    blend = alpha * composite_with_mask(raw, m1, src) + (1 - alpha) * composite_with_mask(raw, m2, src)
    assert torch.allclose(mixed, blend, atol=1e-12, rtol=0)
    assert mixed.min() >= -1 - 1e-12 and mixed.max() <= 1 + 1e-12


def test_glasses_preset_values():
    h = validate_hparams(PRESETS["glasses"])
    assert (h.lambda_acl, h.lambda_mask, h.delta_min, h.delta_max) == (0.2, 0.025, 0.05, 0.1)
    assert (h.delta, h.epsilon, h.lambda_idt) == (0.001, 0.01, 1.0)


def test_other_presets():
    m2f = PRESETS["male2female"]
    assert (m2f.lambda_acl, m2f.lambda_mask, m2f.delta_min, m2f.delta_max) == (0.2, 0.025, 0.3, 0.5)
    anime = validate_hparams(PRESETS["selfie2anime"])
    assert (anime.lambda_acl, anime.lambda_mask, anime.delta_min, anime.delta_max) == (0.5, 0, 0, 0)
    assert not anime.masked
    for h in PRESETS.values():
        validate_hparams(h)


@pytest.mark.parametrize(
    "changes,field",
    [
        ({"delta_min": 0.5, "delta_max": 0.1}, "delta_min"),
        ({"epsilon": 0.0}, "epsilon"),
        ({"use_mask": False, "lambda_mask": 0.1}, "lambda_mask"),
        ({"lambda_acl": -1.0}, "lambda_acl"),
        ({"image_size": 66}, "image_size"),
        ({"batch_size": 0}, "batch_size"),
    ],
)
def test_validation_names_field(changes, field):
    with pytest.raises(ConfigError) as info:
        validate_hparams(Hyperparameters().replace(**changes))
    assert info.value.field == field


def test_config_roundtrip(tmp_path):
    h = PRESETS["toy"].replace(total_iters=7)
    save_config(h, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == h


def test_config_unknown_key_is_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"preset": "toy", "lamda_acl": 0.3}))
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "c.json")
    assert "lamda_acl" in str(info.value)


def test_config_preset_override():
    h = hparams_from_dict({"preset": "male2female", "total_iters": 10, "betas": [0.5, 0.9]})
    assert h.delta_min == 0.3 and h.total_iters == 10 and h.betas == (0.5, 0.9)
    with pytest.raises(ConfigError):
        hparams_from_dict({"preset": "nope"})
    with pytest.raises(ConfigError):
        hparams_from_dict({"d_z": "eight"})


def test_ablation_switches_zero_weights():
    h = PRESETS["glasses"]
    assert h.effective_lambdas == (0.2, 1.0, 0.025)
    assert h.replace(disable_acl=True).effective_lambdas == (0.0, 1.0, 0.025)
    assert h.replace(disable_idt=True).effective_lambdas == (0.2, 0.0, 0.025)
    assert h.replace(disable_mask=True).effective_lambdas == (0.2, 1.0, 0.0)
    assert not h.replace(disable_mask=True).masked


def test_toy_presets_scale_delta_with_resolution():
    # delta * W is held at the 256x256 value so the size hinge has equal per-pixel pull
    reference = PRESETS["glasses"].delta * 256**2
    for name in ("toy", "toy_cpu"):
        h = validate_hparams(PRESETS[name])
        assert h.delta * h.image_size**2 == pytest.approx(reference)
        assert (h.lambda_acl, h.lambda_mask, h.delta_min, h.delta_max) == (0.2, 0.025, 0.05, 0.1)
