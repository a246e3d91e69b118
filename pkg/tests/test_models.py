import pytest
import torch

from stagedistill import models as M
from stagedistill.errors import ConfigError, InputError


def analytic_count(spec):
    """Layer-by-layer parameter sum: convs (no bias), BN affine, shortcuts, head."""
    w = spec.widths
    total = spec.in_channels * w[0] * 9 + 2 * w[0]
    cin = w[0]
    for i, c in enumerate(w):
        for b in range(spec.blocks_per_stage):
            stride = 2 if (i > 0 and b == 0) else 1
            total += cin * c * 9 + 2 * c + c * c * 9 + 2 * c
            if spec.family == "residual_cnn" and (stride != 1 or cin != c):
                total += cin * c + 2 * c
            cin = c
    return total + cin * spec.num_classes + spec.num_classes


def test_build_is_deterministic():
    spec = M.NetworkSpec(depth=8)
    a, b = M.build(spec, 3), M.build(spec, 3)
    assert a.entries.keys() == b.entries.keys()
    assert all(torch.equal(a.entries[k], b.entries[k]) for k in a.entries)
    assert a.digest() == b.digest()


def test_different_seeds_differ():
    spec = M.NetworkSpec(depth=8)
    assert M.build(spec, 0).digest() != M.build(spec, 1).digest()


def test_depth8_count_closed_form():
    spec = M.NetworkSpec(depth=8, width_multiplier=1.0, num_classes=10)
    assert M.param_count(M.build(spec, 0)) == 75290 == analytic_count(spec)


@pytest.mark.parametrize("family", M.FAMILIES)
@pytest.mark.parametrize("depth,width", [(8, 0.5), (14, 1.0), (20, 2.0)])
def test_count_matches_analytic(family, depth, width):
    spec = M.NetworkSpec(family=family, depth=depth, width_multiplier=width, num_classes=8)
    assert M.param_count(M.build(spec, 0)) == analytic_count(spec)


def test_residual_adds_projection_shortcuts():
    plain = M.NetworkSpec(family="plain_cnn", depth=8, num_classes=10)
    res = M.NetworkSpec(family="residual_cnn", depth=8, num_classes=10)
    assert M.param_count(M.build(res, 0)) - M.param_count(M.build(plain, 0)) == 576 + 2176


@pytest.mark.parametrize("kwargs", [
    {"family": "vgg"}, {"depth": 9}, {"depth": 2}, {"width_multiplier": 0.0},
    {"tap_names": ()}, {"tap_names": ("s1", "s1")}, {"tap_names": ("s9",)},
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        M.NetworkSpec(**kwargs)


def test_zero_head_zero_input_gives_zero_logits():
    w = M.build(M.NetworkSpec(), 0)
    w.entries["fc.weight"].zero_()
    w.entries["fc.bias"].zero_()
    out = M.forward(w, torch.zeros(2, 3, 16, 16))
    assert all(torch.equal(o.logits, torch.zeros(8)) for o in out)


def test_forward_deterministic_and_taps():
    spec = M.NetworkSpec(family="residual_cnn", depth=14, width_multiplier=0.5)
    w = M.build(spec, 1)
    x = torch.randn(3, 3, 16, 16)
    a, b = M.forward(w, x), M.forward(w, x)
    assert len(a) == 3
    for oa, ob in zip(a, b):
        assert torch.equal(oa.logits, ob.logits)
        assert list(oa.features) == list(spec.tap_names)
        for name, f in oa.features.items():
            assert f.shape[0] == spec.tap_channels(name)
            assert f.shape[1] == f.shape[2] == spec.tap_resolution(name)
            assert torch.equal(f, ob.features[name])


def test_forward_rejects_bad_input():
    w = M.build(M.NetworkSpec(), 0)
    with pytest.raises(InputError):
        M.forward(w, torch.zeros(1, 3, 8, 8))
    w.spec_fingerprint = "bogus"
    with pytest.raises(InputError):
        M.forward(w, torch.zeros(1, 3, 16, 16))


def test_fingerprint_mismatch_rejected():
    w = M.build(M.NetworkSpec(), 0)
    with pytest.raises(InputError):
        M.TrainedWeights(M.NetworkSpec(depth=14), w.entries, w.spec_fingerprint)


def test_extra_param_count():
    assert M.extra_param_count(None) == 0
    assert M.extra_param_count([]) == 0
    assert M.extra_param_count(torch.nn.Conv2d(64, 32, 1)) == 64 * 32 + 32


def test_checkpoint_round_trip(tmp_path):
    spec = M.NetworkSpec(family="residual_cnn", depth=8, width_multiplier=0.5)
    w = M.build(spec, 5)
    path = tmp_path / "sub" / "ckpt.sdkw"
    M.save_checkpoint(w, path, meta={"note": "x"})
    header = M.read_checkpoint_header(path)
    assert header["fingerprint"] == spec.fingerprint()
    assert header["meta"] == {"note": "x"}
    back = M.load_checkpoint(path)
    assert back.spec == spec
    assert back.digest() == w.digest()
    assert not list(path.parent.glob(".*"))  # no temp leftovers


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"nope" + bytes(20))
    with pytest.raises(InputError):
        M.load_checkpoint(p)
