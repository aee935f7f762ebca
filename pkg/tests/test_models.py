import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odefed import functional as F
from odefed.models import (
    ConfigError,
    ModelConfig,
    NotReiterableError,
    build_model,
    count_parameters,
    depth_to_iterations,
    ds_block_forward,
    forward,
    ode_block_forward,
    parameter_layout,
    res_block_forward,
)
from odefed.tensor import Tensor

TINY = dict(stem_channels=8, stage_channels=(8, 16, 32), num_classes=4, norm_groups=4)


def tiny(family="odenet", **kw):
    return ModelConfig(family=family, **{**TINY, **kw})


def block_params(rng, ch, separable=False, dtype=np.float32):
    p = {}
    for i in (1, 2):
        if separable:
            p[f"conv{i}.depthwise.weight"] = Tensor(0.3 * rng.standard_normal((ch, 1, 3, 3)), dtype=dtype)
            p[f"conv{i}.pointwise.weight"] = Tensor(0.3 * rng.standard_normal((ch, ch, 1, 1)), dtype=dtype)
        else:
            p[f"conv{i}.weight"] = Tensor(0.3 * rng.standard_normal((ch, ch, 3, 3)), dtype=dtype)
        p[f"norm{i}.weight"] = Tensor(np.ones(ch), dtype=dtype)
        p[f"norm{i}.bias"] = Tensor(np.zeros(ch), dtype=dtype)
    return p


# -- depth mapping -----------------------------------------------------------


@pytest.mark.parametrize("depth,c,eff", [(34, 5, 36), (50, 7, 48), (101, 16, 102), (12, 1, 12), (18, 2, 18)])
def test_depth_to_iterations(depth, c, eff):
    assert depth_to_iterations(depth) == (c, eff)


def test_depth_too_small():
    with pytest.raises(ValueError):
        depth_to_iterations(8)


# -- parameter counts --------------------------------------------------------


def _by_hand(cfg):
    # independent closed form: stem + 2 downs + 3 stage blocks + fc
    k2 = cfg.kernel_size**2
    a, b, c = cfg.stage_channels
    stem = cfg.in_channels * a * k2 + 2 * a

    def std_block(w):
        return 2 * (w * w * k2 + 2 * w)

    def ds_block(w):
        return 2 * (w * k2 + w * w + 2 * w)

    def down(n, m):
        return n * m * k2 + 2 * m + m * m * k2 + 2 * m + n * m

    block = ds_block if cfg.family == "dsodenet" else std_block
    reps = cfg.iterations if cfg.family == "resnet" else 1
    body = reps * (block(a) + block(b) + block(c)) + down(a, b) + down(b, c)
    return stem + body + c * cfg.num_classes + cfg.num_classes


@pytest.mark.parametrize("family", ["resnet", "odenet", "dsodenet"])
@pytest.mark.parametrize("c", [1, 2, 5])
def test_count_matches_closed_form_and_allocation(family, c):
    cfg = tiny(family, iterations=c)
    total, rows = count_parameters(cfg)
    assert total == _by_hand(cfg)
    assert total == build_model(cfg).params.numel()
    assert [n for n, _ in rows] == [n for n, *_ in parameter_layout(cfg)]


def test_default_counts_pinned():
    assert count_parameters(ModelConfig(family="odenet"))[0] == 2_702_922
    assert count_parameters(ModelConfig(family="dsodenet"))[0] == 1_334_730


def test_dsodenet_smaller_than_odenet():
    assert count_parameters(ModelConfig(family="dsodenet"))[0] < count_parameters(ModelConfig(family="odenet"))[0]


@settings(max_examples=30, deadline=None)
@given(
    widths=st.tuples(*[st.integers(1, 12).map(lambda v: 4 * v)] * 3),
    c1=st.integers(1, 20),
    c2=st.integers(1, 20),
)
def test_ode_count_is_independent_of_iterations(widths, c1, c2):
    for family in ("odenet", "dsodenet"):
        base = dict(family=family, stem_channels=widths[0], stage_channels=widths, norm_groups=4)
        assert count_parameters(ModelConfig(iterations=c1, **base))[0] == count_parameters(ModelConfig(iterations=c2, **base))[0]


# -- config validation -------------------------------------------------------


@pytest.mark.parametrize(
    "kw,field",
    [
        (dict(family="vgg"), "family"),
        (dict(iterations=0), "iterations"),
        (dict(stage_channels=(8, 16, 30)), "norm_groups"),
        (dict(stem_channels=16), "stem_channels"),
        (dict(euler_mode="rk4"), "euler_mode"),
        (dict(kernel_size=2), "kernel_size"),
    ],
)
def test_config_errors_name_field(kw, field):
    with pytest.raises(ConfigError, match=field):
        tiny(**kw)


def test_config_dict_round_trip():
    cfg = tiny("dsodenet", iterations=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


# -- forward -----------------------------------------------------------------


@pytest.mark.parametrize("family", ["resnet", "odenet", "dsodenet"])
def test_forward_shape(family):
    model = build_model(tiny(family, iterations=2), seed=1)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 8, 8)))
    assert forward(model, x).shape == (3, 4)


def test_override_iterations_on_ode():
    model = build_model(tiny("odenet", iterations=4), seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)))
    assert forward(model, x, override_C=4).data.tobytes() == forward(model, x).data.tobytes()
    assert forward(model, x, override_C=8).shape == (2, 4)


def test_resnet_rejects_override():
    model = build_model(tiny("resnet", iterations=2))
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(NotReiterableError):
        forward(model, x, override_C=3)


def test_forward_rejects_bad_input():
    model = build_model(tiny())
    with pytest.raises(F.ShapeError):
        forward(model, Tensor(np.zeros((1, 1, 8, 8))))


def test_block_channel_mismatch():
    p = block_params(np.random.default_rng(0), 4)
    with pytest.raises(F.ShapeError):
        res_block_forward(Tensor(np.zeros((1, 3, 5, 5))), p, groups=2)


def test_ode_rejects_zero_iterations():
    p = block_params(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        ode_block_forward(Tensor(np.zeros((1, 4, 5, 5))), p, 0, groups=2)


def test_ds_block_requires_separable_weights():
    p = block_params(np.random.default_rng(0), 4)
    with pytest.raises(F.ShapeError):
        ds_block_forward(Tensor(np.zeros((1, 4, 5, 5))), p, 2, groups=2)


def test_zero_branch_is_identity_on_nonnegative_input():
    rng = np.random.default_rng(3)
    p = block_params(rng, 4)
    p["norm2.weight"] = Tensor(np.zeros(4))  # f(x) = 0
    x = Tensor(np.abs(rng.standard_normal((2, 4, 5, 5))))
    np.testing.assert_array_equal(res_block_forward(x, p, groups=2).data, x.data)
    np.testing.assert_array_equal(ode_block_forward(x, p, 5, groups=2).data, x.data)


@pytest.mark.parametrize("seed", range(5))
def test_unit_step_single_iteration_bitwise_equals_res_block(seed):
    rng = np.random.default_rng(seed)
    p = block_params(rng, 4)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    a = ode_block_forward(x, p, 1, "unit_step", groups=2).data
    b = res_block_forward(x, p, groups=2).data
    assert a.tobytes() == b.tobytes()


def test_euler_error_halves_on_linear_stub():
    x = Tensor(np.full(4, 0.7), dtype=np.float64)
    errors = [np.abs(ode_block_forward(x, {}, c, branch=lambda z: z).data - np.e * 0.7).max() for c in (4, 8, 16, 32)]
    for coarse, fine in zip(errors, errors[1:]):
        assert 1.6 <= coarse / fine <= 2.4


def test_unit_step_integrates_to_t_equals_c():
    x = Tensor(np.ones(2), dtype=np.float64)
    out = ode_block_forward(x, {}, 3, "unit_step", branch=lambda z: z)
    np.testing.assert_allclose(out.data, 8.0)  # (1 + 1)^3


def test_separable_stage_keys_only_in_dsodenet():
    names = [n for n, *_ in parameter_layout(tiny("dsodenet"))]
    assert "stage1.conv1.depthwise.weight" in names
    assert "down2.conv1.weight" in names
    assert not any("depthwise" in n for n, *_ in parameter_layout(tiny("odenet")))


def test_resnet_layout_grows_with_depth():
    a = [n for n, *_ in parameter_layout(tiny("resnet", iterations=1))]
    b = [n for n, *_ in parameter_layout(tiny("resnet", iterations=2))]
    assert set(a) < set(b)
    assert "stage3.1.conv2.weight" in b


def test_init_is_seeded():
    a = build_model(tiny(), seed=3).params
    b = build_model(tiny(), seed=3).params
    c = build_model(tiny(), seed=4).params
    assert a.equal(b)
    assert not a.equal(c)


def test_kaiming_bound():
    params = build_model(ModelConfig(), seed=0).params
    w = params["stage2.conv1.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (128 * 9))
