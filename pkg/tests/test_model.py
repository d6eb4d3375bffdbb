from dataclasses import replace

import numpy as np
import pytest

from rehit import nn
from rehit.model import (TINY, DeepSupervisionHead, ModelConfig, build_model, count_params,
                         estimate_flops, measured_flops, param_breakdown)
from rehit.nn import Conv2d, FlopCounter, ShapeError, Tape, Tensor
from rehit.retinex import RetinexDecomposition
from rehit.training import TrainConfig, total_loss

ABLATIONS = {
    "single_branch": {"dual_branch": False},
    "no_ig_htb": {"use_ig_htb": False},
    "no_illumination": {"illumination_mod": False},
}


@pytest.fixture
def image(rng):
    return rng.uniform(0.05, 0.95, (1, 3, 16, 16))


def _conv_params(c_in, c_out, k, groups=1):
    return c_out * (c_in // groups) * k * k + c_out


class TestBuild:
    def test_same_seed_identical(self):
        a, b = build_model(TINY, 3), build_model(TINY, 3)
        assert [(n, p.data.tobytes()) for n, p in a.named_parameters()] == \
               [(n, p.data.tobytes()) for n, p in b.named_parameters()]

    def test_param_count_independent_of_seed(self):
        assert len({count_params(build_model(TINY, s)) for s in range(3)}) == 1

    def test_names_unique_and_complete(self):
        names = [n for n, _ in build_model(TINY).named_parameters()]
        assert len(names) == len(set(names)) and all(names)

    @pytest.mark.parametrize("kwargs", [{"levels": 4}, {"heads": (1, 2)}, {"heads": (3, 2, 4)},
                                        {"bins": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**{"base_channels": 8, **kwargs})

    def test_config_dict_round_trip(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY

    def test_config_unknown_key(self):
        with pytest.raises(KeyError):
            ModelConfig.from_dict({**TINY.to_dict(), "width": 3})


class TestForward:
    def test_fresh_model_squares_input(self, verify_mode, image):
        out = build_model(TINY)(Tensor(image))
        np.testing.assert_allclose(out.i_out.data, image * image, rtol=0, atol=1e-12)

    def test_oracle_decomposition_round_trip(self, verify_mode, rng):
        r_gt, l_gt = rng.uniform(0.05, 1, (1, 3, 16, 16)), rng.uniform(0.3, 1, (1, 3, 16, 16))
        i_sh = r_gt * l_gt
        model = build_model(TINY)
        real = model.estimator
        model.estimator = lambda x: RetinexDecomposition(Tensor(1 / r_gt), Tensor(1 / l_gt),
                                                         real(x).guidance)
        out = model(Tensor(i_sh))
        np.testing.assert_allclose(out.i_out.data, (i_sh / l_gt) * (i_sh / r_gt), rtol=1e-12)
        np.testing.assert_allclose(out.i_out.data, i_sh, rtol=0, atol=1e-6)

    @pytest.mark.parametrize("shape", [(1, 3, 16, 16), (2, 3, 16, 24), (1, 3, 32, 16)])
    def test_dims_preserved(self, verify_mode, rng, shape):
        model = build_model(TINY)
        nn.randomize_(model, rng, 0.05)
        out = model(Tensor(rng.uniform(0, 1, shape)))
        assert out.i_out.shape == shape
        assert [k.shape for k in out.deep_images()] == [shape] * 3

    @pytest.mark.parametrize("shape", [(1, 3, 18, 16), (1, 4, 16, 16)])
    def test_bad_input(self, verify_mode, shape):
        with pytest.raises(ShapeError):
            build_model(TINY)(Tensor(np.zeros(shape)))

    def test_deterministic(self, verify_mode, image):
        outs = []
        for _ in range(2):
            model = build_model(TINY, 1)
            nn.randomize_(model, np.random.default_rng(4), 0.05)
            outs.append(model(Tensor(image)).i_out.data.tobytes())
        assert outs[0] == outs[1]

    def test_no_attention_without_htb(self, verify_mode, image):
        model = build_model(replace(TINY, use_ig_htb=False))
        with Tape() as tape:
            model(nn.Parameter(image))
        assert "attention" not in tape.ops
        with Tape() as tape:
            build_model(TINY)(nn.Parameter(image))
        assert "attention" in tape.ops

    def test_every_parameter_receives_gradient(self, verify_mode, rng, image):
        model = build_model(TINY)
        nn.randomize_(model, rng, 0.05)
        with Tape() as tape:
            loss, _ = total_loss(model(Tensor(image)), Tensor(rng.uniform(0, 1, image.shape)),
                                 TrainConfig(crop=16))
        tape.backward(loss)
        dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []


class TestDeepSupervisionHead:
    def test_full_resolution(self, verify_mode, rng):
        head = DeepSupervisionHead(8, 1, rng)
        assert head(Tensor(rng.standard_normal((1, 8, 8, 8)))).shape == (1, 3, 8, 8)

    def test_quarter_resolution(self, verify_mode, rng):
        head = DeepSupervisionHead(32, 3, rng)
        nn.randomize_(head, rng)
        assert head(Tensor(rng.standard_normal((1, 32, 4, 5)))).shape == (1, 3, 16, 20)

    def test_zero_init(self, verify_mode, rng):
        out = DeepSupervisionHead(16, 2, rng)(Tensor(rng.standard_normal((1, 16, 4, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_invalid_level(self, rng):
        with pytest.raises(ValueError):
            DeepSupervisionHead(8, 4, rng)


class TestComplexity:
    def test_conv_param_closed_form(self, rng):
        assert Conv2d(8, 8, 3, rng).num_params() == 8 * 8 * 9 + 8 == 584

    def test_estimator_layer_sum(self):
        g = TINY.base_channels
        expected = (_conv_params(4, g, 1) + _conv_params(g, g, 5, groups=g)
                    + _conv_params(g, 2 * g, 3) + _conv_params(2 * g, 4 * g, 3)
                    + 2 * _conv_params(g, 3, 1))
        assert build_model(TINY).estimator.num_params() == expected

    def test_breakdown_sums_to_total(self):
        model = build_model(TINY)
        for depth in (1, 2, 3):
            assert sum(param_breakdown(model, depth).values()) == count_params(model)

    def test_doubling_width(self):
        small = dict(build_model(TINY).named_parameters())
        big = dict(build_model(replace(TINY, base_channels=16)).named_parameters())
        assert small.keys() == big.keys()
        for name, p in small.items():
            ratio = big[name].size / p.size
            if p.data.ndim == 4:
                assert ratio in (1.0, 2.0, 4.0), name
        conv = [n for n, p in small.items() if p.data.ndim == 4]
        total_ratio = sum(big[n].size for n in conv) / sum(small[n].size for n in conv)
        assert 3.5 < total_ratio <= 4.0

    def test_conv_flops_formula(self, verify_mode, rng):
        conv = Conv2d(3, 3, 1, rng)
        assert conv.flops(4, 4) == 2 * 1 * 3 * 3 * 16 == 288
        with FlopCounter() as counter:
            conv(Tensor(np.zeros((1, 3, 4, 4))))
        assert counter.total == 288

    @pytest.mark.parametrize("overrides", [{}, *ABLATIONS.values()])
    def test_analytic_flops_match_execution(self, overrides):
        model = build_model(replace(TINY, **overrides))
        assert estimate_flops(model, 16, 16) == measured_flops(model, 16, 16)

    def test_flops_scale_with_pixels(self):
        model = build_model(replace(TINY, use_ig_htb=False))
        assert estimate_flops(model, 128, 128) / estimate_flops(model, 64, 64) == pytest.approx(4.0, rel=0.02)

    @pytest.mark.parametrize("name", ABLATIONS)
    def test_ablations_are_smaller(self, name):
        assert count_params(build_model(replace(TINY, **ABLATIONS[name]))) < count_params(build_model(TINY))
