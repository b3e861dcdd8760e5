"""Residual MLP structure, skip schemes, sizes and chunk priority."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accordion.arch import (
    ArchSpec,
    DepthConfig,
    Scheme,
    active_set,
    build,
    chunk_priority,
    forward,
    loss_and_grad,
    size_of,
)
from accordion.errors import ConfigError, DimensionError
from accordion.nncore import grad_check

from conftest import ref_forward

specs = st.builds(
    ArchSpec,
    input_dim=st.integers(1, 4),
    block_widths=st.lists(st.sampled_from([4, 8, 16]), min_size=1, max_size=4).map(tuple),
    units_per_block=st.integers(1, 5),
    num_classes=st.integers(2, 5),
)


def closed_form_params(spec):
    w = spec.block_widths
    stem = spec.input_dim * w[0] + w[0]
    head = w[-1] * spec.num_classes + spec.num_classes
    units = spec.units_per_block * sum(2 * (x * x + x) for x in w)
    return stem + head + units


def weights_of(model):
    return {name: model.params.value(name) for name in model.params}


def matrices_of(model):
    return [t.matrix for t in model.transitions]


class TestSkipSchemes:
    def test_coml_fills_blocks_in_order(self):
        spec = ArchSpec(block_widths=(16, 16, 16), units_per_block=18)
        act = active_set(Scheme.COML, 36, spec)
        assert {b for b, _ in act} == {0, 1}
        assert len(act) == 36

    def test_blockcoml_spreads_evenly(self):
        spec = ArchSpec(block_widths=(16, 16, 16), units_per_block=18)
        act = active_set(Scheme.BLOCKCOML, 36, spec)
        assert [sum(1 for b, _ in act if b == i) for i in range(3)] == [12, 12, 12]
        assert all(k < 12 for _, k in act)

    def test_blockcoml_extras_go_to_earlier_blocks(self):
        spec = ArchSpec(units_per_block=6)
        act = active_set(Scheme.BLOCKCOML, 8, spec)
        assert [sum(1 for b, _ in act if b == i) for i in range(3)] == [3, 3, 2]

    @given(specs, st.sampled_from(list(Scheme)), st.data())
    @settings(max_examples=60, deadline=None)
    def test_prefix_property(self, spec, scheme, data):
        n = data.draw(st.integers(0, spec.total_units))
        small = active_set(scheme, n, spec)
        assert len(small) == n
        for m in range(n, spec.total_units + 1):
            assert small <= active_set(scheme, m, spec)

    def test_out_of_range(self, desk_spec):
        with pytest.raises(ConfigError):
            active_set("coml", desk_spec.total_units + 1, desk_spec)
        with pytest.raises(ConfigError):
            Scheme.parse("zigzag")


class TestSizes:
    @given(specs)
    @settings(max_examples=60, deadline=None)
    def test_param_count_closed_form(self, spec):
        model = build(spec, 0)
        rep = size_of(model, DepthConfig.full(spec))
        assert rep.param_count == closed_form_params(spec) == model.params.count()
        assert rep.size_bits == spec.bits_per_param * rep.param_count
        assert rep.size_fraction == 1.0 and rep.layer_fraction == 1.0

    @given(specs, st.sampled_from(list(Scheme)))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_n(self, spec, scheme):
        model = build(spec, 0)
        reps = [size_of(model, DepthConfig(scheme, n)) for n in range(spec.total_units + 1)]
        for a, b in zip(reps, reps[1:]):
            assert a.size_bits < b.size_bits and a.mac_count < b.mac_count

    def test_growing_widths_unit_ratio(self):
        # per-unit weights grow 1:4:16, so keeping blocks 0-1 keeps ~5/21 of them
        spec = ArchSpec(block_widths=(64, 128, 256), units_per_block=4)
        rep = size_of(build(spec, 0), DepthConfig(Scheme.COML, 8))
        assert rep.unit_size_fraction == pytest.approx(5 / 21, rel=0.01)
        assert rep.layer_fraction == pytest.approx(2 / 3)

    def test_coml_smaller_than_blockcoml_for_growing_widths(self):
        spec = ArchSpec(block_widths=(8, 16, 32), units_per_block=4)
        model = build(spec, 0)
        for n in range(1, spec.total_units):
            coml = size_of(model, DepthConfig(Scheme.COML, n)).size_bits
            block = size_of(model, DepthConfig(Scheme.BLOCKCOML, n)).size_bits
            assert coml <= block

    def test_equal_widths_mac_fraction(self, desk_spec):
        model = build(desk_spec, 0)
        for n in range(desk_spec.total_units + 1):
            rep = size_of(model, DepthConfig(Scheme.BLOCKCOML, n))
            assert rep.mac_fraction == pytest.approx(n / desk_spec.total_units)


class TestForward:
    def test_full_forward_matches_reference_bitwise(self, desk_spec):
        model = build(desk_spec, 4)
        x = np.random.default_rng(0).standard_normal((50, 2)).astype(np.float32)
        out = forward(model, None, x)
        assert np.array_equal(out, ref_forward(weights_of(model), desk_spec, x))

    @pytest.mark.parametrize("widths", [(8, 4, 2), (6, 10), (8, 8)])
    def test_partial_forward_matches_reference(self, widths):
        spec = ArchSpec(block_widths=widths, units_per_block=3)
        model = build(spec, 1)
        x = np.random.default_rng(1).standard_normal((20, 2)).astype(np.float32)
        for scheme in Scheme:
            for n in range(spec.total_units + 1):
                act = active_set(scheme, n, spec)
                got = forward(model, DepthConfig(scheme, n), x)
                want = ref_forward(weights_of(model), spec, x, act, matrices_of(model))
                assert np.array_equal(got, want)

    def test_zero_branch_unit_is_identity(self, small_spec):
        model = build(small_spec, 2)
        for name in ("unit.2.2.W2", "unit.2.2.b2"):
            model.params.value(name)[...] = 0
        x = np.random.default_rng(2).standard_normal((10, 2)).astype(np.float32)
        full = forward(model, None, x)
        skip = forward(model, DepthConfig(Scheme.COML, small_spec.total_units - 1), x)
        assert np.array_equal(full, skip)

    def test_bad_input_dim(self, small_model):
        with pytest.raises(DimensionError):
            forward(small_model, None, np.zeros((3, 5), np.float32))

    def test_build_is_seeded(self, small_spec):
        assert build(small_spec, 7).params.digest() == build(small_spec, 7).params.digest()
        assert build(small_spec, 7).params.digest() != build(small_spec, 8).params.digest()


class TestGradients:
    @pytest.mark.parametrize("widths", [(8, 8, 8), (8, 4), (6, 10)])
    def test_grad_check_partial_config(self, widths):
        spec = ArchSpec(block_widths=widths, units_per_block=3)
        model = build(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 2))
        y = rng.integers(0, 3, 16)
        cfg = DepthConfig(Scheme.BLOCKCOML, 4)

        def loss_fn(params, probe):
            return loss_and_grad(model.with_params(params), cfg, *probe)[0]

        assert grad_check(loss_fn, model.params, (x, y), num_samples=200) < 1e-4

    def test_only_active_units_touched(self, small_model, small_spec):
        x = np.zeros((4, 2), np.float32)
        cfg = DepthConfig(Scheme.COML, 2)
        _, touched = loss_and_grad(small_model, cfg, x, np.zeros(4, int))
        units = {n.rsplit(".", 1)[0] for n in touched if n.startswith("unit")}
        assert units == {"unit.0.0", "unit.0.1"}
        assert {"stem.W", "stem.b", "head.W", "head.b"} <= set(touched)


class TestChunkPriority:
    @given(specs, st.sampled_from(list(Scheme)))
    @settings(max_examples=30, deadline=None)
    def test_prefix_realizes_config(self, spec, scheme):
        pieces = chunk_priority(scheme, spec)
        assert [p.kind for p in pieces[:3]] == ["stem", "head", "transition"]
        for n in range(spec.total_units + 1):
            units = {(p.block, p.pos) for p in pieces[3:3 + n]}
            assert units == active_set(scheme, n, spec)
