import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupnet.bitcore import ConvGeometry, pack_signs, xnor_popcount_dot
from groupnet.costmodel import (
    SCHEMES,
    accumulator_range,
    conv_geometry,
    format_table,
    network_report,
    scheme_report,
    speedup_ratio,
)
from groupnet.quant import fixedpoint_dot
from groupnet.structnet import ArchConfig, BlockConfig, build_model
from oracles import all_pm1_vectors


def sigma_oracle(c_in, k, hw_in, hw_out, K):
    # word-op count of one real conv over K binary convs plus their scalings
    n = c_in * k * k * hw_in * hw_in
    real_ops = n * hw_out * hw_out / (hw_in * hw_in)
    binary_ops = K * (n / 64.0 + hw_out * hw_out) * hw_out * hw_out / (hw_in * hw_in)
    return real_ops / binary_ops


def test_speedup_golden_value():
    geom = conv_geometry(256, 3, 28)
    assert abs(speedup_ratio(geom, 5) - 12.45) <= 0.01
    assert speedup_ratio(geom, 5) == pytest.approx(sigma_oracle(256, 3, 28, 28, 5), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 512), st.sampled_from([1, 3, 5]), st.integers(1, 64), st.integers(1, 8))
def test_speedup_matches_oracle_and_bounds(c_in, k, hw, K):
    geom = conv_geometry(c_in, k, hw)
    s = speedup_ratio(geom, K)
    assert s == pytest.approx(sigma_oracle(c_in, k, hw, geom.output_h, K), rel=1e-9)
    assert 0 < s < 64.0 / K
    assert speedup_ratio(geom, K + 1) < s


def test_speedup_grows_with_channels():
    vals = [speedup_ratio(conv_geometry(c, 3, 14), 4) for c in (16, 64, 256, 1024)]
    assert vals == sorted(vals)


def test_speedup_degenerate_geometry():
    geom = conv_geometry(1, 1, 1)
    assert speedup_ratio(geom, 1) == pytest.approx(64 / 65)
    with pytest.raises(ValueError, match="empty output"):
        ConvGeometry(1, 1, 5, 5, 2, 2, 1, 0, 1)
    with pytest.raises(ValueError, match="K"):
        speedup_ratio(geom, 0)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_branch_accumulators_exhaustive(K):
    m = 6
    vecs = all_pm1_vectors(m)
    packed = [pack_signs(v) for v in vecs]
    dots = np.array([[xnor_popcount_dot(a, b, m) for b in packed] for a in packed])
    assert np.array_equal(dots, vecs @ vecs.T)
    lo, hi = accumulator_range("group-net", K, m)
    # K branches: the extreme sums are reached when every branch is extreme
    assert K * dots.min() == lo and K * dots.max() == hi
    assert (lo, hi) == (-K * m, K * m)


def test_fixedpoint_range_attained():
    lo, hi = accumulator_range("kbit-fixed", 2, 4)
    assert (lo, hi) == (-36, 36)
    assert fixedpoint_dot(np.ones(4), np.ones(4), 2) == hi
    assert fixedpoint_dot(np.ones(4), -np.ones(4), 2) == lo


def test_fixedpoint_range_exhaustive_small():
    lo, hi = accumulator_range("kbit-fixed", 2, 2)
    levels = np.array([-1.0, -1 / 3, 1 / 3, 1.0])
    vals = [fixedpoint_dot([a, b], [c, d], 2) for a in levels for b in levels for c in levels for d in levels]
    assert min(vals) == lo and max(vals) == hi


def test_accumulator_range_other_schemes():
    assert accumulator_range("binary-direct", 1, 10) == (-10, 10)
    assert accumulator_range("multi-binarization", 3, 10) == (-90, 90)
    with pytest.raises(ValueError, match="real"):
        accumulator_range("full", 1, 10)
    with pytest.raises(ValueError, match="unknown"):
        accumulator_range("fp16", 1, 10)


def test_group_net_range_below_fixed_point():
    for K in range(2, 6):
        assert accumulator_range("group-net", K, 100)[1] < accumulator_range("kbit-fixed", K, 100)[1]


def test_scheme_report_group_net():
    geom = conv_geometry(256, 3, 28)
    rep = scheme_report("group-net", 5, geom)
    assert rep.memory_saving == pytest.approx(6.4)
    assert rep.compute_bound == pytest.approx(12.8)
    assert rep.compute_saving == pytest.approx(speedup_ratio(geom, 5))
    assert rep.compute_saving < rep.compute_bound
    assert rep.accumulator_range == (-11520, 11520)
    assert rep.dots_per_output == 5
    assert rep.word_ops == 5 * 256 * 28 * 28 * 36


def test_scheme_report_table_rows():
    geom = conv_geometry(64, 3, 14)
    kbit = scheme_report("kbit-fixed", 3, geom)
    multi = scheme_report("multi-binarization", 3, geom)
    group = scheme_report("group-net", 3, geom)
    assert kbit.dots_per_output == multi.dots_per_output == 9
    assert group.compute_saving > kbit.compute_saving
    assert kbit.memory_saving == group.memory_saving == pytest.approx(32 / 3)
    assert scheme_report("binary-direct", 1, geom).memory_saving == 32.0
    assert scheme_report("full", 1, geom).compute_saving == 1.0
    for s in SCHEMES:
        rep = scheme_report(s, 1 if s in ("full", "binary-direct", "binary-weight-only") else 2, geom)
        doc = json.loads(rep.to_json())
        assert doc["scheme"] == s
        assert s in rep.to_text()


def test_scheme_report_errors():
    geom = conv_geometry(8, 3, 8)
    with pytest.raises(ValueError, match="unknown"):
        scheme_report("int4", 2, geom)
    with pytest.raises(ValueError, match="no K"):
        scheme_report("binary-direct", 2, geom)


def test_network_report_counts():
    blocks = (BlockConfig(4), BlockConfig(8, stride=2))
    direct = build_model(ArchConfig(blocks=blocks, stem_channels=4))
    soft = build_model(ArchConfig(blocks=blocks, stem_channels=4, K=3, decomposition="soft"))
    a, b = network_report(direct, (8, 8)), network_report(soft, (8, 8))
    assert a["binary_layers"] == 4 and b["binary_layers"] == 12
    assert a["binary_params"] == direct.count_binary_params()
    assert b["xnor_dots"] == 3 * a["xnor_dots"]
    # layer 0: 4 out * 8x8 positions, layer 2: 8 out * 4x4 positions
    assert a["xnor_dots"] == 2 * 4 * 64 + 2 * 8 * 16


def test_format_table_aligns():
    text = format_table([("a", 1), ("long", 22)], ("name", "n"))
    lines = text.splitlines()
    assert lines[0].startswith("name") and set(lines[1]) <= {"-", " "}
    assert lines[3].startswith("long  22")
