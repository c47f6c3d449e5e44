import dataclasses
import math
import random
from fractions import Fraction

import pytest

from flashnpu.hwconfig import (FlashGeometry, FlashTiming, HostConfig,
                               QuantizationSpec, SystemConfig, preset)
from flashnpu.tiler import (InfeasibleConfigError, TileShape, TilerError,
                            analytic_rates, compute_alpha,
                            continuous_trans_bound, optimal_tile_shape,
                            partition_matrix, plan_rounds, trans_volume)


def brute_force_best(cfg):
    """Independent oracle: enumerate every divisor-feasible shape."""
    ch, cc, elems = cfg.flash.channel_num, cfg.flash.ccore_num, cfg.elements_per_page
    act = cfg.quant.activation_bytes
    buf = cfg.host.input_output_buffer
    shapes = []
    for a in range(1, elems + 1):
        if elems % a:
            continue
        h, w = cc * a, ch * (elems // a)
        shapes.append((h, w, 2 * (w // ch + h // cc) * act <= buf))
    if any(fits for _, _, fits in shapes):
        shapes = [s for s in shapes if s[2]]
    best = None
    for h, w, _ in shapes:
        t = (w + ch * h) * act
        if best is None or t < best[0] or (t == best[0] and w < best[2]):
            best = (t, h, w)
    return best


def make_cfg(channels, chips, dies, ccores, page, wbits=8, abits=8):
    return SystemConfig(
        flash=FlashGeometry(channel_num=channels, chips_per_channel=chips,
                            dies_per_chip=dies, planes_per_die=2,
                            ccores_per_die=ccores, page_size=page),
        timing=FlashTiming(t_read=30.0, channel_rate=1_000_000_000, bus_width=8),
        host=HostConfig(),
        quant=QuantizationSpec(weight_bits=wbits, activation_bits=abits),
    )


def test_optimal_shape_presets():
    assert optimal_tile_shape(preset("S")) == TileShape(256, 2048)
    assert optimal_tile_shape(preset("M")) == TileShape(512, 4096)
    assert optimal_tile_shape(preset("L")) == TileShape(512, 16384)


def test_preset_l_trans_value():
    shape = optimal_tile_shape(preset("L"))
    assert trans_volume(shape, preset("L")) == 32768


def test_degenerate_single_core():
    cfg = make_cfg(1, 1, 1, 1, 16384)
    assert optimal_tile_shape(cfg) == TileShape(128, 128)


def test_brute_force_oracle_presets_and_random():
    rng = random.Random(5)
    cfgs = [preset(n) for n in "SML"]
    for _ in range(50):
        cfgs.append(make_cfg(
            channels=rng.choice([1, 2, 3, 4, 6, 8]),
            chips=rng.choice([1, 2, 3, 4]),
            dies=rng.choice([1, 2]),
            ccores=rng.choice([1, 2]),
            page=rng.choice([4096, 8192, 16384]),
            wbits=rng.choice([4, 8]),
        ))
    for cfg in cfgs:
        shape = optimal_tile_shape(cfg)
        t, h, w = brute_force_best(cfg)
        assert trans_volume(shape, cfg) == t
        assert (shape.h_req, shape.w_req) == (h, w)


def test_continuous_bound():
    for name in "SML":
        cfg = preset(name)
        shape = optimal_tile_shape(cfg)
        bound = continuous_trans_bound(cfg)
        assert trans_volume(shape, cfg) >= bound - 1e-9
    # S's optimum is integral, so the bound is attained exactly
    cfg = preset("S")
    assert trans_volume(optimal_tile_shape(cfg), cfg) == pytest.approx(
        continuous_trans_bound(cfg))


def test_trans_volume_examples():
    cfg = preset("S")
    shape = TileShape(256, 2048)
    assert trans_volume(shape, cfg, "broadcast") == 2048 + 8 * 256
    assert trans_volume(shape, cfg, "no_broadcast") == 4 * 2048 + 8 * 256


def test_broadcast_never_worse():
    rng = random.Random(9)
    for _ in range(30):
        cfg = make_cfg(rng.choice([1, 2, 4, 8]), rng.choice([1, 2, 4]),
                       rng.choice([1, 2]), 1, 16384)
        for shape in (optimal_tile_shape(cfg),):
            assert trans_volume(shape, cfg, "broadcast") <= \
                trans_volume(shape, cfg, "no_broadcast")


def exact_rates(cfg, h, w):
    """Hand evaluation of the request-time equations with exact arithmetic."""
    act = cfg.quant.activation_bytes
    bw = Fraction(cfg.timing.channel_rate * cfg.timing.bus_width, 8 * 10**6)
    t_read = Fraction(cfg.timing.t_read)
    t_rc = t_read + Fraction(w * act, cfg.flash.channel_num) / bw
    rate = (Fraction(h * act) + Fraction(w * act, cfg.flash.channel_num)) \
        / (t_read * bw)
    t_r = Fraction(cfg.flash.page_size) / ((1 - rate) * bw)
    alpha = t_r / (t_r + t_rc)
    return t_rc, rate, t_r, alpha


@pytest.mark.parametrize("name,h,w", [("S", 256, 2048), ("L", 512, 16384)])
def test_analytic_rates_exact(name, h, w):
    cfg = preset(name)
    got = analytic_rates(TileShape(h, w), cfg)
    t_rc, rate, t_r, alpha = exact_rates(cfg, h, w)
    assert got.t_rc == pytest.approx(float(t_rc), rel=1e-9)
    assert got.rate_rc == pytest.approx(float(rate), rel=1e-9)
    assert got.t_r == pytest.approx(float(t_r), rel=1e-9)
    a, _ = compute_alpha(got, cfg)
    assert a == pytest.approx(float(alpha), rel=1e-9)


def test_rates_match_reported_values():
    got = analytic_rates(TileShape(256, 2048), preset("S"))
    assert got.t_rc == pytest.approx(30.256)
    assert got.rate_rc == pytest.approx(0.017067, abs=5e-7)
    assert got.t_r == pytest.approx(16.668, abs=5e-4)
    gotL = analytic_rates(TileShape(512, 16384), preset("L"))
    assert gotL.t_rc == pytest.approx(30.512)
    assert gotL.rate_rc == pytest.approx(0.034133, abs=5e-7)
    assert gotL.t_r == pytest.approx(16.963, abs=5e-4)


def test_alpha_values():
    cfg = preset("S")
    a, f = compute_alpha(analytic_rates(TileShape(256, 2048), cfg), cfg)
    assert a == pytest.approx(0.3552, abs=5e-5)
    assert f == pytest.approx(0.6878, abs=1e-4)
    cfgL = preset("L")
    aL, fL = compute_alpha(analytic_rates(TileShape(512, 16384), cfgL), cfgL)
    assert aL == pytest.approx(0.3573, abs=5e-5)
    assert fL == pytest.approx(0.8988, abs=2e-4)


def test_alpha_symmetry():
    # equal request times split the rounds evenly
    from flashnpu.tiler import AnalyticRates
    r = AnalyticRates(t_rc=10.0, t_r=10.0, rate_rc=0.1, trans=1, trans_alt=2)
    a, _ = compute_alpha(r, preset("S"))
    assert a == pytest.approx(0.5)


def test_infeasible_rate():
    cfg = make_cfg(1, 1, 1, 1, 16384)
    slow = dataclasses.replace(
        cfg, timing=FlashTiming(t_read=30.0, channel_rate=5_000_000, bus_width=8))
    with pytest.raises(InfeasibleConfigError):
        analytic_rates(TileShape(128, 128), slow)


def test_shape_invariants_enforced():
    cfg = preset("S")
    with pytest.raises(TilerError):
        TileShape(100, 2048).validate(cfg)  # not divisible by ccore_num
    with pytest.raises(TilerError):
        TileShape(256, 4096).validate(cfg)  # atomic tile bigger than a page


def test_partition_reference_matrix():
    cfg = preset("S")
    plan = partition_matrix(4096, 4096, cfg)
    assert plan.total_pages == 1024
    assert plan.flash_pages == 704            # 22 whole tiles, 0.6875 achieved
    assert plan_rounds(plan, cfg) == 22
    assert plan.flash_pages / plan.total_pages == pytest.approx(0.6875)
    assert plan.padded_bytes == 0


def test_partition_extremes():
    cfg = preset("S")
    none = partition_matrix(4096, 4096, cfg, fraction=0.0)
    assert none.flash_pages == 0 and not none.flash_tiles
    assert len(none.npu_page_cells) == none.total_pages
    one_tile = partition_matrix(256, 2048, cfg, fraction=1.0)
    assert one_tile.total_pages == 32
    assert len(one_tile.flash_tiles) == 1
    assert not one_tile.npu_page_cells


def test_partition_conserves_pages():
    rng = random.Random(3)
    cfg = preset("S")
    shape = optimal_tile_shape(cfg)
    for _ in range(20):
        h = rng.randrange(1, 5000)
        w = rng.randrange(1, 5000)
        f = rng.random()
        plan = partition_matrix(h, w, cfg, fraction=f)
        tiled = sum(len(t.pages) for t in plan.flash_tiles)
        assert tiled == plan.flash_pages
        assert tiled + len(plan.npu_page_cells) == plan.total_pages
        cells = {(c[2], c[3]) for t in plan.flash_tiles for c in t.pages}
        cells |= set(plan.npu_page_cells)
        assert len(cells) == plan.total_pages  # no duplicates
        pad = plan.total_pages * cfg.flash.page_size - math.ceil(h * w / 1)
        assert plan.padded_bytes == pad


def test_partition_broadcast_groups_share_band():
    cfg = preset("S")
    plan = partition_matrix(4096, 4096, cfg)
    for tile in plan.flash_tiles:
        per_channel = {}
        for ch, core, r, c in tile.pages:
            per_channel.setdefault(ch, set()).add(c)
        for bands in per_channel.values():
            assert len(bands) == 1  # one input segment per channel per round


def test_partition_distinct_cores():
    cfg = preset("S")
    plan = partition_matrix(4096, 4096, cfg)
    for tile in plan.flash_tiles:
        cores = [(ch, co) for ch, co, _, _ in tile.pages]
        assert len(cores) == len(set(cores))
