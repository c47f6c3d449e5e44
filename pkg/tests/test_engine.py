import random
import statistics

import pytest

from flashnpu.engine import (BufferOverflowError, EngineError, Request,
                             channel_utilization, exec_read_compute,
                             make_rc_stream, make_read_stream, schedule,
                             slice_read)
from flashnpu.hwconfig import (FlashGeometry, FlashTiming, HostConfig,
                               SystemConfig, preset)
from flashnpu.tiler import TileShape, analytic_rates
from flashnpu.topology import FlashAddress, build_device

PAGE = 16384


def tiny_cfg(buffer=2048):
    return SystemConfig(
        flash=FlashGeometry(channel_num=1, chips_per_channel=1, dies_per_chip=1,
                            planes_per_die=2, ccores_per_die=1, page_size=PAGE),
        timing=FlashTiming(t_read=30.0, channel_rate=1_000_000_000, bus_width=8),
        host=HostConfig(input_output_buffer=buffer),
    )


def rc(issue, page=0, plane=0, bytes_in=128, bytes_out=128):
    return Request(kind="read_compute", channel=0,
                   addresses=(FlashAddress(0, 0, 0, plane, 0, page),),
                   input_vector_bytes=bytes_in, result_vector_bytes=bytes_out,
                   issue_index=issue, request_id=f"rc{issue}")


def plain_read(issue, plane=1):
    return Request(kind="read", channel=0,
                   addresses=(FlashAddress(0, 0, 0, plane, 0, 0),),
                   payload_bytes=PAGE, issue_index=issue,
                   request_id=f"rd{issue}")


def fig_pipeline_requests(with_read):
    reqs = [plain_read(0)] if with_read else []
    reqs += [rc(1 + i, page=i) for i in range(4)]
    return reqs


# --- single-request trace ----------------------------------------------------

def test_single_request_event_trace():
    cfg = tiny_cfg()
    dev = build_device(cfg)
    t = schedule([rc(0)], dev, strategy="a")
    by_action = {e.action: e for e in t.events}
    assert (by_action["transfer-in"].start_ns,
            by_action["transfer-in"].end_ns) == (0, 128)
    assert (by_action["array-read"].start_ns,
            by_action["array-read"].end_ns) == (128, 30128)
    assert (by_action["compute"].start_ns,
            by_action["compute"].end_ns) == (30128, 60128)
    assert (by_action["transfer-out"].start_ns,
            by_action["transfer-out"].end_ns) == (60128, 60256)
    assert t.makespan_ns == 60256


def test_exec_read_compute_channel_busy():
    # one full tile: 256 B broadcast in, 4 x 64 B results out per channel
    cfg = preset("S")
    dev = build_device(cfg)
    t = exec_read_compute(cfg, TileShape(256, 2048), dev)
    busy = t.channel_busy_ns[0]
    assert busy == 512  # 0.512 us moved against one 30 us array read


# --- slice_read ---------------------------------------------------------------

def test_slice_read_counts():
    slices = slice_read(plain_read(0), 512)
    assert len(slices) == 32
    assert all(s.kind == "read_slice" for s in slices)
    assert sum(s.payload_bytes for s in slices) == PAGE
    assert {s.parent_id for s in slices} == {"rd0"}


def test_slice_identity():
    slices = slice_read(plain_read(0), PAGE)
    assert len(slices) == 1


def test_slice_bad_sizes():
    with pytest.raises(EngineError):
        slice_read(plain_read(0), 600)
    with pytest.raises(EngineError):
        slice_read(plain_read(0), 0)
    with pytest.raises(EngineError):
        slice_read(plain_read(0), PAGE + 1)


def test_sliced_requests_schedule_like_plain():
    cfg = tiny_cfg()
    reqs = fig_pipeline_requests(True)
    dev = build_device(cfg)
    direct = schedule(reqs, dev, strategy="c").makespan_ns
    pre_sliced = [r for r in reqs if r.kind != "read"]
    pre_sliced += slice_read(plain_read(0), 512)
    resliced = schedule(pre_sliced, dev, strategy="c").makespan_ns
    assert resliced == direct


# --- pipeline strategies (the two-plane, shared-core scenario) -----------------

def test_strategy_comparison():
    cfg = tiny_cfg()
    dev = build_device(cfg)
    span_a = schedule(fig_pipeline_requests(False), dev, strategy="a").makespan_ns
    span_b = schedule(fig_pipeline_requests(True), dev, strategy="b").makespan_ns
    span_c = schedule(fig_pipeline_requests(True), dev, strategy="c").makespan_ns
    assert span_a == 150640
    assert span_b > span_c
    assert span_c <= span_a + cfg.transfer_ns(PAGE)
    # with 512 B slices the stream realigns to within one slice transfer
    assert span_c <= span_a + cfg.transfer_ns(512)


def test_empty_request_list():
    t = schedule([], build_device(tiny_cfg()))
    assert t.makespan_ns == 0
    assert t.events == []


def test_strategy_a_rejects_reads():
    with pytest.raises(EngineError):
        schedule(fig_pipeline_requests(True), build_device(tiny_cfg()),
                 strategy="a")


# --- determinism / conservation / exclusivity ----------------------------------

def random_mix(cfg, rng, rounds=None, reads=None):
    shape = TileShape(256, 2048)
    rounds = rounds if rounds is not None else rng.randrange(4, 16)
    reads = reads if reads is not None else rng.randrange(0, 10)
    reqs = make_rc_stream(cfg, shape, rounds)
    reqs += make_read_stream(cfg, reads * cfg.flash.channel_num,
                             start_index=1000)
    return reqs


def test_determinism():
    cfg = preset("S")
    rng = random.Random(2)
    reqs = random_mix(cfg, rng)
    t1 = schedule(reqs, build_device(cfg), strategy="c")
    t2 = schedule(reqs, build_device(cfg), strategy="c")
    assert t1.events == t2.events
    assert t1.makespan_ns == t2.makespan_ns


def test_resource_exclusivity_randomized():
    cfg = preset("S")
    rng = random.Random(4)
    for strategy in ("b", "c"):
        reqs = random_mix(cfg, rng)
        t = schedule(reqs, build_device(cfg), strategy=strategy)
        spans = {}
        for e in t.events:
            if e.start_ns < e.end_ns:
                spans.setdefault(e.resource, []).append((e.start_ns, e.end_ns))
        for resource, intervals in spans.items():
            intervals.sort()
            for (s1, e1), (s2, _) in zip(intervals, intervals[1:]):
                assert e1 <= s2, f"overlap on {resource}"


def test_channel_byte_conservation():
    cfg = preset("S")
    rng = random.Random(6)
    reqs = random_mix(cfg, rng, rounds=6, reads=4)
    t = schedule(reqs, build_device(cfg), strategy="c")
    for ch in range(cfg.flash.channel_num):
        expect = 0
        for r in reqs:
            if r.channel != ch:
                continue
            if r.kind == "read_compute":
                expect += r.input_vector_bytes
                expect += r.result_vector_bytes * len(r.addresses)
            else:
                expect += r.payload_bytes
        moved = sum(e.end_ns - e.start_ns for e in t.events
                    if e.resource == f"ch{ch}" and e.start_ns < e.end_ns)
        # at 1000 B/us one byte is one ns
        assert moved == expect


def test_strategy_dominance_randomized():
    cfg = preset("S")
    rng = random.Random(8)
    for _ in range(5):
        reqs = random_mix(cfg, rng, rounds=rng.randrange(6, 14),
                          reads=rng.randrange(1, 6))
        mb = schedule(reqs, build_device(cfg), strategy="b").makespan_ns
        mc = schedule(reqs, build_device(cfg), strategy="c").makespan_ns
        assert mc <= mb


def test_reads_fit_in_bubbles_bound():
    cfg = preset("S")
    shape = TileShape(256, 2048)
    rates = analytic_rates(shape, cfg)
    reqs = make_rc_stream(cfg, shape, 12)
    span_a = schedule(reqs, build_device(cfg), strategy="a").makespan_ns
    reads = 3 * cfg.flash.channel_num
    mix = reqs + make_read_stream(cfg, reads, start_index=1000)
    span_c = schedule(mix, build_device(cfg), strategy="c").makespan_ns
    spare_bw = (1 - rates.rate_rc) * cfg.timing.bw_channel  # bytes/us
    bound = span_a + (3 * PAGE / spare_bw) * 1000
    assert span_c <= bound


# --- steady-state rates ----------------------------------------------------------

def test_steady_state_utilization_matches_rate_rc():
    cfg = preset("S")
    shape = TileShape(256, 2048)
    t = schedule(make_rc_stream(cfg, shape, 120), build_device(cfg),
                 strategy="a")
    util = statistics.mean(channel_utilization(t).values())
    rate = analytic_rates(shape, cfg).rate_rc
    assert abs(util / rate - 1) < 0.02


def test_pipelining_throughput_per_core():
    # steady state: one page per core per max(t_read, compute, service)
    cfg = preset("S")
    t = schedule(make_rc_stream(cfg, TileShape(256, 2048), 60),
                 build_device(cfg), strategy="a")
    ends = sorted(e.end_ns for e in t.events
                  if e.action == "compute" and e.resource == "core0.0.0.0")
    period = statistics.mean(b - a for a, b in zip(ends[10:-10], ends[11:-9]))
    assert period == pytest.approx(30256, rel=0.01)


def test_saturated_read_stream_utilization():
    # approaches 1.0 as the stream length swamps the array-read lead-in
    cfg = preset("S")
    t = schedule(make_read_stream(cfg, 1600), build_device(cfg), strategy="c")
    util = statistics.mean(channel_utilization(t).values())
    assert util > 0.98


def test_idle_device_utilization():
    t = schedule([], build_device(preset("S")))
    assert all(u == 0.0 for u in channel_utilization(t).values())


# --- error paths -------------------------------------------------------------------

def test_buffer_overflow_rejected():
    cfg = tiny_cfg(buffer=256)
    dev = build_device(cfg)
    too_big = rc(0, bytes_in=4096, bytes_out=128)
    with pytest.raises(BufferOverflowError):
        schedule([too_big], dev)


def test_unknown_strategy():
    with pytest.raises(EngineError):
        schedule([], build_device(tiny_cfg()), strategy="z")


def test_bad_slice_bytes_for_schedule():
    with pytest.raises(EngineError):
        schedule([], build_device(tiny_cfg()), slice_bytes=600)


def test_trace_export_format():
    cfg = tiny_cfg()
    t = schedule([rc(0)], build_device(cfg), strategy="a")
    lines = t.to_trace().strip().split("\n")
    assert len(lines) == len(t.events)
    first = lines[0].split("\t")
    assert len(first) == 4
    int(first[0])  # timestamp parses
