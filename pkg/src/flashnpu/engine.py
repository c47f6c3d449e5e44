"""Deterministic discrete-event scheduler for the flash request pipeline.

Pipeline model per read-compute round on one channel: the input vector is
broadcast over the channel (one transfer shared by all that channel's
cores), each target plane then reads its page into the data register (tR),
moves it to the cache register (freeing the data register for the next
round's read), the shared core computes from the cache register, and each
core's result slice is sent back over the channel.  A round's input may
only be requested once the previous round has moved out of the data
registers, so the steady-state round period is tR plus the input transfer.

Plain reads deliver NPU-portion weights from planes that hold no GeMV
tiles.  Strategy 'b' transfers them as whole pages under first-come
first-served channel arbitration (a legacy bus); strategy 'c' slices them
and gives pending read-compute transfers priority at slice boundaries,
which is what keeps the compute pipeline from stalling behind bulk reads.

The clock ticks in integer nanoseconds; identical inputs produce
bit-identical timelines.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

from .hwconfig import SystemConfig
from .tiler import TileShape
from .topology import RC_PLANE, DeviceTree, FlashAddress


class EngineError(RuntimeError):
    pass


class BufferOverflowError(EngineError):
    """Input vector does not fit the compute-core buffer: bad tile shape."""


DEFAULT_SLICE_BYTES = 512
DEFAULT_READ_WINDOW = 3  # outstanding plain reads per channel


@dataclass(frozen=True)
class Request:
    kind: str                    # 'read_compute' | 'read' | 'read_slice'
    channel: int
    addresses: tuple = ()        # one per participating core (RC) or one page
    input_vector_bytes: int = 0  # RC: broadcast bytes per channel
    result_vector_bytes: int = 0  # RC: bytes per core
    payload_bytes: int = 0       # read/slice payload
    parent_id: str = ""          # slices only
    issue_index: int = 0
    request_id: str = ""


@dataclass(frozen=True)
class Event:
    start_ns: int
    end_ns: int
    resource: str
    action: str  # transfer-in | array-read | register-move | compute | transfer-out | read-payload
    request_id: str


@dataclass
class Timeline:
    events: list = field(default_factory=list)
    makespan_ns: int = 0
    channel_busy_ns: dict = field(default_factory=dict)

    def utilization(self) -> dict:
        if self.makespan_ns == 0:
            return {ch: 0.0 for ch in self.channel_busy_ns}
        return {ch: busy / self.makespan_ns
                for ch, busy in sorted(self.channel_busy_ns.items())}

    def to_trace(self) -> str:
        lines = [f"{e.start_ns}\t{e.resource}\t{e.action}\t{e.request_id}"
                 for e in self.events]
        return "\n".join(lines) + ("\n" if lines else "")


def slice_read(request: Request, slice_bytes: int) -> list:
    """Cut a page-sized read into independently transferred slices."""
    if request.kind != "read":
        raise EngineError("only plain read requests can be sliced")
    if slice_bytes <= 0 or slice_bytes > request.payload_bytes:
        raise EngineError(f"slice_bytes {slice_bytes} outside (0, {request.payload_bytes}]")
    if request.payload_bytes % slice_bytes:
        raise EngineError(
            f"slice_bytes {slice_bytes} does not divide payload {request.payload_bytes}")
    n = request.payload_bytes // slice_bytes
    return [Request(kind="read_slice", channel=request.channel,
                    addresses=request.addresses, payload_bytes=slice_bytes,
                    parent_id=request.request_id or f"rd{request.issue_index}",
                    issue_index=request.issue_index,
                    request_id=f"{request.request_id}.s{i}")
            for i in range(n)]


# ---------------------------------------------------------------------------
# internal jobs

class _RcJob:
    __slots__ = ("round", "addr", "core_key", "read_done", "moved", "req_id", "seq")

    def __init__(self, rnd, addr, core_key, seq):
        self.round = rnd
        self.addr = addr
        self.core_key = core_key
        self.read_done = False
        self.moved = False
        self.req_id = rnd.req.request_id
        self.seq = seq


class _Round:
    __slots__ = ("req", "jobs", "input_done", "remaining", "seq")

    def __init__(self, req, seq):
        self.req = req
        self.jobs = []
        self.input_done = False
        self.remaining = 0
        self.seq = seq


class _ReadJob:
    __slots__ = ("req", "addr", "remaining", "slice_plan", "issued", "moved", "seq")

    def __init__(self, req, slice_plan, seq):
        self.req = req
        self.addr = req.addresses[0]
        self.slice_plan = slice_plan  # list of transfer sizes
        self.remaining = list(slice_plan)
        self.issued = False
        self.moved = False
        self.seq = seq


class _Plane:
    __slots__ = ("data_holder", "cache_holder", "cache_waiters")

    def __init__(self):
        self.data_holder = None
        self.cache_holder = None
        self.cache_waiters = deque()


class _Core:
    __slots__ = ("busy", "ready", "inputs", "outputs")

    def __init__(self):
        self.busy = False
        self.ready = deque()   # moved jobs awaiting compute
        self.inputs = 0
        self.outputs = 0


class _Channel:
    __slots__ = ("busy", "rc_q", "read_q", "rounds", "read_cmds", "outstanding",
                 "busy_ns")

    def __init__(self):
        self.busy = False
        self.rc_q = []    # heap of (ready, seq, transfer)
        self.read_q = []
        self.rounds = deque()
        self.read_cmds = deque()
        self.outstanding = 0
        self.busy_ns = 0


class _Transfer:
    __slots__ = ("ready", "seq", "bytes", "action", "req_id", "on_done", "job")

    def __init__(self, ready, seq, nbytes, action, req_id, on_done, job=None):
        self.ready = ready
        self.seq = seq
        self.bytes = nbytes
        self.action = action
        self.req_id = req_id
        self.on_done = on_done
        self.job = job


class _Sim:
    def __init__(self, device: DeviceTree, strategy: str, slice_bytes: int,
                 read_window: int):
        self.dev = device
        self.cfg: SystemConfig = device.config
        self.strategy = strategy
        self.slice_bytes = slice_bytes
        self.read_window = read_window
        self.now = 0
        self.seq = 0
        self.heap = []
        self.events: list = []
        self.channels = {ch: _Channel() for ch in range(self.cfg.flash.channel_num)}
        self.planes = {k: _Plane() for k in device.planes}
        self.cores = {k: _Core() for k in device.cores}
        self.open_work = 0  # rounds + reads not yet fully retired

    def next_seq(self):
        self.seq += 1
        return self.seq

    def post(self, t, fn):
        heapq.heappush(self.heap, (t, self.next_seq(), fn))

    def record(self, start, end, resource, action, req_id):
        self.events.append(Event(start, end, resource, action, req_id))

    # -- request intake ------------------------------------------------------
    def add_requests(self, requests):
        buf = self.cfg.host.input_output_buffer
        sliced_parents = {}
        for req in sorted(requests, key=lambda r: r.issue_index):
            ch = self.channels.get(req.channel)
            if ch is None:
                raise EngineError(f"request {req.request_id}: no channel {req.channel}")
            for addr in req.addresses:
                addr.validate(self.cfg)
            if req.kind == "read_compute":
                if req.input_vector_bytes + req.result_vector_bytes > buf:
                    raise BufferOverflowError(
                        f"input {req.input_vector_bytes} + result "
                        f"{req.result_vector_bytes} exceeds the {buf} B core buffer")
                rnd = _Round(req, self.next_seq())
                per_die = self.cfg.flash.ccores_per_die
                slots = {}
                for addr in req.addresses:
                    dk = addr.die_key
                    slot = slots.get(dk, 0)
                    slots[dk] = slot + 1
                    if slot >= per_die:
                        raise EngineError(
                            f"round {req.request_id} overcommits die {dk}")
                    rnd.jobs.append(_RcJob(rnd, addr, (*dk, slot), self.next_seq()))
                rnd.remaining = len(rnd.jobs)
                ch.rounds.append(rnd)
                self.open_work += 1
            elif req.kind == "read":
                plan = self._slice_plan(req.payload_bytes)
                ch.read_cmds.append(_ReadJob(req, plan, self.next_seq()))
                self.open_work += 1
            elif req.kind == "read_slice":
                sliced_parents.setdefault((req.channel, req.parent_id), []).append(req)
            else:
                raise EngineError(f"unknown request kind {req.kind!r}")
        for (chan, parent), slices in sorted(
                sliced_parents.items(), key=lambda kv: kv[1][0].issue_index):
            total = sum(s.payload_bytes for s in slices)
            if total != self.cfg.flash.page_size:
                raise EngineError(
                    f"slices of {parent} sum to {total}, expected one page "
                    f"({self.cfg.flash.page_size})")
            proto = slices[0]
            job = _ReadJob(
                Request(kind="read", channel=chan, addresses=proto.addresses,
                        payload_bytes=total, issue_index=proto.issue_index,
                        request_id=parent),
                [s.payload_bytes for s in slices], self.next_seq())
            self.channels[chan].read_cmds.append(job)
            self.open_work += 1

    def _slice_plan(self, payload):
        if self.strategy == "c":
            n, rem = divmod(payload, self.slice_bytes)
            return [self.slice_bytes] * n + ([rem] if rem else [])
        return [payload]

    # -- plane / register helpers ---------------------------------------------
    def _request_cache(self, plane_key, job, fn):
        plane = self.planes[plane_key]
        if plane.cache_holder is None:
            plane.cache_holder = job
            fn()
        else:
            plane.cache_waiters.append((job, fn))

    def _release_cache(self, plane_key):
        plane = self.planes[plane_key]
        plane.cache_holder = None
        if plane.cache_waiters:
            job, fn = plane.cache_waiters.popleft()
            plane.cache_holder = job
            fn()

    def _release_data(self, plane_key):
        self.planes[plane_key].data_holder = None
        ch = plane_key[0]
        self.pump_channel_sources(ch)

    # -- round lifecycle -------------------------------------------------------
    def pump_channel_sources(self, chn):
        """Issue whatever the head of the round queue / read queue allows."""
        ch = self.channels[chn]
        progress = True
        while progress:
            progress = False
            if ch.rounds and self._round_ready(ch.rounds[0]):
                self._issue_round(chn, ch.rounds.popleft())
                progress = True
            while (ch.outstanding < self.read_window and ch.read_cmds
                   and self._read_ready(ch.read_cmds[0])):
                self._issue_read(chn, ch.read_cmds.popleft())
                progress = True

    def _round_ready(self, rnd):
        buf = self.cfg.host.input_output_buffer
        for job in rnd.jobs:
            if self.planes[job.addr.plane_key].data_holder is not None:
                return False
            core = self.cores[job.core_key]
            if core.inputs + core.outputs + rnd.req.input_vector_bytes > buf:
                return False
        return True

    def _issue_round(self, chn, rnd):
        for job in rnd.jobs:
            self.planes[job.addr.plane_key].data_holder = job  # reserve
        tr = _Transfer(self.now, rnd.seq, rnd.req.input_vector_bytes,
                       "transfer-in", rnd.req.request_id,
                       lambda r=rnd, c=chn: self._input_done(c, r))
        self._enqueue(chn, "rc", tr)

    def _input_done(self, chn, rnd):
        rnd.input_done = True
        t_read = self.cfg.t_read_ns
        for job in rnd.jobs:
            core = self.cores[job.core_key]
            core.inputs += rnd.req.input_vector_bytes
            plane = f"plane{job.addr.channel}.{job.addr.chip}.{job.addr.die}.{job.addr.plane}"
            self.record(self.now, self.now + t_read, plane, "array-read", job.req_id)
            self.post(self.now + t_read, lambda j=job: self._rc_read_done(j))

    def _rc_read_done(self, job):
        job.read_done = True
        self._request_cache(job.addr.plane_key, job,
                            lambda j=job: self._rc_move(j))

    def _rc_move(self, job):
        job.moved = True
        pk = job.addr.plane_key
        self.record(self.now, self.now,
                    f"plane{pk[0]}.{pk[1]}.{pk[2]}.{pk[3]}", "register-move",
                    job.req_id)
        self._release_data(pk)
        core = self.cores[job.core_key]
        core.ready.append(job)
        self._try_compute(job.core_key)

    def _try_compute(self, core_key):
        core = self.cores[core_key]
        if core.busy or not core.ready:
            return
        job = core.ready[0]
        rnd = job.round
        buf = self.cfg.host.input_output_buffer
        if core.inputs + core.outputs + rnd.req.result_vector_bytes > buf:
            return  # wait for a result to drain
        core.ready.popleft()
        core.busy = True
        core.outputs += rnd.req.result_vector_bytes
        dur = self.cfg.compute_ns
        k = job.core_key
        self.record(self.now, self.now + dur,
                    f"core{k[0]}.{k[1]}.{k[2]}.{k[3]}", "compute", job.req_id)
        self.post(self.now + dur, lambda j=job: self._compute_done(j))

    def _compute_done(self, job):
        core = self.cores[job.core_key]
        core.busy = False
        core.inputs -= job.round.req.input_vector_bytes
        self._release_cache(job.addr.plane_key)
        tr = _Transfer(self.now, job.seq, job.round.req.result_vector_bytes,
                       "transfer-out", job.req_id,
                       lambda j=job: self._result_done(j))
        self._enqueue(job.addr.channel, "rc", tr)
        self._try_compute(job.core_key)
        self.pump_channel_sources(job.addr.channel)

    def _result_done(self, job):
        core = self.cores[job.core_key]
        core.outputs -= job.round.req.result_vector_bytes
        rnd = job.round
        rnd.remaining -= 1
        if rnd.remaining == 0:
            self.open_work -= 1
        self._try_compute(job.core_key)
        self.pump_channel_sources(job.addr.channel)

    # -- plain read lifecycle ----------------------------------------------------
    def _read_ready(self, job):
        return self.planes[job.addr.plane_key].data_holder is None

    def _issue_read(self, chn, job):
        job.issued = True
        self.channels[chn].outstanding += 1
        pk = job.addr.plane_key
        self.planes[pk].data_holder = job
        t_read = self.cfg.t_read_ns
        self.record(self.now, self.now + t_read,
                    f"plane{pk[0]}.{pk[1]}.{pk[2]}.{pk[3]}", "array-read",
                    job.req.request_id)
        self.post(self.now + t_read, lambda j=job: self._read_array_done(j))

    def _read_array_done(self, job):
        self._request_cache(job.addr.plane_key, job,
                            lambda j=job: self._read_move(j))

    def _read_move(self, job):
        job.moved = True
        pk = job.addr.plane_key
        self.record(self.now, self.now,
                    f"plane{pk[0]}.{pk[1]}.{pk[2]}.{pk[3]}", "register-move",
                    job.req.request_id)
        self._release_data(pk)
        self._enqueue_read_slice(job)

    def _enqueue_read_slice(self, job):
        nbytes = job.remaining[0]
        tr = _Transfer(self.now, job.seq, nbytes, "read-payload",
                       job.req.request_id,
                       lambda j=job: self._read_slice_done(j), job=job)
        self._enqueue(job.addr.channel, "read", tr)

    def _read_slice_done(self, job):
        job.remaining.pop(0)
        if job.remaining:
            self._enqueue_read_slice(job)
            return
        self._release_cache(job.addr.plane_key)
        ch = self.channels[job.addr.channel]
        ch.outstanding -= 1
        self.open_work -= 1
        self.pump_channel_sources(job.addr.channel)

    # -- channel arbitration -------------------------------------------------------
    def _enqueue(self, chn, cls, tr):
        ch = self.channels[chn]
        q = ch.rc_q if cls == "rc" else ch.read_q
        q.append(tr)
        q.sort(key=lambda t: t.seq)  # FIFO by issue order within the class
        self._try_grant(chn)

    def _try_grant(self, chn):
        ch = self.channels[chn]
        if ch.busy:
            return
        tr = self._pick(ch)
        if tr is None:
            wake = self._earliest_pending(ch)
            if wake is not None and wake > self.now:
                self.post(wake, lambda c=chn: self._try_grant(c))
            return
        ch.busy = True
        dur = self.cfg.transfer_ns(tr.bytes) if tr.bytes else 0
        ch.busy_ns += dur
        self.record(self.now, self.now + dur, f"ch{chn}", tr.action, tr.req_id)
        self.post(self.now + dur, lambda c=chn, t=tr: self._grant_done(c, t))

    def _grant_done(self, chn, tr):
        self.channels[chn].busy = False
        tr.on_done()
        self._try_grant(chn)

    def _ready_head(self, q):
        for tr in q:
            if tr.ready <= self.now:
                return tr
        return None

    def _pick(self, ch):
        """Select the next transfer.  'c': read-compute traffic outranks read
        slices.  'b': first-come first-served across classes, whole pages."""
        rc = self._ready_head(ch.rc_q)
        rd = self._ready_head(ch.read_q)
        if self.strategy == "b" and rc and rd:
            chosen = rc if (rc.ready, rc.seq) <= (rd.ready, rd.seq) else rd
        else:
            chosen = rc or rd
        if chosen is None:
            return None
        (ch.rc_q if chosen is rc else ch.read_q).remove(chosen)
        return chosen

    def _earliest_pending(self, ch):
        times = [tr.ready for q in (ch.rc_q, ch.read_q) for tr in q]
        return min(times) if times else None

    # -- main loop ----------------------------------------------------------------
    def run(self) -> Timeline:
        for chn in self.channels:
            self.pump_channel_sources(chn)
            self._try_grant(chn)
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            if t < self.now:
                raise EngineError("time went backwards")
            self.now = t
            fn()
        if self.open_work:
            raise EngineError(
                f"deadlock: {self.open_work} requests never completed")
        makespan = max((e.end_ns for e in self.events), default=0)
        return Timeline(
            events=self.events,
            makespan_ns=makespan,
            channel_busy_ns={chn: c.busy_ns for chn, c in self.channels.items()},
        )


def schedule(requests, device: DeviceTree, strategy: str = "c",
             slice_bytes: int = DEFAULT_SLICE_BYTES,
             read_window: int = DEFAULT_READ_WINDOW) -> Timeline:
    """Run the request set to completion and return the event timeline."""
    if strategy not in ("a", "b", "c"):
        raise EngineError(f"unknown strategy {strategy!r}")
    if strategy == "a":
        if any(r.kind != "read_compute" for r in requests):
            raise EngineError("strategy 'a' admits only read-compute requests")
        strategy = "c"
    if slice_bytes <= 0 or slice_bytes > device.config.flash.page_size:
        raise EngineError(f"slice_bytes {slice_bytes} outside (0, page_size]")
    if device.config.flash.page_size % slice_bytes:
        raise EngineError(f"slice_bytes {slice_bytes} does not divide the page size")
    device.reset()
    sim = _Sim(device, strategy, slice_bytes, read_window)
    sim.add_requests(list(requests))
    return sim.run()


def channel_utilization(timeline: Timeline) -> dict:
    """Per-channel busy fraction of the full makespan, each in [0, 1]."""
    return timeline.utilization()


# ---------------------------------------------------------------------------
# request builders

def make_rc_stream(cfg: SystemConfig, shape: TileShape, n_rounds: int,
                   start_index: int = 0) -> list:
    """Read-compute requests for a stream of full tiles on every channel.

    Consecutive rounds reuse plane 0 of each die; the data/cache register
    pair pipelines round k+1's array read under round k's compute.
    """
    shape.validate(cfg)
    g = cfg.flash
    reqs = []
    for r in range(n_rounds):
        for ch in range(g.channel_num):
            addrs = []
            for core in range(g.ccore_num):
                chip, die = divmod(core // g.ccores_per_die, g.dies_per_chip)
                block, page = divmod(r, g.block_pages)
                addrs.append(FlashAddress(ch, chip, die, RC_PLANE, block, page))
            reqs.append(Request(
                kind="read_compute", channel=ch, addresses=tuple(addrs),
                input_vector_bytes=shape.input_bytes_per_channel(cfg),
                result_vector_bytes=shape.result_bytes_per_core(cfg),
                issue_index=start_index + r,
                request_id=f"rc{start_index + r}.ch{ch}"))
    return reqs


def make_read_stream(cfg: SystemConfig, n_pages: int, start_index: int = 0) -> list:
    """Plain page reads striped channel-major over the non-RC planes."""
    g = cfg.flash
    ring = [(chip, die, plane)
            for chip in range(g.chips_per_channel)
            for die in range(g.dies_per_chip)
            for plane in range(g.planes_per_die)
            if plane != RC_PLANE or g.planes_per_die == 1]
    reqs = []
    for i in range(n_pages):
        ch = i % g.channel_num
        chip, die, plane = ring[(i // g.channel_num) % len(ring)]
        block, page = divmod(i // g.channel_num // len(ring), g.block_pages)
        reqs.append(Request(
            kind="read", channel=ch,
            addresses=(FlashAddress(ch, chip, die, plane, block, page),),
            payload_bytes=g.page_size,
            issue_index=start_index + i, request_id=f"rd{start_index + i}"))
    return reqs


def exec_read_compute(cfg: SystemConfig, shape: TileShape, device: DeviceTree,
                      clock: int = 0, n_tiles: int = 1) -> Timeline:
    """Schedule a bare tile stream (no plain reads) and return its timeline."""
    del clock  # streams always start at t=0 of a fresh timeline
    reqs = make_rc_stream(cfg, shape, n_tiles)
    return schedule(reqs, device, strategy="a")
