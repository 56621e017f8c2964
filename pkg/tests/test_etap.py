import time

import pytest

from enclavetap.boundary import BoundaryConfig, MemoryEnv
from enclavetap.channel import loopback_pair
from enclavetap.errors import AuthFailure, DeviceShutdown, MemoryViolation
from enclavetap.etap import EtapConfig, EtapDevice, TrustedClock, mono_us, rss_select
from enclavetap.gateway import PAD_RECORD
from enclavetap.packets import FlowId, make_tcp_frame
from enclavetap.wire import (
    FRAME_DATA,
    FRAME_HB_REQ,
    FRAME_HB_RESP,
    Frame,
    PktInfo,
    RecordPacker,
    RecordParser,
    frame_encode,
)


def small_env():
    return MemoryEnv(BoundaryConfig(trusted_capacity_bytes=4 << 20, untrusted_capacity_bytes=64 << 20))


def make_device(keys, **cfg_kwargs):
    ch_gw, ch_dev = loopback_pair()
    config = EtapConfig(heartbeat_period_ms=0, idle_flush_ms=0, **cfg_kwargs)
    dev = EtapDevice(ch_dev, keys, small_env(), config)
    return ch_gw, dev


def send_batch(ch_gw, sealer, frames, batch_size):
    """Seal frames into records and pad the stream to the batch boundary."""
    packer = RecordPacker()
    records = []
    for f in frames:
        records.extend(packer.add(frame_encode(f)))
    rec = packer.flush()
    if rec is not None:
        records.append(rec)
    while len(records) % batch_size:
        records.append(PAD_RECORD)
    ch_gw.send(b"".join(sealer.seal(r) for r in records))
    return len(records)


# -------------------------------------------------------------------- clock

def test_clock_update_formula():
    clock = TrustedClock(t_off_us=0, t_rtd_us=2000)
    clock.update_from_packet(1_000_000)
    assert clock.now() == 1_001_000


def test_clock_offset_applied():
    clock = TrustedClock(t_off_us=-500, t_rtd_us=0)
    clock.update_from_packet(1_000_000)
    assert clock.now() == 999_500


def test_clock_monotonic_clamp():
    clock = TrustedClock(t_off_us=0, t_rtd_us=2000)
    clock.update_from_packet(1_000_000)
    clock.update_from_packet(900_000)  # older timestamp arrives late
    assert clock.now() == 1_001_000


def test_clock_monotonic_over_adversarial_sequence(rng):
    clock = TrustedClock(t_off_us=17, t_rtd_us=400)
    last = 0
    for _ in range(10_000):
        clock.update_from_packet(rng.randrange(0, 1 << 40))
        assert clock.now() >= last
        last = clock.now()


# ---------------------------------------------------------------------- rss

def test_rss_single_ring_always_zero(rng):
    for _ in range(100):
        assert rss_select(rng.randbytes(13), 1) == 0


def test_rss_symmetric_under_direction_swap(rng):
    for _ in range(500):
        fid = FlowId(rng.randbytes(4), rng.randbytes(4), rng.randrange(65536), rng.randrange(65536), 6)
        assert rss_select(fid.pack(), 4) == rss_select(fid.reversed().pack(), 4)


def test_rss_balance(rng):
    counts = [0, 0, 0, 0]
    flows = 20_000
    for _ in range(flows):
        counts[rss_select(rng.randbytes(13), 4)] += 1
    for c in counts:
        assert abs(c / flows - 0.25) < 0.03


# ------------------------------------------------------------------ RX loop

def test_rx_delivers_batch_and_advances_clock(keys):
    ch_gw, dev = make_device(keys, batch_size=4, ring_size=256)
    dev.clock.t_rtd_us = 2000
    sealer = keys.gateway_sealer()
    frames = [Frame(FRAME_DATA, 1_000_000 + i, bytes([i]) * 60) for i in range(100)]
    nrec = send_batch(ch_gw, sealer, frames, 4)
    delivered = dev.rx_loop_iteration()
    assert delivered == 100
    assert dev.stats.records_rx == nrec
    # clock is at the last packet's time + rtd/2
    assert dev.clock_now() == 1_000_099 + 1000
    got = [dev.read_pkt(blocking=False) for _ in range(100)]
    assert [p.data for p in got] == [f.data for f in frames]
    assert [p.ts_us for p in got] == [f.ts_us for f in frames]


def test_rx_padding_only_batch(keys):
    ch_gw, dev = make_device(keys, batch_size=3)
    sealer = keys.gateway_sealer()
    ch_gw.send(b"".join(sealer.seal(PAD_RECORD) for _ in range(3)))
    assert dev.rx_loop_iteration() == 0
    assert dev.clock_now() == 0
    assert dev.read_pkt(blocking=False) is None


def test_rx_tampered_record_shuts_down(keys):
    ch_gw, dev = make_device(keys, batch_size=2)
    sealer = keys.gateway_sealer()
    packer = RecordPacker()
    records = []
    for i in range(30):
        records.extend(packer.add(frame_encode(Frame(FRAME_DATA, i, bytes(64)))))
    records.append(packer.flush())
    while len(records) % 2:
        records.append(PAD_RECORD)
    sealed = [bytearray(sealer.seal(r)) for r in records]
    sealed[0][100] ^= 0x40  # tamper the first record
    ch_gw.send(b"".join(bytes(s) for s in sealed))
    with pytest.raises(AuthFailure):
        dev.rx_loop_iteration()
    assert dev.is_shutdown
    assert "integrity" in dev.shutdown_reason or "record" in dev.shutdown_reason
    # zero packets delivered past the failure
    with pytest.raises(DeviceShutdown):
        dev.read_pkt(blocking=False)


def test_rx_memory_violation_shuts_down(keys, monkeypatch):
    ch_gw, dev = make_device(keys, batch_size=1)
    sealer = keys.gateway_sealer()
    send_batch(ch_gw, sealer, [Frame(FRAME_DATA, 0, bytes(10))], 1)

    def bad_check(region):
        raise MemoryViolation("crafted buffer")

    monkeypatch.setattr(dev.env, "check_memory", bad_check)
    with pytest.raises(MemoryViolation):
        dev.rx_loop_iteration()
    assert dev.is_shutdown


def test_rx_heartbeat_req_queued_for_response(keys):
    ch_gw, dev = make_device(keys, batch_size=1)
    sealer = keys.gateway_sealer()
    send_batch(ch_gw, sealer, [Frame(FRAME_HB_REQ, 777)], 1)
    dev.rx_loop_iteration()
    assert dev.stats.heartbeats_answered == 1
    # the response is flushed by the next TX pass and echoes the timestamp
    dev.tx_loop_iteration()
    opener = keys.gateway_opener()
    rec = opener.open(ch_gw.recv_exact(16400))
    frames = RecordParser().feed(rec)
    assert frames == [Frame(FRAME_HB_RESP, 777)]


def test_rx_heartbeat_resp_updates_rtd(keys):
    ch_gw, dev = make_device(keys, batch_size=1)
    sealer = keys.gateway_sealer()
    send_batch(ch_gw, sealer, [Frame(FRAME_HB_RESP, mono_us() - 50_000)], 1)
    dev.rx_loop_iteration()
    assert 50_000 <= dev.clock.t_rtd_us < 300_000


def test_rx_rss_partition_and_per_flow_order(keys):
    ch_gw, dev = make_device(keys, batch_size=2, num_rx_rings=2, ring_size=1024)
    sealer = keys.gateway_sealer()
    frames = []
    flows = []
    for i in range(40):
        src = bytes([10, 0, 0, i + 1])
        dst = bytes([10, 9, 9, 9])
        fid = FlowId(src, dst, 1000 + i, 80, 6).pack()
        flows.append(fid)
        for k in range(5):
            frames.append(Frame(FRAME_DATA, i, make_tcp_frame(src, dst, 1000 + i, 80, bytes([k]))))
    send_batch(ch_gw, sealer, frames, 2)
    dev.rx_loop_iteration()
    per_ring: dict[int, list[bytes]] = {0: [], 1: []}
    for idx in (0, 1):
        while True:
            pkt = dev.read_pkt(idx, blocking=False)
            if pkt is None:
                break
            per_ring[idx].append(pkt.data)
    from enclavetap.packets import extract_fid

    for idx, pkts in per_ring.items():
        for data in pkts:
            assert rss_select(extract_fid(data), 2) == idx
    # per-flow order preserved
    for fid in flows:
        ring_idx = rss_select(fid, 2)
        seq = [d[-1] for d in per_ring[ring_idx] if extract_fid(d) == fid]
        assert seq == [0, 1, 2, 3, 4]
    assert sum(len(v) for v in per_ring.values()) == 200


# ------------------------------------------------------------------ TX loop

def test_tx_100_full_packets_ten_records(keys):
    ch_gw, dev = make_device(keys, batch_size=10, ring_size=256)
    for i in range(100):
        dev.write_pkt(PktInfo(i, bytes(1500)))
    crossings_before = dev.env.stats.ocall_count
    sent = dev.tx_loop_iteration()
    assert sent == 10  # ceil(100 * 1511 / 16384), flush pads the last
    assert dev.env.stats.ocall_count == crossings_before + 1  # one crossing, <= batch
    opener = keys.gateway_opener()
    parser = RecordParser()
    frames = []
    for _ in range(10):
        frames.extend(parser.feed(opener.open(ch_gw.recv_exact(16400))))
    assert len(frames) == 100
    assert all(len(f.data) == 1500 for f in frames)


def test_tx_idle_no_flush_before_timer(keys):
    ch_gw, dev = make_device(keys, batch_size=4)
    dev.config.idle_flush_ms = 10_000
    dev.write_pkt(PktInfo(0, bytes(100)))
    dev._last_tx_add_us = mono_us()
    assert dev.tx_loop_iteration() == 0  # partial record held, timer not expired


def test_tx_empty_ring_nothing_sent(keys):
    ch_gw, dev = make_device(keys, batch_size=4)
    assert dev.tx_loop_iteration() == 0


def test_tx_idle_flush_after_timer(keys):
    ch_gw, dev = make_device(keys, batch_size=4)
    dev.config.idle_flush_ms = 1
    dev.write_pkt(PktInfo(0, b"x" * 10))
    assert dev.tx_loop_iteration() == 0  # packed, idle timer starts
    time.sleep(0.005)
    assert dev.tx_loop_iteration() == 1  # timer expired: padded record flushed


# -------------------------------------------------------------- poll driver

def test_read_pkt_nonblocking_empty(keys):
    _, dev = make_device(keys)
    assert dev.read_pkt(blocking=False) is None


def test_read_pkt_blocking_fifo(keys):
    ch_gw, dev = make_device(keys, batch_size=1)
    sealer = keys.gateway_sealer()
    send_batch(ch_gw, sealer, [Frame(FRAME_DATA, 1, b"a"), Frame(FRAME_DATA, 2, b"b")], 1)
    dev.rx_loop_iteration()
    assert dev.read_pkt(blocking=True).data == b"a"
    assert dev.read_pkt(blocking=True).data == b"b"


def test_write_pkt_nonblocking_full(keys):
    _, dev = make_device(keys, ring_size=4)
    for i in range(3):
        assert dev.write_pkt(PktInfo(i, b"x"), blocking=False)
    assert not dev.write_pkt(PktInfo(9, b"x"), blocking=False)


def test_read_pkt_returns_stable_copies(keys):
    ch_gw, dev = make_device(keys, batch_size=1)
    sealer = keys.gateway_sealer()
    send_batch(ch_gw, sealer, [Frame(FRAME_DATA, 1, b"first"), Frame(FRAME_DATA, 2, b"second")], 1)
    dev.rx_loop_iteration()
    a = dev.read_pkt()
    b = dev.read_pkt()
    assert a.data == b"first" and b.data == b"second"


def test_shutdown_wakes_blocking_reader(keys):
    import threading

    _, dev = make_device(keys)
    errs = []

    def reader():
        try:
            dev.read_pkt(blocking=True)
        except DeviceShutdown:
            errs.append("shutdown")

    t = threading.Thread(target=reader)
    t.start()
    time.sleep(0.05)
    dev.shutdown("test stop")
    t.join(5)
    assert errs == ["shutdown"]
