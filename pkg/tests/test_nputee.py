"""NPU protection tests: delayed vs blocking pipeline schedules, tensor MAC
round-trips, poison tracing, verification barriers, the non-delayed code
path, and MAC storage accounting."""

import random

import pytest

from teesim.config import SimConfig, build_engine
from teesim.crypto import IntegrityFault, KeyMaterial, LINE_BYTES
from teesim.nputee import HaltError, NpuDevice, VerifyMode

KEY = KeyMaterial.from_seed(0x0909)
DEV_BASE = 0x4000_0000


def make_dev(threshold=3):
    eng = build_engine(SimConfig())
    return NpuDevice(KEY, eng, fault_threshold=threshold), eng


def lines(n, seed=0):
    rng = random.Random(seed)
    return [rng.randbytes(LINE_BYTES) for _ in range(n)]


def stored_tensor(dev, tid=1, n=64, seed=0):
    rec = dev.register_tensor(tid, DEV_BASE + tid * 0x100000, n)
    data = lines(n, seed)
    dev.store_tensor_stream(rec, data)
    return rec, data


def test_clean_delayed_stream_no_verification_stalls():
    dev, _ = make_dev()
    rec, data = stored_tensor(dev)
    plains, rep = dev.load_tensor_stream(rec, VerifyMode("delayed"))
    assert plains == data
    assert rec.poison == 0
    assert rep.stall_ticks == 0
    # verification never gates compute: the stream ends when compute ends
    assert rep.done_tick == rep.compute_done_tick


def test_blocking_4k_stalls_first_line_of_each_block():
    dev, _ = make_dev()
    rec, _ = stored_tensor(dev, n=256)
    dev.seal_block_macs(rec, 4096)
    _, rep = dev.load_tensor_stream(rec, VerifyMode("blocking", 4096))
    assert rep.stall_ticks > 0
    # when compute outpaces the AES stream, every 64-line block bubbles for
    # its remaining fetch+MAC latency
    cfg = SimConfig()
    cfg.npu.compute_cycles_per_line = 4
    eng = build_engine(cfg)
    dev2 = NpuDevice(KEY, eng)
    rec2 = dev2.register_tensor(1, DEV_BASE, 256)
    dev2.store_tensor_stream(rec2, lines(256))
    dev2.seal_block_macs(rec2, 4096)
    _, rep_b = dev2.load_tensor_stream(rec2, VerifyMode("blocking", 4096))
    # analytic schedule: AES streams a line per 56 ticks, compute eats one per
    # 28, so each steady block bubbles 64*(56-28) and block 0 pays its fill
    n_blocks = 256 // 64
    steady = (n_blocks - 1) * 64 * (56 - 28)
    fill = 63 * 56
    assert rep_b.stall_ticks >= steady + fill


def _fresh_load_span(n, vm, seed=0):
    dev, eng = make_dev()
    rec = dev.register_tensor(1, DEV_BASE, n)
    dev.store_tensor_stream(rec, lines(n, seed))
    if vm.mode == "blocking":
        dev.seal_block_macs(rec, vm.granularity)
    for r in eng.resources.values():
        r.busy_until = 0  # staging must not occupy the ledger
    _, rep = dev.load_tensor_stream(rec, vm, at_tick=0)
    return rep.done_tick - rep.start_tick


def test_delayed_cheaper_than_every_blocking_granularity():
    spans = {g: _fresh_load_span(256, VerifyMode("blocking", g))
             for g in (64, 128, 256, 512, 1024, 2048, 4096)}
    delayed = _fresh_load_span(256, VerifyMode("delayed"))
    for g, span in spans.items():
        assert delayed <= span, f"delayed {delayed} > blocking({g}) {span}"


def test_cycle_ordering_holds_on_random_stream_shapes():
    rng = random.Random(77)
    for trial in range(6):
        n = rng.randrange(16, 400)
        delayed = _fresh_load_span(n, VerifyMode("delayed"), seed=trial)
        for g in (64, 512, 4096):
            blocking = _fresh_load_span(n, VerifyMode("blocking", g), seed=trial)
            assert delayed <= blocking, (n, g)


def test_tamper_mid_tensor_faults_at_stream_end_poison_sticks():
    dev, _ = make_dev()
    rec, _ = stored_tensor(dev)
    addr = rec.base + 31 * LINE_BYTES
    dev.gddr[addr].data ^= 1 << 200
    dev.taint.add(addr)
    with pytest.raises(IntegrityFault) as ei:
        dev.load_tensor_stream(rec, VerifyMode("delayed"))
    assert ei.value.kind == "tensor_mac"
    assert rec.poison == 1 and rec.failed
    assert dev.retransfer_requests == [rec.tensor_id]
    assert dev.faults.count == 1


def test_fault_counter_halts_past_threshold():
    dev, _ = make_dev(threshold=2)
    for trial in range(2):
        rec, data = stored_tensor(dev, tid=trial + 1, n=8, seed=trial)
        dev.gddr[rec.base].data ^= 1
        with pytest.raises(IntegrityFault):
            dev.load_tensor_stream(rec, VerifyMode("delayed"))
    rec, _ = stored_tensor(dev, tid=9, n=8)
    dev.gddr[rec.base].data ^= 1
    with pytest.raises(HaltError):
        dev.load_tensor_stream(rec, VerifyMode("delayed"))


def test_store_load_roundtrip_and_vn_step():
    dev, _ = make_dev()
    rec = dev.register_tensor(3, DEV_BASE, 16)
    data = lines(16, 3)
    dev.store_tensor_stream(rec, data)
    assert rec.vn == 1
    dev.store_tensor_stream(rec, data)
    assert rec.vn == 2
    plains, _ = dev.load_tensor_stream(rec, VerifyMode("delayed"))
    assert plains == data


def test_permuted_store_order_same_mac():
    data = lines(32, 5)
    dev, _ = make_dev()
    rec = dev.register_tensor(4, DEV_BASE, 32)
    dev.store_tensor_stream(rec, data)
    in_order = rec.stored_mac
    dev2, _ = make_dev()
    rec2 = dev2.register_tensor(4, DEV_BASE, 32)
    order = list(range(32))
    random.Random(1).shuffle(order)
    dev2.store_tensor_stream(rec2, data, order=order)
    assert rec2.stored_mac == in_order


def test_poison_or_semantics():
    dev, _ = make_dev()
    a, _ = stored_tensor(dev, tid=1, n=4)
    b, _ = stored_tensor(dev, tid=2, n=4)
    out = dev.register_tensor(10, DEV_BASE + 0x500000, 4)
    dev.propagate_poison([a, b], out)
    assert dev.effective_poison(out) == 0
    b.poison = 1
    out2 = dev.register_tensor(11, DEV_BASE + 0x600000, 4)
    dev.propagate_poison([a, b], out2)
    assert dev.effective_poison(out2) == 1


def test_poison_chain_clears_after_source_verifies():
    dev, _ = make_dev()
    a, _ = stored_tensor(dev, tid=1, n=8)
    a.poison = 1  # pretend A's verification is still pending
    b = dev.register_tensor(2, DEV_BASE + 0x100000, 8)
    dev.propagate_poison([a], b)
    c = dev.register_tensor(3, DEV_BASE + 0x200000, 8)
    dev.propagate_poison([b], c)
    assert dev.effective_poison(b) == 1 and dev.effective_poison(c) == 1
    a.poison = 0  # A's pending verification passes
    assert dev.effective_poison(b) == 0
    assert dev.effective_poison(c) == 0


def test_barrier_zero_latency_when_clean():
    dev, eng = make_dev()
    rec, _ = stored_tensor(dev)
    dev.load_tensor_stream(rec, VerifyMode("delayed"))
    eng.advance(rec.verify_done_tick)
    assert dev.barrier_wait_ticks([rec.tensor_id]) == 0


def test_barrier_waits_for_inflight_verification():
    dev, eng = make_dev()
    rec, _ = stored_tensor(dev)
    dev.load_tensor_stream(rec, VerifyMode("delayed"))
    # barrier issued while the last-line MAC compare is still in flight
    assert rec.verify_done_tick > eng.now
    assert dev.barrier_wait_ticks([rec.tensor_id]) == rec.verify_done_tick - eng.now


def test_barrier_blocks_tampered_tensor():
    dev, _ = make_dev()
    rec, _ = stored_tensor(dev)
    dev.gddr[rec.base].data ^= 1
    with pytest.raises(IntegrityFault):
        dev.load_tensor_stream(rec, VerifyMode("delayed"))
    with pytest.raises(IntegrityFault):
        dev.verification_barrier([rec.tensor_id])


def test_barrier_blocks_poisoned_dependents():
    dev, _ = make_dev()
    a, _ = stored_tensor(dev, tid=1)
    a.poison = 1
    b = dev.register_tensor(2, DEV_BASE + 0x700000, 4)
    dev.propagate_poison([a], b)
    with pytest.raises(IntegrityFault):
        dev.verification_barrier([b.tensor_id])


def test_code_fetch_clean_and_tampered():
    dev, _ = make_dev()
    dev.install_code_line(0x100, b"\x90" * LINE_BYTES)
    plain, _ = dev.fetch_code_line(0x100)
    assert plain == b"\x90" * LINE_BYTES
    dev.tamper_code_line(0x100, bit=3)
    with pytest.raises(IntegrityFault) as ei:
        dev.fetch_code_line(0x100)
    assert ei.value.kind == "code_tamper"


def test_code_fetches_never_enter_delayed_queue():
    dev, _ = make_dev()
    rec, _ = stored_tensor(dev)
    dev.install_code_line(0x100, b"\x90" * LINE_BYTES)
    dev.load_tensor_stream(rec, VerifyMode("delayed"))
    dev.fetch_code_line(0x100)
    dev.load_tensor_stream(rec, VerifyMode("delayed"))
    assert all(not is_inst for _, is_inst in dev.delayed_queue_log)
    assert 0x100 not in [a for a, _ in dev.delayed_queue_log]


def test_mac_storage_accounting():
    dev, _ = make_dev()
    for tid in range(4):
        rec = dev.register_tensor(tid, DEV_BASE + tid * 0x100000, 64)  # 4 KiB each
    assert dev.mac_storage_bytes(VerifyMode("delayed")) == 7 * 4
    assert dev.mac_storage_bytes(VerifyMode("blocking", 512)) == 7 * 4 * 8
    assert dev.mac_storage_bytes(VerifyMode("blocking", 4096)) == 7 * 4


def test_blocking_detects_tampered_block():
    dev, _ = make_dev()
    rec, _ = stored_tensor(dev, n=64)
    dev.seal_block_macs(rec, 512)
    dev.gddr[rec.base + 9 * LINE_BYTES].data ^= 1 << 7
    with pytest.raises(IntegrityFault):
        dev.load_tensor_stream(rec, VerifyMode("blocking", 512))
