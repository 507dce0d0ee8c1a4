"""Unit tests for the open-row engine, refresh, TRR and flip rules."""
import numpy as np
import pytest

from hammersim.dram import (
    BitFlip,
    DramConfig,
    RowContents,
    ThresholdEntry,
    ThresholdTable,
    TraceRateError,
    TrrConfig,
    VulnerabilityMap,
    builtin_thresholds,
    check_flip,
    read_threshold_file,
    simulate_trace,
    write_threshold_file,
    _bit_positions,
)
from hammersim.memlayout import AccessEvent, AccessTrace, DramMapping, dram_to_physical
from hammersim.seeding import generator

import oracles


TOY = DramMapping(bank_count=4, rows_per_bank=64, row_size_bytes=1024, bank_xor=False)
# one tick per 8 ms, sweeping 8 of the 64 rows per bank each tick
TOY_CFG = DramConfig(refresh_period_s=0.064, ref_commands=8, trc_effective_s=49e-9)
LOW = ThresholdTable([ThresholdEntry(0x00, 0x00, 8, 6)])
NO_TRR = TrrConfig(capacity=0)


def ev(t, bank, row, size=8, kind="R"):
    return AccessEvent(t, dram_to_physical(bank, row, 0, TOY), kind, size)


def hammer(bank, row, n, start=0, step=100, other=50):
    """n activations of (bank, row), reopening via a far row in between."""
    events = []
    t = start
    for _ in range(n):
        events.append(ev(t, bank, row))
        events.append(ev(t + step // 2, bank, other))
        t += step
    return events


def run(events, trr=NO_TRR, vmap=None, contents=None, cfg=TOY_CFG, thresholds=LOW):
    vmap = vmap or VulnerabilityMap.all_vulnerable(TOY)
    contents = contents or RowContents()
    return simulate_trace(AccessTrace(list(events)), cfg, TOY, thresholds, trr, vmap, contents)


# -- threshold tables -------------------------------------------------------

def test_threshold_entry_validation():
    with pytest.raises(ValueError):
        ThresholdEntry(0x100, 0x00, 10, 5)
    with pytest.raises(ValueError):
        ThresholdEntry(0x00, 0x00, 5, 10)  # double above single
    with pytest.raises(ValueError):
        ThresholdTable([])
    with pytest.raises(ValueError):
        ThresholdTable([ThresholdEntry(0, 0, 8, 6), ThresholdEntry(0, 0, 9, 7)])


def test_builtin_table_values():
    table = builtin_thresholds()
    assert table.min_single() == 185_000
    assert table.reference_mean() == 240_000  # stated module average
    assert table.mean_single() == pytest.approx((185 + 240 + 260 + 265) * 1000 / 4)
    cls = table.nearest_class(0xFF, 0x00)
    assert (cls.single, cls.double) == (185_000, 115_000)


def test_nearest_class_first_wins():
    table = builtin_thresholds()
    # 0x80 victim fill sits between 0x55 and 0xAA patterns; byte distance
    # decides, and exact matches win outright
    assert table.nearest_class(0x00, 0xFF).single == 240_000
    assert table.nearest_class(0x55, 0x55).single == 260_000


def test_reference_mean_fallback_rounds():
    table = ThresholdTable([ThresholdEntry(0, 0, 11, 5), ThresholdEntry(1, 1, 12, 6)])
    assert table.published_average is None
    assert table.reference_mean() == 12  # round(11.5) banker's-rounds to 12


def test_threshold_file_roundtrip(tmp_path):
    path = tmp_path / "thresholds.txt"
    write_threshold_file(path, builtin_thresholds())
    back = read_threshold_file(path)
    assert back.published_average == 240_000
    assert back.entries == builtin_thresholds().entries


def test_threshold_file_rejects_incomplete(tmp_path):
    path = tmp_path / "thresholds.txt"
    path.write_text("0x00,0x00,single,100\n")
    with pytest.raises(ValueError):
        read_threshold_file(path)
    path.write_text("0x00,0x00,sideways,100\n")
    with pytest.raises(ValueError):
        read_threshold_file(path)


# -- support types ----------------------------------------------------------

def test_trr_config_validation():
    assert TrrConfig(capacity=0).capacity == 0
    with pytest.raises(ValueError):
        TrrConfig(capacity=-1)
    with pytest.raises(ValueError):
        TrrConfig(neighbor_radius=0)


def test_vulnerability_map_seeded():
    a = VulnerabilityMap.from_seed(TOY, 3, probability=0.5, multiplier_low=1.0, multiplier_high=2.0)
    b = VulnerabilityMap.from_seed(TOY, 3, probability=0.5, multiplier_low=1.0, multiplier_high=2.0)
    np.testing.assert_array_equal(a.vulnerable, b.vulnerable)
    np.testing.assert_array_equal(a.multiplier, b.multiplier)
    none = VulnerabilityMap.from_seed(TOY, 3, probability=0.0)
    assert not none.vulnerable.any()
    every = VulnerabilityMap.from_seed(TOY, 3, probability=1.0)
    assert every.vulnerable.all()
    assert (a.multiplier >= 1.0).all() and (a.multiplier <= 2.0).all()


def test_row_contents_overrides():
    contents = RowContents(0xFF, {(1, 5): 0x00})
    assert contents.fill(0, 5) == 0xFF
    assert contents.fill(1, 5) == 0x00
    with pytest.raises(ValueError):
        RowContents(0x1FF)


def test_bit_positions():
    assert _bit_positions(0xFF, 0x00) == tuple(range(8))
    assert _bit_positions(0b1010, 0b1000) == (1,)
    # identical patterns fall back to the victim's charged bits
    assert _bit_positions(0b101, 0b101) == (0, 2)


# -- activation accounting --------------------------------------------------

def test_open_row_absorbs_repeat_hits():
    res = run([ev(0, 0, 5), ev(10, 0, 5), ev(20, 0, 5)])
    assert res.total_acts == 1
    assert res.windows[0].row_acts == {(0, 5): 1}


def test_row_crossing_event_activates_each_row():
    big = AccessEvent(0, dram_to_physical(0, 8, 1000, TOY), "R", 2000)
    res = run([big])
    # bank bits sit below row bits, so the burst sweeps banks 0..2 of row 8
    assert res.total_acts == 3
    assert set(res.windows[0].row_acts) == {(0, 8), (1, 8), (2, 8)}


def test_bank_isolation():
    res = run([ev(0, 0, 5), ev(10, 1, 5), ev(20, 0, 5)])
    # bank 1's activation does not close bank 0's open row
    assert res.total_acts == 2
    assert res.windows[0].bank_acts[0] == 1
    assert res.windows[0].bank_acts[1] == 1


def test_windows_split_on_aligned_boundary():
    w = int(TOY_CFG.window_ns)
    res = run([ev(0, 0, 5), ev(w - 1, 0, 6), ev(w, 0, 7), ev(w + 10, 0, 8)])
    assert len(res.windows) == 2
    assert res.windows[0].bank_acts[0] == 2
    assert res.windows[1].bank_acts[0] == 2


def test_trace_rate_error():
    tight = DramConfig(refresh_period_s=0.064, ref_commands=8, trc_effective_s=0.008)
    events = hammer(0, 5, 5, step=100)  # 10 ACTs in bank 0, cap is 8
    with pytest.raises(TraceRateError):
        run(events, cfg=tight)


def test_time_must_not_go_backwards():
    with pytest.raises(ValueError):
        run([ev(100, 0, 5), ev(50, 0, 6)])


def test_generator_input_streams():
    res = simulate_trace(iter([ev(0, 0, 5), ev(10, 0, 6)]), TOY_CFG, TOY, LOW,
                         NO_TRR, VulnerabilityMap.all_vulnerable(TOY), RowContents())
    assert res.total_events == 2
    assert res.total_acts == 2


# -- flip rules -------------------------------------------------------------

def test_single_sided_flip_at_exact_threshold():
    res = run(hammer(0, 5, 8))
    rows = {(f.bank, f.row) for f in res.flips}
    assert (0, 4) in rows and (0, 6) in rows
    flip = next(f for f in res.flips if f.row == 4)
    assert flip.mode == "single"
    assert flip.effective_count == 8
    assert flip.threshold == 8.0


def test_no_flip_below_threshold():
    res = run(hammer(0, 5, 7))
    assert all(f.row in (49, 51) for f in res.flips)  # only the reopen row's wake


def test_flip_fires_once_until_refresh():
    # 20 hammers in one refresh-free stretch: one flip per victim
    res = run(hammer(0, 5, 20, step=10))
    per_victim = {}
    for f in res.flips:
        per_victim[(f.bank, f.row)] = per_victim.get((f.bank, f.row), 0) + 1
    assert per_victim[(0, 4)] == 1
    assert per_victim[(0, 6)] == 1


def test_double_sided_flip():
    events = []
    t = 0
    for _ in range(3):
        events.append(ev(t, 0, 4))
        events.append(ev(t + 50, 0, 6))
        t += 100
    res = run(events)
    flip = next(f for f in res.flips if f.row == 5)
    assert flip.mode == "double"
    assert flip.effective_count == 6  # both sides at td/2 = 3
    assert flip.threshold == 6.0


def test_refresh_resets_exposure():
    trefi = TOY_CFG.trefi_ns  # 8 ms; tick 1 refreshes rows 0..7
    first = hammer(0, 5, 6, start=0, step=10)
    second = hammer(0, 5, 6, start=int(trefi) + 1000, step=10)
    res = run(first + second)
    # 12 total hammers but never 8 within one refresh period of the victims
    assert not any(f.row in (4, 6) for f in res.flips)


def test_vulnerability_gates_flips():
    vmap = VulnerabilityMap.from_seed(TOY, 1, probability=0.0)
    res = run(hammer(0, 5, 20), vmap=vmap)
    assert res.flips == []


def test_multiplier_raises_threshold():
    n = TOY.bank_count * TOY.rows_per_bank
    vmap = VulnerabilityMap(np.ones(n, dtype=bool), np.full(n, 2.0))
    assert run(hammer(0, 5, 15), vmap=vmap).flips == []  # needs 16 now
    assert any(f.row == 4 for f in run(hammer(0, 5, 16), vmap=vmap).flips)


def test_pattern_class_selects_threshold():
    table = ThresholdTable([
        ThresholdEntry(0x00, 0x00, 8, 6),
        ThresholdEntry(0xFF, 0x00, 4, 2),
    ])
    contents = RowContents(0x00, {(0, 4): 0xFF})  # one victim holds the weak pattern
    res = run(hammer(0, 5, 4), thresholds=table, contents=contents)
    rows = {f.row for f in res.flips}
    assert 4 in rows and 6 not in rows
    flip = next(f for f in res.flips if f.row == 4)
    assert flip.victim_fill == 0xFF and flip.aggressor_fill == 0x00
    assert flip.bit_positions == tuple(range(8))


def test_trr_protects_lone_aggressor_pair():
    # 4 hammers per tREFI stays under the threshold between sampler hits
    step = int(TOY_CFG.trefi_ns // 4)
    res_trr = run(hammer(0, 5, 40, step=step), trr=TrrConfig(capacity=2))
    assert not any(f.row in (4, 6) for f in res_trr.flips)
    # round-robin alone revisits the victims only every 8 ticks: too slow
    res_free = run(hammer(0, 5, 40, step=step))
    assert any(f.row in (4, 6) for f in res_free.flips)


def test_check_flip_query_matches_engine_state():
    res = run(hammer(0, 5, 8))
    # after the run the victims flipped and were disarmed, so a fresh
    # query of the final ledger reports nothing new for them
    again = check_flip(res.ledger, VulnerabilityMap.all_vulnerable(TOY), LOW, RowContents())
    assert not any(f.row in (4, 6) and f.bank == 0 for f in again)
    assert isinstance(again, list)


def test_check_flip_sees_armed_state():
    res = run(hammer(0, 5, 7))  # one short of the single-sided threshold
    flips = check_flip(res.ledger, VulnerabilityMap.all_vulnerable(TOY),
                       ThresholdTable([ThresholdEntry(0x00, 0x00, 7, 6)]), RowContents())
    assert any(f.bank == 0 and f.row == 4 for f in flips)


# -- oracle cross-check -----------------------------------------------------

def random_trace(rng, n_events=300, t_span=40_000_000):
    events = []
    t = 0
    for _ in range(n_events):
        t += int(rng.integers(1, t_span // n_events))
        bank = int(rng.integers(0, TOY.bank_count))
        row = int(rng.integers(0, TOY.rows_per_bank))
        col = int(rng.integers(0, TOY.row_size_bytes))
        size = int(rng.integers(1, 3000))
        paddr = dram_to_physical(bank, row, 0, TOY) + col
        size = min(size, TOY.capacity_bytes - paddr)
        events.append(AccessEvent(t, paddr, "R" if rng.random() < 0.7 else "W", size))
    return events


def test_engine_matches_recount_oracle_on_random_traces():
    rng = generator(21, "dram-oracle-unit")
    table = ThresholdTable([ThresholdEntry(0x00, 0x00, 12, 8)])
    for case in range(40):
        trr = TrrConfig(capacity=2) if case % 2 else NO_TRR
        vmap = VulnerabilityMap.from_seed(TOY, case, probability=0.8,
                                         multiplier_low=1.0, multiplier_high=1.5)
        events = random_trace(rng)
        res = simulate_trace(AccessTrace(events), TOY_CFG, TOY, table, trr, vmap, RowContents())
        w_rows, w_banks, flips, total = oracles.oracle_simulate(
            events, TOY_CFG, TOY, table, trr, vmap, RowContents())
        assert res.total_acts == total
        assert len(res.windows) == len(w_rows)
        for win, rows, banks in zip(res.windows, w_rows, w_banks):
            assert win.row_acts == rows
            assert win.bank_acts == banks
        got = sorted((f.time_ns, f.bank, f.row, f.mode, f.effective_count, f.threshold)
                     for f in res.flips)
        assert got == flips
