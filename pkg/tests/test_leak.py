import os
import tempfile
import warnings

import numpy as np

from bitleak import dram, integrity_check, leak, memsys, victim


def small_geometry(rows_total=8):
    return dram.DramGeometry(rows_total=rows_total, pages_per_row=2,
                             page_size_bytes=8)


def one_page_victim(first_code):
    codes = np.arange(8).reshape(4, 2)
    codes[0, 0] = first_code
    layer = victim.QuantizedLayer(codes, scale=0.1)
    return victim.VictimModel([layer], chunk_rows=4, chunk_cols=2,
                              page_size_bytes=8)


def single_cell_attack(first_code, direction):
    geo = small_geometry()
    # in-page bit 0 is the MSB of weight (0, 0)
    tmp = dram.TemplateMap.from_cells(geo, [dram.VulnCell(3, 0, direction)])
    vm = one_page_victim(first_code)
    cfg = leak.AttackConfig(rounds=3, strategy="msb", seed=1)
    return leak.run_attack(cfg, tmp, vm)


def test_cost_model():
    cm = leak.CostModel()
    assert cm.round_seconds(0) == 34
    assert np.isclose(cm.round_seconds(11000), 34 + 239)
    cm = leak.CostModel(strategy="allbits")
    assert np.isclose(cm.round_seconds(17000), 34 + 375)
    try:
        leak.CostModel(t_exhaust=-1)
    except ValueError:
        pass
    else:
        assert False, "negative times must not work"


def test_ledger_record():
    ledger = leak.LeakLedger([(2, 2)])
    assert ledger.record(0, 7, 1, 1)
    assert not ledger.record(0, 7, 1, 2)
    assert ledger.round_of_discovery[0, 7] == 1
    try:
        ledger.record(0, 7, 0, 3)
    except leak.LedgerContradictionError:
        pass
    else:
        assert False, "known bits cannot change"
    assert ledger.values[0, 7] == 1
    assert ledger.n_known == 1


def test_ledger_fractions():
    ledger = leak.LeakLedger([(2, 1), (1, 2)])
    ledger.record_many([0, 0, 1, 2], [7, 6, 7, 6], [1, 0, 1, 1], 1)
    for bit in range(8):
        ledger.record(3, bit, 0, 2)
    frac = ledger.fractions()
    assert frac.shape == (9,)
    # weights 0, 1 and 3 have the MSB
    assert np.isclose(frac[0], 0.75)
    assert np.isclose(frac[1], 0.5)
    assert np.isclose(frac[7], 0.25)
    assert np.isclose(frac[8], 0.25)
    assert np.allclose(ledger.layer_msb_fractions(), [1.0, 0.5])
    early = ledger.at_round(1)
    assert early.n_known == 4
    assert ledger.at_round(0).n_known == 0
    assert ledger.at_round(2) == ledger


def test_ledger_dump_load():
    ledger = leak.LeakLedger([(3, 2), (2, 2)])
    ledger.record_many([0, 4, 7, 9], [7, 0, 3, 7], [1, 1, 0, 0], 5)
    tf = tempfile.mktemp(suffix=".txt", prefix="bitleak_test_")
    ledger.dump(tf)
    with open(tf) as fd:
        lines = fd.read().splitlines()
    assert lines[0] == leak.LEDGER_HEADER
    assert lines[1] == "0,0,0,7,1,5"
    assert lines[-1] == "1,1,1,7,0,5"
    ledger2 = leak.LeakLedger.load(tf, [(3, 2), (2, 2)])
    assert ledger2 == ledger
    # empty ledger
    leak.LeakLedger([(3, 2)]).dump(tf)
    assert leak.LeakLedger.load(tf, [(3, 2)]).n_known == 0
    try:
        os.remove(tf)
    except OSError:
        pass


def test_curve_csv():
    ledger = leak.LeakLedger([(2, 2)])
    curve = leak.RecoveryCurve(n_layers=1)
    assert curve.layer_msb.shape == (0, 1)
    curve.append(1, ledger, 35.0)
    ledger.record(0, 7, 1, 2)
    curve.append(2, ledger, 70.5)
    assert np.allclose(curve.msb, [0, 0.25])
    assert curve.rounds_to(0.2) == 2
    assert curve.rounds_to(0.5) is None
    assert curve.msb_at_seconds(50) == 0
    assert curve.msb_at_seconds(100) == 0.25
    tf = tempfile.mktemp(suffix=".csv", prefix="bitleak_test_")
    curve.to_csv(tf)
    curve2 = leak.RecoveryCurve.from_csv(tf)
    assert np.allclose(curve2.data, curve.data)
    try:
        os.remove(tf)
    except OSError:
        pass


def test_zero_to_one_msb_one():
    ledger, curve = single_cell_attack(-5, dram.FlipDirection.ZERO_TO_ONE)
    assert ledger.known[0, 7]
    assert ledger.values[0, 7] == 1
    assert ledger.n_known == 1
    # the only cell is spent after one round
    assert len(curve) == 1
    assert np.isclose(curve.seconds[0], 34 + 239 / 11000)


def test_zero_to_one_msb_zero():
    ledger, _ = single_cell_attack(5, dram.FlipDirection.ZERO_TO_ONE)
    assert ledger.known[0, 7]
    assert ledger.values[0, 7] == 0


def test_one_to_zero():
    ledger, _ = single_cell_attack(5, dram.FlipDirection.ONE_TO_ZERO)
    assert ledger.known[0, 7]
    assert ledger.values[0, 7] == 0
    ledger, _ = single_cell_attack(-5, dram.FlipDirection.ONE_TO_ZERO)
    assert ledger.values[0, 7] == 1


def test_unaligned_cell():
    geo = small_geometry()
    # in-page bit 1 is bit 6 of weight (0, 0); not informative for MSBs
    tmp = dram.TemplateMap.from_cells(
        geo, [dram.VulnCell(3, 1, dram.FlipDirection.ZERO_TO_ONE)])
    vm = one_page_victim(-5)
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=3, strategy="msb"), tmp, vm)
    assert ledger.n_known == 0
    assert len(curve) == 0
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=3, strategy="allbits"), tmp, vm)
    assert ledger.known[0, 6]
    assert ledger.values[0, 6] == 1


def test_zero_rounds():
    geo = small_geometry()
    tmp = dram.generate_template(geo, 1, 64, seed=0)
    vm = one_page_victim(-5)
    ledger, curve = leak.run_attack(leak.AttackConfig(rounds=0), tmp, vm)
    assert ledger.n_known == 0
    assert len(curve) == 0
    assert curve.data.shape == (0, len(leak.CURVE_COLUMNS))


def test_exhausted_ledger():
    geo = small_geometry()
    tmp = dram.generate_template(geo, 1, 64, seed=0)
    vm = one_page_victim(-5)
    ledger = leak.LeakLedger(vm.layer_shapes)
    ledger.known[:] = True
    try:
        leak.plan_round(tmp, ledger, vm.address_map, "allbits",
                        np.random.default_rng(0))
    except leak.LeakExhaustedError:
        pass
    else:
        assert False, "nothing is left to leak"


def test_no_spare_frames():
    geo = small_geometry()
    vm = one_page_victim(3)
    trace = victim.run_inference_trace(vm, non_secret_between=1)
    plan = leak.RoundPlan([], {}, "msb", range(geo.rows_total), geo)
    try:
        plan.schedule(trace, 512)
    except memsys.PlanError:
        pass
    else:
        assert False, "every row has a role, no frame is left"


def test_spare_frames_run_out():
    """a crowded memory ends the attack instead of crashing it"""
    geo = small_geometry()
    tmp = dram.generate_template(geo, 1, 64, seed=0)
    codes = np.arange(32).reshape(4, 8) - 16
    layer = victim.QuantizedLayer(codes, scale=0.1)
    vm = victim.VictimModel([layer], chunk_rows=4, chunk_cols=2,
                            page_size_bytes=8)
    assert vm.address_map.n_pages == 4
    cfg = leak.AttackConfig(rounds=3, strategy="msb", non_secret_between=1)
    with warnings.catch_warnings(record=True) as ww:
        warnings.simplefilter("always")
        ledger, curve = leak.run_attack(cfg, tmp, vm)
    assert len(curve) < 3
    assert any("spare frames" in str(w.message) for w in ww)
    integrity_check.check_ledger(ledger, vm)


def test_single_page_row():
    geo = dram.DramGeometry(rows_total=8, pages_per_row=1, page_size_bytes=8)
    tmp = dram.TemplateMap.from_cells(geo, [])
    vm = one_page_victim(1)
    try:
        leak.ProbeTable(tmp, vm.address_map)
    except ValueError:
        pass
    else:
        assert False, "victim and attacker pages must share rows"


def test_adjacent_targets():
    """two target rows that serve as each other's aggressor"""
    geo = small_geometry()
    cells = [dram.VulnCell(3, 0, dram.FlipDirection.ZERO_TO_ONE),
             dram.VulnCell(4, 0, dram.FlipDirection.ONE_TO_ZERO)]
    tmp = dram.TemplateMap.from_cells(geo, cells)
    codes = np.zeros((4, 4), dtype=int)
    codes[0, 0] = -20
    codes[0, 2] = 20
    vm = victim.VictimModel([victim.QuantizedLayer(codes, 0.1)],
                            chunk_rows=4, chunk_cols=2, page_size_bytes=8)
    assert vm.n_weight_pages == 2
    ledger = leak.LeakLedger(vm.layer_shapes)
    plan = leak.plan_round(tmp, ledger, vm.address_map, "msb",
                           np.random.default_rng(3))
    assert len(plan.targets) == 2
    assert {t.target_row for t in plan.targets} == {3, 4}
    for tt in plan.targets:
        assert tt.attacker_aggressor_row == 7 - tt.target_row
    ledger, _ = leak.run_attack(leak.AttackConfig(rounds=1, strategy="msb",
                                                  seed=3), tmp, vm)
    # first bytes of the two pages: weights (0, 0) and (0, 2)
    assert ledger.known[0, 7] and ledger.known[2, 7]
    assert ledger.values[0, 7] == 1
    assert ledger.values[2, 7] == 0


def test_saturated_template():
    geo = small_geometry(rows_total=64)
    tmp = dram.generate_template(geo, 1, 64, seed=2)
    rng = np.random.default_rng(2)
    layers = [victim.QuantizedLayer(rng.integers(-128, 128, size=(4, 4)), 1),
              victim.QuantizedLayer(rng.integers(-128, 128, size=(4, 4)), 1)]
    vm = victim.VictimModel(layers, chunk_rows=4, chunk_cols=2,
                            page_size_bytes=8)
    assert vm.n_weight_pages == 4
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=10, strategy="msb", verify=True), tmp, vm)
    assert len(curve) <= vm.n_weight_pages
    assert curve.msb[-1] == 1
    assert np.array_equal(ledger.values[:, 7], vm.true_bits()[:, 7])
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=10, strategy="allbits", verify=True),
        tmp, vm)
    assert curve.column("full")[-1] == 1
    assert np.array_equal(ledger.values, vm.true_bits())


def random_setup(seed):
    geo = dram.DramGeometry(rows_total=512, pages_per_row=2,
                            page_size_bytes=64)
    tmp = dram.generate_template(geo, 0.71, 20, seed=seed)
    rng = np.random.default_rng(seed)
    layers = [victim.QuantizedLayer(rng.integers(-128, 128, size=(16, 12)),
                                    0.01),
              victim.QuantizedLayer(rng.integers(-128, 128, size=(12, 4)),
                                    0.02)]
    vm = victim.VictimModel(layers, chunk_rows=4, chunk_cols=2,
                            page_size_bytes=64)
    return tmp, vm


def test_soundness():
    """no leaked bit ever disagrees with the victim"""
    for seed in range(3):
        tmp, vm = random_setup(seed)
        for strategy in ["msb", "allbits"]:
            ledger, curve = leak.run_attack(
                leak.AttackConfig(rounds=30, strategy=strategy, seed=seed,
                                  verify=True), tmp, vm)
            integrity_check.check_ledger(ledger, vm)
            assert len(curve) > 0
            assert np.all(np.diff(curve.msb) >= 0)
            assert np.all(np.diff(curve.column("full")) >= 0)


def test_soundness_missed_flips():
    tmp, vm = random_setup(4)
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=30, strategy="allbits", seed=4,
                          miss_prob=0.3, verify=True), tmp, vm)
    integrity_check.check_ledger(ledger, vm)
    assert ledger.n_known > 0


def test_soundness_non_secret_pages():
    tmp, vm = random_setup(5)
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=10, strategy="msb", seed=5,
                          non_secret_between=2, pageset_capacity=6,
                          verify=True), tmp, vm)
    integrity_check.check_ledger(ledger, vm)
    assert curve.msb[-1] > 0


def test_wrong_bit_detected():
    tmp, vm = random_setup(6)
    ledger, _ = leak.run_attack(
        leak.AttackConfig(rounds=5, strategy="msb", seed=6), tmp, vm)
    ww = np.flatnonzero(ledger.known[:, 7])[0]
    ledger.values[ww, 7] ^= 1
    try:
        integrity_check.check_ledger(ledger, vm)
    except integrity_check.IntegrityCheckError:
        pass
    else:
        assert False, "a flipped ledger bit must be detected"


def test_cost_accounting():
    tmp, vm = random_setup(7)
    cfg = leak.AttackConfig(rounds=20, strategy="msb", seed=7)
    _, curve = leak.run_attack(cfg, tmp, vm)
    per_round = np.diff(np.concatenate([[0], curve.seconds]))
    rows = (per_round - 34) / cfg.cost_model.t_per_hammered_row
    assert np.allclose(rows, np.round(rows), atol=1e-6)
    assert np.all(np.round(rows) >= 1)


def test_plan_deterministic():
    tmp, vm = random_setup(8)
    cfg = leak.AttackConfig(rounds=15, strategy="allbits", seed=8)
    ledger1, curve1 = leak.run_attack(cfg, tmp, vm)
    ledger2, curve2 = leak.run_attack(cfg, tmp, vm)
    assert ledger1 == ledger2
    assert np.array_equal(curve1.data, curve2.data)


def test_plan_roles():
    """victim rows never serve as target or attacker rows"""
    tmp, vm = random_setup(9)
    ledger = leak.LeakLedger(vm.layer_shapes)
    rng = np.random.default_rng(9)
    vm.place(memsys.PagePool(tmp.geometry))
    for _ in range(10):
        plan = leak.plan_round(tmp, ledger, vm.address_map, "allbits", rng)
        victim_rows = {pid.row for pid in plan.placements.values()}
        assert len(victim_rows) == len(plan.placements)
        for tt in plan.targets:
            assert tt.target_row not in victim_rows
            assert tt.attacker_aggressor_row not in victim_rows
            assert abs(tt.target_row - tt.victim_aggressor_row) == 1
            assert (tt.attacker_aggressor_row - tt.target_row
                    == tt.target_row - tt.victim_aggressor_row)
        batches = plan.schedule(victim.run_inference_trace(vm), 512)
        assert len(batches) == 2
        released = plan.release_order
        assert len(released) == len(set(released)) == vm.n_weight_pages


if __name__ == "__main__":
    # Run all tests
    _loc = locals()
    for _key in list(_loc.keys()):
        if _key.startswith("test_") and hasattr(_loc[_key], "__call__"):
            _loc[_key]()
