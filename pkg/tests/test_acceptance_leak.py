"""Statistical checks of the leakage attack on a ~2000-weight victim"""
import numpy as np

from bitleak import dram, integrity_check, leak, victim


#: victim dimensions (1920 + 192 weights)
DIMS = [40, 48, 4]


def make_victim(page_size, seed):
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(DIMS[:-1], DIMS[1:]):
        codes = np.clip(np.round(rng.normal(0, 40, size=(fan_in, fan_out))),
                        -128, 127)
        layers.append(victim.QuantizedLayer(codes, 0.01))
    return victim.VictimModel(layers, chunk_rows=8, chunk_cols=8,
                              page_size_bytes=page_size, seed=seed)


def make_template(rows_total, page_size, seed):
    geo = dram.DramGeometry(rows_total=rows_total, pages_per_row=2,
                            page_size_bytes=page_size)
    return dram.generate_template(geo, 0.71, 7.85, seed=seed)


def test_soundness_sparse_template():
    """no ledger bit ever contradicts the victim"""
    tmp = make_template(4096, 4096, seed=11)
    info = dram.template_statistics(tmp)
    assert abs(info["cell rate"] - 0.00017) < 0.00002
    for run in range(10):
        vm = make_victim(4096, seed=run)
        strategy = ["msb", "allbits"][run % 2]
        cfg = leak.AttackConfig(rounds=15, strategy=strategy, seed=run,
                                miss_prob=0.2 if run >= 8 else 0,
                                non_secret_between=run % 3,
                                verify=True)
        ledger, curve = leak.run_attack(cfg, tmp, vm)
        integrity_check.check_ledger(ledger, vm)
        assert ledger.n_known > 0
        assert np.all(np.diff(curve.msb) >= 0)


def test_msb_recovery():
    """dense template: 90% of the MSBs within 400 rounds"""
    tmp = make_template(2048, 256, seed=12)
    vm = make_victim(256, seed=12)
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=400, strategy="msb", seed=12), tmp, vm)
    assert np.all(np.diff(curve.msb) >= 0)
    assert np.all(np.diff(curve.seconds) > 0)
    assert curve.msb[-1] >= 0.9
    assert curve.rounds_to(0.9) is not None
    assert np.all(curve.layer_msb[-1] >= 0.85)
    integrity_check.check_ledger(ledger, vm)


def test_msb_recovery_sparse_template():
    """0.71 vulnerable pages with 7.85 cells each, 4 KiB pages"""
    tmp = make_template(16384, 4096, seed=13)
    vm = make_victim(4096, seed=13)
    ledger, curve = leak.run_attack(
        leak.AttackConfig(rounds=3000, strategy="msb", seed=13), tmp, vm)
    assert np.all(np.diff(curve.msb) >= 0)
    assert curve.msb[-1] >= 0.9
    integrity_check.check_ledger(ledger, vm)


def test_msb_priority_dominates():
    """more MSBs within the same simulated time"""
    wins = 0
    for seed in range(5):
        tmp = make_template(2048, 256, seed=20 + seed)
        vm = make_victim(256, seed=20 + seed)
        curves = {}
        for strategy in ["msb", "allbits"]:
            _, curves[strategy] = leak.run_attack(
                leak.AttackConfig(rounds=60, strategy=strategy, seed=seed),
                tmp, vm)
        budget = min(curves["msb"].seconds[-1],
                     curves["allbits"].seconds[-1])
        if curves["msb"].msb_at_seconds(budget) \
                >= curves["allbits"].msb_at_seconds(budget):
            wins += 1
    assert wins >= 4


if __name__ == "__main__":
    # Run all tests
    _loc = locals()
    for _key in list(_loc.keys()):
        if _key.startswith("test_") and hasattr(_loc[_key], "__call__"):
            _loc[_key]()
