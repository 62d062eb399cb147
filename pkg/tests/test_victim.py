import os
import pathlib
import tempfile

import numpy as np

from bitleak import dram, memsys, victim
from bitleak.memsys import PageKind, VictimPageTag


def make_victim(shapes=((4, 4), (4, 2)), seed=0, page_size_bytes=8):
    rng = np.random.default_rng(seed)
    layers = [victim.QuantizedLayer(rng.integers(-128, 128, size=sh),
                                    scale=0.01 * (ii + 1))
              for ii, sh in enumerate(shapes)]
    biases = [rng.normal(size=sh[1]) for sh in shapes]
    return victim.VictimModel(layers, biases=biases, seed=seed,
                              chunk_rows=4, chunk_cols=2,
                              page_size_bytes=page_size_bytes)


def test_quantized_layer():
    weights = np.array([[0.5, -1.0], [0.25, 0.0]])
    ly = victim.QuantizedLayer.from_float(weights)
    assert np.isclose(ly.scale, 1 / 127)
    assert ly.codes[0, 1] == -127
    assert ly.codes[1, 1] == 0
    assert np.allclose(ly.dequantize(), weights, atol=ly.scale / 2)
    try:
        victim.QuantizedLayer(np.array([[200]]), scale=1)
    except ValueError:
        pass
    else:
        assert False, "code 200 is out of range"


def test_pack_column_major_chunk():
    codes = np.array([[1, 5], [2, 6], [3, 7], [4, 8]])
    data, offsets = victim.pack_layer(victim.QuantizedLayer(codes, 1),
                                      chunk_rows=4, chunk_cols=2)
    assert np.array_equal(data, np.arange(1, 9))
    assert offsets[0, 1] == 4


def test_pack_single():
    ly = victim.QuantizedLayer(np.array([[-3]]), 1)
    data, offsets = victim.pack_layer(ly, chunk_rows=1, chunk_cols=1)
    assert data.size == 1
    assert data.view(np.int8)[0] == -3
    data, offsets = victim.pack_layer(ly, chunk_rows=4, chunk_cols=8)
    assert offsets[0, 0] == 0
    assert data.view(np.int8)[0] == -3
    assert np.all(data[1:] == 0)


def test_pack_empty():
    ly = victim.QuantizedLayer(np.zeros((0, 3)), 1)
    data, offsets = victim.pack_layer(ly, chunk_rows=4, chunk_cols=2)
    assert data.size == 0
    assert offsets.shape == (0, 3)


def test_pack_ragged():
    rng = np.random.default_rng(3)
    codes = rng.integers(-128, 128, size=(5, 3))
    data, offsets = victim.pack_layer(victim.QuantizedLayer(codes, 1),
                                      chunk_rows=4, chunk_cols=2)
    assert data.size == 32
    # brute-force address oracle
    for rr in range(5):
        for cc in range(3):
            chunk = (rr // 4) * 2 + cc // 2
            expected = chunk * 8 + (cc % 2) * 4 + rr % 4
            assert offsets[rr, cc] == expected
            assert data.view(np.int8)[expected] == codes[rr, cc]
    # padding is zero
    pad = np.setdiff1d(np.arange(32), offsets.ravel())
    assert pad.size == 32 - 15
    assert np.all(data[pad] == 0)


def test_pack_roundtrip():
    rng = np.random.default_rng(4)
    for rows in range(1, 10):
        for cols in range(1, 10):
            codes = rng.integers(-128, 128, size=(rows, cols))
            ly = victim.QuantizedLayer(codes, 1)
            for cr in range(1, 5):
                for cw in range(1, 5):
                    data, offsets = victim.pack_layer(ly, cr, cw)
                    assert np.unique(offsets).size == rows * cols
                    back = victim.unpack_layer(data, rows, cols, cr, cw)
                    assert np.array_equal(back, ly.codes)


def test_address_fresh_pages():
    amap = victim.WeightAddressMap([(4, 2), (2, 3)], chunk_rows=4,
                                   chunk_cols=2, page_size_bytes=16)
    assert amap.page_base == [0, 1, 2]
    assert amap.n_pages == 2
    assert amap.forward(1, 0, 0) == (1, 0)
    assert amap.inverse(0, 8) is None
    assert list(amap.layer_page_range(1)) == [1]


def test_locate_bit_page_boundary():
    amap = victim.WeightAddressMap([(512, 16)], chunk_rows=512,
                                   chunk_cols=8, page_size_bytes=4096)
    assert amap.locate_bit(0, 0, 0, 7) == (0, 0)
    assert amap.locate_bit(0, 0, 8, 7) == (1, 0)
    assert amap.locate_bit(0, 0, 8, 0) == (1, 7)
    assert amap.inverse_bit(1, 7) == (0, 0, 8, 0)


def test_locate_bit_inverse():
    shapes = [(37, 21), (21, 9)]
    amap = victim.WeightAddressMap(shapes, chunk_rows=8, chunk_cols=4,
                                   page_size_bytes=64)
    rng = np.random.default_rng(5)
    for _ in range(1000):
        layer = int(rng.integers(0, 2))
        row = int(rng.integers(0, shapes[layer][0]))
        col = int(rng.integers(0, shapes[layer][1]))
        bit = int(rng.integers(0, 8))
        page, offset = amap.locate_bit(layer, row, col, bit)
        assert amap.inverse_bit(page, offset) == (layer, row, col, bit)


def test_page_bit_ids():
    amap = victim.WeightAddressMap([(4, 2), (2, 3)], chunk_rows=4,
                                   chunk_cols=2, page_size_bytes=16)
    ids = amap.page_bit_ids(1)
    assert ids.size == 128
    # first byte of page 1 is weight (1, 0, 0), flat index 8
    assert np.array_equal(ids[:8], 8 * 8 + np.arange(7, -1, -1))
    # rows 2 and 3 of the first chunk are padding
    assert np.all(ids[16:32] == -1)
    assert np.all(ids[64:80] >= 0)


def test_victim_pages():
    vm = make_victim()
    assert vm.dims == [4, 4, 2]
    assert vm.n_weight_pages == 3
    data, _ = victim.pack_layer(vm.layers[0], 4, 2)
    assert np.array_equal(vm.pages[:2].ravel(), data)


def test_true_bits():
    layers = [victim.QuantizedLayer(np.array([[-1, 1, -128, 5]]), 1)]
    vm = victim.VictimModel(layers, chunk_rows=4, chunk_cols=2,
                            page_size_bytes=8)
    bits = vm.true_bits()
    assert bits.shape == (4, 8)
    assert np.all(bits[0] == 1)
    assert np.array_equal(bits[1], [1, 0, 0, 0, 0, 0, 0, 0])
    assert np.array_equal(bits[2], [0, 0, 0, 0, 0, 0, 0, 1])
    assert np.array_equal(bits[3], [1, 0, 1, 0, 0, 0, 0, 0])


def test_save_load():
    vm = make_victim(seed=9)
    tf = tempfile.mktemp(suffix=".qmdl", prefix="bitleak_test_")
    vm.save(tf)
    vm2 = victim.VictimModel.load(tf, chunk_rows=4, chunk_cols=2,
                                  page_size_bytes=8)
    assert vm2 == vm
    assert vm2.seed == 9
    raw = pathlib.Path(tf).read_bytes()
    vm2.save(tf)
    assert pathlib.Path(tf).read_bytes() == raw
    try:
        os.remove(tf)
    except OSError:
        pass


def test_save_load_seed_range():
    tf = tempfile.mktemp(suffix=".qmdl", prefix="bitleak_test_")
    for seed in [None, 0, 2**63, 2**64 - 1]:
        vm = make_victim()
        vm.seed = seed
        vm.save(tf)
        vm2 = victim.VictimModel.load(tf, chunk_rows=4, chunk_cols=2,
                                      page_size_bytes=8)
        assert vm2.seed == seed
    try:
        os.remove(tf)
    except OSError:
        pass


def test_trace_unplaced():
    vm = make_victim()
    try:
        victim.run_inference_trace(vm)
    except victim.PlacementError:
        pass
    else:
        assert False, "unplaced victims cannot run"


def test_trace():
    vm = make_victim(shapes=((4, 2), (2, 2)))
    geo = dram.DramGeometry(rows_total=4, pages_per_row=2, page_size_bytes=8)
    pool = memsys.PagePool(geo)
    placed = vm.place(pool)
    assert len(placed) == 2
    assert np.array_equal(pool.read_page(placed[1]), vm.pages[1])
    trace = victim.run_inference_trace(vm)
    assert [ev.anchor for ev in trace] == [victim.Anchor.INFER_START,
                                           victim.Anchor.LAYER_START,
                                           victim.Anchor.KERNEL_CREATE,
                                           victim.Anchor.LAYER_START,
                                           victim.Anchor.KERNEL_CREATE]
    assert trace.layer_order() == [0, 1]
    kernels = trace.kernel_events()
    assert kernels[0].page_accesses == [VictimPageTag(0, PageKind.SECRET)]
    assert kernels[1].page_accesses == [VictimPageTag(1, PageKind.SECRET)]

    trace = victim.run_inference_trace(vm, non_secret_between=1)
    kernels = trace.kernel_events()
    assert kernels[0].page_accesses == [
        VictimPageTag(2, PageKind.NON_SECRET),
        VictimPageTag(0, PageKind.SECRET)]
    assert kernels[1].page_accesses == [
        VictimPageTag(3, PageKind.NON_SECRET),
        VictimPageTag(1, PageKind.SECRET)]


if __name__ == "__main__":
    # Run all tests
    _loc = locals()
    for _key in list(_loc.keys()):
        if _key.startswith("test_") and hasattr(_loc[_key], "__call__"):
            _loc[_key]()
