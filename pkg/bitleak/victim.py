"""Quantized victim model, packed weight layout and inference traces"""
import collections
import enum
import pathlib
import struct

import numpy as np

from .memsys import PageKind, VictimPageTag


#: first bytes of a victim model file
MODEL_MAGIC = b"BLQM"
MODEL_VERSION = 2
#: version, layer count, seed flag and unsigned 64-bit seed
HEADER_FORMAT = "<HIBQ"


class PlacementError(BaseException):
    """Raised when a victim model has not been placed in memory"""
    pass


class QuantizedLayer(object):
    def __init__(self, codes, scale):
        """Dense layer with signed 8-bit weight codes

        The matrix is stored in (in_features x out_features)
        orientation; the dequantized weight is ``code * scale``.

        Parameters
        ----------
        codes: 2d array-like of int
            Weight codes in [-128, 127]
        scale: float
            Positive dequantization step
        """
        codes = np.asarray(codes)
        if codes.ndim != 2:
            raise ValueError("`codes` must be 2D, got shape {}!".format(
                codes.shape))
        if codes.size and (codes.min() < -128 or codes.max() > 127):
            raise ValueError("Weight codes must be in [-128, 127]!")
        if not scale > 0:
            raise ValueError("`scale` must be positive, got {}!".format(
                scale))
        self.codes = codes.astype(np.int8)
        self.scale = float(scale)

    def __eq__(self, other):
        return (isinstance(other, QuantizedLayer)
                and self.scale == other.scale
                and np.array_equal(self.codes, other.codes))

    def __repr__(self):
        return "QuantizedLayer({}x{}, scale={:.4g})".format(
            self.rows, self.cols, self.scale)

    @property
    def cols(self):
        return self.codes.shape[1]

    @property
    def rows(self):
        return self.codes.shape[0]

    @property
    def shape(self):
        return self.codes.shape

    @classmethod
    def from_float(cls, weights):
        """Symmetric per-layer quantization (scale = max|W| / 127)"""
        weights = np.asarray(weights, dtype=float)
        wmax = np.abs(weights).max() if weights.size else 0
        scale = wmax / 127 if wmax > 0 else 1.0
        codes = np.clip(np.round(weights / scale), -128, 127)
        return cls(codes, scale)

    def dequantize(self):
        return self.codes.astype(float) * self.scale


def _chunk_grid(rows, cols, chunk_rows, chunk_cols):
    if chunk_rows < 1 or chunk_cols < 1:
        raise ValueError("Chunk dimensions must be >= 1, got {}x{}!".format(
            chunk_rows, chunk_cols))
    return -(-rows // chunk_rows), -(-cols // chunk_cols)


def pack_offsets(rows, cols, chunk_rows=512, chunk_cols=8):
    """Packed byte offset of every matrix position

    Chunks are emitted left to right and top to bottom; the bytes of
    a chunk are emitted column by column.

    Returns
    -------
    offsets: 2d np.ndarray of int64, shape (rows, cols)
    size: int
        Number of packed bytes including padding
    """
    nr, nc = _chunk_grid(rows, cols, chunk_rows, chunk_cols)
    size = nr * nc * chunk_rows * chunk_cols
    offsets = np.arange(size, dtype=np.int64)
    offsets = offsets.reshape(nr, nc, chunk_cols, chunk_rows)
    offsets = offsets.transpose(0, 3, 1, 2).reshape(nr * chunk_rows,
                                                    nc * chunk_cols)
    return offsets[:rows, :cols], size


def pack_layer(layer, chunk_rows=512, chunk_cols=8):
    """Pack a quantized layer into its in-memory byte layout

    Parameters
    ----------
    layer: QuantizedLayer
    chunk_rows, chunk_cols: int
        Chunk extent; ragged edge chunks are zero-padded to the
        full extent

    Returns
    -------
    data: 1d np.ndarray of uint8
        Packed bytes (two's complement codes)
    offsets: 2d np.ndarray of int64
        Byte offset of each weight within `data`
    """
    rows, cols = layer.shape
    nr, nc = _chunk_grid(rows, cols, chunk_rows, chunk_cols)
    padded = np.zeros((nr * chunk_rows, nc * chunk_cols), dtype=np.uint8)
    padded[:rows, :cols] = layer.codes.view(np.uint8)
    data = padded.reshape(nr, chunk_rows, nc, chunk_cols)
    data = data.transpose(0, 2, 3, 1).ravel()
    offsets, _ = pack_offsets(rows, cols, chunk_rows, chunk_cols)
    return data, offsets


def unpack_layer(data, rows, cols, chunk_rows=512, chunk_cols=8):
    """Inverse of :func:`pack_layer` (returns the int8 code matrix)"""
    nr, nc = _chunk_grid(rows, cols, chunk_rows, chunk_cols)
    data = np.asarray(data, dtype=np.uint8)
    if data.size != nr * nc * chunk_rows * chunk_cols:
        raise ValueError("Packed data has {} bytes, expected {}!".format(
            data.size, nr * nc * chunk_rows * chunk_cols))
    padded = data.reshape(nr, nc, chunk_cols, chunk_rows)
    padded = padded.transpose(0, 3, 1, 2).reshape(nr * chunk_rows,
                                                  nc * chunk_cols)
    return padded[:rows, :cols].view(np.int8).copy()


class WeightAddressMap(object):
    def __init__(self, layer_shapes, chunk_rows=512, chunk_cols=8,
                 page_size_bytes=4096):
        """Mapping between weight bits and victim page bits

        Each layer's packed bytes start on a fresh logical page;
        pages are filled sequentially. Within a byte, bit slot 0
        holds the MSB (bit index 7).

        Weights are also addressed by a flat index that enumerates
        the layers in order and each layer row-major.
        """
        self.layer_shapes = [tuple(int(s) for s in sh)
                             for sh in layer_shapes]
        self.chunk_rows = int(chunk_rows)
        self.chunk_cols = int(chunk_cols)
        self.page_size_bytes = int(page_size_bytes)
        self.weight_base = [0]
        self.page_base = [0]
        self._offsets = []
        for rows, cols in self.layer_shapes:
            offsets, size = pack_offsets(rows, cols, chunk_rows, chunk_cols)
            self._offsets.append(offsets)
            self.weight_base.append(self.weight_base[-1] + rows * cols)
            self.page_base.append(self.page_base[-1]
                                  - (-size // self.page_size_bytes))
        self.n_weights = self.weight_base[-1]
        self.n_pages = self.page_base[-1]
        # flat weight index stored at every page byte (-1 for padding)
        page_weight = np.full(self.n_pages * self.page_size_bytes, -1,
                              dtype=np.int64)
        for ll, offsets in enumerate(self._offsets):
            start = self.page_base[ll] * self.page_size_bytes
            page_weight[start + offsets.ravel()] = np.arange(
                self.weight_base[ll], self.weight_base[ll + 1])
        self.page_weight = page_weight.reshape(self.n_pages,
                                               self.page_size_bytes)
        self.page_weight.setflags(write=False)
        self.weight_byte = np.empty(self.n_weights, dtype=np.int64)
        valid = page_weight >= 0
        self.weight_byte[page_weight[valid]] = np.flatnonzero(valid)

    @property
    def n_layers(self):
        return len(self.layer_shapes)

    def _check(self, layer, row, col):
        if not 0 <= layer < self.n_layers:
            raise IndexError("Layer {} out of range!".format(layer))
        rows, cols = self.layer_shapes[layer]
        if not (0 <= row < rows and 0 <= col < cols):
            raise IndexError("Weight ({}, {}) out of range for layer {} "
                             "of shape {}!".format(row, col, layer,
                                                   (rows, cols)))

    def flat_index(self, layer, row, col):
        self._check(layer, row, col)
        return self.weight_base[layer] + row * self.layer_shapes[layer][1] \
            + col

    def weight_coords(self, flat_index):
        """(layer, row, col) of a flat weight index"""
        if not 0 <= flat_index < self.n_weights:
            raise IndexError("Weight index {} out of range!".format(
                flat_index))
        layer = int(np.searchsorted(self.weight_base, flat_index,
                                    side="right")) - 1
        row, col = divmod(int(flat_index) - self.weight_base[layer],
                          self.layer_shapes[layer][1])
        return layer, row, col

    def forward(self, layer, row, col):
        """(logical page index, byte offset within page) of a weight"""
        byte = self.weight_byte[self.flat_index(layer, row, col)]
        page, offset = divmod(int(byte), self.page_size_bytes)
        return page, offset

    def inverse(self, page, byte_offset):
        """(layer, row, col) stored at a page byte or None for padding"""
        if not 0 <= page < self.n_pages:
            raise IndexError("Page {} out of range!".format(page))
        if not 0 <= byte_offset < self.page_size_bytes:
            raise IndexError("Byte offset {} out of range!".format(
                byte_offset))
        flat = self.page_weight[page, byte_offset]
        if flat < 0:
            return None
        return self.weight_coords(flat)

    def locate_bit(self, layer, row, col, bit_index):
        """(logical page index, bit offset within page) of a weight bit

        `bit_index` 7 is the MSB of the signed code.
        """
        if not 0 <= bit_index <= 7:
            raise IndexError("Bit index {} out of range!".format(bit_index))
        page, offset = self.forward(layer, row, col)
        return page, offset * 8 + (7 - bit_index)

    def inverse_bit(self, page, bit_offset):
        """(layer, row, col, bit_index) of a page bit or None"""
        coords = self.inverse(page, bit_offset // 8)
        if coords is None:
            return None
        return coords + (7 - bit_offset % 8,)

    def page_bit_ids(self, page):
        """Flat bit id (``8 * weight + bit_index``) of every bit of a page

        Padding bits are -1.
        """
        weights = self.page_weight[page]
        ids = np.repeat(weights * 8, 8) + np.tile(np.arange(7, -1, -1),
                                                  weights.size)
        ids[np.repeat(weights < 0, 8)] = -1
        return ids

    def layer_page_range(self, layer):
        return range(self.page_base[layer], self.page_base[layer + 1])


class VictimModel(object):
    def __init__(self, layers, biases=None, seed=None, chunk_rows=512,
                 chunk_cols=8, page_size_bytes=4096):
        """Quantized victim network held in packed weight pages

        Parameters
        ----------
        layers: list of QuantizedLayer
            Dense layers in (in_features x out_features) orientation
        biases: list of 1d np.ndarray or None
            Float biases of the layers
        seed: int or None
            Seed the victim was created with
        chunk_rows, chunk_cols: int
            Packing chunk extent
        page_size_bytes: int
            Page size of the memory system
        """
        self.layers = list(layers)
        for ii in range(1, len(self.layers)):
            if self.layers[ii - 1].cols != self.layers[ii].rows:
                raise ValueError("Layer dimensions do not chain at layer "
                                 "{}!".format(ii))
        if biases is None:
            biases = [np.zeros(ly.cols) for ly in self.layers]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        if [b.shape for b in self.biases] != \
                [(ly.cols,) for ly in self.layers]:
            raise ValueError("Bias shapes do not match the layers!")
        self.seed = seed
        self.address_map = WeightAddressMap([ly.shape for ly in self.layers],
                                            chunk_rows=chunk_rows,
                                            chunk_cols=chunk_cols,
                                            page_size_bytes=page_size_bytes)
        self.pages = np.zeros((self.n_weight_pages, page_size_bytes),
                              dtype=np.uint8)
        for ll, layer in enumerate(self.layers):
            data, _ = pack_layer(layer, chunk_rows, chunk_cols)
            start = self.address_map.page_base[ll] * page_size_bytes
            self.pages.ravel()[start:start + data.size] = data
        self.pages.setflags(write=False)
        self._pool = None

    def __eq__(self, other):
        return (isinstance(other, VictimModel)
                and self.layers == other.layers
                and all(np.array_equal(a, b) for a, b in
                        zip(self.biases, other.biases)))

    def __repr__(self):
        return "VictimModel({}, {} weight pages)".format(
            " -> ".join(str(d) for d in self.dims), self.n_weight_pages)

    @property
    def dims(self):
        return [self.layers[0].rows] + [ly.cols for ly in self.layers]

    @property
    def layer_shapes(self):
        return [ly.shape for ly in self.layers]

    @property
    def n_weight_pages(self):
        return self.address_map.n_pages

    @property
    def pool(self):
        return self._pool

    @property
    def scales(self):
        return [ly.scale for ly in self.layers]

    @property
    def weight_tags(self):
        return [VictimPageTag(ii, PageKind.SECRET)
                for ii in range(self.n_weight_pages)]

    def page_contents(self):
        return {tag: self.pages[tag.logical_index]
                for tag in self.weight_tags}

    def codes_flat(self):
        """All weight codes as a flat int8 array (flat weight order)"""
        return np.concatenate([ly.codes.ravel() for ly in self.layers])

    def true_bits(self):
        """Ground-truth bits, shape (n_weights, 8), column = bit index"""
        codes = self.codes_flat().view(np.uint8)
        return (codes[:, None] >> np.arange(8)) & 1

    def place(self, pool):
        """Allocate the weight pages in a page pool"""
        placements = pool.allocate_for_victim(self.weight_tags,
                                              contents=self.page_contents())
        self._pool = pool
        return placements

    def save(self, path):
        """Write the raw model file (little-endian)

        Layout: magic, version (u2), layer count (u4), seed flag (u1,
        0 for no seed), seed (u8), per layer rows/cols (u4) and scale
        (f8), then the int8 codes of every layer row-major, then the f8
        biases.
        """
        header = [MODEL_MAGIC,
                  struct.pack(HEADER_FORMAT, MODEL_VERSION, len(self.layers),
                              self.seed is not None,
                              0 if self.seed is None else self.seed)]
        for ly in self.layers:
            header.append(struct.pack("<IId", ly.rows, ly.cols, ly.scale))
        body = [ly.codes.astype("<i1").tobytes() for ly in self.layers]
        body += [b.astype("<f8").tobytes() for b in self.biases]
        pathlib.Path(path).write_bytes(b"".join(header + body))

    @classmethod
    def load(cls, path, chunk_rows=512, chunk_cols=8, page_size_bytes=4096):
        raw = pathlib.Path(path).read_bytes()
        if raw[:4] != MODEL_MAGIC:
            raise ValueError("Not a bitleak model file: {}".format(path))
        version, n_layers, has_seed, seed = struct.unpack_from(
            HEADER_FORMAT, raw, 4)
        if version != MODEL_VERSION:
            raise ValueError("Unsupported model file version {}!".format(
                version))
        pos = 4 + struct.calcsize(HEADER_FORMAT)
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<IId", raw, pos))
            pos += struct.calcsize("<IId")
        layers = []
        for rows, cols, scale in shapes:
            codes = np.frombuffer(raw, dtype="<i1", count=rows * cols,
                                  offset=pos).reshape(rows, cols)
            layers.append(QuantizedLayer(codes, scale))
            pos += rows * cols
        biases = []
        for _, cols, _ in shapes:
            biases.append(np.frombuffer(raw, dtype="<f8", count=cols,
                                        offset=pos).copy())
            pos += 8 * cols
        return cls(layers, biases=biases,
                   seed=seed if has_seed else None,
                   chunk_rows=chunk_rows, chunk_cols=chunk_cols,
                   page_size_bytes=page_size_bytes)


class Anchor(enum.Enum):
    INFER_START = "InferStart"
    LAYER_START = "LayerStart"
    KERNEL_CREATE = "KernelCreate"


#: one anchor event and the victim pages accessed after it
TraceEvent = collections.namedtuple("TraceEvent",
                                    ["anchor", "layer", "page_accesses"])


class InferenceTrace(object):
    def __init__(self, events):
        self.events = list(events)

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def kernel_events(self):
        return [ev for ev in self.events
                if ev.anchor == Anchor.KERNEL_CREATE]

    def layer_order(self):
        return [ev.layer for ev in self.events
                if ev.anchor == Anchor.LAYER_START]


def run_inference_trace(model, non_secret_between=0):
    """Page-access trace of one inference

    Emits InferStart, then per layer LayerStart and KernelCreate;
    the KernelCreate event carries the layer's weight-page accesses
    in ascending logical order, each preceded by
    `non_secret_between` non-secret page accesses. Non-secret pages
    are numbered after the weight pages.

    Returns
    -------
    trace: InferenceTrace
    """
    if model.pool is None:
        raise PlacementError("The victim model has not been placed!")
    if non_secret_between < 0:
        raise ValueError("`non_secret_between` must be >= 0!")
    events = [TraceEvent(Anchor.INFER_START, None, [])]
    next_index = model.n_weight_pages
    for ll in range(len(model.layers)):
        events.append(TraceEvent(Anchor.LAYER_START, ll, []))
        accesses = []
        for page in model.address_map.layer_page_range(ll):
            for _ in range(non_secret_between):
                accesses.append(VictimPageTag(next_index,
                                              PageKind.NON_SECRET))
                next_index += 1
            accesses.append(VictimPageTag(page, PageKind.SECRET))
        events.append(TraceEvent(Anchor.KERNEL_CREATE, ll, accesses))
    return InferenceTrace(events)
