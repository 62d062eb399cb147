"""Leaked-bit filtering, projected weight ranges and weight classes

A weight contributes to range computation only through the run of
known bits that starts at its MSB (the sign bit of the two's
complement code). Known bits below the first unknown bit are
discarded.
"""
import collections
import enum
import pathlib

import numpy as np


#: MSB prefix length for every 8-bit known-mask (bit i <-> bit index i)
PREFIX_TABLE = np.zeros(256, dtype=np.int8)
for _mask in range(256):
    _k = 0
    while _k < 8 and _mask & (1 << (7 - _k)):
        _k += 1
    PREFIX_TABLE[_mask] = _k
PREFIX_TABLE.setflags(write=False)
del _mask, _k

#: header of the profile CSV export
PROFILE_HEADER = "layer,row,col,prefix_len,code_min,code_max"


class WeightSetClass(enum.IntEnum):
    """Training treatment of a weight"""
    #: all 8 bits recovered; exact value, frozen
    FULL = 1
    #: MSB prefix of 1 to 7 bits; pulled to the projected mean
    PARTIAL = 2
    #: no MSB information; trained from a random start
    NONE = 3


#: set class of a weight together with its prefix length
ClassLabel = collections.namedtuple("ClassLabel", ["kind", "prefix"])

#: known flags and values of the 8 bits of a weight (index = bit index)
WeightLeakMask = collections.namedtuple("WeightLeakMask",
                                        ["known", "values"])


def mask_bits(known):
    """Pack known flags (..., 8) into integers (bit i = bit index i)"""
    known = np.asarray(known, dtype=np.uint16)
    return (known << np.arange(8, dtype=np.uint16)).sum(axis=-1)


def filter_prefix(mask):
    """Length of the known run starting at the MSB (0..8)

    Parameters
    ----------
    mask: WeightLeakMask or array-like of 8 bool
        Known flags, index 7 is the MSB
    """
    known = mask.known if isinstance(mask, WeightLeakMask) else mask
    return int(PREFIX_TABLE[mask_bits(known)])


def prefix_lengths(known):
    """Vectorized :func:`filter_prefix` for an array of shape (..., 8)"""
    return PREFIX_TABLE[mask_bits(known)].astype(np.int64)


def _signed(value):
    value = np.asarray(value, dtype=np.int64)
    return np.where(value >= 128, value - 256, value)


def code_ranges(value_bytes, prefix):
    """Code interval of weights given their MSB prefix

    Parameters
    ----------
    value_bytes: array-like of int in [0, 255]
        Byte whose upper `prefix` bits hold the prefix
    prefix: array-like of int in [0, 8]

    Returns
    -------
    code_min, code_max: np.ndarray of int64
    """
    value_bytes = np.asarray(value_bytes, dtype=np.int64)
    prefix = np.asarray(prefix, dtype=np.int64)
    if np.any((prefix < 0) | (prefix > 8)):
        raise ValueError("Prefix lengths must be in [0, 8]!")
    high = (0xFF << (8 - prefix)) & 0xFF
    base = value_bytes & high
    code_min = _signed(base)
    code_max = _signed(base | (~high & 0xFF))
    # without the sign bit the whole code range is possible
    code_min = np.where(prefix == 0, -128, code_min)
    code_max = np.where(prefix == 0, 127, code_max)
    return code_min, code_max


#: projected interval of one weight
ProjectedRange = collections.namedtuple("ProjectedRange",
                                        ["code_min", "code_max", "mean"])


def projected_range(prefix_bits, k, scale):
    """Projected range of a weight with a known MSB prefix

    Parameters
    ----------
    prefix_bits: int
        Byte value whose upper `k` bits are the prefix
        (lower bits are ignored)
    k: int
        Prefix length (0..8)
    scale: float
        Dequantization step

    Returns
    -------
    prange: ProjectedRange
        `mean` is dequantized, ``scale * (code_min + code_max) / 2``
    """
    if not 0 <= k <= 8:
        raise ValueError("Prefix length must be in [0, 8], got {}!".format(k))
    cmin, cmax = code_ranges(prefix_bits, k)
    cmin = int(cmin)
    cmax = int(cmax)
    return ProjectedRange(cmin, cmax, scale * (cmin + cmax) / 2)


def classify(prefix):
    """Set class of a weight with the given prefix length"""
    if not 0 <= prefix <= 8:
        raise ValueError("Prefix length must be in [0, 8], got {}!".format(
            prefix))
    if prefix == 8:
        kind = WeightSetClass.FULL
    elif prefix == 0:
        kind = WeightSetClass.NONE
    else:
        kind = WeightSetClass.PARTIAL
    return ClassLabel(kind, int(prefix))


def set_classes(prefix):
    """Vectorized :func:`classify` (returns WeightSetClass values)"""
    prefix = np.asarray(prefix)
    out = np.full(prefix.shape, WeightSetClass.PARTIAL, dtype=np.int8)
    out[prefix == 8] = WeightSetClass.FULL
    out[prefix == 0] = WeightSetClass.NONE
    return out


class BitProfile(object):
    def __init__(self, layer_shapes, scales, prefix, value_bytes,
                 max_prefix=8):
        """Per-weight prefix lengths and projected ranges

        Parameters
        ----------
        layer_shapes: list of tuple
            Layer matrix shapes (flat weight order as in the ledger)
        scales: list of float
            Dequantization step of each layer
        prefix: 1d array-like of int
            MSB prefix length of every weight
        value_bytes: 1d array-like of int
            Byte holding the known prefix of every weight
        max_prefix: int
            Usable prefix is capped at this length (1 keeps only
            the MSB)
        """
        self.layer_shapes = [tuple(sh) for sh in layer_shapes]
        self.scales = [float(s) for s in scales]
        if len(self.scales) != len(self.layer_shapes):
            raise ValueError("One scale per layer required!")
        if not 0 <= max_prefix <= 8:
            raise ValueError("`max_prefix` must be in [0, 8], got {}!"
                             .format(max_prefix))
        self.max_prefix = int(max_prefix)
        self.weight_base = np.cumsum([0] + [r * c for r, c in
                                            self.layer_shapes])
        prefix = np.minimum(np.asarray(prefix, dtype=np.int64),
                            self.max_prefix)
        if prefix.shape != (self.weight_base[-1],):
            raise ValueError("Expected {} weights, got {}!".format(
                self.weight_base[-1], prefix.shape))
        high = (0xFF << (8 - prefix)) & 0xFF
        self.prefix = prefix
        self.value_bytes = np.asarray(value_bytes, dtype=np.int64) & high
        self.code_min, self.code_max = code_ranges(self.value_bytes, prefix)
        self.set_class = set_classes(prefix)

    def __repr__(self):
        counts = self.class_counts()
        return "BitProfile({} full, {} partial, {} none)".format(
            counts[WeightSetClass.FULL], counts[WeightSetClass.PARTIAL],
            counts[WeightSetClass.NONE])

    @classmethod
    def from_ledger(cls, ledger, scales, max_prefix=8):
        """Build the profile from a :class:`bitleak.leak.LeakLedger`"""
        prefix = prefix_lengths(ledger.known)
        values = ledger.values.astype(np.int64) * ledger.known
        value_bytes = (values << np.arange(8)).sum(axis=1)
        return cls(ledger.layer_shapes, scales, prefix, value_bytes,
                   max_prefix=max_prefix)

    @classmethod
    def empty(cls, layer_shapes, scales):
        """Profile without any leaked bit"""
        n = sum(r * c for r, c in layer_shapes)
        return cls(layer_shapes, scales, np.zeros(n, dtype=int),
                   np.zeros(n, dtype=int))

    @classmethod
    def full(cls, layer_shapes, scales, codes):
        """Profile of a completely leaked model (flat int8 codes)"""
        codes = np.asarray(codes, dtype=np.int8).view(np.uint8)
        return cls(layer_shapes, scales, np.full(codes.size, 8), codes)

    def class_counts(self):
        return {kk: int(np.count_nonzero(self.set_class == kk))
                for kk in WeightSetClass}

    def layer(self, index):
        """Per-layer arrays of the profile

        Returns
        -------
        arrays: dict
            "prefix", "set class", "code min", "code max" (codes) and
            "w min", "w max", "w mean" (dequantized), each shaped
            like the layer matrix
        """
        sl = slice(self.weight_base[index], self.weight_base[index + 1])
        shape = self.layer_shapes[index]
        scale = self.scales[index]
        cmin = self.code_min[sl].reshape(shape)
        cmax = self.code_max[sl].reshape(shape)
        return {"prefix": self.prefix[sl].reshape(shape),
                "set class": self.set_class[sl].reshape(shape),
                "code min": cmin,
                "code max": cmax,
                "w min": cmin * scale,
                "w max": cmax * scale,
                "w mean": scale * (cmin + cmax) / 2,
                }

    def to_csv(self, path):
        """Write one ``layer,row,col,prefix_len,code_min,code_max`` record
        per weight"""
        lines = [PROFILE_HEADER]
        for ll, (rows, cols) in enumerate(self.layer_shapes):
            arr = self.layer(ll)
            rr, cc = np.meshgrid(np.arange(rows), np.arange(cols),
                                 indexing="ij")
            for rec in zip(rr.ravel().tolist(), cc.ravel().tolist(),
                           arr["prefix"].ravel().tolist(),
                           arr["code min"].ravel().tolist(),
                           arr["code max"].ravel().tolist()):
                lines.append("{},{},{},{},{},{}".format(ll, *rec))
        pathlib.Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, layer_shapes, scales):
        """Load a profile written with :func:`BitProfile.to_csv`"""
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64,
                          ndmin=2)
        n = sum(r * c for r, c in layer_shapes)
        if data.shape[0] != n:
            raise ValueError("Profile holds {} weights, expected {}!"
                             .format(data.shape[0], n))
        base = np.cumsum([0] + [r * c for r, c in layer_shapes])
        cols = np.array([c for _, c in layer_shapes])
        flat = base[data[:, 0]] + data[:, 1] * cols[data[:, 0]] + data[:, 2]
        prefix = np.zeros(n, dtype=np.int64)
        value_bytes = np.zeros(n, dtype=np.int64)
        prefix[flat] = data[:, 3]
        value_bytes[flat] = data[:, 4] & 0xFF
        return cls(layer_shapes, scales, prefix, value_bytes)
