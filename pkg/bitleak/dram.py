"""DRAM geometry, vulnerable-cell templates and hammering physics"""
import collections
import enum
import pathlib

import numpy as np
from scipy import stats


class GeometryError(BaseException):
    """Raised when row data does not match the DRAM geometry"""
    pass


class FlipDirection(enum.IntEnum):
    """Direction in which a vulnerable cell flips"""
    ZERO_TO_ONE = 0
    ONE_TO_ZERO = 1


#: labels of :class:`FlipDirection` in template files
DIRECTION_LABELS = {FlipDirection.ZERO_TO_ONE: "0to1",
                    FlipDirection.ONE_TO_ZERO: "1to0",
                    }

#: a vulnerable DRAM cell
VulnCell = collections.namedtuple("VulnCell",
                                  ["row", "bit_offset", "direction"])

#: first line of a template file
TEMPLATE_MAGIC = "# bitleak dram template"


class DramGeometry(object):
    def __init__(self, rows_total, pages_per_row=2, page_size_bytes=4096):
        """Flattened DRAM geometry

        Banks and channels are flattened into a linear array of rows;
        only row adjacency matters for double-sided hammering.

        Parameters
        ----------
        rows_total: int
            Number of physical rows
        pages_per_row: int
            Number of pages that share one physical row
        page_size_bytes: int
            Page size; must be a power of two
        """
        rows_total = int(rows_total)
        pages_per_row = int(pages_per_row)
        page_size_bytes = int(page_size_bytes)
        if rows_total < 1:
            raise ValueError("`rows_total` must be positive, "
                             + "got {}!".format(rows_total))
        if pages_per_row < 1:
            raise ValueError("`pages_per_row` must be >= 1, "
                             + "got {}!".format(pages_per_row))
        if page_size_bytes < 1 or page_size_bytes & (page_size_bytes - 1):
            raise ValueError("`page_size_bytes` must be a power of two, "
                             + "got {}!".format(page_size_bytes))
        self.rows_total = rows_total
        self.pages_per_row = pages_per_row
        self.page_size_bytes = page_size_bytes

    def __eq__(self, other):
        return (isinstance(other, DramGeometry)
                and self.rows_total == other.rows_total
                and self.pages_per_row == other.pages_per_row
                and self.page_size_bytes == other.page_size_bytes)

    def __repr__(self):
        return "DramGeometry({} rows x {} pages x {} B)".format(
            self.rows_total, self.pages_per_row, self.page_size_bytes)

    @property
    def bits_per_row(self):
        return self.pages_per_row * self.page_size_bytes * 8

    @property
    def page_bits(self):
        """number of bits in one page"""
        return self.page_size_bytes * 8

    @property
    def pages_total(self):
        return self.rows_total * self.pages_per_row


class TemplateMap(object):
    def __init__(self, geometry, rows, bit_offsets, directions, seed=None,
                 frac_vuln_pages=None, mean_cells_per_vuln_page=None):
        """Locations and flip directions of vulnerable DRAM cells

        A template is immutable; the cell arrays are sorted by
        (row, bit offset).

        Parameters
        ----------
        geometry: DramGeometry
            Geometry the cells refer to
        rows, bit_offsets, directions: 1d array-like of int
            One entry per vulnerable cell; `bit_offsets` count from
            the beginning of the row, `directions` are
            :class:`FlipDirection` values
        seed: int or None
            Seed the template was generated with
        frac_vuln_pages, mean_cells_per_vuln_page: float or None
            Generation parameters (kept for provenance)
        """
        rows = np.asarray(rows, dtype=np.int64).ravel()
        offsets = np.asarray(bit_offsets, dtype=np.int64).ravel()
        directions = np.asarray(directions, dtype=np.int8).ravel()
        if not rows.size == offsets.size == directions.size:
            raise ValueError("Cell arrays must have equal length!")
        if rows.size:
            if rows.min() < 0 or rows.max() >= geometry.rows_total:
                raise GeometryError("Cell row out of range for {}!".format(
                    geometry))
            if offsets.min() < 0 or offsets.max() >= geometry.bits_per_row:
                raise GeometryError(
                    "Cell bit offset out of range for {}!".format(geometry))
            if not np.isin(directions, [0, 1]).all():
                raise ValueError("Invalid flip direction in template!")
        order = np.lexsort((offsets, rows))
        rows = rows[order]
        offsets = offsets[order]
        directions = directions[order]
        dup = (rows[1:] == rows[:-1]) & (offsets[1:] == offsets[:-1])
        if dup.any():
            idx = np.flatnonzero(dup)[0]
            raise ValueError("Duplicate vulnerable cell at row {}, "
                             "bit offset {}!".format(rows[idx], offsets[idx]))
        for arr in (rows, offsets, directions):
            arr.setflags(write=False)
        self.geometry = geometry
        self.rows = rows
        self.bit_offsets = offsets
        self.directions = directions
        self.seed = seed
        self.frac_vuln_pages = frac_vuln_pages
        self.mean_cells_per_vuln_page = mean_cells_per_vuln_page
        # row pointers into the sorted cell arrays
        self._row_ptr = np.searchsorted(rows,
                                        np.arange(geometry.rows_total + 1))

    def __contains__(self, cell):
        offsets, directions = self.cells_in_row(cell.row)
        idx = np.searchsorted(offsets, cell.bit_offset)
        return bool(idx < offsets.size
                    and offsets[idx] == cell.bit_offset
                    and directions[idx] == cell.direction)

    def __eq__(self, other):
        return (isinstance(other, TemplateMap)
                and self.geometry == other.geometry
                and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.bit_offsets, other.bit_offsets)
                and np.array_equal(self.directions, other.directions))

    def __iter__(self):
        for row, off, dirc in zip(self.rows, self.bit_offsets,
                                  self.directions):
            yield VulnCell(int(row), int(off), FlipDirection(int(dirc)))

    def __len__(self):
        return self.rows.size

    def __repr__(self):
        return "TemplateMap({} cells, {}, seed={})".format(
            len(self), self.geometry, self.seed)

    @property
    def cells(self):
        """set of all :data:`VulnCell` entries"""
        return frozenset(self)

    @classmethod
    def from_cells(cls, geometry, cells, seed=None):
        """Create a template from an iterable of :data:`VulnCell`"""
        cells = list(cells)
        return cls(geometry,
                   rows=[c.row for c in cells],
                   bit_offsets=[c.bit_offset for c in cells],
                   directions=[int(c.direction) for c in cells],
                   seed=seed)

    def cells_in_row(self, row):
        """Return bit offsets and directions of the cells in `row`"""
        if row < 0 or row >= self.geometry.rows_total:
            raise GeometryError("Row {} out of range for {}!".format(
                row, self.geometry))
        sl = slice(self._row_ptr[row], self._row_ptr[row + 1])
        return self.bit_offsets[sl], self.directions[sl]

    def page_cell_counts(self):
        """Number of vulnerable cells in every page (page index order)"""
        page_index = (self.rows * self.geometry.pages_per_row
                      + self.bit_offsets // self.geometry.page_bits)
        return np.bincount(page_index, minlength=self.geometry.pages_total)

    def to_text(self):
        """Line-oriented text representation (see :func:`save`)"""
        g = self.geometry
        lines = [TEMPLATE_MAGIC,
                 "rows_total = {}".format(g.rows_total),
                 "pages_per_row = {}".format(g.pages_per_row),
                 "page_size_bytes = {}".format(g.page_size_bytes),
                 "seed = {}".format(_fmt_opt(self.seed)),
                 "frac_vuln_pages = {}".format(
                     _fmt_opt(self.frac_vuln_pages)),
                 "mean_cells_per_vuln_page = {}".format(
                     _fmt_opt(self.mean_cells_per_vuln_page)),
                 "cells = {}".format(len(self)),
                 "# row bit_offset direction",
                 ]
        labels = np.array([DIRECTION_LABELS[FlipDirection(0)],
                           DIRECTION_LABELS[FlipDirection(1)]])
        lines += ["{} {} {}".format(r, o, d) for r, o, d in
                  zip(self.rows.tolist(), self.bit_offsets.tolist(),
                      labels[self.directions].tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0] != TEMPLATE_MAGIC:
            raise ValueError("Not a bitleak template file!")
        header = {}
        ii = 1
        for ii in range(1, len(lines)):
            line = lines[ii]
            if line.startswith("#"):
                break
            key, value = [s.strip() for s in line.split("=", 1)]
            header[key] = value
        body = [ln.split() for ln in lines[ii + 1:] if ln.strip()]
        if len(body) != int(header["cells"]):
            raise ValueError("Template file declares {} cells, found {}!"
                             .format(header["cells"], len(body)))
        lookup = {v: k for k, v in DIRECTION_LABELS.items()}
        geometry = DramGeometry(rows_total=int(header["rows_total"]),
                                pages_per_row=int(header["pages_per_row"]),
                                page_size_bytes=int(
                                    header["page_size_bytes"]))
        seed = _parse_opt(header["seed"], int)
        return cls(geometry,
                   rows=[int(b[0]) for b in body],
                   bit_offsets=[int(b[1]) for b in body],
                   directions=[int(lookup[b[2]]) for b in body],
                   seed=seed,
                   frac_vuln_pages=_parse_opt(header["frac_vuln_pages"],
                                              float),
                   mean_cells_per_vuln_page=_parse_opt(
                       header["mean_cells_per_vuln_page"], float),
                   )

    def save(self, path):
        """Write the template to a text file

        The header holds the geometry and the generation seed,
        followed by one ``row bit_offset direction`` record per cell.
        """
        pathlib.Path(path).write_text(self.to_text(), encoding="ascii")

    @classmethod
    def load(cls, path):
        return cls.from_text(pathlib.Path(path).read_text(encoding="ascii"))


def _fmt_opt(value):
    return "none" if value is None else repr(value)


def _parse_opt(text, dtype):
    return None if text == "none" else dtype(text)


def generate_template(geometry, frac_vuln_pages, mean_cells_per_vuln_page,
                      seed):
    """Generate a vulnerable-cell template

    Two-level (page-clustered) model: each page is vulnerable with
    probability `frac_vuln_pages`; a vulnerable page receives a
    Poisson(`mean_cells_per_vuln_page`) number of cells at distinct,
    uniformly drawn bit offsets, each with a fair-coin flip direction.
    A mean at or above the number of bits per page saturates the page
    (every offset is vulnerable).

    Parameters
    ----------
    geometry: DramGeometry
    frac_vuln_pages: float
        Probability in [0, 1] that a page holds vulnerable cells
    mean_cells_per_vuln_page: float
        Mean number of cells in a vulnerable page
    seed: int
        Random seed; the same seed yields the same template

    Returns
    -------
    template: TemplateMap
    """
    if not 0 <= frac_vuln_pages <= 1:
        raise ValueError("`frac_vuln_pages` must be in [0, 1], "
                         + "got {}!".format(frac_vuln_pages))
    if not mean_cells_per_vuln_page > 0:
        raise ValueError("`mean_cells_per_vuln_page` must be positive, "
                         + "got {}!".format(mean_cells_per_vuln_page))
    rng = np.random.default_rng(seed)
    page_bits = geometry.page_bits
    vuln_pages = np.flatnonzero(rng.random(geometry.pages_total)
                                < frac_vuln_pages)
    if mean_cells_per_vuln_page >= page_bits:
        counts = np.full(vuln_pages.size, page_bits, dtype=np.int64)
    else:
        counts = np.minimum(rng.poisson(mean_cells_per_vuln_page,
                                        size=vuln_pages.size),
                            page_bits)
    rows = []
    offsets = []
    for page, count in zip(vuln_pages, counts):
        if count == 0:
            continue
        elif count == page_bits:
            off = np.arange(page_bits)
        else:
            off = np.sort(rng.choice(page_bits, size=count, replace=False))
        row, slot = divmod(int(page), geometry.pages_per_row)
        rows.append(np.full(count, row, dtype=np.int64))
        offsets.append(off + slot * page_bits)
    if rows:
        rows = np.concatenate(rows)
        offsets = np.concatenate(offsets)
    else:
        rows = np.zeros(0, dtype=np.int64)
        offsets = np.zeros(0, dtype=np.int64)
    directions = rng.integers(0, 2, size=rows.size)
    return TemplateMap(geometry, rows, offsets, directions, seed=seed,
                       frac_vuln_pages=float(frac_vuln_pages),
                       mean_cells_per_vuln_page=float(
                           mean_cells_per_vuln_page))


def template_statistics(template, confidence_level=0.95):
    """Aggregate statistics of a template

    Returns
    -------
    info: dict
        "vulnerable pages", "pages", "page fraction",
        "page fraction ci" (Clopper-Pearson interval), "cells",
        and "cell rate" (fraction of all DRAM bits that are vulnerable)
    """
    g = template.geometry
    vuln = int(np.count_nonzero(template.page_cell_counts()))
    ci = stats.binomtest(vuln, g.pages_total).proportion_ci(
        confidence_level=confidence_level)
    return {"vulnerable pages": vuln,
            "pages": g.pages_total,
            "page fraction": vuln / g.pages_total,
            "page fraction ci": (ci.low, ci.high),
            "cells": len(template),
            "cell rate": len(template) / (g.pages_total * g.page_bits),
            }


def hammer(target, upper, lower, row, template, miss_prob=0.0, rng=None):
    """Double-sided hammering of one target row

    A ZeroToOne cell flips iff its target bit is 0 and both aggressor
    bits at the same offset are 1; a OneToZero cell flips iff its
    target bit is 1 and both aggressor bits are 0. Only the target
    row is disturbed.

    Parameters
    ----------
    target: 1d np.ndarray of uint8 (0/1)
        Bits of the target row; modified in place
    upper, lower: 1d np.ndarray of uint8 (0/1)
        Bits of the two aggressor rows
    row: int
        Index of the target row
    template: TemplateMap
    miss_prob: float
        Probability in [0, 1) that an eligible flip does not happen
    rng: np.random.Generator or None
        Random generator for missed flips (required if `miss_prob > 0`)

    Returns
    -------
    flipped: set of int
        Bit offsets that flipped
    """
    bits_per_row = template.geometry.bits_per_row
    for name, arr in [("target", target), ("upper", upper),
                      ("lower", lower)]:
        if np.shape(arr) != (bits_per_row,):
            raise GeometryError(
                "`{}` row must have {} bits, got shape {}!".format(
                    name, bits_per_row, np.shape(arr)))
    if not 0 <= miss_prob < 1:
        raise ValueError("`miss_prob` must be in [0, 1), "
                         + "got {}!".format(miss_prob))
    offsets, directions = template.cells_in_row(row)
    if offsets.size == 0:
        return set()
    tt = target[offsets]
    uu = upper[offsets]
    ll = lower[offsets]
    eligible = np.where(directions == FlipDirection.ZERO_TO_ONE,
                        (tt == 0) & (uu == 1) & (ll == 1),
                        (tt == 1) & (uu == 0) & (ll == 0))
    if miss_prob > 0:
        if rng is None:
            raise ValueError("`rng` is required if `miss_prob` > 0!")
        eligible &= rng.random(offsets.size) >= miss_prob
    flipped = offsets[eligible]
    target[flipped] ^= 1
    return set(flipped.tolist())
