"""Multi-round weight-bit leakage through rowhammer

One round exhausts memory, releases frames so that the victim's next
inference places selected weight pages next to templated target rows,
then hammers every target row with a preset stripe pattern and reads
the victim bits off the observed flips.
"""
import collections
import enum
import logging
import pathlib
import warnings

import numpy as np

from .bitprofile import prefix_lengths
from .dram import FlipDirection, hammer
from .memsys import MassagePlan, PageKind, PagePool, PhysPageId, PlanError
from .victim import run_inference_trace


logger = logging.getLogger(__name__)

#: header of the ledger text dump
LEDGER_HEADER = "layer,row,col,bit,value,round"

#: columns of the recovery curve CSV
CURVE_COLUMNS = (["round", "msb"] + ["msb{}".format(k) for k in range(1, 8)]
                 + ["full", "seconds"])


class LeakExhaustedError(BaseException):
    """Raised when no informative target row remains"""
    pass


class LedgerContradictionError(BaseException):
    """Raised when a re-leaked bit disagrees with the ledger"""
    pass


class Strategy(enum.Enum):
    #: any unknown weight bit is a useful target
    ALL_BITS = "allbits"
    #: only rows that align with an unknown MSB are targeted
    MSB_PRIORITY = "msb"


class CostModel(object):
    #: default hammering time per row (average round time / rows)
    ROW_SECONDS = {Strategy.MSB_PRIORITY: 239 / 11000,
                   Strategy.ALL_BITS: 375 / 17000,
                   }

    def __init__(self, t_exhaust=12.0, t_release=21.0, t_inference=1.0,
                 t_per_hammered_row=None, strategy=Strategy.MSB_PRIORITY):
        """Simulated wall-clock cost of an attack round

        Parameters
        ----------
        t_exhaust: float
            Seconds for memory exhaustion
        t_release: float
            Seconds for the page release
        t_inference: float
            Seconds for the victim inference that places its pages
        t_per_hammered_row: float or None
            Seconds per hammered row; defaults to the value for
            `strategy`
        """
        if t_per_hammered_row is None:
            t_per_hammered_row = self.ROW_SECONDS[Strategy(strategy)]
        for name, value in [("t_exhaust", t_exhaust),
                            ("t_release", t_release),
                            ("t_inference", t_inference),
                            ("t_per_hammered_row", t_per_hammered_row)]:
            if value < 0:
                raise ValueError("`{}` must be non-negative, got {}!".format(
                    name, value))
        self.t_exhaust = float(t_exhaust)
        self.t_release = float(t_release)
        self.t_inference = float(t_inference)
        self.t_per_hammered_row = float(t_per_hammered_row)

    def __repr__(self):
        return ("CostModel(exhaust={}s, release={}s, inference={}s, "
                "row={:.5f}s)").format(self.t_exhaust, self.t_release,
                                       self.t_inference,
                                       self.t_per_hammered_row)

    def round_seconds(self, rows_hammered):
        return (self.t_exhaust + self.t_release + self.t_inference
                + self.t_per_hammered_row * rows_hammered)


class LeakLedger(object):
    def __init__(self, layer_shapes):
        """Knowledge state of every weight bit

        Bits are addressed by flat weight index (layers in order,
        row-major) and bit index (7 is the MSB). Known bits are
        never forgotten.
        """
        self.layer_shapes = [tuple(int(s) for s in sh)
                             for sh in layer_shapes]
        self.weight_base = np.cumsum([0] + [r * c for r, c in
                                            self.layer_shapes])
        n = int(self.weight_base[-1])
        self.known = np.zeros((n, 8), dtype=bool)
        self.values = np.zeros((n, 8), dtype=np.uint8)
        self.round_of_discovery = np.full((n, 8), -1, dtype=np.int32)

    def __eq__(self, other):
        return (isinstance(other, LeakLedger)
                and self.layer_shapes == other.layer_shapes
                and np.array_equal(self.known, other.known)
                and np.array_equal(self.values * self.known,
                                   other.values * other.known)
                and np.array_equal(self.round_of_discovery,
                                   other.round_of_discovery))

    def __repr__(self):
        return "LeakLedger({} of {} bits known)".format(
            self.n_known, self.known.size)

    @property
    def n_known(self):
        return int(np.count_nonzero(self.known))

    @property
    def n_weights(self):
        return self.known.shape[0]

    def copy(self):
        new = LeakLedger(self.layer_shapes)
        new.known[:] = self.known
        new.values[:] = self.values
        new.round_of_discovery[:] = self.round_of_discovery
        return new

    def record(self, weight, bit_index, value, round_index):
        """Record one leaked bit; returns True if the bit was new"""
        return self.record_many([weight], [bit_index], [value],
                                round_index) == 1

    def record_many(self, weights, bit_indices, values, round_index):
        """Record leaked bits

        Raises
        ------
        LedgerContradictionError
            If a known bit is leaked with a different value

        Returns
        -------
        new: int
            Number of bits that were unknown before
        """
        weights = np.asarray(weights, dtype=np.int64)
        bit_indices = np.asarray(bit_indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.uint8)
        known = self.known[weights, bit_indices]
        bad = known & (self.values[weights, bit_indices] != values)
        if np.any(bad):
            idx = np.flatnonzero(bad)[0]
            raise LedgerContradictionError(
                "Weight {} bit {} leaked as {} in round {} but is known "
                "as {} since round {}!".format(
                    weights[idx], bit_indices[idx], values[idx], round_index,
                    self.values[weights[idx], bit_indices[idx]],
                    self.round_of_discovery[weights[idx],
                                            bit_indices[idx]]))
        new = ~known
        ww = weights[new]
        bb = bit_indices[new]
        self.known[ww, bb] = True
        self.values[ww, bb] = values[new]
        self.round_of_discovery[ww, bb] = round_index
        return int(np.count_nonzero(new))

    def at_round(self, round_index):
        """Ledger as it was after `round_index` rounds"""
        new = LeakLedger(self.layer_shapes)
        keep = self.known & (self.round_of_discovery <= round_index)
        new.known[:] = keep
        new.values[:] = np.where(keep, self.values, 0)
        new.round_of_discovery[:] = np.where(keep, self.round_of_discovery,
                                             -1)
        return new

    def prefix(self):
        """MSB prefix length of every weight"""
        return prefix_lengths(self.known)

    def fractions(self):
        """Recovered fractions over all weights

        Returns
        -------
        fractions: np.ndarray of shape (9,)
            MSB, MSB+1 ... MSB+7 (prefix of 1..8 bits) and full
            weights (all 8 bits known)
        """
        if self.n_weights == 0:
            return np.zeros(9)
        prefix = self.prefix()
        msb = [np.mean(prefix >= k) for k in range(1, 9)]
        return np.array(msb + [np.mean(self.known.all(axis=1))])

    def layer_msb_fractions(self):
        msb = self.known[:, 7]
        return np.array([np.mean(msb[self.weight_base[ll]:
                                     self.weight_base[ll + 1]])
                         if self.weight_base[ll + 1] > self.weight_base[ll]
                         else 0.0
                         for ll in range(len(self.layer_shapes))])

    def dump(self, path):
        """Write one ``layer,row,col,bit,value,round`` record per known bit"""
        lines = [LEDGER_HEADER]
        ww, bb = np.nonzero(self.known[:, ::-1])
        bb = 7 - bb
        layers = np.searchsorted(self.weight_base, ww, side="right") - 1
        cols = np.array([c for _, c in self.layer_shapes])
        local = ww - self.weight_base[layers]
        rows, cc = np.divmod(local, cols[layers])
        for rec in zip(layers.tolist(), rows.tolist(), cc.tolist(),
                       bb.tolist(), self.values[ww, bb].tolist(),
                       self.round_of_discovery[ww, bb].tolist()):
            lines.append("{},{},{},{},{},{}".format(*rec))
        pathlib.Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, layer_shapes):
        ledger = cls(layer_shapes)
        with warnings.catch_warnings():
            # a ledger without known bits has no records
            warnings.simplefilter("ignore", UserWarning)
            data = np.loadtxt(path, delimiter=",", skiprows=1,
                              dtype=np.int64, ndmin=2)
        if data.size == 0:
            return ledger
        cols = np.array([c for _, c in ledger.layer_shapes])
        ww = (ledger.weight_base[data[:, 0]] + data[:, 1] * cols[data[:, 0]]
              + data[:, 2])
        bb = data[:, 3]
        ledger.known[ww, bb] = True
        ledger.values[ww, bb] = data[:, 4]
        ledger.round_of_discovery[ww, bb] = data[:, 5]
        return ledger


class RecoveryCurve(object):
    def __init__(self, n_layers=0):
        """Recovered fractions and simulated time after every round"""
        self.n_layers = n_layers
        self._rows = []
        self._layer_msb = []

    def __len__(self):
        return len(self._rows)

    def append(self, round_index, ledger, seconds):
        self._rows.append([round_index] + ledger.fractions().tolist()
                          + [seconds])
        self._layer_msb.append(ledger.layer_msb_fractions())

    @property
    def data(self):
        """Curve table with the columns of :data:`CURVE_COLUMNS`"""
        return np.array(self._rows, dtype=float).reshape(-1,
                                                         len(CURVE_COLUMNS))

    @property
    def layer_msb(self):
        """MSB fraction of every layer after every round"""
        if not self._layer_msb:
            return np.zeros((0, self.n_layers))
        return np.array(self._layer_msb, dtype=float)

    def column(self, name):
        return self.data[:, CURVE_COLUMNS.index(name)]

    @property
    def rounds(self):
        return self.column("round").astype(int)

    @property
    def msb(self):
        return self.column("msb")

    @property
    def seconds(self):
        return self.column("seconds")

    def rounds_to(self, target):
        """First round with an MSB fraction >= `target` (or None)"""
        idx = np.flatnonzero(self.msb >= target)
        return int(self.rounds[idx[0]]) if idx.size else None

    def msb_at_seconds(self, seconds):
        """MSB fraction reached within a simulated time budget"""
        idx = np.flatnonzero(self.seconds <= seconds)
        return float(self.msb[idx[-1]]) if idx.size else 0.0

    def to_csv(self, path):
        fmt = ["%d"] + ["%.6f"] * 9 + ["%.3f"]
        np.savetxt(path, self.data, fmt=fmt, delimiter=",",
                   header=",".join(CURVE_COLUMNS), comments="")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fd:
            header = fd.readline().strip()
        if header != ",".join(CURVE_COLUMNS):
            raise ValueError("Not a recovery curve file: {}".format(path))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        curve = cls()
        curve._rows = data.reshape(-1, len(CURVE_COLUMNS)).tolist()
        return curve


class ProbeTable(object):
    def __init__(self, template, address_map):
        """Templated cells indexed by hammering unit

        A unit is a (target row, side, slot) triple: the victim page
        sits in `slot` of the row on `side` of the target row and the
        row on the other side is the attacker aggressor. Every cell
        belongs to the two units of its row.
        """
        geometry = template.geometry
        if geometry.pages_per_row < 2:
            raise ValueError("Leakage requires at least two pages per row "
                             "(got {})!".format(geometry.pages_per_row))
        if geometry.page_size_bytes != address_map.page_size_bytes:
            raise ValueError("Template page size {} does not match the "
                             "victim page size {}!".format(
                                 geometry.page_size_bytes,
                                 address_map.page_size_bytes))
        self.template = template
        self.geometry = geometry
        ppr = geometry.pages_per_row
        rows = template.rows
        slot = template.bit_offsets // geometry.page_bits
        inpage = template.bit_offsets % geometry.page_bits
        self.unit_minus = (rows * 2) * ppr + slot
        self.unit_plus = (rows * 2 + 1) * ppr + slot
        self.n_units = geometry.rows_total * 2 * ppr
        units = np.arange(self.n_units)
        self.unit_slot = units % ppr
        side = np.where((units // ppr) % 2 == 0, -1, 1)
        self.unit_row = units // (2 * ppr)
        self.unit_victim_row = self.unit_row + side
        self.unit_attacker_row = self.unit_row - side
        self.unit_valid = ((self.unit_victim_row >= 0)
                           & (self.unit_victim_row < geometry.rows_total)
                           & (self.unit_attacker_row >= 0)
                           & (self.unit_attacker_row < geometry.rows_total))
        # flat weight-bit id aligned with each cell, per victim page
        self.bit_ids = np.stack([address_map.page_bit_ids(pp)[inpage]
                                 for pp in range(address_map.n_pages)]) \
            if address_map.n_pages else np.zeros((0, rows.size), dtype=int)

    def unit(self, target_row, side, slot):
        return ((target_row * 2 + (0 if side < 0 else 1))
                * self.geometry.pages_per_row + slot)

    def scores(self, page, informative):
        """Number of informative bits each unit can leak from `page`"""
        ids = self.bit_ids[page]
        hit = (ids >= 0) & informative[np.maximum(ids, 0)]
        score = (np.bincount(self.unit_minus, weights=hit,
                             minlength=self.n_units)
                 + np.bincount(self.unit_plus, weights=hit,
                               minlength=self.n_units))
        score[~self.unit_valid] = 0
        return score

    def cell_offsets(self, target_row, slot, page):
        """Row bit offsets of the cells that align with weight bits"""
        lo = self.template._row_ptr[target_row]
        hi = self.template._row_ptr[target_row + 1]
        offsets = self.template.bit_offsets[lo:hi]
        ids = self.bit_ids[page, lo:hi]
        sel = (offsets // self.geometry.page_bits == slot) & (ids >= 0)
        return offsets[sel]


#: one hammering target of a round
Target = collections.namedtuple("Target", ["target_row",
                                           "victim_aggressor_row",
                                           "attacker_aggressor_row",
                                           "slot",
                                           "victim_page",
                                           "cell_offsets"])

#: frames released on one anchor and the victim pages they receive
Batch = collections.namedtuple("Batch", ["anchor", "tags", "massage",
                                         "expected"])

#: summary of an executed round
RoundStats = collections.namedtuple("RoundStats", ["round",
                                                   "rows_hammered",
                                                   "bits_learned",
                                                   "seconds"])


class RoundPlan(object):
    def __init__(self, targets, placements, strategy, used_rows, geometry):
        """Targets and victim page placements of one round

        Parameters
        ----------
        targets: list of Target
            Hammering targets in execution order
        placements: dict
            Intended frame (PhysPageId) of each targeted weight page
        strategy: Strategy
        used_rows: set of int
            Rows that take a role in this round
        geometry: bitleak.dram.DramGeometry
        """
        self.targets = list(targets)
        self.placements = dict(placements)
        self.strategy = Strategy(strategy)
        self.used_rows = set(used_rows)
        self.geometry = geometry
        self.batches = None

    def __repr__(self):
        return "RoundPlan({} targets on {} pages, {})".format(
            len(self.targets), len(self.placements), self.strategy.value)

    @property
    def release_order(self):
        """All released frames in release order"""
        if self.batches is None:
            return []
        order = []
        for batch in self.batches:
            order += batch.massage.release_order()
        return order

    def _spare_frames(self):
        for row in range(self.geometry.rows_total):
            if row not in self.used_rows:
                for slot in range(self.geometry.pages_per_row):
                    yield PhysPageId(row, slot)

    def schedule(self, trace, capacity):
        """Split the victim's allocation bursts into massage batches

        Every page the victim allocates during the inference needs a
        released frame: targeted weight pages get their planned frame,
        all other pages get spare frames from rows without a role.
        Bursts longer than `capacity` are split.

        Raises
        ------
        bitleak.memsys.PlanError
            If the rows without a role do not provide enough frames
        """
        spare = self._spare_frames()

        def next_spare():
            pid = next(spare, None)
            if pid is None:
                raise PlanError("Not enough spare frames outside the {} "
                                "rows used by this round!".format(
                                    len(self.used_rows)))
            return pid

        batches = []
        for event in trace.kernel_events():
            accesses = event.page_accesses
            for start in range(0, len(accesses), capacity):
                tags = accesses[start:start + capacity]
                expected = {}
                secret = []
                filler = []
                for tag in tags:
                    if tag.kind == PageKind.SECRET:
                        pid = self.placements.get(tag.logical_index)
                        if pid is None:
                            pid = next_spare()
                        secret.append(pid)
                    else:
                        pid = next_spare()
                        filler.append(pid)
                    expected[tag] = pid
                kinds = [tag.kind for tag in tags]
                n_before = (kinds.index(PageKind.SECRET)
                            if PageKind.SECRET in kinds else len(kinds))
                massage = MassagePlan(P_b=n_before,
                                      P_s=len(secret),
                                      P_i=len(filler) - n_before,
                                      leakable_ids=secret[::-1],
                                      filler_ids=filler[::-1],
                                      pattern=kinds)
                anchor = "{}({})".format(event.anchor.value, event.layer)
                batches.append(Batch(anchor, tags, massage, expected))
        self.batches = batches
        return batches


def plan_round(template, ledger, address_map, strategy, rng, probes=None):
    """Choose the hammering targets of one round

    Every weight page (in random order) gets at most one placement
    next to a target row drawn uniformly from the rows whose cells
    align with informative bits of that page; the row on the far side
    of the placement is used as a second target when it is informative
    too. Under MSB priority only unknown MSBs are informative,
    otherwise every unknown bit is.

    Raises
    ------
    LeakExhaustedError
        If no templated cell aligns with an informative bit
    """
    strategy = Strategy(strategy)
    if probes is None:
        probes = ProbeTable(template, address_map)
    geometry = template.geometry
    informative = ~ledger.known
    if strategy == Strategy.MSB_PRIORITY:
        informative = informative & (np.arange(8) == 7)
    informative = informative.ravel()
    scores = [probes.scores(pp, informative)
              for pp in range(address_map.n_pages)]
    if not any(np.any(sc > 0) for sc in scores):
        raise LeakExhaustedError("No informative target rows remain!")
    candidate_row = np.zeros(geometry.rows_total, dtype=bool)
    for sc in scores:
        candidate_row[probes.unit_row[sc > 0]] = True
    victim_row = np.zeros(geometry.rows_total, dtype=bool)
    used_row = np.zeros(geometry.rows_total, dtype=bool)
    targets = []
    placements = {}
    for page in rng.permutation(address_map.n_pages).tolist():
        sc = scores[page]
        cand = np.flatnonzero(sc > 0)
        ok = (~used_row[probes.unit_victim_row[cand]]
              & ~victim_row[probes.unit_row[cand]]
              & ~victim_row[probes.unit_attacker_row[cand]])
        cand = cand[ok]
        if cand.size == 0:
            continue
        preferred = cand[~candidate_row[probes.unit_victim_row[cand]]]
        if preferred.size:
            cand = preferred
        unit = cand[rng.integers(cand.size)]
        trow = int(probes.unit_row[unit])
        vrow = int(probes.unit_victim_row[unit])
        arow = int(probes.unit_attacker_row[unit])
        slot = int(probes.unit_slot[unit])
        targets.append(Target(trow, vrow, arow, slot, page,
                              probes.cell_offsets(trow, slot, page)))
        victim_row[vrow] = True
        used_row[[vrow, trow, arow]] = True
        placements[page] = PhysPageId(vrow, slot)
        # the row on the other side of the victim page
        side = vrow - trow
        trow2 = vrow + side
        arow2 = trow2 + side
        if 0 <= trow2 < geometry.rows_total:
            unit2 = probes.unit(trow2, -side, slot)
            if (probes.unit_valid[unit2] and sc[unit2] > 0
                    and not victim_row[trow2] and not victim_row[arow2]):
                targets.append(Target(trow2, vrow, arow2, slot, page,
                                      probes.cell_offsets(trow2, slot, page)))
                used_row[[trow2, arow2]] = True
    return RoundPlan(targets, placements, strategy,
                     np.flatnonzero(used_row).tolist(), geometry)


def execute_round(plan, template, pool, victim, ledger, cost_model,
                  round_index=1, miss_prob=0.0, rng=None,
                  non_secret_between=0):
    """Run one planned round and record the leaked bits

    Targets whose victim page did not land on the planned frame are
    skipped with a warning. With `miss_prob` > 0 only observed flips
    are conclusive.

    Returns
    -------
    stats: RoundStats
    """
    if plan.batches is None:
        plan.schedule(run_inference_trace(victim, non_secret_between),
                      pool.pageset.capacity)
    pool.exhaust_memory(ret_pages=False)
    contents = victim.page_contents()
    placed = {}
    for batch in plan.batches:
        pool.batched_massage(batch.anchor, batch.massage)
        got = pool.allocate_for_victim(batch.tags, contents=contents)
        for tag, pid in zip(batch.tags, got):
            if tag.kind == PageKind.SECRET:
                placed[tag.logical_index] = pid
    page_bits = template.geometry.page_bits
    rows_hammered = 0
    learned = 0
    for target in plan.targets:
        page = target.victim_page
        if placed.get(page) != plan.placements[page]:
            warnings.warn("Victim page {} landed on {} instead of {}; "
                          "skipping target row {}.".format(
                              page, placed.get(page), plan.placements[page],
                              target.target_row))
            continue
        offsets = np.asarray(target.cell_offsets, dtype=np.int64)
        trow = target.target_row
        row_offsets, row_dirs = template.cells_in_row(trow)
        dirs = row_dirs[np.searchsorted(row_offsets, offsets)]
        z2o = dirs == FlipDirection.ZERO_TO_ONE
        tbits = pool.read_row(trow)
        abits = pool.read_row(target.attacker_aggressor_row)
        tbits[offsets] = np.where(z2o, 0, 1)
        abits[offsets] = np.where(z2o, 1, 0)
        pool.write_row(target.attacker_aggressor_row, abits)
        upper = pool.read_row(trow - 1)
        lower = pool.read_row(trow + 1)
        flipped = hammer(tbits, upper, lower, trow, template,
                         miss_prob=miss_prob, rng=rng)
        pool.write_row(trow, tbits)
        rows_hammered += 1
        flip = np.isin(offsets, list(flipped))
        # 0->1 cells flip on a victim 1, 1->0 cells on a victim 0
        value = np.where(z2o, flip, ~flip).astype(np.uint8)
        conclusive = flip if miss_prob > 0 else np.ones_like(flip)
        ids = victim.address_map.page_bit_ids(page)[offsets % page_bits]
        ids = ids[conclusive]
        learned += ledger.record_many(ids // 8, ids % 8, value[conclusive],
                                      round_index)
    return RoundStats(round_index, rows_hammered, learned,
                      cost_model.round_seconds(rows_hammered))


class AttackConfig(object):
    def __init__(self, rounds, strategy=Strategy.MSB_PRIORITY,
                 cost_model=None, seed=0, miss_prob=0.0,
                 pageset_capacity=512, non_secret_between=0, verify=False):
        """Parameters of a multi-round attack

        Parameters
        ----------
        rounds: int
            Maximum number of rounds
        strategy: Strategy or str
        cost_model: CostModel or None
            Defaults to the cost model of `strategy`
        seed: int
            Seed of target selection and flip misses
        miss_prob: float
            Probability that an eligible flip does not happen
        pageset_capacity: int
            Capacity of the per-cpu pageset
        non_secret_between: int
            Non-secret victim pages before each weight page
        verify: bool
            Check the ledger against the victim after every round
        """
        if rounds < 0:
            raise ValueError("`rounds` must be non-negative, got {}!".format(
                rounds))
        self.rounds = int(rounds)
        self.strategy = Strategy(strategy)
        if cost_model is None:
            cost_model = CostModel(strategy=self.strategy)
        self.cost_model = cost_model
        self.seed = seed
        self.miss_prob = float(miss_prob)
        self.pageset_capacity = int(pageset_capacity)
        self.non_secret_between = int(non_secret_between)
        self.verify = verify


def run_attack(config, template, victim):
    """Leak victim weight bits over several rounds

    The attack stops early when no informative row is left, and with
    a warning when a round finds too few spare frames for the victim's
    other pages.

    Parameters
    ----------
    config: AttackConfig
    template: bitleak.dram.TemplateMap
    victim: bitleak.victim.VictimModel

    Returns
    -------
    ledger: LeakLedger
    curve: RecoveryCurve
    """
    ledger = LeakLedger(victim.layer_shapes)
    curve = RecoveryCurve(n_layers=len(victim.layers))
    if config.rounds == 0:
        return ledger, curve
    pool = PagePool(template.geometry,
                    pageset_capacity=config.pageset_capacity,
                    log_events=False)
    victim.place(pool)
    rng = np.random.default_rng(config.seed)
    probes = ProbeTable(template, victim.address_map)
    trace = run_inference_trace(victim, config.non_secret_between)
    seconds = 0.0
    for rr in range(1, config.rounds + 1):
        try:
            plan = plan_round(template, ledger, victim.address_map,
                              config.strategy, rng, probes=probes)
        except LeakExhaustedError:
            logger.info("No informative rows left after %d rounds.", rr - 1)
            break
        try:
            plan.schedule(trace, pool.pageset.capacity)
        except PlanError as e:
            warnings.warn("Stopping after {} rounds: {}".format(rr - 1, e))
            break
        stats = execute_round(plan, template, pool, victim, ledger,
                              config.cost_model, round_index=rr,
                              miss_prob=config.miss_prob, rng=rng)
        seconds += stats.seconds
        curve.append(rr, ledger, seconds)
        if config.verify:
            from . import integrity_check
            integrity_check.check_ledger(ledger, victim)
        logger.debug("round %d: %d rows hammered, %d new bits",
                     rr, stats.rows_hammered, stats.bits_learned)
    if len(curve):
        logger.info("%s attack: MSB fraction %.3f after %d rounds",
                    config.strategy.value, curve.msb[-1], len(curve))
    return ledger, curve
