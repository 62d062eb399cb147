"""Physical page pool, per-cpu pageset and victim page massaging

Single simulated CPU core: attacker and victim share one
:class:`PcpPageset`. The pool is a single-threaded state machine;
interleaving of attacker and victim is expressed by the order in
which its methods are called.
"""
import collections
import enum
import json
import pathlib

import numpy as np


class OwnershipError(BaseException):
    """Raised when a page is released by a process that does not own it"""
    pass


class OutOfMemoryError(BaseException):
    """Raised when no free page frame is left for an allocation"""
    pass


class PlanError(BaseException):
    """Raised when a page massaging plan cannot be realized"""
    pass


class Owner(enum.IntEnum):
    FREE = 0
    ATTACKER = 1
    VICTIM = 2
    OTHER = 3


class PageKind(enum.Enum):
    SECRET = "secret"
    NON_SECRET = "nonsecret"


#: physical page frame address
PhysPageId = collections.namedtuple("PhysPageId", ["row", "slot"])

#: victim page identity (allocation-order index and kind)
VictimPageTag = collections.namedtuple("VictimPageTag",
                                       ["logical_index", "kind"])

#: snapshot of a page frame
PageFrame = collections.namedtuple("PageFrame", ["id", "owner", "tag"])


class PcpPageset(object):
    def __init__(self, capacity=512):
        """Bounded LIFO cache of recently freed page frames

        Parameters
        ----------
        capacity: int
            Maximum number of cached frames (512 frames of 4 KB
            correspond to 2 MB)
        """
        if capacity < 1:
            raise ValueError("`capacity` must be >= 1, got {}!".format(
                capacity))
        self.capacity = int(capacity)
        self._stack = []

    def __contains__(self, page):
        return page in self._stack

    def __iter__(self):
        """iterate from the oldest to the most recent entry"""
        return iter(list(self._stack))

    def __len__(self):
        return len(self._stack)

    @property
    def stack(self):
        """cached frames, most recent last"""
        return list(self._stack)

    def clear(self):
        """Remove and return all cached frames"""
        stack = self._stack
        self._stack = []
        return stack

    def pop(self):
        """Return the most recently pushed frame or `None`"""
        if self._stack:
            return self._stack.pop()
        return None

    def push(self, page):
        """Cache a freed frame

        If the pageset is full, the frame and the oldest half of the
        cached frames spill over to the global pool; the LIFO
        guarantee is lost for those frames.

        Returns
        -------
        spilled: list of PhysPageId
            Frames that went to the global pool
        """
        if len(self._stack) >= self.capacity:
            half = len(self._stack) // 2
            spilled = self._stack[:half] + [page]
            del self._stack[:half]
            return spilled
        self._stack.append(page)
        return []


class PagePool(object):
    def __init__(self, geometry, pageset_capacity=512, other_frames=(),
                 log_events=True):
        """Physical page frames of a simulated machine

        Parameters
        ----------
        geometry: bitleak.dram.DramGeometry
            Geometry that determines the frames (one frame per page)
        pageset_capacity: int
            Capacity of the per-cpu pageset
        other_frames: list of PhysPageId
            Frames owned by other processes (e.g. the kernel); they
            are never touched
        log_events: bool
            Record every operation in :attr:`events`
        """
        self.geometry = geometry
        self.pageset = PcpPageset(pageset_capacity)
        self._owner = np.full(geometry.pages_total, Owner.FREE,
                              dtype=np.int8)
        for pid in other_frames:
            self._owner[self.frame_index(pid)] = Owner.OTHER
        #: victim tags of victim-owned frames
        self._tags = {}
        self._frame_of_tag = {}
        #: page contents (frames missing here read as zeros)
        self._content = {}
        #: swapped-out victim pages
        self.swap = {}
        #: operation log
        self.events = []
        self.log_events = log_events
        self.tick = 0

    def __repr__(self):
        counts = np.bincount(self._owner, minlength=len(Owner))
        return "PagePool({} frames: {})".format(
            self._owner.size,
            ", ".join("{} {}".format(counts[o], o.name.lower())
                      for o in Owner))

    def _log(self, op, args, placements=()):
        if self.log_events:
            self.events.append({
                "tick": self.tick,
                "op": op,
                "args": args,
                "placements": [list(p) for p in placements],
            })
        self.tick += 1

    def frame_index(self, pid):
        """Linear frame index of a :data:`PhysPageId`"""
        row, slot = pid
        if not 0 <= slot < self.geometry.pages_per_row:
            raise IndexError("Slot {} out of range!".format(slot))
        if not 0 <= row < self.geometry.rows_total:
            raise IndexError("Row {} out of range!".format(row))
        return row * self.geometry.pages_per_row + slot

    def page_id(self, index):
        """:data:`PhysPageId` of a linear frame index"""
        row, slot = divmod(int(index), self.geometry.pages_per_row)
        return PhysPageId(row, slot)

    def frame(self, pid):
        idx = self.frame_index(pid)
        return PageFrame(pid, Owner(self._owner[idx]), self._tags.get(idx))

    def owner(self, pid):
        return Owner(self._owner[self.frame_index(pid)])

    def frames_owned(self, owner):
        """All frames of one owner in ascending order"""
        return [self.page_id(ii) for ii in
                np.flatnonzero(self._owner == owner)]

    def owner_counts(self):
        return {o: int(np.count_nonzero(self._owner == o)) for o in Owner}

    def row_owners(self, row):
        start = row * self.geometry.pages_per_row
        return self._owner[start:start + self.geometry.pages_per_row]

    def placement(self, tag):
        """Frame currently holding a victim page (or `None`)"""
        idx = self._frame_of_tag.get(tag)
        return None if idx is None else self.page_id(idx)

    def read_page(self, pid):
        idx = self.frame_index(pid)
        if idx in self._content:
            return self._content[idx].copy()
        return np.zeros(self.geometry.page_size_bytes, dtype=np.uint8)

    def write_page(self, pid, data):
        data = np.asarray(data, dtype=np.uint8)
        if data.shape != (self.geometry.page_size_bytes,):
            raise ValueError("Page data must have {} bytes!".format(
                self.geometry.page_size_bytes))
        self._content[self.frame_index(pid)] = data.copy()

    def read_row(self, row):
        """Bits of a physical row (MSB of each byte first)"""
        data = [self.read_page(PhysPageId(row, ss))
                for ss in range(self.geometry.pages_per_row)]
        return np.unpackbits(np.concatenate(data))

    def write_row(self, row, bits):
        """Write the bits of an attacker-owned row"""
        owners = self.row_owners(row)
        if np.any(owners != Owner.ATTACKER):
            raise OwnershipError(
                "Row {} is not entirely attacker-owned!".format(row))
        data = np.packbits(np.asarray(bits, dtype=np.uint8))
        size = self.geometry.page_size_bytes
        for ss in range(self.geometry.pages_per_row):
            self.write_page(PhysPageId(row, ss),
                            data[ss * size:(ss + 1) * size])

    def exhaust_memory(self, ret_pages=True):
        """Occupy all free and victim frames with attacker pages

        Victim pages are swapped out (contents preserved, physical
        binding cleared); the per-cpu pageset is drained.

        Parameters
        ----------
        ret_pages: bool
            Return the list of attacker-held frames

        Returns
        -------
        pages: list of PhysPageId
            All attacker-held frames (only if `ret_pages` is True)
        """
        victim = np.flatnonzero(self._owner == Owner.VICTIM)
        for idx in victim.tolist():
            tag = self._tags.pop(idx)
            del self._frame_of_tag[tag]
            content = self._content.pop(idx, None)
            if content is None:
                content = np.zeros(self.geometry.page_size_bytes,
                                   dtype=np.uint8)
            self.swap[tag] = content
        free = np.flatnonzero(self._owner == Owner.FREE)
        for idx in free.tolist():
            # freshly populated anonymous memory is zero
            self._content.pop(idx, None)
        self._owner[victim] = Owner.ATTACKER
        self._owner[free] = Owner.ATTACKER
        self.pageset.clear()
        self._log("exhaust_memory", {"free": int(free.size),
                                     "swapped": int(victim.size)})
        if ret_pages:
            return self.frames_owned(Owner.ATTACKER)

    def release_pages(self, ordered_ids):
        """Release attacker frames in the given order (munmap)

        Frames become free and are pushed onto the per-cpu pageset
        in order; frames that overflow the pageset go to the global
        pool.
        """
        indices = [self.frame_index(pid) for pid in ordered_ids]
        if len(set(indices)) != len(indices):
            raise ValueError("Duplicate frames in release order!")
        for pid, idx in zip(ordered_ids, indices):
            if self._owner[idx] != Owner.ATTACKER:
                raise OwnershipError(
                    "Frame {} is not attacker-owned ({})!".format(
                        tuple(pid), Owner(self._owner[idx]).name))
        spilled = []
        for pid, idx in zip(ordered_ids, indices):
            self._owner[idx] = Owner.FREE
            self._content.pop(idx, None)
            spilled += self.pageset.push(PhysPageId(*pid))
        self._log("release_pages", {"count": len(indices),
                                    "spilled": len(spilled)},
                  ordered_ids)

    def allocate_for_victim(self, tags, n=None, contents=None):
        """Allocate frames for victim pages

        Frames are taken from the per-cpu pageset first (LIFO); if it
        is empty, the lowest free frame of the global pool is used.
        Pages present in swap are swapped in with their contents.

        Parameters
        ----------
        tags: list of VictimPageTag
            Victim pages in allocation order
        n: int or None
            Number of pages (must equal ``len(tags)`` if given)
        contents: dict or None
            Initial contents of pages that are neither resident nor
            in swap (keyed by tag)

        Returns
        -------
        placements: list of PhysPageId
            Frames in allocation order
        """
        tags = list(tags)
        if n is not None and n != len(tags):
            raise ValueError("`n` ({}) does not match the number of "
                             "tags ({})!".format(n, len(tags)))
        if contents is None:
            contents = {}
        placements = []
        for tag in tags:
            if tag in self._frame_of_tag:
                raise ValueError("Victim page {} is already resident!"
                                 .format(tag))
            pid = self.pageset.pop()
            if pid is None:
                free = np.flatnonzero(self._owner == Owner.FREE)
                if free.size == 0:
                    raise OutOfMemoryError(
                        "No free frame for victim page {}!".format(tag))
                idx = int(free[0])
                pid = self.page_id(idx)
            else:
                idx = self.frame_index(pid)
            self._owner[idx] = Owner.VICTIM
            self._tags[idx] = tag
            self._frame_of_tag[tag] = idx
            if tag in self.swap:
                self._content[idx] = self.swap.pop(tag)
            elif tag in contents:
                self._content[idx] = np.array(contents[tag], dtype=np.uint8)
            else:
                self._content.pop(idx, None)
            placements.append(pid)
        self._log("allocate_for_victim", {"count": len(tags)}, placements)
        return placements

    def batched_massage(self, anchor_event, plan):
        """Release frames on an anchor event for the next victim burst

        Parameters
        ----------
        anchor_event: object
            Victim event that triggered the release (logged as text)
        plan: MassagePlan

        Returns
        -------
        release_order: list of PhysPageId
        """
        if len(self.pageset) + plan.total > self.pageset.capacity:
            raise PlanError(
                "Releasing {} frames overflows the pageset ({} cached, "
                "capacity {}); split the burst across more anchors!"
                .format(plan.total, len(self.pageset),
                        self.pageset.capacity))
        if plan.filler_ids is None:
            fillers = self._default_fillers(plan.n_filler,
                                            exclude=plan.leakable_ids)
        else:
            fillers = plan.filler_ids
        order = plan.release_order(fillers)
        self.release_pages(order)
        self._log("batched_massage", {"anchor": str(anchor_event),
                                      "P_b": plan.P_b,
                                      "P_s": plan.P_s,
                                      "P_i": plan.P_i},
                  order)
        return order

    def _default_fillers(self, count, exclude=()):
        """Lowest attacker frames that are not in `exclude`"""
        exclude = {self.frame_index(pid) for pid in exclude}
        fillers = []
        for idx in np.flatnonzero(self._owner == Owner.ATTACKER).tolist():
            if len(fillers) == count:
                break
            if idx not in exclude:
                fillers.append(self.page_id(idx))
        # fillers are given in release order
        return fillers[::-1]

    def write_event_log(self, path):
        """Write one JSON line per operation (tick, op, args, placements)"""
        lines = [json.dumps(ev) for ev in self.events]
        pathlib.Path(path).write_text("\n".join(lines) + "\n")


class MassagePlan(object):
    def __init__(self, P_b, P_s, P_i, leakable_ids, filler_ids=None,
                 pattern=None):
        """Page release plan for one anchor event

        Parameters
        ----------
        P_b: int
            Non-secret pages the victim allocates before the first
            secret page
        P_s: int
            Secret pages
        P_i: int
            Non-secret pages allocated between secret pages
        leakable_ids: list of PhysPageId
            Frames for the secret pages, in release order (secret page
            k of the burst lands on ``leakable_ids[P_s - 1 - k]``)
        filler_ids: list of PhysPageId or None
            Frames for the non-secret pages, in release order; if
            `None`, the lowest attacker frames are used
        pattern: list of PageKind or None
            Explicit victim allocation pattern; by default the `P_i`
            pages are spread evenly over the gaps between secret pages
        """
        self.P_b = int(P_b)
        self.P_s = int(P_s)
        self.P_i = int(P_i)
        if min(self.P_b, self.P_s, self.P_i) < 0:
            raise ValueError("Page counts must be non-negative!")
        self.leakable_ids = list(leakable_ids)
        if len(self.leakable_ids) < self.P_s:
            raise PlanError("{} secret pages but only {} leakable frames!"
                            .format(self.P_s, len(self.leakable_ids)))
        self.filler_ids = None if filler_ids is None else list(filler_ids)
        if self.filler_ids is not None and len(self.filler_ids) < \
                self.n_filler:
            raise PlanError("{} non-secret pages but only {} filler frames!"
                            .format(self.n_filler, len(self.filler_ids)))
        if pattern is not None:
            pattern = list(pattern)
            n_secret = sum(1 for p in pattern if p == PageKind.SECRET)
            if len(pattern) != self.total or n_secret != self.P_s:
                raise PlanError("Access pattern does not match page counts!")
        self.pattern = pattern

    @property
    def n_filler(self):
        return self.P_b + self.P_i

    @property
    def total(self):
        return self.P_b + self.P_s + self.P_i

    def access_pattern(self):
        """Page kinds in victim allocation order"""
        if self.pattern is not None:
            return list(self.pattern)
        pattern = [PageKind.NON_SECRET] * self.P_b
        gaps = max(self.P_s - 1, 0)
        if gaps:
            per_gap = [self.P_i // gaps + (1 if ii < self.P_i % gaps else 0)
                       for ii in range(gaps)]
        else:
            per_gap = []
        for ii in range(self.P_s):
            pattern.append(PageKind.SECRET)
            if ii < gaps:
                pattern += [PageKind.NON_SECRET] * per_gap[ii]
        if not gaps:
            pattern += [PageKind.NON_SECRET] * self.P_i
        return pattern

    def release_order(self, filler_ids=None):
        """Frames of this plan in release order

        Parameters
        ----------
        filler_ids: list of PhysPageId or None
            Filler frames in release order (overrides
            :attr:`filler_ids`)
        """
        if filler_ids is None:
            filler_ids = self.filler_ids
        if filler_ids is None:
            raise PlanError("No filler frames given!")
        return massage_release_order(self.access_pattern(),
                                     self.leakable_ids, filler_ids)


def massage_release_order(pattern, leakable_ids, filler_ids):
    """Release order that places a victim burst under LIFO replay

    Parameters
    ----------
    pattern: list of PageKind
        Victim allocation order
    leakable_ids, filler_ids: list of PhysPageId
        Frames for secret and non-secret pages, each in release order

    Returns
    -------
    order: list of PhysPageId
    """
    n_secret = sum(1 for p in pattern if p == PageKind.SECRET)
    n_filler = len(pattern) - n_secret
    secret = list(leakable_ids[:n_secret])[::-1]
    filler = list(filler_ids[:n_filler])[::-1]
    if len(secret) < n_secret or len(filler) < n_filler:
        raise PlanError("Not enough frames for the access pattern!")
    placements = []
    for kind in pattern:
        if kind == PageKind.SECRET:
            placements.append(secret.pop(0))
        else:
            placements.append(filler.pop(0))
    return placements[::-1]


def exhaust_memory(pool):
    """Occupy all free and victim frames (see :func:`PagePool.exhaust_memory`)"""
    return pool.exhaust_memory()


def release_pages(pool, ordered_ids):
    """Release frames in order (see :func:`PagePool.release_pages`)"""
    pool.release_pages(ordered_ids)


def allocate_for_victim(pool, tags, n=None):
    """Place victim pages (see :func:`PagePool.allocate_for_victim`)"""
    return pool.allocate_for_victim(tags, n=n)


def batched_massage(pool, anchor_event, plan):
    """Anchor-triggered release (see :func:`PagePool.batched_massage`)"""
    return pool.batched_massage(anchor_event, plan)
