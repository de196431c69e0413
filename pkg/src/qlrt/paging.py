"""Paged optimizer state: a budgeted page cache over a file backing store.

Optimizer moments are rarely all hot at once; this module simulates demand
paging for them.  State lives in fixed-size pages.  At most
``budget_bytes`` worth of pages is resident; touching a non-resident page
is a fault that reads it back from the backing file (or zero-fills it on
first touch), evicting least-recently-used pages as needed, with dirty
pages written back on eviction.

The pager is value-transparent: it moves bytes and never reinterprets
them, so any computation run through it is bit-identical to the same
computation over plain arrays.  Counters (faults, evictions, bytes moved,
peak residency) expose the traffic for reporting.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import dataclass

__all__ = ["PagerConfig", "StatePage", "Slab", "Pager", "pager_open", "with_page"]


@dataclass(frozen=True)
class PagerConfig:
    budget_bytes: int
    backing_path: str
    page_bytes: int = 4096

    def validate(self) -> None:
        if self.page_bytes < 1:
            raise ValueError("page_bytes must be >= 1")
        if self.budget_bytes < self.page_bytes:
            raise ValueError(
                f"budget ({self.budget_bytes}) must hold at least one page "
                f"({self.page_bytes})"
            )


@dataclass
class StatePage:
    page_id: int
    buf: bytearray
    dirty: bool = False


@dataclass(frozen=True)
class Slab:
    """A page-aligned byte range owned by one state tensor."""

    offset: int
    nbytes: int

    def pages(self, page_bytes: int) -> range:
        first = self.offset // page_bytes
        last = (self.offset + max(self.nbytes, 1) - 1) // page_bytes
        return range(first, last + 1)


class Pager:
    """LRU page cache over a backing file.  Not thread-safe by design; the
    toolkit runs single-threaded kernels."""

    def __init__(self, config: PagerConfig):
        config.validate()
        self.config = config
        self._resident: OrderedDict[int, StatePage] = OrderedDict()
        self._on_disk: set[int] = set()
        self._next_offset = 0
        self._file = open(config.backing_path, "w+b")
        self.faults = 0
        self.evictions = 0
        self.bytes_read = 0
        self.bytes_written = 0
        self.peak_resident_bytes = 0
        self._closed = False

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        self.flush()
        self._file.close()
        self._closed = True

    def flush(self) -> None:
        """Write every dirty resident page back (does not evict)."""
        for page in self._resident.values():
            if page.dirty:
                self._write_page(page)
                page.dirty = False

    def __enter__(self) -> "Pager":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- allocation --------------------------------------------------------

    def alloc(self, nbytes: int) -> Slab:
        """Reserve a page-aligned slab of ``nbytes``; contents start zeroed."""
        if nbytes < 1:
            raise ValueError("cannot allocate an empty slab")
        slab = Slab(offset=self._next_offset, nbytes=nbytes)
        n_pages = (nbytes + self.config.page_bytes - 1) // self.config.page_bytes
        self._next_offset += n_pages * self.config.page_bytes
        return slab

    @property
    def resident_bytes(self) -> int:
        return len(self._resident) * self.config.page_bytes

    @property
    def n_pages(self) -> int:
        return self._next_offset // self.config.page_bytes

    # -- paging machinery ----------------------------------------------------

    def _write_page(self, page: StatePage) -> None:
        self._file.seek(page.page_id * self.config.page_bytes)
        self._file.write(page.buf)
        self._on_disk.add(page.page_id)
        self.bytes_written += self.config.page_bytes

    def _evict_one(self) -> None:
        page_id, page = self._resident.popitem(last=False)
        if page.dirty:
            self._write_page(page)
        self.evictions += 1

    def _fault_in(self, page_id: int) -> StatePage:
        while self.resident_bytes + self.config.page_bytes > self.config.budget_bytes:
            self._evict_one()
        self.faults += 1
        buf = bytearray(self.config.page_bytes)
        if page_id in self._on_disk:
            self._file.seek(page_id * self.config.page_bytes)
            data = self._file.read(self.config.page_bytes)
            buf[: len(data)] = data
            self.bytes_read += self.config.page_bytes
        page = StatePage(page_id=page_id, buf=buf)
        self._resident[page_id] = page
        self.peak_resident_bytes = max(self.peak_resident_bytes, self.resident_bytes)
        return page

    def touch(self, page_id: int) -> StatePage:
        """Make a page resident and most recently used."""
        if self._closed:
            raise ValueError("pager is closed")
        page = self._resident.get(page_id)
        if page is None:
            page = self._fault_in(page_id)
        else:
            self._resident.move_to_end(page_id)
        return page

    # -- slab access ---------------------------------------------------------

    def with_slab(self, slab: Slab, fn) -> None:
        """Run ``fn(memoryview)`` over the slab's bytes and write the result
        back.  All touched pages become resident together, so the budget must
        cover the widest slab."""
        pb = self.config.page_bytes
        page_ids = list(slab.pages(pb))
        if len(page_ids) * pb > self.config.budget_bytes:
            raise ValueError(
                f"slab of {slab.nbytes} bytes spans {len(page_ids)} pages, "
                f"exceeding the budget of {self.config.budget_bytes} bytes"
            )
        pages = [self.touch(pid) for pid in page_ids]
        if len(pages) == 1:
            start = slab.offset - page_ids[0] * pb
            view = memoryview(pages[0].buf)[start : start + slab.nbytes]
            fn(view)
            pages[0].dirty = True
            return
        # gather, mutate, scatter for multi-page slabs
        merged = bytearray().join(bytes(p.buf) for p in pages)
        start = slab.offset - page_ids[0] * pb
        view = memoryview(merged)[start : start + slab.nbytes]
        fn(view)
        for i, page in enumerate(pages):
            page.buf[:] = merged[i * pb : (i + 1) * pb]
            page.dirty = True


def pager_open(config: PagerConfig) -> Pager:
    """Open (creating or truncating) a pager over its backing file."""
    directory = os.path.dirname(config.backing_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return Pager(config)


def with_page(pager: Pager, page_id: int, fn) -> None:
    """Run ``fn(memoryview)`` against one whole page, marking it dirty."""
    page = pager.touch(page_id)
    fn(memoryview(page.buf))
    page.dirty = True
