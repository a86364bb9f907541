"""Execution core: rounds, trace recording, and workspace accounting.

A program is an imperative composition of runtime calls.  Scan phases read
every cell of the current array exactly once and write exactly one output
record per read; arrange phases (shuffle / network sort / compaction) touch
cells along a comparator schedule that depends only on the array length.
Every server access is appended to the trace; the client-side word budget is
charged per held record plus program state.

Client uploads of input arrays and the final download of results are not
traced: they cross the outsourcing boundary once and are not algorithm
accesses.  Within an arrange phase all events carry the SHUFFLE kind,
including the writes that install padding cells for the power-of-two network.
"""
from __future__ import annotations

import numpy as np

from .cells import Schema, ServerArray, make_store, nonce_stream
from .errors import (RoundDisciplineError, SortKeyError, TraversalError,
                     WorkspaceOverflowError)
from .mix import derive
from .prims import Prp, padded_size, schedule_layers

READ, WRITE, SHUFFLE = 0, 1, 2
KIND_NAMES = {READ: "READ", WRITE: "WRITE", SHUFFLE: "SHUFFLE"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

SCAN, ARRANGE, EMIT = "scan", "arrange", "emit"


class PhaseTrace:
    __slots__ = ("index", "kind", "size", "label", "style", "counts",
                 "_kinds", "_idxs", "_chunks")

    def __init__(self, index, kind, size, label, full, style=""):
        self.index = index
        self.kind = kind
        self.size = size
        self.label = label
        self.style = style  # arrange phases: "sort" or "keyed"
        self.counts = [0, 0, 0]
        self._kinds = [] if full else None
        self._idxs = [] if full else None
        self._chunks = [] if full else None

    def event(self, kind, idx):
        self.counts[kind] += 1
        if self._kinds is not None:
            self._kinds.append(kind)
            self._idxs.append(idx)

    def events_interleaved(self, kinds, idxs):
        self.counts[SHUFFLE] += len(kinds)
        if self._chunks is not None:
            self._flush()
            self._chunks.append((np.asarray(kinds, dtype=np.int64),
                                 np.asarray(idxs, dtype=np.int64)))

    def _flush(self):
        if self._kinds:
            self._chunks.append((np.asarray(self._kinds, dtype=np.int64),
                                 np.asarray(self._idxs, dtype=np.int64)))
            self._kinds, self._idxs = [], []

    def packed(self):
        """(kind, index) int64 matrix for this phase (full mode only)."""
        if self._chunks is None:
            raise ValueError("trace was captured in counts mode")
        self._flush()
        if not self._chunks:
            return np.empty((0, 2), dtype=np.int64)
        ks = np.concatenate([c[0] for c in self._chunks])
        xs = np.concatenate([c[1] for c in self._chunks])
        return np.stack([ks, xs], axis=1)

    @property
    def total(self):
        return sum(self.counts)


class TraceLog:
    """Ordered record of server accesses, grouped by phase (round)."""

    def __init__(self, mode="full"):
        if mode not in ("full", "counts"):
            raise ValueError("trace mode must be 'full' or 'counts'")
        self.mode = mode
        self.phases: list[PhaseTrace] = []

    def begin_phase(self, kind, size, label="", style=""):
        ph = PhaseTrace(len(self.phases), kind, size, label,
                        self.mode == "full", style)
        self.phases.append(ph)
        return ph

    @property
    def total_events(self):
        return sum(p.total for p in self.phases)

    def scan_rounds(self):
        return [p for p in self.phases if p.kind in (SCAN, EMIT)]

    def packed(self):
        """(phase, kind, index) int64 matrix over the whole run."""
        parts = []
        for p in self.phases:
            m = p.packed()
            ph = np.full((len(m), 1), p.index, dtype=np.int64)
            parts.append(np.hstack([ph, m]))
        if not parts:
            return np.empty((0, 3), dtype=np.int64)
        return np.vstack(parts)

    def lines(self):
        for row in self.packed():
            yield f"{row[0]} {KIND_NAMES[int(row[1])]} {row[2]}"

    def structure(self):
        """Shape summary independent of index values."""
        return [(p.kind, p.size, tuple(p.counts)) for p in self.phases]


class Workspace:
    """Client private-memory accounting in abstract words.

    One word holds one name, counter, coordinate value, or tag.  A held record
    is charged at its schema word width; a compare-exchange holds two records
    plus loop state.  Output records under construction are streamed out and
    not charged.
    """

    def __init__(self, capacity):
        self.capacity = capacity
        self.in_use = 0
        self.peak = 0
        self.phase_peaks: list[int] = []

    def begin_phase(self):
        self.phase_peaks.append(0)

    def account(self, words):
        self.in_use = words
        if words > self.peak:
            self.peak = words
        if self.phase_peaks and words > self.phase_peaks[-1]:
            self.phase_peaks[-1] = words
        if words > self.capacity:
            raise WorkspaceOverflowError(
                f"workspace needs {words} words, capacity is {self.capacity}")


class RoundContext:
    """Single-touch read/write discipline for one scan round."""

    def __init__(self, arr, out_arr, phase):
        self.arr = arr
        self.out = out_arr
        self.phase = phase
        self._read = np.zeros(len(arr), dtype=bool)
        self._reads = 0
        self._writes = 0
        self._pending = 0

    def read_cell(self, index):
        if not 0 <= index < len(self.arr):
            raise RoundDisciplineError(
                f"read at index {index} outside [0, {len(self.arr)})",
                round_index=self.phase.index, cell_index=index)
        if self._read[index]:
            raise RoundDisciplineError(
                f"cell {index} read twice in round {self.phase.index}",
                round_index=self.phase.index, cell_index=index)
        if self._pending:
            raise RoundDisciplineError(
                "read issued before the previous item's output was written",
                round_index=self.phase.index, cell_index=index)
        self._read[index] = True
        self._reads += 1
        self._pending = 1
        self.phase.event(READ, index)
        return self.arr.read_row(index)

    def append_output(self, record):
        if not self._pending:
            raise RoundDisciplineError(
                "output appended without a matching read",
                round_index=self.phase.index, cell_index=self._writes)
        pos = self._writes
        self.out.write_row(pos, record)
        self._writes += 1
        self._pending = 0
        self.phase.event(WRITE, pos)
        return pos

    def finish(self):
        if self._pending:
            raise RoundDisciplineError(
                "round ended with a read not matched by an output",
                round_index=self.phase.index)
        if self._reads != len(self.arr):
            raise RoundDisciplineError(
                f"round read {self._reads} of {len(self.arr)} cells",
                round_index=self.phase.index)


def pack_key(plain, schema, keyspec):
    """Pack named int fields into one uint64 sort-key column."""
    total = sum(b for _, b in keyspec)
    if total > 62:
        raise SortKeyError(f"sort key too wide: {total} bits")
    key = np.zeros(len(plain), dtype=np.uint64)
    shift = total
    for field, bits in keyspec:
        if field not in schema.index:
            raise SortKeyError(f"sort key field {field!r} missing from schema {schema.name!r}")
        shift -= bits
        key |= plain[:, schema.index[field]] << np.uint64(shift)
    return key


def pack_key_record(rec, keyspec):
    key, shift = 0, sum(b for _, b in keyspec)
    for field, bits in keyspec:
        if field not in rec:
            raise SortKeyError(f"sort key field {field!r} missing from record")
        shift -= bits
        key |= (rec[field] & ((1 << bits) - 1)) << shift
    return key


def pad_record_for(schema, keyspec):
    rec = {f: 0 for f in schema.int_fields}
    for field, bits in keyspec:
        rec[field] = (1 << bits) - 1
    return rec


def _copy_into_padded(arr, m):
    store = arr.store.clone_empty(m)
    n = len(arr)
    if store.kind == "mask":
        st = arr.store
        store.cols[:n] = st.cols
        store.nonces[:n] = st.nonces
        store.check[:n] = st.check
        if st.wide is not None:
            store.wide[:n] = st.wide
    else:
        store.cells[:n] = list(arr.store.cells)
    return store


class Runtime:
    """One simulated client/server instance. Single-threaded; instances independent."""

    def __init__(self, seed, cipher="mask", trace_mode="full", capacity=10 ** 9):
        self.seed = int(seed) & ((1 << 64) - 1)
        self.cipher = cipher
        self.trace = TraceLog(trace_mode)
        self.ws = Workspace(capacity)
        self._nonces = nonce_stream(self.seed)
        self._cell_key = derive(self.seed, "cell-key")
        self._prp_counter = 0

    # -- client/server boundary (untraced) ------------------------------------

    def upload(self, schema, records, label="S") -> ServerArray:
        store = make_store(self.cipher, schema, self._cell_key, self._nonces, len(records))
        arr = ServerArray(store, label)
        for i, rec in enumerate(records):
            store.write_row(i, rec)
        return arr

    def download(self, arr, limit=None):
        n = len(arr) if limit is None else min(limit, len(arr))
        return [arr.store.read_row(i) for i in range(n)]

    def truncate(self, arr, n):
        return ServerArray(arr.store.truncated(n), arr.label)

    def fresh_prp(self, n) -> Prp:
        self._prp_counter += 1
        return Prp(derive(self.seed, "prp", self._prp_counter), n)

    # -- scan rounds -----------------------------------------------------------

    def scan_seq(self, arr, step, out_schema, state=None, label="scan"):
        return self._scan(arr, step, out_schema, state, label, order="seq")

    def scan_chain(self, arr, prp, start_tag, step, out_schema, state=None,
                   label="scan", next_field="next"):
        return self._scan(arr, step, out_schema, state, label,
                          order="chain", prp=prp, start_tag=start_tag,
                          next_field=next_field)

    def _scan(self, arr, step, out_schema, state, label, order,
              prp=None, start_tag=0, next_field="next"):
        n = len(arr)
        phase = self.trace.begin_phase(SCAN, n, label)
        self.ws.begin_phase()
        out = ServerArray(arr.store.clone_empty(n, out_schema), "O")
        ctx = RoundContext(arr, out, phase)
        state_words = state.words if state is not None else (lambda: 0)
        rec_words = arr.schema.words
        tag = start_tag
        for i in range(n):
            if order == "seq":
                idx = i
            else:
                if not 0 <= tag < prp.n:
                    raise TraversalError(f"next-chain points at unknown tag {tag}", tag=tag)
                idx = prp(tag)
            rec = ctx.read_cell(idx)
            self.ws.account(2 + rec_words + state_words())
            out_rec = step(rec, i)
            self.ws.account(2 + rec_words + state_words())
            ctx.append_output(out_rec)
            if order == "chain":
                tag = rec[next_field]
        ctx.finish()
        if order == "chain" and n and tag != start_tag:
            raise TraversalError(
                f"tour did not close: ended at tag {tag}, started at {start_tag}", tag=tag)
        return out

    def emit_known(self, out_schema, records, label="emit"):
        """Fixed write-only phase used by single-node short circuits."""
        phase = self.trace.begin_phase(EMIT, len(records), label)
        self.ws.begin_phase()
        out = ServerArray(
            make_store(self.cipher, out_schema, self._cell_key, self._nonces, len(records)), "O")
        for i, rec in enumerate(records):
            out.store.write_row(i, rec)
            phase.event(WRITE, i)
            self.ws.account(2 + out_schema.words)
        return out

    # -- arrange phases --------------------------------------------------------

    def sort(self, arr, keyspec, label="sort", key_of=None):
        """Network sort; access pattern is the comparator schedule for len(arr).

        keyspec packs named int fields most-significant first; key_of
        (record -> orderable) forces the boxed per-cell path and exists for
        the generic sort surface.
        """
        n = len(arr)
        phase = self.trace.begin_phase(ARRANGE, n, label, style="sort")
        self.ws.begin_phase()
        if n <= 1:
            return arr
        m = padded_size(n)
        store = _copy_into_padded(arr, m)
        pad = pad_record_for(arr.schema, keyspec or ())
        for i in range(n, m):
            store.write_row(i, pad)
            phase.event(SHUFFLE, i)
            self.ws.account(2 + arr.schema.words)
        padded = ServerArray(store, arr.label)
        if store.kind == "mask" and key_of is None:
            self._network_vector(padded, keyspec, phase)
        else:
            self._network_boxed(padded, keyspec, key_of, phase)
        return ServerArray(store.truncated(n), arr.label)

    def shuffle(self, arr, label="shuffle"):
        """Assign pi(position) to each cell, sort by it, strip the key column.

        The resulting arrangement places the record previously at position x
        at position pi(x).
        """
        n = len(arr)
        prp = self.fresh_prp(max(n, 1))
        keys = prp.eval_all() if n > 1 else None
        return self._keyed_rearrange(
            arr, lambda rec, i: int(keys[i]) if keys is not None else 0, label)[0]

    def arrange_by_tag(self, arr, tag_field="tag", label="lookup"):
        """Between-round rearrangement for tour scans.

        Assigns pi(tag) to every item and sorts by it; because the tags are a
        permutation of [0, len), the sorted array itself is the lookup table:
        the item carrying tag t sits at position pi(t).  Returns (array, prp).
        """
        n = len(arr)
        prp = self.fresh_prp(max(n, 1))
        arr2, _ = self._keyed_rearrange(
            arr, lambda rec, i: prp(rec[tag_field]), label)
        return arr2, prp

    def _keyed_rearrange(self, arr, key_fn, label):
        n = len(arr)
        phase = self.trace.begin_phase(ARRANGE, n, label, style="keyed")
        self.ws.begin_phase()
        if n <= 1:
            return arr, phase
        schema = arr.schema
        keyed = Schema(schema.name + "+k", schema.int_fields + ("_shufkey",),
                       schema.wide_fields, schema.wide_words, schema.max_wide_bytes)
        bits = max(1, n.bit_length())
        mid = ServerArray(arr.store.clone_empty(n, keyed), arr.label)
        for i in range(n):
            rec = arr.store.read_row(i)
            phase.event(SHUFFLE, i)
            self.ws.account(2 + keyed.words)
            rec["_shufkey"] = key_fn(rec, i)
            mid.store.write_row(i, rec)
            phase.event(SHUFFLE, i)
        m = padded_size(n)
        keyspec = (("_shufkey", bits),)
        store = _copy_into_padded(mid, m)
        pad = pad_record_for(keyed, keyspec)
        for i in range(n, m):
            store.write_row(i, pad)
            phase.event(SHUFFLE, i)
            self.ws.account(2 + keyed.words)
        padded = ServerArray(store, arr.label)
        if store.kind == "mask":
            self._network_vector(padded, keyspec, phase)
        else:
            self._network_boxed(padded, keyspec, None, phase)
        sorted_arr = ServerArray(store.truncated(n), arr.label)
        out = ServerArray(arr.store.clone_empty(n, schema), arr.label)
        for i in range(n):
            rec = sorted_arr.store.read_row(i)
            phase.event(SHUFFLE, i)
            self.ws.account(2 + keyed.words)
            rec.pop("_shufkey")
            out.store.write_row(i, rec)
            phase.event(SHUFFLE, i)
        return out, phase

    def _network_vector(self, arr, keyspec, phase):
        store = arr.store
        schema = arr.schema
        charge = 2 * schema.words + 2
        for ii, jj in schedule_layers(len(arr)):
            pi, wi = store.open_rows(ii)
            pj, wj = store.open_rows(jj)
            ki = pack_key(pi, schema, keyspec)
            kj = pack_key(pj, schema, keyspec)
            swap = ki > kj
            sw = swap[:, None]
            ni = np.where(sw, pj, pi)
            nj = np.where(sw, pi, pj)
            if wi is not None:
                nwi = np.where(sw, wj, wi)
                nwj = np.where(sw, wi, wj)
            else:
                nwi = nwj = None
            store.seal_rows(ii, ni, nwi)
            store.seal_rows(jj, nj, nwj)
            self.ws.account(charge)
            kinds = np.full(4 * len(ii), SHUFFLE, dtype=np.int64)
            idxs = np.stack([ii, jj, ii, jj], axis=1).ravel()
            phase.events_interleaved(kinds, idxs)

    def _network_boxed(self, arr, keyspec, key_of, phase):
        store = arr.store
        charge = 2 * arr.schema.words + 2
        for ii, jj in schedule_layers(len(arr)):
            for i, j in zip(ii.tolist(), jj.tolist()):
                a = store.read_row(i)
                b = store.read_row(j)
                if key_of is not None:
                    ka, kb = key_of(a), key_of(b)
                else:
                    ka, kb = pack_key_record(a, keyspec), pack_key_record(b, keyspec)
                try:
                    swap = ka > kb
                except TypeError as exc:
                    raise SortKeyError(f"non-comparable sort keys {ka!r} vs {kb!r}") from exc
                if swap:
                    a, b = b, a
                store.write_row(i, a)
                store.write_row(j, b)
                self.ws.account(charge)
                phase.events_interleaved([SHUFFLE] * 4, [i, j, i, j])
