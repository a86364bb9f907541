"""Sealed cells and server arrays.

A server array holds fixed-width probabilistically sealed records.  Two
interchangeable cipher backends satisfy the same contract (fresh randomness
makes re-sealed cells byte-distinct, every cell in an array has one width,
corruption is detected deterministically on open):

* ``mask``  -- fast keystream masking with a keyed checksum, stored column-wise
  in numpy so sorting-network layers run vectorised.  This is the default
  simulation cipher.
* ``aead``  -- ChaCha20-Poly1305 over the serialized record, stored as boxed
  byte strings.  Slow path, real authenticated encryption.

Records are flat dicts: int fields are signed words; "wide" fields are tuples
of unbounded non-negative ints (used for exact rational coordinates) that are
packed into a single integer payload per field.
"""
from __future__ import annotations

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import SealAuthError, SealError
from .mix import (MASK64, derive, from_u64, pack_ints, splitmix64,
                  splitmix64_np, to_u64, unpack_ints)

_CHK_PRIME = (1 << 61) - 1
_WORD_LIMIT = 1 << 62


class Schema:
    """Field layout of one server array; fixes the sealed cell width."""

    __slots__ = ("name", "int_fields", "wide_fields", "wide_words",
                 "index", "wide_index", "max_wide_bytes", "words")

    def __init__(self, name, int_fields, wide_fields=(), wide_words=None,
                 max_wide_bytes=96):
        self.name = name
        self.int_fields = tuple(int_fields)
        self.wide_fields = tuple(wide_fields)
        self.wide_words = dict(wide_words or {})
        for f in self.wide_fields:
            self.wide_words.setdefault(f, 2)
        self.index = {f: i for i, f in enumerate(self.int_fields)}
        self.wide_index = {f: i for i, f in enumerate(self.wide_fields)}
        self.max_wide_bytes = max_wide_bytes
        self.words = len(self.int_fields) + sum(self.wide_words.values())

    def byte_width(self) -> int:
        return 8 * len(self.int_fields) + len(self.wide_fields) * (4 + self.max_wide_bytes)

    def __repr__(self):
        return f"Schema({self.name!r}, {len(self.int_fields)} ints, {len(self.wide_fields)} wide)"


def _field_salts(key, schema):
    return np.asarray([derive(key, "f", schema.name, i)
                       for i in range(len(schema.int_fields))], dtype=np.uint64)


def _chk_salts(key, schema):
    return np.asarray([derive(key, "c", schema.name, i)
                       for i in range(len(schema.int_fields))], dtype=np.uint64)


def _check_int_value(v):
    if not -_WORD_LIMIT < v < _WORD_LIMIT:
        raise SealError(f"field value {v} exceeds the cell word range")
    return v


def _encode_wide(value) -> int:
    if not isinstance(value, tuple):
        raise SealError("wide field values must be tuples of non-negative ints")
    return pack_ints(value)


class MaskStore:
    """Columnar masked store: the vectorised twin of the byte-level test cipher."""

    kind = "mask"

    def __init__(self, schema, key, nonce_iter, n):
        self.schema = schema
        self.key = key & MASK64
        self._nonce_iter = nonce_iter
        self.cols = np.zeros((n, len(schema.int_fields)), dtype=np.uint64)
        self.wide = (np.empty((n, len(schema.wide_fields)), dtype=object)
                     if schema.wide_fields else None)
        self.nonces = np.zeros(n, dtype=np.uint64)
        self.check = np.zeros(n, dtype=np.uint64)
        self._fsalt = _field_salts(self.key, schema)
        self._csalt = _chk_salts(self.key, schema)
        self._wsalt = [derive(self.key, "w", schema.name, i)
                       for i in range(len(schema.wide_fields))]
        self._chk_base = derive(self.key, "chk", schema.name)

    def __len__(self):
        return len(self.nonces)

    # -- single-cell path ----------------------------------------------------

    def _chk_plain(self, ints, wides, nonce):
        acc = nonce
        for j, v in enumerate(ints):
            acc = (acc + splitmix64(to_u64(v) ^ int(self._csalt[j]))) & MASK64
        for w in wides:
            acc = (acc + w % _CHK_PRIME) & MASK64
        return splitmix64(acc ^ self._chk_base)

    def write_row(self, i, record):
        sch = self.schema
        nonce = next(self._nonce_iter)
        ints = [_check_int_value(record.get(f, 0)) for f in sch.int_fields]
        wides = [_encode_wide(record.get(f, (0,))) for f in sch.wide_fields]
        self.nonces[i] = nonce
        for j, v in enumerate(ints):
            self.cols[i, j] = to_u64(v) ^ splitmix64(nonce ^ int(self._fsalt[j]))
        for j, w in enumerate(wides):
            self.wide[i, j] = w ^ splitmix64(nonce ^ self._wsalt[j])
        self.check[i] = self._chk_plain(ints, wides, nonce) ^ splitmix64(nonce ^ self._chk_base)

    def read_row(self, i):
        sch = self.schema
        nonce = int(self.nonces[i])
        ints = [from_u64(int(self.cols[i, j]) ^ splitmix64(nonce ^ int(self._fsalt[j])))
                for j in range(len(sch.int_fields))]
        wides = [int(self.wide[i, j]) ^ splitmix64(nonce ^ self._wsalt[j])
                 for j in range(len(sch.wide_fields))] if self.wide is not None else []
        stored = int(self.check[i]) ^ splitmix64(nonce ^ self._chk_base)
        if stored != self._chk_plain(ints, wides, nonce):
            raise SealAuthError(f"cell {i} of array {sch.name!r} failed authentication")
        rec = dict(zip(sch.int_fields, ints))
        for f, w in zip(sch.wide_fields, wides):
            rec[f] = unpack_ints(w)
        return rec

    # -- vectorised layer path (sorting network) ------------------------------

    def open_rows(self, idx):
        """Unmask and verify a batch of rows; returns (plain int cols, wide packed list)."""
        nz = self.nonces[idx]
        masks = splitmix64_np(nz[:, None] ^ self._fsalt[None, :])
        plain = self.cols[idx] ^ masks
        with np.errstate(over="ignore"):
            acc = nz.copy()
            for j in range(plain.shape[1]):
                acc += splitmix64_np(plain[:, j] ^ self._csalt[j])
        wides = None
        if self.wide is not None:
            wides = self.wide[idx].copy()
            for j, ws in enumerate(self._wsalt):
                wm = splitmix64_np(nz ^ np.uint64(ws))
                col = wides[:, j]
                for r in range(len(col)):
                    w = col[r] ^ int(wm[r])
                    col[r] = w
                    acc[r] = (int(acc[r]) + w % _CHK_PRIME) & MASK64
        chk = splitmix64_np(acc ^ np.uint64(self._chk_base))
        stored = self.check[idx] ^ splitmix64_np(nz ^ np.uint64(self._chk_base))
        bad = stored != chk
        if bad.any():
            raise SealAuthError(
                f"cell {int(np.asarray(idx)[int(np.argmax(bad))])} of array "
                f"{self.schema.name!r} failed authentication")
        return plain, wides

    def seal_rows(self, idx, plain, wides):
        """Reseal a batch of plaintext rows with fresh nonces."""
        k = len(idx)
        nz = np.asarray([next(self._nonce_iter) for _ in range(k)], dtype=np.uint64)
        self.nonces[idx] = nz
        masks = splitmix64_np(nz[:, None] ^ self._fsalt[None, :])
        self.cols[idx] = plain ^ masks
        with np.errstate(over="ignore"):
            acc = nz.copy()
            for j in range(plain.shape[1]):
                acc += splitmix64_np(plain[:, j] ^ self._csalt[j])
        if self.wide is not None:
            for j, ws in enumerate(self._wsalt):
                wm = splitmix64_np(nz ^ np.uint64(ws))
                for r in range(k):
                    w = wides[r, j]
                    acc[r] = (int(acc[r]) + w % _CHK_PRIME) & MASK64
                    self.wide[idx[r], j] = w ^ int(wm[r])
        self.check[idx] = (splitmix64_np(acc ^ np.uint64(self._chk_base))
                           ^ splitmix64_np(nz ^ np.uint64(self._chk_base)))

    def clone_empty(self, n, schema=None):
        return MaskStore(schema or self.schema, self.key, self._nonce_iter, n)

    def truncated(self, n):
        out = MaskStore(self.schema, self.key, self._nonce_iter, 0)
        out.cols = self.cols[:n].copy()
        out.wide = self.wide[:n].copy() if self.wide is not None else None
        out.nonces = self.nonces[:n].copy()
        out.check = self.check[:n].copy()
        return out

    def cell_bytes(self, i) -> bytes:
        """Byte view of one sealed cell (nonce, masked payload, masked check)."""
        parts = [int(self.nonces[i]).to_bytes(8, "big")]
        for j in range(self.cols.shape[1]):
            parts.append(int(self.cols[i, j]).to_bytes(8, "big"))
        if self.wide is not None:
            for j in range(self.wide.shape[1]):
                w = int(self.wide[i, j])
                raw = w.to_bytes(self.schema.max_wide_bytes, "big")
                parts.append(len(raw).to_bytes(4, "big") + raw)
        parts.append(int(self.check[i]).to_bytes(8, "big"))
        return b"".join(parts)


class AeadStore:
    """Boxed AEAD cells; one ChaCha20-Poly1305 ciphertext per record."""

    kind = "aead"

    def __init__(self, schema, key, nonce_iter, n):
        self.schema = schema
        self.key = key & MASK64
        self._nonce_iter = nonce_iter
        self._aead = ChaCha20Poly1305(derive(key, "aead0").to_bytes(8, "big")
                                      + derive(key, "aead1").to_bytes(8, "big")
                                      + derive(key, "aead2").to_bytes(8, "big")
                                      + derive(key, "aead3").to_bytes(8, "big"))
        self.cells: list[bytes | None] = [None] * n

    def __len__(self):
        return len(self.cells)

    def _encode(self, record):
        sch = self.schema
        parts = []
        for f in sch.int_fields:
            parts.append(to_u64(_check_int_value(record.get(f, 0))).to_bytes(8, "big"))
        for f in sch.wide_fields:
            w = _encode_wide(record.get(f, (0,)))
            raw = w.to_bytes((w.bit_length() + 7) // 8 or 1, "big")
            if len(raw) > sch.max_wide_bytes:
                raise SealError(f"wide field {f} exceeds {sch.max_wide_bytes} bytes")
            parts.append(len(raw).to_bytes(4, "big") + raw.rjust(sch.max_wide_bytes, b"\0"))
        return b"".join(parts)

    def _decode(self, raw):
        sch = self.schema
        rec, off = {}, 0
        for f in sch.int_fields:
            rec[f] = from_u64(int.from_bytes(raw[off:off + 8], "big"))
            off += 8
        for f in sch.wide_fields:
            off += 4
            rec[f] = unpack_ints(int.from_bytes(raw[off:off + sch.max_wide_bytes], "big"))
            off += sch.max_wide_bytes
        return rec

    def write_row(self, i, record):
        nonce = next(self._nonce_iter).to_bytes(12, "big", signed=False)
        self.cells[i] = nonce + self._aead.encrypt(nonce, self._encode(record), None)

    def read_row(self, i):
        cell = self.cells[i]
        try:
            raw = self._aead.decrypt(cell[:12], cell[12:], None)
        except (InvalidTag, ValueError, TypeError) as exc:
            raise SealAuthError(
                f"cell {i} of array {self.schema.name!r} failed authentication") from exc
        return self._decode(raw)

    def clone_empty(self, n, schema=None):
        out = AeadStore(schema or self.schema, self.key, self._nonce_iter, n)
        return out

    def truncated(self, n):
        out = AeadStore(self.schema, self.key, self._nonce_iter, 0)
        out.cells = self.cells[:n]
        return out

    def cell_bytes(self, i) -> bytes:
        return self.cells[i]


class ServerArray:
    """Sequence of sealed cells held by the simulated server."""

    __slots__ = ("store", "label")

    def __init__(self, store, label="S"):
        self.store = store
        self.label = label

    def __len__(self):
        return len(self.store)

    @property
    def schema(self):
        return self.store.schema

    def read_row(self, i):
        if not 0 <= i < len(self):
            raise IndexError(f"cell index {i} outside [0, {len(self)})")
        return self.store.read_row(i)

    def write_row(self, i, record):
        if not 0 <= i < len(self):
            raise IndexError(f"cell index {i} outside [0, {len(self)})")
        self.store.write_row(i, record)

    def records(self):
        return [self.store.read_row(i) for i in range(len(self))]

    def cell_bytes(self, i):
        return self.store.cell_bytes(i)


def make_store(kind, schema, key, nonce_iter, n):
    if kind == "mask":
        return MaskStore(schema, key, nonce_iter, n)
    if kind == "aead":
        return AeadStore(schema, key, nonce_iter, n)
    raise ValueError(f"unknown cipher kind {kind!r}")


def nonce_stream(seed):
    base = derive(seed, "nonce-base")
    c = 0
    while True:
        yield splitmix64(base + c)
        c += 1


class CellCodec:
    """seal/open surface over single cells, independent of any server array."""

    def __init__(self, schema, key, kind="mask", seed=0):
        self.schema = schema
        self.kind = kind
        self._store = make_store(kind, schema, key, nonce_stream(derive(seed, "codec")), 1)

    def seal(self, record) -> bytes:
        self._store.write_row(0, record)
        return self._store.cell_bytes(0)

    def open(self, cell: bytes) -> dict:
        if self.kind == "aead":
            saved = self._store.cells[0]
            self._store.cells[0] = cell
            try:
                return self._store.read_row(0)
            finally:
                self._store.cells[0] = saved
        return self._open_mask(cell)

    def _open_mask(self, cell: bytes) -> dict:
        sch = self.schema
        k = len(sch.int_fields)
        want = 8 + 8 * k + sum(4 + sch.max_wide_bytes for _ in sch.wide_fields) + 8
        if len(cell) != want:
            raise SealAuthError(f"cell has {len(cell)} bytes, expected {want}")
        st = self._store
        off = 0
        st.nonces[0] = int.from_bytes(cell[off:off + 8], "big"); off += 8
        for j in range(k):
            st.cols[0, j] = int.from_bytes(cell[off:off + 8], "big"); off += 8
        if st.wide is not None:
            for j in range(len(sch.wide_fields)):
                off += 4
                st.wide[0, j] = int.from_bytes(cell[off:off + sch.max_wide_bytes], "big")
                off += sch.max_wide_bytes
        st.check[0] = int.from_bytes(cell[off:off + 8], "big")
        return st.read_row(0)
