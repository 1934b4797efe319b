"""Order-preserving key encoding.

Layout of a plain key::

    tid(4, big-endian) | value | value | ...

Each value carries a one-byte tag so keys decode without a catalog:

    0x10 int   -> 8 bytes big-endian of (v + 2**63)
    0x20 text  -> utf-8 with 0x00 escaped as 0x00 0xFF, terminated by 0x00 0x01
    0x30 table -> 4-byte table id of a nested (prefixed) row

A prefixed key is a plain key of the old table followed by a 0x30 marker,
the new table id and the remaining new-table pk values. All keys sharing an
old key as byte prefix form that key's *prefix group*.
"""

from __future__ import annotations

import struct
from typing import NamedTuple, Sequence

Key = bytes

TAG_INT = 0x10
TAG_TEXT = 0x20
TAG_TABLE = 0x30

_INT_OFFSET = 1 << 63
_MAX_TID = (1 << 32) - 1
_TEXT_END = b"\x00\x01"

_pack_tid = struct.Struct(">I").pack
_pack_u64 = struct.Struct(">Q").pack
_unpack_tid = struct.Struct(">I").unpack_from
_unpack_u64 = struct.Struct(">Q").unpack_from


class EncodingError(ValueError):
    pass


class ColocationUnsupported(EncodingError):
    """The new table's pk does not start with the old table's pk."""


class DecodedKey(NamedTuple):
    table_id: int
    pk: tuple
    sub_table_id: int | None = None
    sub_pk: tuple = ()

    @property
    def prefixed(self) -> bool:
        return self.sub_table_id is not None


def _tid(table_id: int) -> bytes:
    if not isinstance(table_id, int) or isinstance(table_id, bool) or not 0 <= table_id <= _MAX_TID:
        raise EncodingError(f"table id out of range: {table_id!r}")
    return _pack_tid(table_id)


def _value(v) -> bytes:
    if isinstance(v, bool):
        raise EncodingError("bool is not a key type")
    if isinstance(v, int):
        if not -_INT_OFFSET <= v < _INT_OFFSET:
            raise EncodingError(f"integer out of 64-bit range: {v}")
        return bytes((TAG_INT,)) + _pack_u64(v + _INT_OFFSET)
    if isinstance(v, str):
        return bytes((TAG_TEXT,)) + v.encode("utf-8").replace(b"\x00", b"\x00\xff") + _TEXT_END
    raise EncodingError(f"unsupported key value type: {type(v).__name__}")


def _check_types(pk: Sequence, types: Sequence[type] | None) -> None:
    if types is None:
        return
    if len(pk) != len(types):
        raise EncodingError(f"pk arity {len(pk)} does not match {len(types)}")
    for v, t in zip(pk, types):
        if not isinstance(v, t) or isinstance(v, bool):
            raise EncodingError(f"pk value {v!r} is not {t.__name__}")


def encode_prefix(table_id: int, values: Sequence = ()) -> Key:
    """Encode a table id and a (possibly partial) pk prefix."""
    return _tid(table_id) + b"".join(_value(v) for v in values)


def encode_key(table_id: int, pk: Sequence, types: Sequence[type] | None = None) -> Key:
    if not pk:
        raise EncodingError("empty primary key")
    _check_types(pk, types)
    return encode_prefix(table_id, pk)


def encode_prefixed_key(old_tid: int, old_pk: Sequence, new_tid: int, suffix: Sequence = ()) -> Key:
    if not old_pk:
        raise EncodingError("empty old primary key")
    return encode_prefix(old_tid, old_pk) + bytes((TAG_TABLE,)) + _tid(new_tid) + b"".join(
        _value(v) for v in suffix
    )


def check_colocation(old_pk: Sequence[str], new_pk: Sequence[str]) -> None:
    """Prefixed encoding needs the new pk to start with the old pk columns."""
    if tuple(new_pk[: len(old_pk)]) != tuple(old_pk):
        raise ColocationUnsupported(f"pk {tuple(new_pk)} does not start with {tuple(old_pk)}")


def nested_prefix(old_tid: int, old_pk: Sequence, new_tid: int, suffix: Sequence = ()) -> Key:
    """Prefix covering every prefixed key of ``new_tid`` under ``old_pk`` (old_pk may be partial)."""
    if len(old_pk) == 0:
        raise EncodingError("nested prefix needs at least one old pk value")
    return encode_prefixed_key(old_tid, old_pk, new_tid, suffix)


def prefix_end(prefix: Key) -> Key:
    """Smallest key greater than every key starting with ``prefix``."""
    b = bytearray(prefix)
    while b:
        if b[-1] != 0xFF:
            b[-1] += 1
            return bytes(b)
        b.pop()
    raise EncodingError("prefix has no upper bound")


def _decode_values(key: Key, pos: int) -> tuple[list, int]:
    out = []
    n = len(key)
    while pos < n:
        tag = key[pos]
        if tag == TAG_INT:
            if pos + 9 > n:
                raise EncodingError("truncated integer")
            out.append(_unpack_u64(key, pos + 1)[0] - _INT_OFFSET)
            pos += 9
        elif tag == TAG_TEXT:
            pos += 1
            buf = bytearray()
            while True:
                i = key.find(b"\x00", pos)
                if i < 0 or i + 1 >= n:
                    raise EncodingError("unterminated text")
                buf += key[pos:i]
                nxt = key[i + 1]
                pos = i + 2
                if nxt == 0x01:
                    break
                if nxt != 0xFF:
                    raise EncodingError("bad text escape")
                buf.append(0)
            out.append(buf.decode("utf-8"))
        elif tag == TAG_TABLE:
            break
        else:
            raise EncodingError(f"unknown tag 0x{tag:02x}")
    return out, pos


def decode_key(key: Key) -> DecodedKey:
    if len(key) < 4:
        raise EncodingError("key shorter than a table id")
    tid = _unpack_tid(key, 0)[0]
    pk, pos = _decode_values(key, 4)
    if pos == len(key):
        return DecodedKey(tid, tuple(pk))
    if pos + 5 > len(key):
        raise EncodingError("truncated nested table id")
    sub_tid = _unpack_tid(key, pos + 1)[0]
    sub_pk, end = _decode_values(key, pos + 5)
    if end != len(key):
        raise EncodingError("nested keys may not nest again")
    return DecodedKey(tid, tuple(pk), sub_tid, tuple(sub_pk))


def key_table(key: Key) -> int:
    return _unpack_tid(key, 0)[0]
