"""
.. module:: cbor
    :synopsis: canonical CBOR codec, restricted to the subset used by CTAP2

Supported items: unsigned and negative integers, byte strings, text strings,
arrays, maps and booleans. Floats, tags, null/undefined and indefinite
lengths are rejected in both directions.

Map keys are ordered the CTAP2 way: by major type, then by encoded length,
then bytewise. For keys of one major type this is length-first, bytewise
order.
"""

import logging
import struct

logger = logging.getLogger(__name__)

_MAX_UINT64 = 0xFFFFFFFFFFFFFFFF
_MAX_DEPTH = 32


class CborError(ValueError):
    """base class of every codec failure"""


class Malformed(CborError):
    """truncated input, invalid or unsupported major type / additional info"""


class NonCanonical(CborError):
    """well formed but not in CTAP2 canonical form"""


class NonCanonicalizable(CborError):
    """value cannot be given one canonical encoding (duplicate map keys)"""


class UnsupportedValue(CborError):
    """value contains a type outside the CTAP2 subset"""


def _dump_int(data, mt=0):
    if data < 0:
        mt = 1
        data = -1 - data
    if data > _MAX_UINT64:
        raise UnsupportedValue('integer out of 64-bit range')
    mt = mt << 5
    if data <= 23:
        args = ('>B', mt | data)
    elif data <= 0xFF:
        args = ('>BB', mt | 24, data)
    elif data <= 0xFFFF:
        args = ('>BH', mt | 25, data)
    elif data <= 0xFFFFFFFF:
        args = ('>BI', mt | 26, data)
    else:
        args = ('>BQ', mt | 27, data)
    return struct.pack(*args)


def _dump_bool(data):
    return b'\xf5' if data else b'\xf4'


def _dump_list(data, depth):
    return _dump_int(len(data), mt=4) + b''.join(_encode(x, depth + 1) for x in data)


def _sort_key(entry):
    key = entry[0]
    return key[0] >> 5, len(key), key


def _dump_dict(data, depth):
    for k in data:
        if type(k) not in (int, str):
            raise UnsupportedValue('map key of type %s' % type(k).__name__)
    items = [(_encode(k, depth + 1), _encode(v, depth + 1)) for k, v in data.items()]
    items.sort(key=_sort_key)
    for (k1, _), (k2, _) in zip(items, items[1:]):
        if k1 == k2:
            raise NonCanonicalizable('duplicate map key %r after encoding' % (k1,))
    return _dump_int(len(items), mt=5) + b''.join(k + v for (k, v) in items)


def _dump_bytes(data):
    return _dump_int(len(data), mt=2) + bytes(data)


def _dump_text(data):
    data_bytes = data.encode('utf8')
    return _dump_int(len(data_bytes), mt=3) + data_bytes


def _encode(data, depth):
    if depth > _MAX_DEPTH:
        raise UnsupportedValue('nesting deeper than %d' % _MAX_DEPTH)
    # bool before int: bool is an int subclass
    if isinstance(data, bool):
        return _dump_bool(data)
    if isinstance(data, int):
        return _dump_int(data)
    if isinstance(data, (bytes, bytearray, memoryview)):
        return _dump_bytes(bytes(data))
    if isinstance(data, str):
        return _dump_text(data)
    if isinstance(data, (list, tuple)):
        return _dump_list(data, depth)
    if isinstance(data, dict):
        return _dump_dict(data, depth)
    raise UnsupportedValue('unsupported CBOR value of type %s' % type(data).__name__)


def encode_cbor(value):
    """
    encode a value as CTAP2 canonical CBOR

    args:
        value: int, bool, bytes, str, list/tuple or dict built from those
    return:
        canonical encoding (shortest integers, definite lengths, sorted keys)
    """
    return _encode(value, 0)


def _read(data, offset, n):
    end = offset + n
    if end > len(data):
        raise Malformed('truncated input: need %d bytes at offset %d' % (n, offset))
    return data[offset:end], end


def _load_arg(ai, data, offset):
    """read the argument of an item header and check it is minimally encoded"""
    if ai < 24:
        return ai, offset
    if ai == 24:
        raw, offset = _read(data, offset, 1)
        value, floor = raw[0], 24
    elif ai == 25:
        raw, offset = _read(data, offset, 2)
        value, floor = struct.unpack('>H', raw)[0], 0x100
    elif ai == 26:
        raw, offset = _read(data, offset, 4)
        value, floor = struct.unpack('>I', raw)[0], 0x10000
    elif ai == 27:
        raw, offset = _read(data, offset, 8)
        value, floor = struct.unpack('>Q', raw)[0], 0x100000000
    elif ai == 31:
        raise Malformed('indefinite-length items are not supported')
    else:
        raise Malformed('invalid additional information %d' % ai)
    if value < floor:
        raise NonCanonical('integer argument %d not in shortest form' % value)
    return value, offset


def _decode_from(data, offset, depth):
    if depth > _MAX_DEPTH:
        raise Malformed('nesting deeper than %d' % _MAX_DEPTH)
    head, offset = _read(data, offset, 1)
    mt, ai = head[0] >> 5, head[0] & 0x1F

    if mt == 7:
        if ai == 20:
            return False, offset
        if ai == 21:
            return True, offset
        raise Malformed('unsupported simple value / float (0x%02x)' % head[0])
    if mt == 6:
        raise Malformed('tags are not supported')

    arg, offset = _load_arg(ai, data, offset)
    if mt == 0:
        return arg, offset
    if mt == 1:
        return -1 - arg, offset
    if mt == 2:
        raw, offset = _read(data, offset, arg)
        return bytes(raw), offset
    if mt == 3:
        raw, offset = _read(data, offset, arg)
        try:
            return bytes(raw).decode('utf8'), offset
        except UnicodeDecodeError:
            raise Malformed('text string is not valid UTF-8')
    if mt == 4:
        items = []
        for _ in range(arg):
            item, offset = _decode_from(data, offset, depth + 1)
            items.append(item)
        return items, offset

    # mt == 5
    result = {}
    previous = None
    for _ in range(arg):
        key_start = offset
        key, offset = _decode_from(data, offset, depth + 1)
        raw_key = bytes(data[key_start:offset])
        # bool is an int subclass; True and 1 would collide as dict keys
        if type(key) not in (int, str):
            raise Malformed('map keys must be integers or text strings')
        if previous is not None:
            order = _sort_key((raw_key,)), _sort_key((previous,))
            if raw_key == previous:
                raise NonCanonical('duplicate map key')
            if order[0] < order[1]:
                raise NonCanonical('map keys not in canonical order')
        previous = raw_key
        value, offset = _decode_from(data, offset, depth + 1)
        result[key] = value
    return result, offset


def decode_from(data, offset=0):
    """
    decode one item starting at ``offset``

    args:
        data: input bytes
        offset: start position
    return:
        (value, end offset of the item)
    """
    return _decode_from(memoryview(bytes(data)), offset, 0)


def decode_cbor(data):
    """
    strict decode of exactly one canonical item

    args:
        data: input bytes
    return:
        decoded value
    """
    value, end = decode_from(data)
    if end != len(data):
        raise Malformed('%d trailing bytes after CBOR item' % (len(data) - end))
    return value
