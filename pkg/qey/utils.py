"""
.. module:: utils
    :synopsis: utility tools (hashing, encodings, entropy sources, report dumping)
"""

import base64
import hashlib
import hmac
import json
import os
import random
from binascii import b2a_hex
from typing import Callable, Dict, Optional

#: an entropy source returns ``n`` random bytes
EntropySource = Callable[[int], bytes]


def sha256(data):
    """SHA-256 digest of ``data``
    """
    return hashlib.sha256(data).digest()


def hmac_sha256(key, data):
    """HMAC-SHA-256 of ``data`` under ``key``
    """
    return hmac.new(key, data, hashlib.sha256).digest()


def websafe_encode(data):
    """base64url without padding, as used by WebAuthn clients
    """
    return base64.urlsafe_b64encode(data).rstrip(b'=').decode('ascii')


def websafe_decode(data):
    """inverse of websafe_encode; accepts str or bytes, padded or not
    """
    if isinstance(data, str):
        data = data.encode('ascii')
    data += b'=' * (-len(data) % 4)
    return base64.urlsafe_b64decode(data)


def hexstr(bs):
    """format a byte string as a readable hex string
    """
    return "h'%s'" % b2a_hex(bs).decode()


def system_rng(n):
    """entropy source backed by the operating system
    """
    return os.urandom(n)


def seeded_rng(seed):
    """reproducible entropy source for tests and benchmarks

    args:
        seed: integer seed
    return:
        callable returning n pseudo-random bytes
    """
    return random.Random(seed).randbytes


def resolve_rng(rng: Optional[EntropySource]) -> EntropySource:
    return system_rng if rng is None else rng


def revlut(lut: Dict) -> Dict:
    return {v: k for k, v in lut.items()}


def save_report(state, track_list, filename):
    """
    save a run: results and the settings that produced them

    args:
        state: result structure (json serializable)
        track_list: run settings and bookkeeping
        filename: output path prefix, '.json' is appended
    """
    with open(filename + '.json', 'w') as f:
        json.dump({'report': state, 'run': track_list}, f, indent=2)
