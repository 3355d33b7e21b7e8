"""
.. module:: store
    :synopsis: permission-controlled persistent credential store

File layout::

    magic 'QEYS' | version (1 byte) | canonical CBOR body | SHA-256(magic..body)

Private keys and the PIN hash are sealed with AES-256-GCM under a 32-byte
device secret kept beside the store (``<path>.key``). Both files are written
owner read/write only, via a temporary file renamed into place.
"""

import copy
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from qey.cbor import CborError, decode_cbor, encode_cbor
from qey.crypto import CryptoError, KeyPair
from qey.utils import EntropySource, hexstr, resolve_rng, sha256

logger = logging.getLogger(__name__)

MAGIC = b'QEYS'
VERSION = 1
TRAILER_LEN = 32
DEFAULT_CAPACITY = 64
MAX_PIN_RETRIES = 8
MAX_USER_HANDLE = 64
MAX_SIGN_COUNT = 0xFFFFFFFF
QEY_AAGUID = bytes.fromhex('51455900') + bytes(12)


class StoreError(Exception):
    """base class of credential-store failures"""


class StorageFull(StoreError):
    pass


class UnknownCredential(StoreError):
    pass


class IoFailure(StoreError):
    pass


class CorruptStore(StoreError):
    pass


@dataclass
class Credential:
    """a resident credential

    args:
        credential_id: 32-byte identifier
        rp_id: relying party id
        user_handle: user id, at most 64 bytes
        user_name: display name given at registration
        keypair: credential KeyPair (private part never shown in repr)
        sign_count: signature counter
        created_at: creation time, nanoseconds since the epoch
    """
    credential_id: bytes
    rp_id: str
    user_handle: bytes
    user_name: str
    keypair: KeyPair
    sign_count: int = 0
    created_at: int = field(default_factory=time.time_ns)

    @property
    def algorithm(self):
        return self.keypair.algorithm

    def __repr__(self):
        return 'Credential(id=%s, rp_id=%r, alg=%d, sign_count=%d)' % (
            hexstr(self.credential_id), self.rp_id, self.algorithm, self.sign_count)


@dataclass
class AuthenticatorState:
    """everything the authenticator persists"""
    aaguid: bytes = QEY_AAGUID
    pin_hash_left16: Optional[bytes] = field(default=None, repr=False)
    pin_retries: int = MAX_PIN_RETRIES
    credentials: List[Credential] = field(default_factory=list)


class CredentialStore:
    """credential store; single writer (the command loop), readers use snapshot()

    args:
        path: store file, None keeps everything in memory
        capacity: maximum number of resident credentials
        state: initial state
        device_secret: 32-byte sealing key; read from / created beside ``path`` when None
        rng: entropy source for nonces and new device secrets
    """

    def __init__(self, path=None, capacity=DEFAULT_CAPACITY, state=None, device_secret=None,
                 rng: Optional[EntropySource] = None):
        self.path = path
        self.capacity = capacity
        self.state = state if state is not None else AuthenticatorState()
        self.rng = resolve_rng(rng)
        self._device_secret = device_secret
        self._lock = threading.Lock()

    def __repr__(self):
        return 'CredentialStore(path=%r, credentials=%d)' % (self.path, len(self.state.credentials))

    # -- credentials -----------------------------------------------------

    def count(self):
        return len(self.state.credentials)

    def put_credential(self, credential):
        """
        insert a credential; a credential for the same (rp_id, user_handle) is replaced

        return:
            the stored credential id
        """
        if len(credential.credential_id) != 32:
            raise ValueError('credential id must be 32 bytes')
        if len(credential.user_handle) > MAX_USER_HANDLE:
            raise ValueError('user handle longer than %d bytes' % MAX_USER_HANDLE)
        with self._lock:
            creds = self.state.credentials
            kept = [c for c in creds if not (c.rp_id == credential.rp_id and c.user_handle == credential.user_handle)
                    and c.credential_id != credential.credential_id]
            if len(kept) >= self.capacity:
                raise StorageFull('credential store holds %d credentials (capacity %d)' % (len(kept), self.capacity))
            replaced = len(creds) - len(kept)
            kept.append(credential)
            self.state.credentials = kept
        logger.info('stored credential %s for %s%s', hexstr(credential.credential_id[:8]), credential.rp_id,
                    ' (replaced %d)' % replaced if replaced else '')
        self._autosave()
        return credential.credential_id

    def get_by_id(self, credential_id):
        for credential in self.state.credentials:
            if credential.credential_id == credential_id:
                return credential
        raise UnknownCredential('no credential %s' % hexstr(credential_id[:8]))

    def find_by_rp(self, rp_id, allow_list=None):
        """
        credentials of one relying party, newest first

        args:
            rp_id: relying party id
            allow_list: optional credential ids restricting the result
        """
        allowed = None if allow_list is None else set(allow_list)
        matches = [c for c in self.state.credentials
                   if c.rp_id == rp_id and (allowed is None or c.credential_id in allowed)]
        # insertion order is creation order
        return matches[::-1]

    def increment_sign_count(self, credential_id):
        """
        advance a credential's counter and persist it

        return:
            the new count
        """
        with self._lock:
            credential = self.get_by_id(credential_id)
            if credential.sign_count >= MAX_SIGN_COUNT:
                logger.warning('sign counter of %s is saturated', hexstr(credential_id[:8]))
            credential.sign_count = min(credential.sign_count + 1, MAX_SIGN_COUNT)
            count = credential.sign_count
        self._autosave()
        return count

    # -- PIN state ---------------------------------------------------------

    @property
    def pin_hash(self):
        return self.state.pin_hash_left16

    @property
    def pin_retries(self):
        return self.state.pin_retries

    def set_pin_hash(self, pin_hash_left16):
        if len(pin_hash_left16) != 16:
            raise ValueError('PIN hash must be 16 bytes')
        with self._lock:
            self.state.pin_hash_left16 = bytes(pin_hash_left16)
            self.state.pin_retries = MAX_PIN_RETRIES
        logger.info('PIN set')
        self._autosave()

    def decrement_pin_retries(self):
        with self._lock:
            self.state.pin_retries = max(0, self.state.pin_retries - 1)
            retries = self.state.pin_retries
        self._autosave()
        return retries

    def reset_pin_retries(self):
        if self.state.pin_retries != MAX_PIN_RETRIES:
            with self._lock:
                self.state.pin_retries = MAX_PIN_RETRIES
            self._autosave()

    def wipe(self):
        """factory reset: drop credentials and PIN, keep the AAGUID"""
        with self._lock:
            self.state = AuthenticatorState(aaguid=self.state.aaguid)
        logger.info('store wiped')
        self._autosave()

    def snapshot(self):
        """deep copy of the state for concurrent readers"""
        with self._lock:
            return copy.deepcopy(self.state)

    # -- persistence -------------------------------------------------------

    def _autosave(self):
        if self.path is not None:
            self.save()

    @property
    def key_path(self):
        return None if self.path is None else self.path + '.key'

    def _secret(self, create):
        if self._device_secret is not None:
            return self._device_secret
        if self.path is None:
            self._device_secret = self.rng(32)
            return self._device_secret
        try:
            with open(self.key_path, 'rb') as f:
                secret = f.read()
        except FileNotFoundError:
            if not create:
                raise IoFailure('device secret %s is missing' % self.key_path)
            secret = self.rng(32)
            _write_private(self.key_path, secret)
        except OSError as e:
            raise IoFailure('cannot read device secret: %s' % e.strerror)
        if len(secret) != 32:
            raise CorruptStore('device secret has the wrong size')
        self._device_secret = secret
        return secret

    def _seal(self, plaintext, aad):
        nonce = self.rng(12)
        return nonce + AESGCM(self._secret(True)).encrypt(nonce, plaintext, aad)

    def _unseal(self, sealed, aad):
        if not isinstance(sealed, bytes) or len(sealed) < 28:
            raise CorruptStore('sealed field too short')
        try:
            return AESGCM(self._secret(False)).decrypt(sealed[:12], sealed[12:], aad)
        except InvalidTag:
            raise CorruptStore('sealed field failed authentication')

    def to_bytes(self):
        state = self.snapshot()
        body = {
            1: state.aaguid,
            3: state.pin_retries,
            4: [{
                1: c.credential_id,
                2: c.rp_id,
                3: c.user_handle,
                4: c.user_name,
                5: c.algorithm,
                6: c.keypair.public_key,
                7: self._seal(c.keypair.private_key, c.credential_id),
                8: c.sign_count,
                9: c.created_at,
            } for c in state.credentials],
        }
        if state.pin_hash_left16 is not None:
            body[2] = self._seal(state.pin_hash_left16, b'pin')
        head = MAGIC + bytes([VERSION]) + encode_cbor(body)
        return head + sha256(head)

    def from_bytes(self, data):
        """replace the in-memory state with a decoded store image"""
        if len(data) < len(MAGIC) + 1 + TRAILER_LEN or not data.startswith(MAGIC):
            raise CorruptStore('not a store file')
        head, trailer = data[:-TRAILER_LEN], data[-TRAILER_LEN:]
        if sha256(head) != trailer:
            raise CorruptStore('integrity check failed')
        if head[len(MAGIC)] != VERSION:
            raise CorruptStore('unsupported store version %d' % head[len(MAGIC)])
        try:
            body = decode_cbor(head[len(MAGIC) + 1:])
            if not isinstance(body, dict):
                raise CorruptStore('store body must be a map')
            state = AuthenticatorState(
                aaguid=body[1],
                pin_hash_left16=self._unseal(body[2], b'pin') if 2 in body else None,
                pin_retries=body[3],
                credentials=[Credential(
                    credential_id=c[1], rp_id=c[2], user_handle=c[3], user_name=c[4],
                    keypair=KeyPair(c[5], self._unseal(c[7], c[1]), c[6]),
                    sign_count=c[8], created_at=c[9]) for c in body[4]],
            )
            if type(state.pin_retries) is not int or not 0 <= state.pin_retries <= MAX_PIN_RETRIES:
                raise CorruptStore('PIN retry counter out of range')
        except (CborError, CryptoError, CorruptStore, IndexError, KeyError, TypeError, ValueError) as e:
            if isinstance(e, CorruptStore):
                raise
            raise CorruptStore('store body is invalid: %s' % type(e).__name__)
        with self._lock:
            self.state = state

    def save(self, path=None):
        """
        write the store image; saving elsewhere also places the device secret beside the copy
        """
        path = path or self.path
        if path is None:
            raise IoFailure('no store path configured')
        if path != self.path:
            _write_private(path + '.key', self._secret(True))
        _write_private(path, self.to_bytes())
        logger.debug('saved %d credentials to %s', self.count(), path)

    @classmethod
    def load(cls, path, capacity=DEFAULT_CAPACITY, device_secret=None, rng=None):
        """
        open a store file; a missing file yields an empty store bound to ``path``
        """
        store = cls(path, capacity=capacity, device_secret=device_secret, rng=rng)
        try:
            with open(path, 'rb') as f:
                data = f.read()
        except FileNotFoundError:
            return store
        except OSError as e:
            raise IoFailure('cannot read %s: %s' % (path, e.strerror))
        store.from_bytes(data)
        logger.info('loaded %d credentials from %s', store.count(), path)
        return store


def _write_private(path, data):
    """write ``data`` to ``path`` as an owner-only file, atomically"""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix='.qey-', dir=directory)
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.chmod(tmp, 0o600)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise IoFailure('cannot write %s: %s' % (path, e.strerror))


def save(store, path=None):
    """persist ``store`` (to its own path unless ``path`` is given)"""
    store.save(path)


def load(path, **kwargs):
    """open the store at ``path``"""
    return CredentialStore.load(path, **kwargs)
