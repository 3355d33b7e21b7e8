"""
.. module:: ctap2
    :synopsis: CTAP2 command processor (makeCredential, getAssertion, getInfo, clientPIN, getNextAssertion)
"""

import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum, unique
from typing import Callable, List, Optional

from qey import cose, crypto
from qey.cbor import CborError, decode_cbor, decode_from, encode_cbor
from qey.store import Credential, CredentialStore, QEY_AAGUID, StorageFull
from qey.utils import EntropySource, hexstr, resolve_rng, sha256

logger = logging.getLogger(__name__)

#: callback asked for the user's physical gesture; gets a short reason, returns approval
PresenceCallback = Callable[[str], bool]

MAX_MSG_SIZE = 7609
PIN_PROTOCOL = 1
MAX_CONSECUTIVE_PIN_MISMATCHES = 3
CREDENTIAL_ID_LEN = 32
PIN_TOKEN_LEN = 16
PRESENCE_POLL_INTERVAL = 0.02

FLAG_UP = 0x01
FLAG_UV = 0x04
FLAG_AT = 0x40
FLAG_ED = 0x80

# keepalive status bytes reported while a command is in progress
STATUS_PROCESSING = 1
STATUS_UPNEEDED = 2


@unique
class Cmd(IntEnum):
    MAKE_CREDENTIAL = 0x01
    GET_ASSERTION = 0x02
    GET_INFO = 0x04
    CLIENT_PIN = 0x06
    GET_NEXT_ASSERTION = 0x08


@unique
class PinSubCmd(IntEnum):
    GET_RETRIES = 0x01
    GET_KEY_AGREEMENT = 0x02
    SET_PIN = 0x03
    CHANGE_PIN = 0x04
    GET_PIN_TOKEN = 0x05


@unique
class CtapStatus(IntEnum):
    SUCCESS = 0x00
    INVALID_COMMAND = 0x01
    INVALID_PARAMETER = 0x02
    INVALID_LENGTH = 0x03
    CBOR_UNEXPECTED_TYPE = 0x11
    INVALID_CBOR = 0x12
    MISSING_PARAMETER = 0x14
    CREDENTIAL_EXCLUDED = 0x19
    UNSUPPORTED_ALGORITHM = 0x26
    OPERATION_DENIED = 0x27
    KEY_STORE_FULL = 0x28
    UNSUPPORTED_OPTION = 0x2B
    INVALID_OPTION = 0x2C
    KEEPALIVE_CANCEL = 0x2D
    NO_CREDENTIALS = 0x2E
    USER_ACTION_TIMEOUT = 0x2F
    NOT_ALLOWED = 0x30
    PIN_INVALID = 0x31
    PIN_BLOCKED = 0x32
    PIN_AUTH_INVALID = 0x33
    PIN_AUTH_BLOCKED = 0x34
    PIN_NOT_SET = 0x35
    PIN_REQUIRED = 0x36
    PIN_POLICY_VIOLATION = 0x37
    REQUEST_TOO_LARGE = 0x39
    OTHER = 0x7F


class CtapError(Exception):
    """a CTAP2 failure carrying its status code"""

    def __init__(self, code, message=None):
        try:
            code = CtapStatus(code)
            name = code.name
        except ValueError:
            name = 'UNKNOWN'
        self.code = code
        super(CtapError, self).__init__(message or 'CTAP error 0x%02X - %s' % (code, name))


class AuthenticatorDataError(ValueError):
    """authenticator data bytes that do not parse"""


@dataclass(frozen=True)
class AttestedCredentialData:
    """aaguid || credIdLen (2, big-endian) || credentialId || COSE public key"""
    aaguid: bytes
    credential_id: bytes
    public_key: cose.CoseKey

    def to_bytes(self):
        return (self.aaguid + struct.pack('>H', len(self.credential_id)) + self.credential_id
                + encode_cbor(cose.encode_cose_key(self.public_key)))

    @classmethod
    def unpack_from(cls, data):
        """
        parse attested credential data at the start of ``data``

        return:
            (AttestedCredentialData, remaining bytes)
        """
        if len(data) < 18:
            raise AuthenticatorDataError('attested credential data truncated')
        aaguid = bytes(data[:16])
        c_len = struct.unpack('>H', data[16:18])[0]
        if len(data) < 18 + c_len:
            raise AuthenticatorDataError('credential id truncated')
        credential_id = bytes(data[18:18 + c_len])
        try:
            key_map, end = decode_from(data, 18 + c_len)
            public_key = cose.decode_cose_key(key_map)
        except cose.UnsupportedAlgorithm:
            raise
        except (CborError, cose.CoseError) as e:
            raise AuthenticatorDataError('credential public key invalid: %s' % e)
        return cls(aaguid, credential_id, public_key), bytes(data[end:])


@dataclass(frozen=True)
class AuthenticatorData:
    """authenticator data; 37 bytes without attested credential data

    args:
        rp_id_hash: SHA-256 of the rp id
        flags: UP 0x01, UV 0x04, AT 0x40, ED 0x80
        sign_count: signature counter
        attested: attested credential data, present iff AT is set
    """
    rp_id_hash: bytes
    flags: int
    sign_count: int
    attested: Optional[AttestedCredentialData] = None

    def __post_init__(self):
        if len(self.rp_id_hash) != 32:
            raise AuthenticatorDataError('rpIdHash must be 32 bytes')
        if bool(self.flags & FLAG_AT) != (self.attested is not None):
            raise AuthenticatorDataError('AT flag must be set iff attested credential data is present')

    def to_bytes(self):
        data = self.rp_id_hash + struct.pack('>BI', self.flags, self.sign_count)
        if self.attested is not None:
            data += self.attested.to_bytes()
        return data

    @classmethod
    def parse(cls, data):
        """strict parse: no extension data, no trailing bytes"""
        data = bytes(data)
        if len(data) < 37:
            raise AuthenticatorDataError('authenticator data shorter than 37 bytes')
        flags, sign_count = struct.unpack('>BI', data[32:37])
        if flags & FLAG_ED:
            raise AuthenticatorDataError('extension data is not supported')
        attested, rest = None, data[37:]
        if flags & FLAG_AT:
            attested, rest = AttestedCredentialData.unpack_from(rest)
        if rest:
            raise AuthenticatorDataError('%d trailing bytes in authenticator data' % len(rest))
        return cls(data[:32], flags, sign_count, attested)

    def is_user_present(self):
        return bool(self.flags & FLAG_UP)

    def is_user_verified(self):
        return bool(self.flags & FLAG_UV)

    def __repr__(self):
        return 'AuthenticatorData(rp_id_hash=%s, flags=0x%02x, sign_count=%d, attested=%s)' % (
            hexstr(self.rp_id_hash), self.flags, self.sign_count, self.attested is not None)


@dataclass(frozen=True)
class AttestationObject:
    """packed self-attestation: fmt, authData and attStmt {alg, sig}"""
    fmt: str
    auth_data: bytes
    att_stmt: dict

    @classmethod
    def from_ctap(cls, response):
        """from a makeCredential response map (integer keys)"""
        return cls(response[1], response[2], response[3])

    def to_bytes(self):
        """WebAuthn attestationObject encoding (text keys)"""
        return encode_cbor({'fmt': self.fmt, 'authData': self.auth_data, 'attStmt': self.att_stmt})

    @classmethod
    def from_bytes(cls, data):
        value = decode_cbor(data)
        if not isinstance(value, dict):
            raise CborError('attestation object must be a map')
        for name, kind in (('fmt', str), ('authData', bytes), ('attStmt', dict)):
            if not isinstance(value.get(name), kind):
                raise AuthenticatorDataError('attestation object field %s must be a %s' % (name, kind.__name__))
        return cls(value['fmt'], value['authData'], value['attStmt'])


@dataclass
class AssertionSession:
    """credentials still owed to getNextAssertion"""
    remaining: List[bytes]
    issued_at: float
    client_data_hash: bytes
    rp_id_hash: bytes
    flags: int


@dataclass(frozen=True)
class PinToken:
    """per power-cycle PIN token"""
    token: bytes = field(repr=False)

    @classmethod
    def generate(cls, rng):
        return cls(rng(PIN_TOKEN_LEN))


@dataclass(frozen=True)
class Event:
    """an instrumented step of the last command, perf_counter seconds"""
    name: str
    started: float
    finished: float

    @property
    def duration(self):
        return self.finished - self.started


@dataclass
class AuthenticatorConfig:
    """
    args:
        aaguid: authenticator model id
        session_timeout: getNextAssertion window, seconds
        max_credentials: resident credential capacity
        provider: ML-DSA provider name
        clock: monotonic clock for the session window
    """
    aaguid: bytes = QEY_AAGUID
    session_timeout: float = 30.0
    max_credentials: int = 64
    provider: Optional[str] = None
    clock: Callable[[], float] = time.monotonic


def always_present(reason):
    return True


def never_present(reason):
    return False


_TYPE_NAMES = {bytes: 'byte string', str: 'text string', int: 'integer', dict: 'map', list: 'array',
               bool: 'boolean'}


def _get(params, key, kind, required=True):
    """fetch a typed parameter; missing -> MISSING_PARAMETER, wrong type -> CBOR_UNEXPECTED_TYPE"""
    if key not in params:
        if required:
            raise CtapError(CtapStatus.MISSING_PARAMETER, 'missing parameter %r' % (key,))
        return None
    value = params[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise CtapError(CtapStatus.CBOR_UNEXPECTED_TYPE, 'parameter %r must be a %s' % (key, _TYPE_NAMES[kind]))
    return value


def _descriptor_ids(descriptors):
    ids = []
    for descriptor in descriptors:
        if not isinstance(descriptor, dict):
            raise CtapError(CtapStatus.CBOR_UNEXPECTED_TYPE, 'credential descriptor must be a map')
        if descriptor.get('type') == 'public-key' and isinstance(descriptor.get('id'), bytes):
            ids.append(descriptor['id'])
    return ids


class Authenticator:
    """
    the CTAP2 authenticator; commands are processed strictly one at a time

    args:
        store: credential store (an in-memory store when None)
        config: AuthenticatorConfig
        presence: default user presence callback
        rng: entropy source for credential ids, keys, tokens and hedged signing
    """

    def __init__(self, store: Optional[CredentialStore] = None, config: Optional[AuthenticatorConfig] = None,
                 presence: PresenceCallback = always_present, rng: Optional[EntropySource] = None):
        self.config = config or AuthenticatorConfig()
        self.rng = resolve_rng(rng)
        self.store = store if store is not None else CredentialStore(
            capacity=self.config.max_credentials, rng=self.rng)
        if store is None:
            self.store.state.aaguid = self.config.aaguid
        self.presence = presence
        self.events: List[Event] = []
        self.keepalive_status = STATUS_PROCESSING
        self.cancelled = threading.Event()
        self._session: Optional[AssertionSession] = None
        self._lock = threading.Lock()
        self._handlers = {
            Cmd.MAKE_CREDENTIAL: self.make_credential,
            Cmd.GET_ASSERTION: self.get_assertion,
            Cmd.GET_INFO: lambda params: self.get_info(),
            Cmd.CLIENT_PIN: self.client_pin,
            Cmd.GET_NEXT_ASSERTION: lambda params: self.get_next_assertion(),
        }
        self.power_cycle()

    @property
    def aaguid(self):
        return self.store.state.aaguid

    def power_cycle(self, reset=False):
        """
        model a device power-up: fresh PIN token and key agreement key

        args:
            reset: also wipe every credential and the PIN
        """
        if reset:
            self.store.wipe()
        self._pin_token = PinToken.generate(self.rng)
        self._key_agreement = crypto.generate_pin_keypair(self.rng)
        self._pin_mismatches = 0
        self._session = None
        logger.debug('power cycle%s', ' with reset' if reset else '')

    def cancel(self):
        """abort a pending presence wait (CTAPHID CANCEL)"""
        self.cancelled.set()

    # -- dispatch ----------------------------------------------------------

    def handle_command(self, request, presence: Optional[PresenceCallback] = None):
        """
        process one CTAP2 request

        args:
            request: command byte || canonical CBOR parameter map
            presence: presence callback for this request, the default one when None
        return:
            status byte || optional CBOR response map
        """
        with self._lock:
            self.events = []
            self.cancelled.clear()
            self.keepalive_status = STATUS_PROCESSING
            self._current_presence = presence or self.presence
            try:
                response = self._dispatch(bytes(request))
                status, body = CtapStatus.SUCCESS, b'' if response is None else encode_cbor(response)
            except CtapError as e:
                logger.debug('command failed: %s', e)
                status, body = e.code, b''
            except Exception:
                logger.exception('unexpected failure while processing a CTAP2 command')
                status, body = CtapStatus.OTHER, b''
            finally:
                self.keepalive_status = STATUS_PROCESSING
            return bytes([status]) + body

    def _dispatch(self, request):
        if not request:
            raise CtapError(CtapStatus.INVALID_LENGTH, 'empty request')
        if len(request) > MAX_MSG_SIZE:
            raise CtapError(CtapStatus.REQUEST_TOO_LARGE)
        try:
            cmd = Cmd(request[0])
        except ValueError:
            self._session = None
            raise CtapError(CtapStatus.INVALID_COMMAND, 'unknown command 0x%02x' % request[0])
        if cmd != Cmd.GET_NEXT_ASSERTION:
            self._session = None
        params = {}
        if len(request) > 1:
            try:
                params = decode_cbor(request[1:])
            except CborError as e:
                raise CtapError(CtapStatus.INVALID_CBOR, 'parameters: %s' % e)
            if not isinstance(params, dict):
                raise CtapError(CtapStatus.INVALID_CBOR, 'parameters must be a map')
        logger.debug('%s', cmd.name)
        return self._handlers[cmd](params)

    # -- instrumentation and presence -----------------------------------

    def _timed(self, name, fn, *args, **kwargs):
        started = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.events.append(Event(name, started, time.perf_counter()))

    def _wait_for_presence(self, reason):
        """run the presence callback on its own thread so that a CANCEL ends the wait"""
        callback, outcome, done = self._current_presence, {}, threading.Event()

        def ask():
            try:
                outcome['approved'] = callback(reason)
            except BaseException as e:
                outcome['error'] = e
            finally:
                done.set()

        threading.Thread(target=ask, name='qey-presence', daemon=True).start()
        while not done.wait(PRESENCE_POLL_INTERVAL):
            if self.cancelled.is_set():
                raise CtapError(CtapStatus.KEEPALIVE_CANCEL)
        if 'error' in outcome:
            raise outcome['error']
        return outcome['approved']

    def _await_presence(self, reason):
        self.keepalive_status = STATUS_UPNEEDED
        try:
            approved = self._timed('presence', self._wait_for_presence, reason)
        except TimeoutError:
            raise CtapError(CtapStatus.USER_ACTION_TIMEOUT)
        finally:
            self.keepalive_status = STATUS_PROCESSING
        if self.cancelled.is_set():
            raise CtapError(CtapStatus.KEEPALIVE_CANCEL)
        if not approved:
            raise CtapError(CtapStatus.OPERATION_DENIED, 'user presence refused')

    def _sign(self, keypair, message):
        return self._timed('sign', crypto.sign, keypair, message, rng=self.rng, provider=self.config.provider)

    # -- PIN helpers -------------------------------------------------------

    def _check_pin_auth(self, params, pin_auth_key, protocol_key, client_data_hash):
        """
        verify an optional pinAuth over clientDataHash

        return:
            True when a valid pinAuth was supplied
        """
        pin_auth = _get(params, pin_auth_key, bytes, required=False)
        if pin_auth is None:
            return False
        protocol = _get(params, protocol_key, int)
        if protocol != PIN_PROTOCOL:
            raise CtapError(CtapStatus.PIN_AUTH_INVALID, 'unsupported PIN protocol %d' % protocol)
        if not crypto.pin1_verify(self._pin_token.token, client_data_hash, pin_auth):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        return True

    @staticmethod
    def _check_options(options):
        if options is None:
            return
        if options.get('uv') is True:
            raise CtapError(CtapStatus.UNSUPPORTED_OPTION, 'built-in user verification is not available')
        if options.get('up') is False:
            raise CtapError(CtapStatus.INVALID_OPTION, 'user presence cannot be skipped')

    # -- commands ----------------------------------------------------------

    def get_info(self):
        """authenticatorGetInfo response map"""
        return {
            1: ['FIDO_2_0'],
            3: self.aaguid,
            4: {'rk': True, 'up': True, 'clientPin': self.store.pin_hash is not None},
            5: MAX_MSG_SIZE,
            6: [PIN_PROTOCOL],
            0x0A: [{'type': 'public-key', 'alg': alg} for alg in cose.SUPPORTED_ALGORITHMS],
        }

    def make_credential(self, params):
        """
        authenticatorMakeCredential

        return:
            response map {1: fmt, 2: authData, 3: attStmt}
        """
        client_data_hash = _get(params, 1, bytes)
        rp = _get(params, 2, dict)
        user = _get(params, 3, dict)
        cred_params = _get(params, 4, list)
        exclude_list = _get(params, 5, list, required=False) or []
        options = _get(params, 7, dict, required=False)
        if len(client_data_hash) != 32:
            raise CtapError(CtapStatus.INVALID_LENGTH, 'clientDataHash must be 32 bytes')
        rp_id = _get(rp, 'id', str)
        user_id = _get(user, 'id', bytes)
        if len(user_id) > 64:
            raise CtapError(CtapStatus.INVALID_LENGTH, 'user id longer than 64 bytes')
        user_name = user.get('name') or user.get('displayName') or ''

        algorithm = None
        for entry in cred_params:
            if not isinstance(entry, dict):
                raise CtapError(CtapStatus.CBOR_UNEXPECTED_TYPE, 'pubKeyCredParams entries must be maps')
            if entry.get('type') == 'public-key' and cose.is_supported(entry.get('alg')):
                algorithm = entry['alg']
                break
        if algorithm is None:
            raise CtapError(CtapStatus.UNSUPPORTED_ALGORITHM,
                            'no supported algorithm in %r' % [e.get('alg') for e in cred_params])
        self._check_options(options)

        flags = FLAG_UP | FLAG_AT
        if self._check_pin_auth(params, 8, 9, client_data_hash):
            flags |= FLAG_UV
        elif self.store.pin_hash is not None:
            raise CtapError(CtapStatus.PIN_REQUIRED)

        excluded = set(_descriptor_ids(exclude_list))
        if excluded and any(c.credential_id in excluded for c in self.store.find_by_rp(rp_id)):
            self._await_presence('exclude ' + rp_id)
            raise CtapError(CtapStatus.CREDENTIAL_EXCLUDED)

        self._await_presence('register ' + rp_id)

        keypair = self._timed('keygen', crypto.generate_keypair, algorithm, self.rng, self.config.provider)
        credential = Credential(self.rng(CREDENTIAL_ID_LEN), rp_id, user_id, user_name, keypair)
        try:
            self.store.put_credential(credential)
        except StorageFull as e:
            raise CtapError(CtapStatus.KEY_STORE_FULL, str(e))

        auth_data = AuthenticatorData(
            sha256(rp_id.encode('utf8')), flags, credential.sign_count,
            AttestedCredentialData(self.aaguid, credential.credential_id, keypair.cose_key())).to_bytes()
        signature = self._sign(keypair, auth_data + client_data_hash)
        logger.info('registered %s credential for %s', cose.algorithm_name(algorithm), rp_id)
        return {1: 'packed', 2: auth_data, 3: {'alg': algorithm, 'sig': signature}}

    def _assertion(self, credential_id, rp_id_hash, flags, client_data_hash, count=None):
        credential = self.store.get_by_id(credential_id)
        sign_count = self.store.increment_sign_count(credential_id)
        auth_data = AuthenticatorData(rp_id_hash, flags, sign_count).to_bytes()
        response = {
            1: {'type': 'public-key', 'id': credential.credential_id},
            2: auth_data,
            3: self._sign(credential.keypair, auth_data + client_data_hash),
            4: {'id': credential.user_handle, 'name': credential.user_name},
        }
        if count is not None:
            response[5] = count
        return response

    def get_assertion(self, params):
        """
        authenticatorGetAssertion; opens a session when several credentials match

        return:
            response map {1: credential, 2: authData, 3: signature, 4: user, 5: numberOfCredentials}
        """
        rp_id = _get(params, 1, str)
        client_data_hash = _get(params, 2, bytes)
        allow_list = _get(params, 3, list, required=False)
        options = _get(params, 5, dict, required=False)
        if len(client_data_hash) != 32:
            raise CtapError(CtapStatus.INVALID_LENGTH, 'clientDataHash must be 32 bytes')
        self._check_options(options)
        flags = FLAG_UP
        if self._check_pin_auth(params, 6, 7, client_data_hash):
            flags |= FLAG_UV

        allowed = None if not allow_list else _descriptor_ids(allow_list)
        credentials = self.store.find_by_rp(rp_id, allowed)
        if not credentials:
            raise CtapError(CtapStatus.NO_CREDENTIALS, 'no credentials for %s' % rp_id)

        self._await_presence('authenticate ' + rp_id)

        rp_id_hash = sha256(rp_id.encode('utf8'))
        ids = [c.credential_id for c in credentials]
        count = len(ids) if len(ids) > 1 else None
        response = self._assertion(ids[0], rp_id_hash, flags, client_data_hash, count)
        if count:
            self._session = AssertionSession(ids[1:], self.config.clock(), client_data_hash, rp_id_hash, flags)
        return response

    def get_next_assertion(self):
        """authenticatorGetNextAssertion: next credential of the open session"""
        session = self._session
        if session is None or not session.remaining:
            self._session = None
            raise CtapError(CtapStatus.NOT_ALLOWED, 'no assertion session')
        if self.config.clock() - session.issued_at > self.config.session_timeout:
            self._session = None
            raise CtapError(CtapStatus.NOT_ALLOWED, 'assertion session expired')
        credential_id = session.remaining.pop(0)
        return self._assertion(credential_id, session.rp_id_hash, session.flags, session.client_data_hash)

    def client_pin(self, params):
        """authenticatorClientPIN, PIN protocol 1 only"""
        protocol = _get(params, 1, int)
        subcommand = _get(params, 2, int)
        if protocol != PIN_PROTOCOL:
            raise CtapError(CtapStatus.INVALID_PARAMETER, 'unsupported PIN protocol %d' % protocol)
        try:
            subcommand = PinSubCmd(subcommand)
        except ValueError:
            raise CtapError(CtapStatus.INVALID_PARAMETER, 'unknown clientPIN subcommand %d' % subcommand)

        if subcommand == PinSubCmd.GET_RETRIES:
            return {3: self.store.pin_retries}
        if subcommand == PinSubCmd.GET_KEY_AGREEMENT:
            return {1: cose.encode_key_agreement_key(crypto.key_agreement_cose_key(self._key_agreement))}
        if subcommand == PinSubCmd.SET_PIN:
            return self._set_pin(params)
        if subcommand == PinSubCmd.CHANGE_PIN:
            return self._change_pin(params)
        return self._get_pin_token(params)

    def _shared_secret(self, params):
        try:
            platform_key = cose.decode_key_agreement_key(_get(params, 3, dict))
            return crypto.pin1_key_agreement(platform_key, self._key_agreement)
        except (cose.CoseError, crypto.CryptoError) as e:
            raise CtapError(CtapStatus.INVALID_PARAMETER, 'key agreement: %s' % e)

    def _store_new_pin(self, shared, new_pin_enc):
        if len(new_pin_enc) < 64 or len(new_pin_enc) % 16:
            raise CtapError(CtapStatus.INVALID_PARAMETER, 'newPinEnc must be a padded 64-byte block')
        padded = crypto.pin1_decrypt(shared, new_pin_enc)
        pin = padded.rstrip(b'\x00')
        if len(pin) < 4 or len(pin) > 63:
            raise CtapError(CtapStatus.PIN_POLICY_VIOLATION)
        self.store.set_pin_hash(sha256(pin)[:16])

    def _set_pin(self, params):
        pin_auth = _get(params, 4, bytes)
        new_pin_enc = _get(params, 5, bytes)
        shared = self._shared_secret(params)
        if self.store.pin_hash is not None:
            raise CtapError(CtapStatus.NOT_ALLOWED, 'a PIN is already set')
        if not crypto.pin1_verify(shared, new_pin_enc, pin_auth):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        self._store_new_pin(shared, new_pin_enc)
        return None

    def _verify_pin_hash(self, shared, pin_hash_enc):
        """compare pinHashEnc with the stored hash, maintaining both retry counters"""
        if self.store.pin_hash is None:
            raise CtapError(CtapStatus.PIN_NOT_SET)
        if self.store.pin_retries == 0:
            raise CtapError(CtapStatus.PIN_BLOCKED)
        if self._pin_mismatches >= MAX_CONSECUTIVE_PIN_MISMATCHES:
            raise CtapError(CtapStatus.PIN_AUTH_BLOCKED, 'power cycle required')
        if len(pin_hash_enc) != 16:
            raise CtapError(CtapStatus.INVALID_PARAMETER, 'pinHashEnc must be 16 bytes')
        self.store.decrement_pin_retries()
        if crypto.pin1_decrypt(shared, pin_hash_enc) != self.store.pin_hash:
            self._key_agreement = crypto.generate_pin_keypair(self.rng)
            self._pin_mismatches += 1
            logger.info('wrong PIN, %d retries left', self.store.pin_retries)
            if self.store.pin_retries == 0:
                raise CtapError(CtapStatus.PIN_BLOCKED)
            if self._pin_mismatches >= MAX_CONSECUTIVE_PIN_MISMATCHES:
                raise CtapError(CtapStatus.PIN_AUTH_BLOCKED)
            raise CtapError(CtapStatus.PIN_INVALID)
        self._pin_mismatches = 0
        self.store.reset_pin_retries()

    def _change_pin(self, params):
        pin_auth = _get(params, 4, bytes)
        new_pin_enc = _get(params, 5, bytes)
        pin_hash_enc = _get(params, 6, bytes)
        shared = self._shared_secret(params)
        if self.store.pin_hash is None:
            raise CtapError(CtapStatus.PIN_NOT_SET)
        if not crypto.pin1_verify(shared, new_pin_enc + pin_hash_enc, pin_auth):
            raise CtapError(CtapStatus.PIN_AUTH_INVALID)
        self._verify_pin_hash(shared, pin_hash_enc)
        self._store_new_pin(shared, new_pin_enc)
        self._pin_token = PinToken.generate(self.rng)
        return None

    def _get_pin_token(self, params):
        pin_hash_enc = _get(params, 6, bytes)
        shared = self._shared_secret(params)
        self._verify_pin_hash(shared, pin_hash_enc)
        return {2: crypto.pin1_encrypt(shared, self._pin_token.token)}
