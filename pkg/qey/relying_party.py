"""
.. module:: relying_party
    :synopsis: WebAuthn relying-party verification with ML-DSA and ES256, challenge lifecycle
"""

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from qey import cose, crypto
from qey.cbor import CborError
from qey.ctap2 import AttestationObject, AuthenticatorData, AuthenticatorDataError
from qey.utils import EntropySource, resolve_rng, sha256, websafe_decode, websafe_encode

logger = logging.getLogger(__name__)

CHALLENGE_LEN = 32
DEFAULT_CHALLENGE_TTL = 120.0
DEFAULT_ALGORITHMS = (cose.MLDSA44, cose.MLDSA65, cose.ES256)

PURPOSE_REGISTRATION = 'registration'
PURPOSE_AUTHENTICATION = 'authentication'


class VerificationError(Exception):
    """base class of ceremony verification failures"""


class ChallengeMismatch(VerificationError):
    pass


class OriginMismatch(VerificationError):
    pass


class RpIdHashMismatch(VerificationError):
    pass


class UnsupportedAlgorithm(VerificationError):
    pass


class UnsupportedAttestation(VerificationError):
    pass


class BadSignature(VerificationError):
    pass


class StaleChallenge(VerificationError):
    """unknown, already used or expired challenge"""


class CounterRegression(VerificationError):
    """sign count did not increase: possibly a cloned authenticator"""


class FlagMissing(VerificationError):
    pass


class InvalidClientData(VerificationError):
    pass


class MalformedResponse(VerificationError):
    pass


class CredentialNotAllowed(VerificationError):
    pass


@dataclass
class RegistrationPolicy:
    """
    args:
        rp_id: relying party id
        origin: expected origin in clientDataJSON
        accepted_algorithms: COSE ids in preference order, a subset of -48, -49, -7
        require_user_verification: demand the UV flag
        rp_name: display name
        challenge_ttl: seconds a challenge stays valid
    """
    rp_id: str
    origin: str
    accepted_algorithms: List[int] = field(default_factory=lambda: list(DEFAULT_ALGORITHMS))
    require_user_verification: bool = False
    rp_name: Optional[str] = None
    challenge_ttl: float = DEFAULT_CHALLENGE_TTL

    def __post_init__(self):
        if not self.accepted_algorithms:
            raise ValueError('policy accepts no algorithm')
        for algorithm in self.accepted_algorithms:
            if not cose.is_supported(algorithm):
                raise cose.UnsupportedAlgorithm(algorithm)


@dataclass(frozen=True)
class ChallengeRecord:
    challenge: bytes
    rp_id: str
    expires_at: float
    purpose: str
    allow_credentials: tuple = ()
    user_id: Optional[bytes] = None


class ChallengeStore:
    """
    single-use challenge bookkeeping; issue/consume are atomic

    args:
        persist: optional hook called with the list of live records after every change
    """

    def __init__(self, persist: Optional[Callable[[List[ChallengeRecord]], None]] = None):
        self._records: Dict[bytes, ChallengeRecord] = {}
        self._lock = threading.Lock()
        self.persist = persist

    def __len__(self):
        return len(self._records)

    def _changed(self):
        if self.persist is not None:
            self.persist(list(self._records.values()))

    def issue(self, record):
        with self._lock:
            self._records[record.challenge] = record
            self._changed()

    def consume(self, record, now):
        """
        remove ``record``; it is valid only if it was live and unexpired

        return:
            the stored record
        """
        with self._lock:
            stored = self._records.pop(record.challenge, None)
            if stored is not None:
                self._changed()
        if stored is None:
            raise StaleChallenge('challenge unknown or already used')
        if now > stored.expires_at:
            raise StaleChallenge('challenge expired')
        return stored

    def purge(self, now):
        """drop expired records"""
        with self._lock:
            expired = [c for c, r in self._records.items() if now > r.expires_at]
            for challenge in expired:
                del self._records[challenge]
            if expired:
                self._changed()
        return len(expired)

    def restore(self, records):
        with self._lock:
            self._records = {r.challenge: r for r in records}


@dataclass
class RegisteredKey:
    """a credential known to the relying party"""
    credential_id: bytes
    public_key: cose.CoseKey
    algorithm: int
    last_sign_count: int = 0
    user_id: Optional[bytes] = None

    def __post_init__(self):
        if self.public_key.algorithm != self.algorithm:
            raise ValueError('algorithm does not match the public key')

    def to_dict(self):
        return {
            'credential_id': websafe_encode(self.credential_id),
            'algorithm': self.algorithm,
            'public_key': websafe_encode(self.public_key.raw_public_bytes()),
            'last_sign_count': self.last_sign_count,
            'user_id': None if self.user_id is None else websafe_encode(self.user_id),
        }

    @classmethod
    def from_dict(cls, value):
        algorithm = value['algorithm']
        return cls(websafe_decode(value['credential_id']),
                   cose.CoseKey.from_public_bytes(algorithm, websafe_decode(value['public_key'])),
                   algorithm, value['last_sign_count'],
                   None if value.get('user_id') is None else websafe_decode(value['user_id']))


@dataclass
class VerificationReport:
    """outcome of a verified ceremony"""
    ceremony: str
    credential_id: str
    algorithm: str
    sign_count: int
    user_present: bool
    user_verified: bool
    public_key_len: int

    def to_dict(self):
        return dict(self.__dict__)


def _normalize_signature(algorithm, signature):
    """ES256 arrives raw (r||s) or DER; verification takes raw"""
    if algorithm == cose.ES256 and len(signature) != 64:
        try:
            return crypto.es256_der_to_raw(signature)
        except ValueError:
            raise BadSignature('ES256 signature is neither raw nor DER')
    return signature


def _verify(public_key, algorithm, message, signature):
    if not isinstance(signature, (bytes, bytearray)):
        raise MalformedResponse('signature must be a byte string')
    try:
        valid = crypto.verify(public_key, algorithm, message, _normalize_signature(algorithm, signature))
    except crypto.InvalidLength as e:
        raise BadSignature(str(e))
    if not valid:
        raise BadSignature('%s signature does not verify' % cose.algorithm_name(algorithm))


class RelyingParty:
    """
    server side of registration and authentication ceremonies

    args:
        policy: RegistrationPolicy
        challenges: ChallengeStore, a fresh in-memory store when None
        clock: wall clock for challenge expiry
        rng: entropy source for challenges
    """

    def __init__(self, policy, challenges: Optional[ChallengeStore] = None, clock: Callable[[], float] = time.time,
                 rng: Optional[EntropySource] = None):
        self.policy = policy
        self.challenges = challenges if challenges is not None else ChallengeStore()
        self.clock = clock
        self.rng = resolve_rng(rng)
        self.credentials: Dict[bytes, RegisteredKey] = {}
        self.last_report: Optional[VerificationReport] = None
        self.rp_id_hash = sha256(policy.rp_id.encode('utf8'))

    def _issue(self, purpose, allow_credentials=(), user_id=None):
        now = self.clock()
        if self.challenges.purge(now):
            logger.debug('expired challenges dropped')
        record = ChallengeRecord(self.rng(CHALLENGE_LEN), self.policy.rp_id,
                                 now + self.policy.challenge_ttl, purpose, tuple(allow_credentials), user_id)
        self.challenges.issue(record)
        return record

    def begin_registration(self, user):
        """
        args:
            user: {'id': bytes, 'name': str, 'displayName': str}
        return:
            (publicKeyCredentialCreationOptions, ChallengeRecord)
        """
        record = self._issue(PURPOSE_REGISTRATION, user_id=user['id'])
        exclude = [{'type': 'public-key', 'id': k.credential_id}
                   for k in self.credentials.values() if k.user_id is not None and k.user_id == user['id']]
        options = {
            'rp': {'id': self.policy.rp_id, 'name': self.policy.rp_name or self.policy.rp_id},
            'user': dict(user),
            'challenge': record.challenge,
            'pubKeyCredParams': [{'type': 'public-key', 'alg': a} for a in self.policy.accepted_algorithms],
            'timeout': int(self.policy.challenge_ttl * 1000),
            'excludeCredentials': exclude,
            'attestation': 'direct',
            'authenticatorSelection': {
                'residentKey': 'required',
                'userVerification': 'required' if self.policy.require_user_verification else 'discouraged'},
        }
        return options, record

    def begin_authentication(self, allow_list=None):
        """
        args:
            allow_list: credential ids, in order; None for the resident-key flow
        return:
            (publicKeyCredentialRequestOptions, ChallengeRecord)
        """
        allow_list = list(allow_list or [])
        record = self._issue(PURPOSE_AUTHENTICATION, allow_list)
        options = {
            'rpId': self.policy.rp_id,
            'challenge': record.challenge,
            'allowCredentials': [{'type': 'public-key', 'id': i} for i in allow_list],
            'timeout': int(self.policy.challenge_ttl * 1000),
            'userVerification': 'required' if self.policy.require_user_verification else 'discouraged',
        }
        return options, record

    def _check_client_data(self, record, client_data_json, ceremony_type, purpose):
        stored = self.challenges.consume(record, self.clock())
        if stored.purpose != purpose:
            raise ChallengeMismatch('challenge was issued for %s' % stored.purpose)
        if not isinstance(client_data_json, (bytes, bytearray)):
            raise InvalidClientData('clientDataJSON must be a byte string')
        try:
            client_data = json.loads(bytes(client_data_json).decode('utf8'))
        except (UnicodeDecodeError, ValueError):
            raise InvalidClientData('clientDataJSON is not valid JSON')
        if not isinstance(client_data, dict):
            raise InvalidClientData('clientDataJSON is not an object')
        if client_data.get('type') != ceremony_type:
            raise InvalidClientData('type %r, expected %r' % (client_data.get('type'), ceremony_type))
        try:
            challenge = websafe_decode(client_data.get('challenge', ''))
        except (TypeError, ValueError):
            raise ChallengeMismatch('challenge is not base64url')
        if challenge != stored.challenge:
            raise ChallengeMismatch('challenge does not match the issued one')
        if client_data.get('origin') != self.policy.origin:
            raise OriginMismatch('origin %r, expected %r' % (client_data.get('origin'), self.policy.origin))
        return stored

    def _check_auth_data(self, raw):
        if not isinstance(raw, (bytes, bytearray)):
            raise MalformedResponse('authenticator data must be a byte string')
        try:
            auth_data = AuthenticatorData.parse(raw)
        except cose.UnsupportedAlgorithm as e:
            raise UnsupportedAlgorithm(str(e))
        except AuthenticatorDataError as e:
            raise MalformedResponse(str(e))
        if auth_data.rp_id_hash != self.rp_id_hash:
            raise RpIdHashMismatch('authenticator data is bound to another rp id')
        if not auth_data.is_user_present():
            raise FlagMissing('user presence flag not set')
        if self.policy.require_user_verification and not auth_data.is_user_verified():
            raise FlagMissing('user verification required')
        return auth_data

    def finish_registration(self, record, client_data_json, attestation_object):
        """
        verify a registration response

        args:
            record: the ChallengeRecord from begin_registration
            client_data_json: raw clientDataJSON
            attestation_object: WebAuthn attestationObject bytes
        return:
            the RegisteredKey (also kept in self.credentials)
        """
        stored = self._check_client_data(record, client_data_json, 'webauthn.create', PURPOSE_REGISTRATION)
        if not isinstance(attestation_object, (bytes, bytearray)):
            raise MalformedResponse('attestation object must be a byte string')
        try:
            attestation = AttestationObject.from_bytes(attestation_object)
        except (CborError, AuthenticatorDataError) as e:
            raise MalformedResponse('attestation object: %s' % e)
        auth_data = self._check_auth_data(attestation.auth_data)
        if auth_data.attested is None:
            raise FlagMissing('attested credential data missing')
        public_key = auth_data.attested.public_key
        algorithm = public_key.algorithm
        if algorithm not in self.policy.accepted_algorithms:
            raise UnsupportedAlgorithm('%s not accepted by policy' % cose.algorithm_name(algorithm))

        att_stmt = attestation.att_stmt
        if attestation.fmt != 'packed' or not isinstance(att_stmt, dict) or 'x5c' in att_stmt:
            raise UnsupportedAttestation('only packed self-attestation is accepted')
        if att_stmt.get('alg') != algorithm:
            raise UnsupportedAttestation('attStmt alg differs from the credential key')
        signature = att_stmt.get('sig')
        if not isinstance(signature, bytes):
            raise MalformedResponse('attStmt sig missing')
        _verify(public_key.raw_public_bytes(), algorithm,
                bytes(attestation.auth_data) + sha256(client_data_json), signature)

        key = RegisteredKey(auth_data.attested.credential_id, public_key, algorithm, auth_data.sign_count,
                            stored.user_id)
        self.credentials[key.credential_id] = key
        self.last_report = self._report('registration', key, auth_data)
        logger.info('registered %s credential %s', cose.algorithm_name(algorithm),
                    websafe_encode(key.credential_id)[:11])
        return key

    def finish_authentication(self, record, registered_key, client_data_json, authenticator_data, signature):
        """
        verify an assertion

        args:
            record: the ChallengeRecord from begin_authentication
            registered_key: RegisteredKey of the asserting credential
            client_data_json: raw clientDataJSON
            authenticator_data: raw authenticator data
            signature: assertion signature
        return:
            the new sign count (stored into registered_key)
        """
        stored = self._check_client_data(record, client_data_json, 'webauthn.get', PURPOSE_AUTHENTICATION)
        if stored.allow_credentials and registered_key.credential_id not in stored.allow_credentials:
            raise CredentialNotAllowed('credential not in allowCredentials')
        auth_data = self._check_auth_data(authenticator_data)
        if auth_data.attested is not None:
            raise MalformedResponse('assertion carries attested credential data')
        _verify(registered_key.public_key.raw_public_bytes(), registered_key.algorithm,
                bytes(authenticator_data) + sha256(client_data_json), signature)
        count = auth_data.sign_count
        if (count or registered_key.last_sign_count) and count <= registered_key.last_sign_count:
            raise CounterRegression('sign count %d not above %d' % (count, registered_key.last_sign_count))
        registered_key.last_sign_count = count
        self.last_report = self._report('authentication', registered_key, auth_data)
        return count

    def _report(self, ceremony, key, auth_data):
        return VerificationReport(ceremony, websafe_encode(key.credential_id), cose.algorithm_name(key.algorithm),
                                  auth_data.sign_count, auth_data.is_user_present(), auth_data.is_user_verified(),
                                  len(key.public_key.raw_public_bytes()))

    def save_credentials(self, path):
        with open(path, 'w') as f:
            json.dump([k.to_dict() for k in self.credentials.values()], f, indent=2)

    def load_credentials(self, path):
        with open(path) as f:
            for value in json.load(f):
                key = RegisteredKey.from_dict(value)
                self.credentials[key.credential_id] = key
        return len(self.credentials)
