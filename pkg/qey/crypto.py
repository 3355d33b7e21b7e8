"""
.. module:: crypto
    :synopsis: signature suites (ML-DSA-44, ML-DSA-65, ES256) and PIN protocol 1 primitives

ML-DSA is consumed through a provider interface. The default provider wraps
dilithium-py (FIPS 204, seedable, deterministic mode available); the ``oqs``
provider wraps liboqs-python, the Open Quantum Safe backend.
"""

import copy
import hmac
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import decode_dss_signature, encode_dss_signature
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from qey import cose
from qey.cose import ES256, MLDSA44, MLDSA65, UnsupportedAlgorithm
from qey.utils import EntropySource, hmac_sha256, resolve_rng, sha256

logger = logging.getLogger(__name__)

P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class CryptoError(ValueError):
    """base class of crypto-suite failures"""


class InvalidKey(CryptoError):
    """key material violates the suite parameters"""


class InvalidPoint(CryptoError):
    """a P-256 public point is off the curve or malformed"""


class InvalidLength(CryptoError):
    """an input has the wrong size for the operation"""


class ProviderUnavailable(CryptoError):
    """the selected ML-DSA backend cannot be loaded"""


@dataclass(frozen=True)
class SuiteParameters:
    """sizes of one signature suite, in bytes"""
    algorithm: int
    private_key_len: int
    public_key_len: int
    signature_len: int


SUITE_PARAMETERS: Dict[int, SuiteParameters] = {
    MLDSA44: SuiteParameters(MLDSA44, 2560, 1312, 2420),
    MLDSA65: SuiteParameters(MLDSA65, 4032, 1952, 2560),
    ES256: SuiteParameters(ES256, 32, 64, 64),
}


def suite_parameters(algorithm):
    try:
        return SUITE_PARAMETERS[algorithm]
    except KeyError:
        raise UnsupportedAlgorithm(algorithm)


@dataclass(frozen=True)
class KeyPair:
    """a credential key pair; ES256 keys hold the 32-byte scalar and x||y

    args:
        algorithm: COSE algorithm id
        private_key: secret bytes, never shown in repr
        public_key: raw public key bytes
    """
    algorithm: int
    private_key: bytes = field(repr=False)
    public_key: bytes

    def __post_init__(self):
        params = suite_parameters(self.algorithm)
        if len(self.private_key) != params.private_key_len or len(self.public_key) != params.public_key_len:
            raise InvalidKey('%s key pair must be %d/%d bytes (private/public)'
                             % (cose.algorithm_name(self.algorithm), params.private_key_len, params.public_key_len))

    def cose_key(self):
        return cose.CoseKey.from_public_bytes(self.algorithm, self.public_key)


@dataclass(frozen=True)
class SharedSecret:
    """PIN protocol 1 shared secret: SHA-256 of the ECDH x-coordinate"""
    value: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.value) != 32:
            raise InvalidLength('shared secret must be 32 bytes')


class SignatureProvider:
    """template for ML-DSA backends

    args:
        name: backend name used by get_provider
    """
    name = None
    supports_deterministic = False

    def keygen(self, algorithm, rng):
        """return (public_key, private_key)"""
        raise NotImplementedError

    def sign(self, algorithm, private_key, message, rng, deterministic):
        raise NotImplementedError

    def verify(self, algorithm, public_key, message, signature):
        raise NotImplementedError


class DilithiumProvider(SignatureProvider):
    """ML-DSA through dilithium-py; entropy comes from the caller's source
    """
    name = 'dilithium'
    supports_deterministic = True

    def __init__(self):
        try:
            from dilithium_py.ml_dsa import ML_DSA_44, ML_DSA_65
        except ImportError as e:
            raise ProviderUnavailable('dilithium-py is not installed: %s' % e)
        self.schemes = {MLDSA44: ML_DSA_44, MLDSA65: ML_DSA_65}

    def _scheme(self, algorithm, rng=None):
        scheme = self.schemes[algorithm]
        if rng is None:
            return scheme
        # shallow copy so the shared module-level scheme keeps its own entropy source
        scheme = copy.copy(scheme)
        scheme.random_bytes = rng
        return scheme

    def keygen(self, algorithm, rng):
        return self._scheme(algorithm, rng).keygen()

    def sign(self, algorithm, private_key, message, rng, deterministic):
        return self._scheme(algorithm, rng).sign(private_key, message, deterministic=deterministic)

    def verify(self, algorithm, public_key, message, signature):
        try:
            return bool(self.schemes[algorithm].verify(public_key, message, signature))
        except (ValueError, IndexError):
            # malformed hint encoding
            return False


class OQSProvider(SignatureProvider):
    """ML-DSA through liboqs-python; hedged signing with liboqs' own entropy
    """
    name = 'oqs'
    supports_deterministic = False
    oqs_names = {MLDSA44: 'ML-DSA-44', MLDSA65: 'ML-DSA-65'}

    def __init__(self):
        try:
            import oqs
        except ImportError as e:
            raise ProviderUnavailable('liboqs-python is not installed: %s' % e)
        self.oqs = oqs

    def keygen(self, algorithm, rng):
        with self.oqs.Signature(self.oqs_names[algorithm]) as signer:
            public_key = signer.generate_keypair()
            private_key = signer.export_secret_key()
        return public_key, private_key

    def sign(self, algorithm, private_key, message, rng, deterministic):
        if deterministic:
            raise CryptoError('the oqs provider has no deterministic signing mode')
        with self.oqs.Signature(self.oqs_names[algorithm], private_key) as signer:
            return signer.sign(message)

    def verify(self, algorithm, public_key, message, signature):
        with self.oqs.Signature(self.oqs_names[algorithm]) as verifier:
            return bool(verifier.verify(message, signature, public_key))


_PROVIDER_CLASSES = {'dilithium': DilithiumProvider, 'oqs': OQSProvider}
_providers: Dict[str, SignatureProvider] = {}
_default_provider = 'dilithium'


def get_provider(name=None):
    """
    look up (and lazily construct) an ML-DSA provider

    args:
        name: 'dilithium' or 'oqs'; None selects the configured default
    """
    name = name or _default_provider
    if name not in _PROVIDER_CLASSES:
        raise ProviderUnavailable('unknown ML-DSA provider %r' % name)
    if name not in _providers:
        _providers[name] = _PROVIDER_CLASSES[name]()
        logger.debug('loaded ML-DSA provider %s', name)
    return _providers[name]


def use_provider(name):
    """select the default ML-DSA provider for subsequent operations
    """
    global _default_provider
    get_provider(name)
    _default_provider = name


def _ec_private_key(scalar):
    return ec.derive_private_key(int.from_bytes(scalar, 'big'), ec.SECP256R1())


def _ec_public_key(raw):
    try:
        numbers = ec.EllipticCurvePublicNumbers(int.from_bytes(raw[:32], 'big'),
                                                int.from_bytes(raw[32:], 'big'),
                                                ec.SECP256R1())
        return numbers.public_key()
    except ValueError:
        raise InvalidPoint('point is not on P-256')


def _public_bytes(private_key):
    numbers = private_key.public_key().public_numbers()
    return numbers.x.to_bytes(32, 'big') + numbers.y.to_bytes(32, 'big')


def _p256_scalar(rng):
    while True:
        d = int.from_bytes(rng(32), 'big')
        if 0 < d < P256_ORDER:
            return d.to_bytes(32, 'big')


def es256_raw_to_der(signature):
    """r||s (64 bytes) to the ASN.1 DER form standard WebAuthn verifiers expect
    """
    if len(signature) != 64:
        raise InvalidLength('raw ES256 signature must be 64 bytes')
    return encode_dss_signature(int.from_bytes(signature[:32], 'big'), int.from_bytes(signature[32:], 'big'))


def es256_der_to_raw(signature):
    try:
        r, s = decode_dss_signature(signature)
    except ValueError:
        raise InvalidLength('not a DER encoded ECDSA signature')
    return r.to_bytes(32, 'big') + s.to_bytes(32, 'big')


def _check_emitted(algorithm, what, actual, expected):
    if actual != expected:
        raise InvalidKey('%s emitted %d-byte %s, expected %d'
                         % (cose.algorithm_name(algorithm), actual, what, expected))


def generate_keypair(algorithm, rng: Optional[EntropySource] = None, provider=None):
    """
    generate a credential key pair

    args:
        algorithm: -7, -48 or -49
        rng: entropy source; the operating system by default
        provider: ML-DSA provider name, default provider when None
    return:
        KeyPair with the suite's exact sizes
    """
    params = suite_parameters(algorithm)
    rng = resolve_rng(rng)
    if algorithm == ES256:
        scalar = _p256_scalar(rng)
        keypair = KeyPair(ES256, scalar, _public_bytes(_ec_private_key(scalar)))
    else:
        public_key, private_key = get_provider(provider).keygen(algorithm, rng)
        _check_emitted(algorithm, 'public key', len(public_key), params.public_key_len)
        _check_emitted(algorithm, 'private key', len(private_key), params.private_key_len)
        keypair = KeyPair(algorithm, bytes(private_key), bytes(public_key))
    return keypair


def sign(keypair, message, rng: Optional[EntropySource] = None, deterministic=False, provider=None):
    """
    sign ``message`` with the key pair's suite

    args:
        keypair: KeyPair
        message: bytes to sign
        rng: entropy for hedged ML-DSA signing
        deterministic: ML-DSA deterministic variant (known-answer tests)
        provider: ML-DSA provider name
    return:
        signature; ES256 as raw r||s (64 bytes)
    """
    params = suite_parameters(keypair.algorithm)
    if keypair.algorithm == ES256:
        der = _ec_private_key(keypair.private_key).sign(message, ec.ECDSA(hashes.SHA256()))
        signature = es256_der_to_raw(der)
    else:
        signature = bytes(get_provider(provider).sign(keypair.algorithm, keypair.private_key, message,
                                                      rng, deterministic))
    _check_emitted(keypair.algorithm, 'signature', len(signature), params.signature_len)
    return signature


def verify(public_key, algorithm, message, signature, provider=None):
    """
    verify a signature

    args:
        public_key: raw public key (x||y for ES256)
        algorithm: COSE algorithm id
        message: signed bytes
        signature: raw signature (r||s for ES256)
    return:
        True iff the signature is valid
    """
    params = suite_parameters(algorithm)
    if len(public_key) != params.public_key_len:
        raise InvalidLength('%s public key must be %d bytes' % (cose.algorithm_name(algorithm), params.public_key_len))
    if len(signature) != params.signature_len:
        raise InvalidLength('%s signature must be %d bytes' % (cose.algorithm_name(algorithm), params.signature_len))
    if algorithm == ES256:
        try:
            key = _ec_public_key(public_key)
        except InvalidPoint:
            return False
        try:
            key.verify(es256_raw_to_der(signature), message, ec.ECDSA(hashes.SHA256()))
        except InvalidSignature:
            return False
        return True
    return get_provider(provider).verify(algorithm, public_key, message, signature)


def generate_pin_keypair(rng: Optional[EntropySource] = None):
    """ephemeral P-256 key for PIN protocol 1 key agreement
    """
    return generate_keypair(ES256, rng)


def key_agreement_cose_key(keypair):
    """COSE_Key advertised by getKeyAgreement (alg ECDH-ES+HKDF-256)
    """
    return cose.CoseKey.from_public_bytes(cose.ECDH_ES_HKDF_256, keypair.public_key)


def pin1_key_agreement(platform_public, authenticator_private):
    """
    PIN protocol 1 shared secret

    args:
        platform_public: the peer's P-256 CoseKey
        authenticator_private: own P-256 KeyPair
    return:
        SharedSecret = SHA-256(x-coordinate of the ECDH point)
    """
    params = platform_public.parameters
    x, y = params.get(cose.LABEL_X), params.get(cose.LABEL_Y)
    if platform_public.key_type != cose.KTY_EC2 or params.get(cose.LABEL_CRV) != cose.CRV_P256:
        raise InvalidPoint('key agreement requires a P-256 EC2 key')
    if not isinstance(x, bytes) or not isinstance(y, bytes) or len(x) != 32 or len(y) != 32:
        raise InvalidPoint('P-256 coordinates must be 32 bytes each')
    peer = _ec_public_key(x + y)
    shared_x = _ec_private_key(authenticator_private.private_key).exchange(ec.ECDH(), peer)
    return SharedSecret(sha256(shared_x))


def _secret_bytes(secret):
    return secret.value if isinstance(secret, SharedSecret) else bytes(secret)


def _aes_cbc(secret, data, encrypt):
    if len(data) % 16:
        raise InvalidLength('AES-CBC input must be a multiple of 16 bytes, got %d' % len(data))
    cipher = Cipher(algorithms.AES(_secret_bytes(secret)), modes.CBC(b'\x00' * 16))
    ctx = cipher.encryptor() if encrypt else cipher.decryptor()
    return ctx.update(data) + ctx.finalize()


def pin1_encrypt(secret, plaintext):
    """AES-256-CBC with a zero IV, as PIN protocol 1 specifies
    """
    return _aes_cbc(secret, plaintext, True)


def pin1_decrypt(secret, ciphertext):
    return _aes_cbc(secret, ciphertext, False)


def pin1_authenticate(key, message):
    """
    PIN protocol 1 pinAuth: HMAC-SHA-256 truncated to 16 bytes

    args:
        key: shared secret or PIN token
        message: authenticated bytes
    """
    return hmac_sha256(_secret_bytes(key), message)[:16]


def pin1_verify(key, message, tag):
    return isinstance(tag, bytes) and hmac.compare_digest(pin1_authenticate(key, message), tag)

