"""
.. module:: cose
    :synopsis: COSE algorithm registry and COSE_Key encoding (ES256, ML-DSA)
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Mapping

from qey.utils import revlut

#: the one place algorithm identifiers are assigned. The ML-DSA values are the
#: provisional COSE assignments; remap here if the final registry differs.
ALGORITHM_REGISTRY: Dict[str, int] = {
    'ES256': -7,
    'ECDH-ES+HKDF-256': -25,
    'ML-DSA-44': -48,
    'ML-DSA-65': -49,
    'ML-DSA-87': -50,
    'RS256': -257,
}

ES256 = ALGORITHM_REGISTRY['ES256']
ECDH_ES_HKDF_256 = ALGORITHM_REGISTRY['ECDH-ES+HKDF-256']
MLDSA44 = ALGORITHM_REGISTRY['ML-DSA-44']
MLDSA65 = ALGORITHM_REGISTRY['ML-DSA-65']
MLDSA87 = ALGORITHM_REGISTRY['ML-DSA-87']
RS256 = ALGORITHM_REGISTRY['RS256']

#: signature algorithms, in authenticator preference order
SUPPORTED_ALGORITHMS = (MLDSA44, MLDSA65, ES256)
#: recognized but not implemented
KNOWN_UNSUPPORTED = (MLDSA87, RS256)

_NAMES = revlut(ALGORITHM_REGISTRY)
# names used in timing tables
_DISPLAY_NAMES = {ES256: 'ES-256'}

# key types
KTY_EC2 = 2
KTY_AKP = 7

# labels
LABEL_KTY = 1
LABEL_ALG = 3
LABEL_CRV = -1
LABEL_X = -2
LABEL_Y = -3
LABEL_PUB = -1

CRV_P256 = 1

MLDSA_PUBLIC_KEY_LENGTHS = {MLDSA44: 1312, MLDSA65: 1952}
EC2_COORDINATE_LENGTH = 32


class CoseError(ValueError):
    """base class of COSE key failures"""


class UnsupportedAlgorithm(CoseError):
    """algorithm id outside the supported signature set"""

    def __init__(self, algorithm, message=None):
        self.algorithm = algorithm
        if message is None:
            if algorithm in KNOWN_UNSUPPORTED:
                message = '%s (%d) is recognized but not supported' % (_NAMES[algorithm], algorithm)
            else:
                message = 'unknown algorithm %r' % (algorithm,)
        super(UnsupportedAlgorithm, self).__init__(message)


class MissingField(CoseError):
    """a required COSE_Key label is absent"""


class InvalidLength(CoseError):
    """a key parameter has the wrong size"""


def algorithm_name(algorithm):
    """display name of an algorithm id, e.g. 'ML-DSA-44' or 'ES-256'
    """
    if algorithm in _DISPLAY_NAMES:
        return _DISPLAY_NAMES[algorithm]
    return _NAMES.get(algorithm, str(algorithm))


def is_supported(algorithm):
    return algorithm in SUPPORTED_ALGORITHMS


def parse_algorithm(text):
    """
    parse an algorithm given either as a COSE id ('-48') or a name ('ML-DSA-44')

    args:
        text: user supplied value
    return:
        integer COSE id
    """
    text = str(text).strip()
    try:
        return int(text)
    except ValueError:
        pass
    for name, value in ALGORITHM_REGISTRY.items():
        if text.upper() in (name, name.replace('-', '')):
            return value
    raise UnsupportedAlgorithm(text, 'unknown algorithm name %r' % text)


def require_supported(algorithm):
    if not is_supported(algorithm):
        raise UnsupportedAlgorithm(algorithm)
    return algorithm


@dataclass(frozen=True)
class CoseKey:
    """a COSE_Key: key type, algorithm and the labeled parameters

    args:
        key_type: kty label value (2 for EC2, 7 for ML-DSA key pairs)
        algorithm: COSE algorithm id
        parameters: remaining labels (for ES256: -1 crv, -2 x, -3 y; for ML-DSA: -1 public key)
    """
    key_type: int
    algorithm: int
    parameters: Mapping[int, Any] = field(default_factory=dict)

    @classmethod
    def from_public_bytes(cls, algorithm, public_key):
        """
        build a COSE key from the raw public key bytes

        args:
            algorithm: COSE algorithm id
            public_key: x||y for ES256 / ECDH, raw encoded key for ML-DSA
        """
        if algorithm in (ES256, ECDH_ES_HKDF_256):
            if len(public_key) != 2 * EC2_COORDINATE_LENGTH:
                raise InvalidLength('P-256 public key must be 64 bytes, got %d' % len(public_key))
            return cls(KTY_EC2, algorithm, {LABEL_CRV: CRV_P256,
                                            LABEL_X: bytes(public_key[:32]),
                                            LABEL_Y: bytes(public_key[32:])})
        if algorithm in MLDSA_PUBLIC_KEY_LENGTHS:
            return cls(KTY_AKP, algorithm, {LABEL_PUB: bytes(public_key)})
        raise UnsupportedAlgorithm(algorithm)

    def raw_public_bytes(self):
        """x||y for EC2 keys, the raw public key for ML-DSA keys
        """
        if self.key_type == KTY_EC2:
            return self.parameters[LABEL_X] + self.parameters[LABEL_Y]
        return self.parameters[LABEL_PUB]


def _check_ec2(key):
    params = key.parameters
    for label in (LABEL_CRV, LABEL_X, LABEL_Y):
        if label not in params:
            raise MissingField('EC2 key lacks label %d' % label)
    if params[LABEL_CRV] != CRV_P256:
        raise CoseError('unsupported curve %r' % (params[LABEL_CRV],))
    for label in (LABEL_X, LABEL_Y):
        value = params[label]
        if not isinstance(value, bytes) or len(value) != EC2_COORDINATE_LENGTH:
            raise InvalidLength('EC2 coordinate %d must be a 32-byte string' % label)


def _check_akp(key):
    if LABEL_PUB not in key.parameters:
        raise MissingField('ML-DSA key lacks public key label %d' % LABEL_PUB)
    value = key.parameters[LABEL_PUB]
    expected = MLDSA_PUBLIC_KEY_LENGTHS[key.algorithm]
    if not isinstance(value, bytes) or len(value) != expected:
        raise InvalidLength('%s public key must be %d bytes, got %s'
                            % (algorithm_name(key.algorithm), expected,
                               len(value) if isinstance(value, bytes) else type(value).__name__))


def _check_key(key, allowed):
    if key.algorithm not in allowed:
        raise UnsupportedAlgorithm(key.algorithm)
    if key.algorithm in MLDSA_PUBLIC_KEY_LENGTHS:
        if key.key_type != KTY_AKP:
            raise CoseError('ML-DSA key must use key type %d' % KTY_AKP)
        _check_akp(key)
    else:
        if key.key_type != KTY_EC2:
            raise CoseError('P-256 key must use key type %d' % KTY_EC2)
        _check_ec2(key)


def _to_map(key):
    value = {LABEL_KTY: key.key_type, LABEL_ALG: key.algorithm}
    value.update(key.parameters)
    return value


def _from_map(value):
    if not isinstance(value, dict):
        raise CoseError('COSE key must be a map')
    if LABEL_KTY not in value:
        raise MissingField('COSE key lacks kty (label 1)')
    if LABEL_ALG not in value:
        raise MissingField('COSE key lacks alg (label 3)')
    params = {k: v for k, v in value.items() if k not in (LABEL_KTY, LABEL_ALG)}
    return CoseKey(value[LABEL_KTY], value[LABEL_ALG], params)


def encode_cose_key(key):
    """
    encode a signature public key as a COSE_Key map (CBOR-ready dict)

    args:
        key: CoseKey for ES256, ML-DSA-44 or ML-DSA-65
    return:
        dict of integer labels
    """
    _check_key(key, SUPPORTED_ALGORITHMS)
    return _to_map(key)


def decode_cose_key(value):
    """
    inverse of encode_cose_key

    args:
        value: decoded CBOR map
    return:
        validated CoseKey
    """
    key = _from_map(value)
    _check_key(key, SUPPORTED_ALGORITHMS)
    return key


def encode_key_agreement_key(key):
    """COSE_Key for PIN protocol 1 key agreement (P-256, alg ECDH-ES+HKDF-256)
    """
    _check_key(key, (ECDH_ES_HKDF_256,))
    return _to_map(key)


def decode_key_agreement_key(value):
    """parse the platform's key agreement COSE_Key; kty/crv checked, alg taken as sent
    """
    key = _from_map(value)
    if key.key_type != KTY_EC2:
        raise CoseError('key agreement key must use key type %d' % KTY_EC2)
    _check_ec2(key)
    return key
