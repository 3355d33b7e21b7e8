import glob
import os

import pytest

from qey import cose, crypto
from qey.crypto import (InvalidKey, InvalidLength, InvalidPoint, KeyPair, ProviderUnavailable, es256_der_to_raw,
                        es256_raw_to_der, generate_keypair, sign, verify)
from qey.utils import seeded_rng, sha256

SIZES = {
    cose.MLDSA44: (2560, 1312, 2420),
    cose.MLDSA65: (4032, 1952, 2560),
    cose.ES256: (32, 64, 64),
}


@pytest.mark.parametrize('algorithm', sorted(SIZES))
def test_sizes_and_round_trip(algorithm, rng):
    keypair = generate_keypair(algorithm, rng)
    private_len, public_len, signature_len = SIZES[algorithm]
    assert len(keypair.private_key) == private_len
    assert len(keypair.public_key) == public_len
    signature = sign(keypair, b'message', rng)
    assert len(signature) == signature_len
    assert verify(keypair.public_key, algorithm, b'message', signature)
    assert not verify(keypair.public_key, algorithm, b'messagf', signature)


@pytest.mark.parametrize('algorithm', sorted(SIZES))
def test_flipped_signature_bit_rejected(algorithm, rng):
    keypair = generate_keypair(algorithm, rng)
    signature = bytearray(sign(keypair, b'payload', rng))
    signature[len(signature) // 3] ^= 0x10
    assert not verify(keypair.public_key, algorithm, b'payload', bytes(signature))


@pytest.mark.parametrize('algorithm', [cose.MLDSA44, cose.MLDSA65])
def test_other_key_rejected(algorithm, rng):
    keypair = generate_keypair(algorithm, rng)
    other = generate_keypair(algorithm, rng)
    assert not verify(other.public_key, algorithm, b'm', sign(keypair, b'm', rng))


@pytest.mark.slow
@pytest.mark.parametrize('algorithm', sorted(SIZES))
def test_many_cycles(algorithm):
    rng = seeded_rng(7)
    for i in range(100):
        keypair = generate_keypair(algorithm, rng)
        message = rng(1 + i % 64)
        assert verify(keypair.public_key, algorithm, message, sign(keypair, message, rng))


def test_seeded_keygen_is_reproducible():
    first = generate_keypair(cose.MLDSA44, seeded_rng(99))
    second = generate_keypair(cose.MLDSA44, seeded_rng(99))
    assert first == second
    assert generate_keypair(cose.ES256, seeded_rng(99)) == generate_keypair(cose.ES256, seeded_rng(99))


def test_deterministic_signing(rng):
    keypair = generate_keypair(cose.MLDSA44, rng)
    assert sign(keypair, b'm', deterministic=True) == sign(keypair, b'm', deterministic=True)


def test_hedged_signing_differs(rng):
    keypair = generate_keypair(cose.MLDSA65, rng)
    first, second = sign(keypair, b'm', rng), sign(keypair, b'm', rng)
    assert first != second
    assert verify(keypair.public_key, cose.MLDSA65, b'm', first)
    assert verify(keypair.public_key, cose.MLDSA65, b'm', second)


@pytest.mark.parametrize('algorithm', sorted(SIZES))
def test_wrong_lengths_raise(algorithm, rng):
    keypair = generate_keypair(algorithm, rng)
    signature = sign(keypair, b'm', rng)
    with pytest.raises(InvalidLength):
        verify(keypair.public_key, algorithm, b'm', signature[:-1])
    with pytest.raises(InvalidLength):
        verify(keypair.public_key + b'\x00', algorithm, b'm', signature)


def test_unsupported_algorithm(rng):
    with pytest.raises(cose.UnsupportedAlgorithm):
        generate_keypair(cose.RS256, rng)
    with pytest.raises(cose.UnsupportedAlgorithm):
        verify(bytes(2592), cose.MLDSA87, b'm', bytes(4627))


def test_keypair_sizes_checked():
    with pytest.raises(InvalidKey):
        KeyPair(cose.MLDSA44, bytes(2560), bytes(1311))


def test_keypair_repr_hides_private_key(rng):
    keypair = generate_keypair(cose.ES256, rng)
    assert keypair.private_key.hex() not in repr(keypair)


def test_es256_der_round_trip(rng):
    keypair = generate_keypair(cose.ES256, rng)
    raw = sign(keypair, b'm', rng)
    der = es256_raw_to_der(raw)
    assert der[0] == 0x30
    assert es256_der_to_raw(der) == raw
    with pytest.raises(InvalidLength):
        es256_der_to_raw(b'\x30\x02\x01')
    with pytest.raises(InvalidLength):
        es256_raw_to_der(raw[:63])


def test_es256_off_curve_key_is_invalid(rng):
    keypair = generate_keypair(cose.ES256, rng)
    signature = sign(keypair, b'm', rng)
    assert not verify(b'\x01' * 64, cose.ES256, b'm', signature)


def test_cose_key_of_keypair(rng):
    keypair = generate_keypair(cose.MLDSA65, rng)
    key = keypair.cose_key()
    assert key.key_type == cose.KTY_AKP
    assert key.raw_public_bytes() == keypair.public_key


def test_unknown_provider():
    with pytest.raises(ProviderUnavailable):
        crypto.get_provider('nope')


# PIN protocol 1

def test_key_agreement_is_symmetric(rng):
    a = crypto.generate_pin_keypair(rng)
    b = crypto.generate_pin_keypair(rng)
    ab = crypto.pin1_key_agreement(crypto.key_agreement_cose_key(b), a)
    ba = crypto.pin1_key_agreement(crypto.key_agreement_cose_key(a), b)
    assert ab == ba
    assert len(ab.value) == 32


def test_key_agreement_rejects_bad_point(rng):
    own = crypto.generate_pin_keypair(rng)
    peer = cose.CoseKey(cose.KTY_EC2, cose.ECDH_ES_HKDF_256,
                        {cose.LABEL_CRV: 1, cose.LABEL_X: b'\x01' * 32, cose.LABEL_Y: b'\x02' * 32})
    with pytest.raises(InvalidPoint):
        crypto.pin1_key_agreement(peer, own)
    peer = cose.CoseKey(cose.KTY_EC2, cose.ECDH_ES_HKDF_256,
                        {cose.LABEL_CRV: 1, cose.LABEL_X: b'\x01' * 31, cose.LABEL_Y: b'\x02' * 32})
    with pytest.raises(InvalidPoint):
        crypto.pin1_key_agreement(peer, own)


def test_pin_encryption_zero_iv():
    secret = crypto.SharedSecret(bytes(range(32)))
    block = b'1234'.ljust(64, b'\x00')
    ciphertext = crypto.pin1_encrypt(secret, block)
    assert len(ciphertext) == 64
    assert crypto.pin1_decrypt(secret, ciphertext) == block
    # zero IV and CBC: equal leading blocks encrypt equally
    assert crypto.pin1_encrypt(secret, block[:16]) == ciphertext[:16]
    with pytest.raises(InvalidLength):
        crypto.pin1_encrypt(secret, b'short')


def test_pin_auth():
    key = bytes(16)
    tag = crypto.pin1_authenticate(key, b'data')
    assert len(tag) == 16
    assert crypto.pin1_verify(key, b'data', tag)
    assert not crypto.pin1_verify(key, b'data', tag[:15] + bytes([tag[15] ^ 1]))
    assert not crypto.pin1_verify(key, b'data', None)


def test_shared_secret_length():
    with pytest.raises(InvalidLength):
        crypto.SharedSecret(bytes(31))


def test_pin_encryption_known_answer():
    # single block with a zero IV is plain AES-256
    key = bytes(range(32))
    plaintext = bytes.fromhex('00112233445566778899aabbccddeeff')
    assert crypto.pin1_encrypt(key, plaintext).hex() == '8ea2b7ca516745bfeafc49904b496089'


def test_pin_encryption_matches_pycryptodome(rng):
    from Crypto.Cipher import AES

    for length in (16, 64, 256):
        key, data = rng(32), rng(length)
        expected = AES.new(key, AES.MODE_CBC, iv=bytes(16)).encrypt(data)
        assert crypto.pin1_encrypt(crypto.SharedSecret(key), data) == expected
        assert crypto.pin1_decrypt(crypto.SharedSecret(key), expected) == data


@pytest.mark.parametrize('key, message, digest', [
    (b'\x0b' * 20, b'Hi There', 'b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7'),
    (b'Jefe', b'what do ya want for nothing?', '5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843'),
])
def test_pin_auth_known_answers(key, message, digest):
    assert crypto.pin1_authenticate(key, message) == bytes.fromhex(digest)[:16]


P256_GENERATOR = (bytes.fromhex('6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296'),
                  bytes.fromhex('4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5'))


def test_key_agreement_with_generator(rng):
    # d * G is the own public key, so the shared x is its first half
    own = crypto.generate_pin_keypair(rng)
    x, y = P256_GENERATOR
    peer = cose.CoseKey(cose.KTY_EC2, cose.ECDH_ES_HKDF_256, {cose.LABEL_CRV: 1, cose.LABEL_X: x, cose.LABEL_Y: y})
    assert crypto.pin1_key_agreement(peer, own).value == sha256(own.public_key[:32])


def test_key_agreement_matches_pycryptodome(rng):
    from Crypto.PublicKey import ECC

    for _ in range(5):
        own, other = crypto.generate_pin_keypair(rng), crypto.generate_pin_keypair(rng)
        point = ECC.EccPoint(int.from_bytes(other.public_key[:32], 'big'), int.from_bytes(other.public_key[32:], 'big'),
                             curve='P-256') * int.from_bytes(own.private_key, 'big')
        expected = sha256(int(point.x).to_bytes(32, 'big'))
        assert crypto.pin1_key_agreement(crypto.key_agreement_cose_key(other), own).value == expected


KAT_DIR = os.environ.get('QEY_MLDSA_KAT_DIR')


def _kat_vectors(path):
    """records of a NIST style .rsp file as dicts"""
    record = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith('#'):
                if record:
                    yield record
                    record = {}
                continue
            key, _, value = line.partition('=')
            record[key.strip()] = value.strip()
    if record:
        yield record


@pytest.mark.skipif(not KAT_DIR, reason='QEY_MLDSA_KAT_DIR not set')
@pytest.mark.parametrize('algorithm, pattern', [(cose.MLDSA44, '*44*.rsp'), (cose.MLDSA65, '*65*.rsp')])
def test_known_answers(algorithm, pattern):
    from dilithium_py.drbg.aes256_ctr_drbg import AES256_CTR_DRBG

    files = glob.glob(os.path.join(KAT_DIR, pattern))
    if not files:
        pytest.skip('no %s vectors' % cose.algorithm_name(algorithm))
    for record in _kat_vectors(files[0]):
        if 'seed' not in record or 'pk' not in record:
            continue
        drbg = AES256_CTR_DRBG(bytes.fromhex(record['seed']))
        keypair = generate_keypair(algorithm, drbg.random_bytes)
        assert keypair.public_key == bytes.fromhex(record['pk'])
        assert keypair.private_key == bytes.fromhex(record['sk'])
        if 'msg' in record and 'sm' in record and not record.get('ctx'):
            # signed message is signature || message
            signature_len = SIZES[algorithm][2]
            signed = bytes.fromhex(record['sm'])
            assert sign(keypair, bytes.fromhex(record['msg']), deterministic=True) == signed[:signature_len]
