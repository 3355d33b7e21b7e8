import dataclasses
import logging
import random
import string
import threading

import pytest

from qey import cose, crypto
from qey.client import ClientPin, Ctap2, DirectCtap, WebAuthnClient, client_data_json
from qey.cbor import encode_cbor
from qey.ctap2 import AttestationObject, Authenticator, CtapError, CtapStatus
from qey.relying_party import (BadSignature, ChallengeMismatch, ChallengeRecord, ChallengeStore,
                               CounterRegression, CredentialNotAllowed, FlagMissing, InvalidClientData,
                               MalformedResponse, OriginMismatch, RegisteredKey, RegistrationPolicy, RelyingParty,
                               RpIdHashMismatch, StaleChallenge, UnsupportedAlgorithm, UnsupportedAttestation,
                               VerificationError)
from qey.store import CredentialStore
from qey.utils import seeded_rng, sha256

from conftest import ORIGIN, RP_ID, USER


def begin_registration(rp, alg=cose.MLDSA44, user=USER):
    options, record = rp.begin_registration(user)
    options['pubKeyCredParams'] = [{'type': 'public-key', 'alg': alg}]
    return options, record


def register(rp, client, alg=cose.MLDSA44, user=USER):
    options, record = begin_registration(rp, alg, user)
    response = client.register(options)
    return rp.finish_registration(record, response.client_data_json, response.attestation_object)


def assert_with(rp, client, key):
    options, record = rp.begin_authentication([key.credential_id])
    return record, client.authenticate(options)


def finish(rp, key, record, response, client_data=None, auth_data=None, signature=None):
    return rp.finish_authentication(
        record, key,
        response.client_data_json if client_data is None else client_data,
        response.authenticator_data if auth_data is None else auth_data,
        response.signature if signature is None else signature)


def flip(data, position, bit=0x01):
    data = bytearray(data)
    data[position] ^= bit
    return bytes(data)


@pytest.mark.parametrize('alg, public_key_len', [(cose.MLDSA44, 1312), (cose.MLDSA65, 1952), (cose.ES256, 64)])
def test_ceremonies_over_loopback(rp, link, alg, public_key_len):
    client = WebAuthnClient(link, ORIGIN)
    key = register(rp, client, alg)
    assert key.algorithm == alg
    assert len(key.public_key.raw_public_bytes()) == public_key_len
    assert rp.last_report.ceremony == 'registration'
    assert rp.last_report.user_present and not rp.last_report.user_verified
    for expected in (1, 2):
        record, response = assert_with(rp, client, key)
        assert response.user_handle == USER['id']
        assert finish(rp, key, record, response) == expected
    assert key.last_sign_count == 2
    assert rp.last_report.to_dict()['algorithm'] == cose.algorithm_name(alg)


def test_registration_options(rp, client):
    options, record = rp.begin_registration(USER)
    assert options['rp']['id'] == RP_ID
    assert len(options['challenge']) == 32 and options['challenge'] == record.challenge
    assert [p['alg'] for p in options['pubKeyCredParams']] == [-48, -49, -7]
    assert options['excludeCredentials'] == []
    key = register(rp, client)
    options, _ = rp.begin_registration(USER)
    assert options['excludeCredentials'] == [{'type': 'public-key', 'id': key.credential_id}]


def test_excluded_credential_refused_by_authenticator(rp, client):
    register(rp, client)
    options, _ = rp.begin_registration(USER)
    with pytest.raises(CtapError) as info:
        client.register(options)
    assert info.value.code == CtapStatus.CREDENTIAL_EXCLUDED


def test_policy_algorithms_validated():
    with pytest.raises(cose.UnsupportedAlgorithm):
        RegistrationPolicy(RP_ID, ORIGIN, [-257])
    with pytest.raises(ValueError):
        RegistrationPolicy(RP_ID, ORIGIN, [])


def test_algorithm_outside_policy(client, rng):
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN, [cose.MLDSA44]), rng=rng)
    with pytest.raises(UnsupportedAlgorithm):
        register(rp, client, cose.ES256)


# registration attacks

def test_registration_challenge_mismatch(rp, client):
    options, record = begin_registration(rp)
    options['challenge'] = bytes(32)
    response = client.register(options)
    with pytest.raises(ChallengeMismatch):
        rp.finish_registration(record, response.client_data_json, response.attestation_object)


def test_registration_origin_mismatch(rp, authenticator):
    client = WebAuthnClient(DirectCtap(authenticator), 'https://evil.example')
    with pytest.raises(OriginMismatch):
        register(rp, client)


def test_registration_rp_id_mismatch(rp, client):
    options, record = begin_registration(rp)
    options['rp'] = {'id': 'evil.example'}
    response = client.register(options)
    with pytest.raises(RpIdHashMismatch):
        rp.finish_registration(record, response.client_data_json, response.attestation_object)


def test_registration_replay(rp, client):
    options, record = begin_registration(rp)
    response = client.register(options)
    rp.finish_registration(record, response.client_data_json, response.attestation_object)
    with pytest.raises(StaleChallenge):
        rp.finish_registration(record, response.client_data_json, response.attestation_object)


def test_registration_wrong_ceremony_type(rp, client):
    options, record = begin_registration(rp)
    response = client.register(options)
    forged = client_data_json('webauthn.get', record.challenge, ORIGIN)
    with pytest.raises(InvalidClientData):
        rp.finish_registration(record, forged, response.attestation_object)


@pytest.mark.parametrize('client_data', [b'not json', b'\xff\xfe', b'[1, 2]'])
def test_registration_invalid_client_data(rp, client, client_data):
    options, record = begin_registration(rp)
    response = client.register(options)
    with pytest.raises(InvalidClientData):
        rp.finish_registration(record, client_data, response.attestation_object)


@pytest.mark.parametrize('alg', [cose.MLDSA44, cose.ES256])
def test_registration_bad_attestation_signature(rp, client, alg):
    options, record = begin_registration(rp, alg)
    response = client.register(options)
    attestation = AttestationObject.from_bytes(response.attestation_object)
    att_stmt = dict(attestation.att_stmt, sig=flip(attestation.att_stmt['sig'], 10))
    forged = dataclasses.replace(attestation, att_stmt=att_stmt).to_bytes()
    with pytest.raises(BadSignature):
        rp.finish_registration(record, response.client_data_json, forged)


def test_registration_client_data_swapped(rp, client):
    options, record = begin_registration(rp)
    response = client.register(options)
    # right challenge and origin, but not the JSON the authenticator signed over
    swapped = client_data_json('webauthn.create', record.challenge, ORIGIN).replace(b'false', b'true ')
    with pytest.raises(BadSignature):
        rp.finish_registration(record, swapped, response.attestation_object)


@pytest.mark.parametrize('change, error', [
    (lambda a: dataclasses.replace(a, fmt='none'), UnsupportedAttestation),
    (lambda a: dataclasses.replace(a, att_stmt=dict(a.att_stmt, x5c=[b'cert'])), UnsupportedAttestation),
    (lambda a: dataclasses.replace(a, att_stmt=dict(a.att_stmt, alg=cose.MLDSA65)), UnsupportedAttestation),
    (lambda a: dataclasses.replace(a, att_stmt={'alg': a.att_stmt['alg']}), MalformedResponse),
    (lambda a: dataclasses.replace(a, auth_data=a.auth_data + b'\x00'), MalformedResponse),
    (lambda a: dataclasses.replace(a, auth_data=a.auth_data[:37]), MalformedResponse),
])
def test_registration_attestation_checks(rp, client, change, error):
    options, record = begin_registration(rp)
    response = client.register(options)
    forged = change(AttestationObject.from_bytes(response.attestation_object)).to_bytes()
    with pytest.raises(error):
        rp.finish_registration(record, response.client_data_json, forged)


def test_registration_malformed_attestation_object(rp):
    for data in (b'\xa0', b'\xff', b'\x80'):
        _, record = begin_registration(rp)
        client_data = client_data_json('webauthn.create', record.challenge, ORIGIN)
        with pytest.raises(MalformedResponse):
            rp.finish_registration(record, client_data, data)


@pytest.mark.parametrize('attestation_object', [
    encode_cbor({'fmt': 'none', 'attStmt': {}, 'authData': 'x'}),
    encode_cbor({'fmt': 'packed', 'attStmt': [], 'authData': bytes(37)}),
    encode_cbor({'fmt': 7, 'attStmt': {}, 'authData': bytes(37)}),
    'not bytes',
    None,
])
def test_registration_wrong_field_types(rp, attestation_object):
    _, record = begin_registration(rp)
    client_data = client_data_json('webauthn.create', record.challenge, ORIGIN)
    with pytest.raises(MalformedResponse):
        rp.finish_registration(record, client_data, attestation_object)


def test_authentication_wrong_field_types(rp, client, registered):
    record, response = assert_with(rp, client, registered)
    with pytest.raises(MalformedResponse):
        finish(rp, registered, record, response, signature='not bytes')
    record, response = assert_with(rp, client, registered)
    with pytest.raises(MalformedResponse):
        finish(rp, registered, record, response, auth_data=response.authenticator_data.hex())
    record, response = assert_with(rp, client, registered)
    with pytest.raises(InvalidClientData):
        finish(rp, registered, record, response, client_data=response.client_data_json.decode())


# authentication attacks

@pytest.fixture
def registered(rp, client):
    return register(rp, client)


def test_authentication_challenge_mismatch(rp, client, registered):
    options, record = rp.begin_authentication([registered.credential_id])
    options['challenge'] = bytes(32)
    response = client.authenticate(options)
    with pytest.raises(ChallengeMismatch):
        finish(rp, registered, record, response)


def test_authentication_origin_mismatch(rp, authenticator, registered):
    evil = WebAuthnClient(DirectCtap(authenticator), 'https://evil.example')
    record, response = assert_with(rp, evil, registered)
    with pytest.raises(OriginMismatch):
        finish(rp, registered, record, response)


def test_authentication_rp_id_mismatch(rp, client, registered):
    record, response = assert_with(rp, client, registered)
    with pytest.raises(RpIdHashMismatch):
        finish(rp, registered, record, response, auth_data=flip(response.authenticator_data, 5))


def test_authentication_replay(rp, client, registered):
    record, response = assert_with(rp, client, registered)
    finish(rp, registered, record, response)
    with pytest.raises(StaleChallenge):
        finish(rp, registered, record, response)


def test_registration_record_not_usable_for_authentication(rp, client, registered):
    _, record = begin_registration(rp)
    _, response = assert_with(rp, client, registered)
    with pytest.raises(ChallengeMismatch):
        finish(rp, registered, record, response)


def test_unknown_challenge(rp, client, registered):
    _, response = assert_with(rp, client, registered)
    record = ChallengeRecord(bytes(32), RP_ID, 1e12, 'authentication')
    with pytest.raises(StaleChallenge):
        finish(rp, registered, record, response)


def test_expired_challenge(client, authenticator, rng):
    now = [1000.0]
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN, challenge_ttl=60), clock=lambda: now[0], rng=rng)
    key = register(rp, client, cose.ES256)
    record, response = assert_with(rp, client, key)
    now[0] += 61
    with pytest.raises(StaleChallenge):
        finish(rp, key, record, response)


def test_user_presence_flag_missing(rp, client, registered):
    record, response = assert_with(rp, client, registered)
    with pytest.raises(FlagMissing):
        finish(rp, registered, record, response, auth_data=flip(response.authenticator_data, 32))


@pytest.mark.parametrize('position', [33, 34, 35, 36])
def test_sign_count_tampered(rp, client, registered, position):
    record, response = assert_with(rp, client, registered)
    with pytest.raises(BadSignature):
        finish(rp, registered, record, response, auth_data=flip(response.authenticator_data, position))


@pytest.mark.parametrize('alg', [cose.MLDSA44, cose.MLDSA65, cose.ES256])
def test_assertion_signature_tampered(rp, client, alg):
    key = register(rp, client, alg)
    record, response = assert_with(rp, client, key)
    with pytest.raises(BadSignature):
        finish(rp, key, record, response, signature=flip(response.signature, len(response.signature) // 2, 0x40))
    record, response = assert_with(rp, client, key)
    with pytest.raises(BadSignature):
        finish(rp, key, record, response, signature=response.signature[:-1])


def test_assertion_by_other_key(rp, client):
    first = register(rp, client, cose.MLDSA44)
    second = register(rp, client, cose.MLDSA44, {'id': b'bob', 'name': 'bob'})
    options, record = rp.begin_authentication()
    response = client.authenticate(options)
    other = first if response.credential_id == second.credential_id else second
    with pytest.raises(BadSignature):
        finish(rp, other, record, response)


def test_credential_not_allowed(rp, client, registered):
    other = register(rp, client, cose.ES256, {'id': b'bob', 'name': 'bob'})
    record, response = assert_with(rp, client, registered)
    with pytest.raises(CredentialNotAllowed):
        finish(rp, other, record, response)


def test_assertion_with_attested_data_rejected(rp, client, registered):
    options, record = begin_registration(rp, user={'id': b'carol', 'name': 'carol'})
    registration = client.register(options)
    auth_data = AttestationObject.from_bytes(registration.attestation_object).auth_data
    record, response = assert_with(rp, client, registered)
    with pytest.raises(MalformedResponse):
        finish(rp, registered, record, response, auth_data=auth_data)


def test_es256_der_signature_accepted(rp, client):
    key = register(rp, client, cose.ES256)
    record, response = assert_with(rp, client, key)
    assert finish(rp, key, record, response, signature=crypto.es256_raw_to_der(response.signature)) == 1
    record, response = assert_with(rp, client, key)
    with pytest.raises(BadSignature):
        finish(rp, key, record, response, signature=b'\x30' + bytes(69))


def test_cloned_authenticator_detected(rp, rng):
    secret = bytes(range(32))
    original = Authenticator(CredentialStore(device_secret=secret, rng=rng), rng=rng)
    client = WebAuthnClient(DirectCtap(original), ORIGIN)
    key = register(rp, client, cose.MLDSA44)

    cloned_store = CredentialStore(device_secret=secret, rng=rng)
    cloned_store.from_bytes(original.store.to_bytes())
    clone = WebAuthnClient(DirectCtap(Authenticator(cloned_store, rng=rng)), ORIGIN)

    for _ in range(2):
        record, response = assert_with(rp, client, key)
        finish(rp, key, record, response)
    record, response = assert_with(rp, clone, key)
    with pytest.raises(CounterRegression):
        finish(rp, key, record, response)
    assert key.last_sign_count == 2


def test_user_verification_required(authenticator, rng):
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN, require_user_verification=True), rng=rng)
    options, record = begin_registration(rp)
    response = WebAuthnClient(DirectCtap(authenticator), ORIGIN).register(options)
    with pytest.raises(FlagMissing):
        rp.finish_registration(record, response.client_data_json, response.attestation_object)

    ClientPin(Ctap2(DirectCtap(authenticator)), rng).set_pin('2468')
    client = WebAuthnClient(DirectCtap(authenticator), ORIGIN, pin='2468', rng=rng)
    key = register(rp, client)
    assert rp.last_report.user_verified
    record, response = assert_with(rp, client, key)
    assert finish(rp, key, record, response) >= 1
    assert rp.last_report.user_verified


def _printed_forms(secret):
    return {secret.hex(), secret.hex().upper(), repr(secret)[2:-1], secret.decode('latin-1')}


def test_secrets_stay_out_of_logs_and_errors(caplog, monkeypatch, authenticator, rng):
    pin = 'qey-pin-5813'
    secrets = [pin.encode(), sha256(pin.encode())[:16], authenticator._key_agreement.private_key]

    def recording(function, pick):
        def wrapper(*args, **kwargs):
            result = function(*args, **kwargs)
            secrets.append(pick(result))
            return result
        return wrapper
    monkeypatch.setattr(crypto, 'generate_pin_keypair', recording(crypto.generate_pin_keypair, lambda k: k.private_key))
    monkeypatch.setattr(crypto, 'pin1_key_agreement', recording(crypto.pin1_key_agreement, lambda s: s.value))
    caplog.set_level(logging.DEBUG)
    errors = []

    ClientPin(Ctap2(DirectCtap(authenticator)), rng).set_pin(pin)
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN), rng=rng)
    client = WebAuthnClient(DirectCtap(authenticator), ORIGIN, pin=pin, rng=rng)
    key = register(rp, client, cose.MLDSA44)
    record, response = assert_with(rp, client, key)
    finish(rp, key, record, response)
    record, response = assert_with(rp, client, key)
    with pytest.raises(BadSignature) as info:
        finish(rp, key, record, response, signature=flip(response.signature, 3))
    errors.append(info.value)
    with pytest.raises(CtapError) as info:
        ClientPin(Ctap2(DirectCtap(authenticator)), rng).get_pin_token('qey-pin-0000')
    assert info.value.code == CtapStatus.PIN_INVALID
    errors.append(info.value)
    secrets.append(authenticator._pin_token.token)
    secrets.extend(c.keypair.private_key for c in authenticator.store.state.credentials)

    assert len(caplog.records) > 0
    texts = [entry.getMessage() for entry in caplog.records] + [caplog.text]
    texts += [str(e) for e in errors] + [repr(e) for e in errors]
    for secret in secrets:
        for form in _printed_forms(secret):
            assert not any(form in text for text in texts)


def test_resident_flow_without_allow_list(rp, client, registered):
    options, record = rp.begin_authentication()
    assert options['allowCredentials'] == []
    response = client.authenticate(options)
    assert response.credential_id == registered.credential_id
    assert finish(rp, rp.credentials[response.credential_id], record, response) == 1


def test_credentials_saved_and_loaded(tmp_path, rp, client, registered, rng):
    path = str(tmp_path / 'rp.json')
    rp.save_credentials(path)
    other = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN), rng=rng)
    assert other.load_credentials(path) == 1
    loaded = other.credentials[registered.credential_id]
    assert loaded.public_key == registered.public_key
    assert loaded.user_id == USER['id']
    record, response = assert_with(other, client, loaded)
    assert finish(other, loaded, record, response) == 1


def test_registered_key_algorithm_consistency(registered):
    with pytest.raises(ValueError):
        RegisteredKey(registered.credential_id, registered.public_key, cose.ES256)


# challenge store

def test_challenge_consumed_once_across_threads(rp):
    _, record = rp.begin_authentication()
    outcomes = []
    barrier = threading.Barrier(8)

    def consume():
        barrier.wait()
        try:
            rp.challenges.consume(record, 0)
            outcomes.append('ok')
        except StaleChallenge:
            outcomes.append('stale')
    threads = [threading.Thread(target=consume) for _ in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert sorted(outcomes) == ['ok'] + ['stale'] * 7


def test_challenge_store_persist_and_purge():
    snapshots = []
    store = ChallengeStore(persist=snapshots.append)
    store.issue(ChallengeRecord(b'a' * 32, RP_ID, 10.0, 'registration'))
    store.issue(ChallengeRecord(b'b' * 32, RP_ID, 20.0, 'registration'))
    assert len(store) == 2 and len(snapshots[-1]) == 2
    assert store.purge(15.0) == 1
    assert [r.challenge for r in snapshots[-1]] == [b'b' * 32]
    restored = ChallengeStore()
    restored.restore(snapshots[-1])
    assert restored.consume(ChallengeRecord(b'b' * 32, RP_ID, 20.0, 'registration'), 0).expires_at == 20.0
    assert len(restored) == 0


def test_expired_challenges_purged_on_begin(rng):
    now = [1000.0]
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN, challenge_ttl=60), clock=lambda: now[0], rng=rng)
    for _ in range(20):
        rp.begin_authentication()
        rp.begin_registration(USER)
    assert len(rp.challenges) == 40
    now[0] += 61
    rp.begin_authentication()
    assert len(rp.challenges) == 1


# randomized runs

@pytest.mark.slow
def test_many_ceremonies(link):
    rng = seeded_rng(5)
    rp = RelyingParty(RegistrationPolicy(RP_ID, ORIGIN), rng=rng)
    client = WebAuthnClient(link, ORIGIN)
    algorithms = list(cose.SUPPORTED_ALGORITHMS)
    for i in range(100):
        user = {'id': b'user-%d' % i, 'name': 'user%d' % i}
        key = register(rp, client, algorithms[i % 3], user)
        record, response = assert_with(rp, client, key)
        assert finish(rp, key, record, response) == 1


def _expected_for_position(position):
    if position < 32:
        return (RpIdHashMismatch,)
    if position == 32:
        return FlagMissing, MalformedResponse, BadSignature
    return (BadSignature,)



def random_host(chooser):
    labels = [''.join(chooser.choice(string.ascii_lowercase + string.digits) for _ in range(chooser.randint(1, 12)))
              for _ in range(chooser.randint(1, 3))]
    return '.'.join(labels + [chooser.choice(['com', 'org', 'example'])])


@pytest.mark.slow
@pytest.mark.parametrize('attack', ['signature', 'auth_data', 'client_data', 'origin', 'challenge', 'rp_id'])
def test_attack_trials(rp, authenticator, client, attack):
    chooser = random.Random(attack)
    key = register(rp, client, cose.MLDSA44)
    evil = WebAuthnClient(DirectCtap(authenticator), 'https://evil.example')
    for _ in range(50):
        if attack == 'origin':
            record, response = assert_with(rp, evil, key)
            with pytest.raises(OriginMismatch):
                finish(rp, key, record, response)
            continue
        record, response = assert_with(rp, client, key)
        if attack == 'rp_id':
            host = random_host(chooser)
            with pytest.raises(RpIdHashMismatch):
                finish(rp, key, record, response, auth_data=sha256(host.encode()) + response.authenticator_data[32:])
            options, _ = rp.begin_authentication([key.credential_id])
            with pytest.raises(CtapError) as info:
                client.authenticate(dict(options, rpId=host))
            assert info.value.code == CtapStatus.NO_CREDENTIALS
            continue
        if attack == 'signature':
            position = chooser.randrange(len(response.signature))
            with pytest.raises(BadSignature):
                finish(rp, key, record, response,
                       signature=flip(response.signature, position, 1 << chooser.randrange(8)))
        elif attack == 'auth_data':
            position, bit = chooser.randrange(37), 1 << chooser.randrange(8)
            with pytest.raises(_expected_for_position(position)):
                finish(rp, key, record, response, auth_data=flip(response.authenticator_data, position, bit))
        elif attack == 'client_data':
            position = chooser.randrange(len(response.client_data_json))
            with pytest.raises(VerificationError):
                finish(rp, key, record, response,
                       client_data=flip(response.client_data_json, position, 1 << chooser.randrange(8)))
        else:
            with pytest.raises(ChallengeMismatch):
                finish(rp, key, rp.begin_authentication([key.credential_id])[1], response)
            # the untouched record still verifies once
            finish(rp, key, record, response)
