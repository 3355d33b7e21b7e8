"""
.. module:: client
    :synopsis: synthetic WebAuthn platform: clientDataJSON, CTAP2 requests, PIN protocol 1

The client performs no origin / rp id validation of its own, so that staged
attacks reach the relying party unfiltered.
"""

import json
import logging
from dataclasses import dataclass
from typing import Optional

from qey import cose, crypto
from qey.cbor import decode_cbor, encode_cbor
from qey.ctap2 import AttestationObject, Cmd, CtapError, CtapStatus, PinSubCmd, PIN_PROTOCOL
from qey.utils import EntropySource, resolve_rng, sha256, websafe_encode

logger = logging.getLogger(__name__)

TYPE_CREATE = 'webauthn.create'
TYPE_GET = 'webauthn.get'


def args(*params):
    """CTAP2 parameter map from positional values, None entries omitted"""
    return dict((i, v) for i, v in enumerate(params, 1) if v is not None)


def client_data_json(ceremony_type, challenge, origin):
    """
    minimal clientDataJSON

    args:
        ceremony_type: 'webauthn.create' or 'webauthn.get'
        challenge: raw challenge bytes, base64url encoded into the JSON
        origin: caller origin
    return:
        UTF-8 JSON bytes
    """
    data = {'type': ceremony_type, 'challenge': websafe_encode(challenge), 'origin': origin, 'crossOrigin': False}
    return json.dumps(data, separators=(',', ':')).encode('utf8')


class DirectCtap:
    """CTAP2 requests handed straight to an authenticator, no framing"""

    def __init__(self, authenticator):
        self.authenticator = authenticator

    def send_cbor(self, request):
        return self.authenticator.handle_command(request)


class Ctap2:
    """
    CTAP2 request/response over any object offering send_cbor(bytes) -> bytes

    args:
        device: DirectCtap, ctaphid.CtapHidHost or equivalent
    """

    def __init__(self, device):
        self.device = device

    def send(self, cmd, params=None):
        request = bytes([cmd]) + (encode_cbor(params) if params else b'')
        response = self.device.send_cbor(request)
        status = response[0]
        if status != CtapStatus.SUCCESS:
            raise CtapError(status)
        return decode_cbor(response[1:]) if len(response) > 1 else {}

    def get_info(self):
        return self.send(Cmd.GET_INFO)

    def make_credential(self, client_data_hash, rp, user, key_params, exclude_list=None, options=None,
                        pin_auth=None, pin_protocol=None):
        return self.send(Cmd.MAKE_CREDENTIAL, args(client_data_hash, rp, user, key_params, exclude_list, None,
                                                   options, pin_auth, pin_protocol))

    def get_assertion(self, rp_id, client_data_hash, allow_list=None, options=None, pin_auth=None,
                      pin_protocol=None):
        return self.send(Cmd.GET_ASSERTION, args(rp_id, client_data_hash, allow_list, None, options, pin_auth,
                                                 pin_protocol))

    def get_next_assertion(self):
        return self.send(Cmd.GET_NEXT_ASSERTION)

    def client_pin(self, sub_cmd, key_agreement=None, pin_auth=None, new_pin_enc=None, pin_hash_enc=None,
                   pin_protocol=PIN_PROTOCOL):
        return self.send(Cmd.CLIENT_PIN, args(pin_protocol, sub_cmd, key_agreement, pin_auth, new_pin_enc,
                                              pin_hash_enc))


class ClientPin:
    """
    PIN protocol 1, platform side

    args:
        ctap: Ctap2
        rng: entropy for the platform key agreement key
    """

    def __init__(self, ctap, rng: Optional[EntropySource] = None):
        self.ctap = ctap
        self.rng = resolve_rng(rng)

    def _shared_secret(self):
        response = self.ctap.client_pin(PinSubCmd.GET_KEY_AGREEMENT)
        authenticator_key = cose.decode_key_agreement_key(response[1])
        own = crypto.generate_pin_keypair(self.rng)
        platform_key = cose.encode_key_agreement_key(crypto.key_agreement_cose_key(own))
        return platform_key, crypto.pin1_key_agreement(authenticator_key, own)

    @staticmethod
    def _pad(pin):
        pin = pin.encode('utf8')
        if len(pin) > 63:
            raise ValueError('PIN longer than 63 bytes')
        return pin.ljust(64, b'\x00')

    def get_retries(self):
        return self.ctap.client_pin(PinSubCmd.GET_RETRIES)[3]

    def set_pin(self, pin):
        key_agreement, shared = self._shared_secret()
        new_pin_enc = crypto.pin1_encrypt(shared, self._pad(pin))
        self.ctap.client_pin(PinSubCmd.SET_PIN, key_agreement=key_agreement,
                             pin_auth=crypto.pin1_authenticate(shared, new_pin_enc), new_pin_enc=new_pin_enc)

    def change_pin(self, old_pin, new_pin):
        key_agreement, shared = self._shared_secret()
        pin_hash_enc = crypto.pin1_encrypt(shared, sha256(old_pin.encode('utf8'))[:16])
        new_pin_enc = crypto.pin1_encrypt(shared, self._pad(new_pin))
        self.ctap.client_pin(PinSubCmd.CHANGE_PIN, key_agreement=key_agreement,
                             pin_auth=crypto.pin1_authenticate(shared, new_pin_enc + pin_hash_enc),
                             new_pin_enc=new_pin_enc, pin_hash_enc=pin_hash_enc)

    def get_pin_token(self, pin):
        """
        exchange the PIN for the authenticator's PIN token

        return:
            16-byte PIN token
        """
        key_agreement, shared = self._shared_secret()
        pin_hash_enc = crypto.pin1_encrypt(shared, sha256(pin.encode('utf8'))[:16])
        response = self.ctap.client_pin(PinSubCmd.GET_PIN_TOKEN, key_agreement=key_agreement,
                                        pin_hash_enc=pin_hash_enc)
        return crypto.pin1_decrypt(shared, response[2])


@dataclass
class RegistrationResponse:
    credential_id: bytes
    client_data_json: bytes
    attestation_object: bytes


@dataclass
class AssertionResponse:
    credential_id: bytes
    client_data_json: bytes
    authenticator_data: bytes
    signature: bytes
    user_handle: Optional[bytes] = None
    number_of_credentials: int = 1


class WebAuthnClient:
    """
    stands in for the browser: turns relying-party options into CTAP2 calls

    args:
        device: transport offering send_cbor
        origin: origin written into clientDataJSON
        pin: PIN to authenticate requests with, if any
        rng: entropy source for PIN key agreement
    """

    def __init__(self, device, origin, pin=None, rng: Optional[EntropySource] = None):
        self.ctap = Ctap2(device)
        self.origin = origin
        self.pin = pin
        self.rng = resolve_rng(rng)

    def _pin_params(self, client_data_hash):
        if self.pin is None:
            return None, None
        token = ClientPin(self.ctap, self.rng).get_pin_token(self.pin)
        return crypto.pin1_authenticate(token, client_data_hash), PIN_PROTOCOL

    def register(self, options):
        """
        run makeCredential for publicKeyCredentialCreationOptions

        return:
            RegistrationResponse with the WebAuthn attestationObject encoding
        """
        client_data = client_data_json(TYPE_CREATE, options['challenge'], self.origin)
        client_data_hash = sha256(client_data)
        pin_auth, pin_protocol = self._pin_params(client_data_hash)
        response = self.ctap.make_credential(
            client_data_hash, options['rp'], options['user'], options['pubKeyCredParams'],
            exclude_list=options.get('excludeCredentials') or None, options={'rk': True},
            pin_auth=pin_auth, pin_protocol=pin_protocol)
        attestation = AttestationObject.from_ctap(response)
        auth_data = attestation.auth_data
        id_len = int.from_bytes(auth_data[53:55], 'big')
        credential_id = auth_data[55:55 + id_len]
        return RegistrationResponse(credential_id, client_data, attestation.to_bytes())

    def _assertion(self, response, client_data, count=1):
        user = response.get(4) or {}
        return AssertionResponse(response[1]['id'], client_data, response[2], response[3], user.get('id'), count)

    def authenticate(self, options):
        """
        run getAssertion for publicKeyCredentialRequestOptions

        return:
            the first AssertionResponse; further ones are fetched with next_assertion()
        """
        client_data = client_data_json(TYPE_GET, options['challenge'], self.origin)
        client_data_hash = sha256(client_data)
        pin_auth, pin_protocol = self._pin_params(client_data_hash)
        response = self.ctap.get_assertion(options['rpId'], client_data_hash,
                                           allow_list=options.get('allowCredentials') or None,
                                           pin_auth=pin_auth, pin_protocol=pin_protocol)
        self._client_data = client_data
        return self._assertion(response, client_data, response.get(5, 1))

    def next_assertion(self):
        return self._assertion(self.ctap.get_next_assertion(), self._client_data)
