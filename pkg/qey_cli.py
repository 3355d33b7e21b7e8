from __future__ import print_function
import argparse
import json
import logging
import os
import sys

from qey import cose, crypto
from qey.bench import BenchConfig, run_bench
from qey.cbor import CborError
from qey.client import WebAuthnClient
from qey.ctap2 import Authenticator, AuthenticatorConfig, CtapError, always_present
from qey.ctaphid import CtapHidDevice, CtapHidError, HidgTransport, LoopbackLink
from qey.relying_party import RegistrationPolicy, RelyingParty, VerificationError
from qey.store import CredentialStore, StoreError
from qey.utils import resolve_rng, save_report, seeded_rng, websafe_encode

DEFAULT_STORE = './qey_store.bin'
LIBRARY_ERRORS = (CborError, cose.CoseError, crypto.CryptoError, StoreError, CtapError, CtapHidError,
                  VerificationError, ValueError, OSError)


def eprint(*args, **kwargs):
    print(*args, file=sys.stderr, **kwargs)


def prompt_presence(reason):
    """the push button: Enter approves, 'n' refuses; a CANCEL abandons the prompt"""
    try:
        answer = input('[qey] %s - press Enter to confirm presence (n to refuse): ' % reason)
    except EOFError:
        return False
    return answer.strip().lower() not in ('n', 'no')


def algorithm_list(text):
    return [cose.parse_algorithm(a) for a in text.split(',') if a.strip()]


def build_parser():
    parser = argparse.ArgumentParser(description='The Qey: a post-quantum FIDO2 authenticator over loopback CTAPHID')
    parser.add_argument('--config', default='', help='JSON file with default values for any option')
    parser.add_argument('--store', default=None, help='credential store path (env QEY_STORE_PATH, default %s)'
                        % DEFAULT_STORE)
    parser.add_argument('--mldsa-backend', choices=['dilithium', 'oqs'], default='dilithium',
                        help='ML-DSA provider')
    parser.add_argument('--auto-presence', action='store_true', help='approve user presence without prompting')
    parser.add_argument('--rp-id', default='example.com', help='relying party id')
    parser.add_argument('--origin', default='https://example.com', help='origin written into clientDataJSON')
    parser.add_argument('--pin', default=None, help='PIN to authenticate requests with')
    parser.add_argument('--seed', type=int, default=None, help='seed a reproducible entropy source')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    subparsers = []

    p = sub.add_parser('register', help='one registration ceremony')
    subparsers.append(p)
    p.add_argument('--alg', type=cose.parse_algorithm, default=cose.MLDSA44, help='COSE algorithm id or name')
    p.add_argument('--user', default='alice', help='user name')

    subparsers.append(sub.add_parser('authenticate', help='one authentication ceremony'))

    p = sub.add_parser('bench', help='registration and authentication timing table')
    subparsers.append(p)
    p.add_argument('--algorithms', type=algorithm_list, default=[cose.ES256, cose.MLDSA44, cose.MLDSA65],
                   help='comma separated COSE ids or names')
    p.add_argument('--samples', type=int, default=30, help='timed samples per row (>= 30)')
    p.add_argument('--warmup', type=int, default=5, help='untimed iterations per row')
    p.add_argument('--format', choices=['table', 'csv'], default='table', help='output format')
    p.add_argument('--output', default='', help='also write the report and settings as JSON')

    p = sub.add_parser('demo', help='register then authenticate, asking for presence')
    subparsers.append(p)
    p.add_argument('--alg', type=cose.parse_algorithm, default=cose.MLDSA44, help='COSE algorithm id or name')

    p = sub.add_parser('serve', help='serve CTAPHID on a HID gadget character device')
    subparsers.append(p)
    p.add_argument('--hid-device', default='/dev/hidg0', help='character device path')
    return parser, subparsers


def parse_args(argv):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as f:
            defaults = json.load(f)
        # explicit flags still win over file values; a subcommand only takes its own keys
        parser.set_defaults(**defaults)
        for p in subparsers:
            own = vars(p.parse_known_args([])[0])
            p.set_defaults(**{k: v for k, v in defaults.items() if k in own})
        args = parser.parse_args(argv)
    args.store_explicit = args.store is not None or 'QEY_STORE_PATH' in os.environ
    if args.store is None:
        args.store = os.environ.get('QEY_STORE_PATH', DEFAULT_STORE)
    return args


class Session:
    """authenticator + loopback link + client + relying party built from the options"""

    def __init__(self, args, store_path, algorithms=None):
        self.rng = resolve_rng(None if args.seed is None else seeded_rng(args.seed))
        presence = always_present if args.auto_presence else prompt_presence
        self.store = CredentialStore.load(store_path, rng=self.rng)
        self.authenticator = Authenticator(self.store, AuthenticatorConfig(provider=args.mldsa_backend),
                                           presence=presence, rng=self.rng)
        self.link = LoopbackLink(self.authenticator, rng=self.rng)
        self.client = WebAuthnClient(self.link.open(), args.origin, pin=args.pin, rng=self.rng)
        policy = RegistrationPolicy(args.rp_id, args.origin,
                                    algorithms or [cose.MLDSA44, cose.MLDSA65, cose.ES256])
        self.rp = RelyingParty(policy, rng=self.rng)
        self.rp_path = store_path + '.rp.json'
        if os.path.exists(self.rp_path):
            self.rp.load_credentials(self.rp_path)

    def register(self, algorithm, user_name):
        user = {'id': user_name.encode('utf8'), 'name': user_name, 'displayName': user_name}
        # re-registration replaces the user's resident credential
        for credential_id in [k.credential_id for k in self.rp.credentials.values() if k.user_id == user['id']]:
            del self.rp.credentials[credential_id]
        options, record = self.rp.begin_registration(user)
        options['pubKeyCredParams'] = [{'type': 'public-key', 'alg': algorithm}]
        response = self.client.register(options)
        key = self.rp.finish_registration(record, response.client_data_json, response.attestation_object)
        self.rp.save_credentials(self.rp_path)
        return key

    def authenticate(self):
        keys = [k for k in self.rp.credentials.values()]
        if not keys:
            raise VerificationError('no registered credential in %s' % self.rp_path)
        options, record = self.rp.begin_authentication([k.credential_id for k in keys])
        response = self.client.authenticate(options)
        count = self.rp.finish_authentication(record, self.rp.credentials[response.credential_id],
                                              response.client_data_json, response.authenticator_data,
                                              response.signature)
        self.rp.save_credentials(self.rp_path)
        return count

    def close(self):
        self.link.close()


def print_report(report):
    for name, value in report.to_dict().items():
        print('  %-16s %s' % (name + ':', value))


def cmd_register(args):
    session = Session(args, args.store, [args.alg])
    try:
        key = session.register(args.alg, args.user)
    finally:
        session.close()
    print('credential id: ' + websafe_encode(key.credential_id))
    print('algorithm: %s (%d)' % (cose.algorithm_name(key.algorithm), key.algorithm))
    print('public key: %d bytes' % len(key.public_key.raw_public_bytes()))
    return 0


def cmd_authenticate(args):
    session = Session(args, args.store)
    try:
        session.authenticate()
    finally:
        session.close()
    print('verified')
    print_report(session.rp.last_report)
    return 0


def cmd_demo(args):
    session = Session(args, args.store, [args.alg])
    try:
        print('registering')
        key = session.register(args.alg, 'demo')
        print_report(session.rp.last_report)
        print('authenticating')
        session.authenticate()
        print_report(session.rp.last_report)
    finally:
        session.close()
    print('demo complete: %s credential verified' % cose.algorithm_name(key.algorithm))
    return 0


def cmd_bench(args):
    store_path = args.store if args.store_explicit else None
    config = BenchConfig(args.algorithms, args.samples, args.warmup, store_path, args.seed, args.mldsa_backend)
    # csv goes to stdout alone
    banner = eprint if args.format == 'csv' else print
    banner('setting:')
    banner(config)
    report = run_bench(config)
    print(report.to_csv() if args.format == 'csv' else report.to_table())
    if args.output:
        filename = args.output[:-5] if args.output.endswith('.json') else args.output
        save_report(report.to_dict(), {k: v for k, v in vars(args).items() if k != 'pin'}, filename)
    return 0


def cmd_serve(args):
    rng = resolve_rng(None if args.seed is None else seeded_rng(args.seed))
    store = CredentialStore.load(args.store, rng=rng)
    presence = always_present if args.auto_presence else prompt_presence
    authenticator = Authenticator(store, AuthenticatorConfig(provider=args.mldsa_backend), presence=presence, rng=rng)
    transport = HidgTransport(args.hid_device)
    device = CtapHidDevice(authenticator, transport, rng=rng)
    print('serving CTAPHID on ' + args.hid_device)
    try:
        device.serve()
    except KeyboardInterrupt:
        pass
    finally:
        device.stop()
        transport.close()
    return 0


COMMANDS = {
    'register': cmd_register,
    'authenticate': cmd_authenticate,
    'bench': cmd_bench,
    'demo': cmd_demo,
    'serve': cmd_serve,
}


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        crypto.use_provider(args.mldsa_backend)
        return COMMANDS[args.command](args)
    except LIBRARY_ERRORS as e:
        eprint('error: %s' % e)
        return 1


if __name__ == '__main__':
    sys.exit(main())
