import pytest

from qey.client import Ctap2, DirectCtap, WebAuthnClient
from qey.ctap2 import Authenticator, always_present, never_present
from qey.ctaphid import LoopbackLink
from qey.relying_party import RegistrationPolicy, RelyingParty
from qey.utils import seeded_rng

RP_ID = 'example.com'
ORIGIN = 'https://example.com'
USER = {'id': b'user-0001', 'name': 'alice', 'displayName': 'Alice'}


@pytest.fixture
def rng():
    return seeded_rng(20240601)


@pytest.fixture
def store_path(tmp_path):
    return str(tmp_path / 'qey_store.bin')


@pytest.fixture
def approve():
    return always_present


@pytest.fixture
def refuse():
    return never_present


@pytest.fixture
def authenticator(rng):
    return Authenticator(presence=always_present, rng=rng)


@pytest.fixture
def ctap(authenticator):
    return Ctap2(DirectCtap(authenticator))


@pytest.fixture
def link(authenticator, rng):
    link = LoopbackLink(authenticator, rng=rng)
    host = link.open()
    yield host
    link.close()


@pytest.fixture
def rp(rng):
    return RelyingParty(RegistrationPolicy(RP_ID, ORIGIN), rng=rng)


@pytest.fixture
def client(authenticator):
    return WebAuthnClient(DirectCtap(authenticator), ORIGIN)
