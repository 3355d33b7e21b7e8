"""
.. module:: bench
    :synopsis: registration / authentication latency harness over the loopback transport

Each sample is timed at the transport edge: from the first request frame
written to the last response frame read, so frame handling, key generation or
signing, persistence and fragmentation are all inside the measurement.
"""

import logging
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from qey import cose
from qey.client import WebAuthnClient
from qey.ctap2 import Authenticator, AuthenticatorConfig, always_present
from qey.ctaphid import LoopbackLink
from qey.relying_party import RegistrationPolicy, RelyingParty
from qey.store import CredentialStore
from qey.utils import resolve_rng, seeded_rng

logger = logging.getLogger(__name__)

MIN_SAMPLES = 30
FUNCTIONS = ('Registration', 'Authentication')
REFERENCE_COLUMN = 'reference (ARM Cortex A-53)'
#: average time per operation on the reference device, microseconds
REFERENCE_US = {
    ('Authentication', cose.ES256): 3192.7,
    ('Authentication', cose.MLDSA44): 17800.6,
    ('Authentication', cose.MLDSA65): 30675.2,
    ('Registration', cose.ES256): 12251.8,
    ('Registration', cose.MLDSA44): 36069.2,
    ('Registration', cose.MLDSA65): 68086.8,
}
CSV_COLUMNS = ('function', 'algorithm', 'mean_us', 'median_us', 'stddev_us', 'min_us', 'max_us', 'n')

BENCH_RP_ID = 'bench.qey.local'
BENCH_ORIGIN = 'https://bench.qey.local'
BENCH_USER = {'id': b'qey-bench-user', 'name': 'bench', 'displayName': 'Bench User'}


class BenchConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    """
    args:
        algorithms: COSE ids, rows appear in this order
        samples: timed samples per row, at least 30
        warmup: untimed iterations before sampling
        store_path: credential store file; a temporary directory when None
        seed: seed for a reproducible entropy source
        provider: ML-DSA provider name
    """
    algorithms: List[int] = field(default_factory=lambda: [cose.ES256, cose.MLDSA44, cose.MLDSA65])
    samples: int = MIN_SAMPLES
    warmup: int = 5
    store_path: Optional[str] = None
    seed: Optional[int] = None
    provider: Optional[str] = None

    def __post_init__(self):
        if self.samples < MIN_SAMPLES:
            raise BenchConfigError('samples must be at least %d, got %d' % (MIN_SAMPLES, self.samples))
        if self.warmup < 0:
            raise BenchConfigError('warmup must not be negative')
        if not self.algorithms:
            raise BenchConfigError('no algorithm to benchmark')
        for algorithm in self.algorithms:
            cose.require_supported(algorithm)


@dataclass
class TimingRow:
    """statistics of one (function, algorithm) pair, microseconds"""
    function: str
    algorithm: int
    mean_us: float
    median_us: float
    stddev_us: float
    min_us: float
    max_us: float
    n: int
    internal_us: float
    reference_us: Optional[float] = None

    @property
    def algorithm_name(self):
        return cose.algorithm_name(self.algorithm)

    @classmethod
    def from_samples(cls, function, algorithm, samples, internal):
        samples = np.asarray(samples, dtype=np.float64)
        return cls(function, algorithm,
                   float(np.mean(samples)), float(np.median(samples)), float(np.std(samples)),
                   float(np.min(samples)), float(np.max(samples)), int(samples.size),
                   float(np.mean(internal)), REFERENCE_US.get((function, algorithm)))


@dataclass
class TimingReport:
    rows: List[TimingRow] = field(default_factory=list)

    def row(self, function, algorithm):
        for r in self.rows:
            if r.function == function and r.algorithm == algorithm:
                return r
        raise KeyError((function, algorithm))

    def to_table(self):
        """aligned table: Function, Algorithm, Average Time, then the detail and reference columns"""
        header = ('Function', 'Algorithm', 'Average Time (us)', 'Median (us)', 'Std (us)', 'Min (us)',
                  'Max (us)', 'n', REFERENCE_COLUMN)
        body = [(r.function, r.algorithm_name, '%.1f' % r.mean_us, '%.1f' % r.median_us, '%.1f' % r.stddev_us,
                 '%.1f' % r.min_us, '%.1f' % r.max_us, str(r.n),
                 '-' if r.reference_us is None else '%.1f' % r.reference_us) for r in self.rows]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = ['  '.join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header] + body]
        lines.insert(1, '  '.join('-' * w for w in widths))
        return '\n'.join(lines)

    def to_csv(self):
        lines = [','.join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append('%s,%s,%.1f,%.1f,%.1f,%.1f,%.1f,%d' % (
                r.function, r.algorithm_name, r.mean_us, r.median_us, r.stddev_us, r.min_us, r.max_us, r.n))
        return '\n'.join(lines)

    def to_dict(self):
        return {'rows': [dict(asdict(r), algorithm_name=r.algorithm_name) for r in self.rows]}


class _Rig:
    """authenticator, loopback link, client and relying party for one algorithm"""

    def __init__(self, config, algorithm, store_path, rng):
        store = CredentialStore(store_path, rng=rng)
        self.authenticator = Authenticator(store, AuthenticatorConfig(provider=config.provider),
                                           presence=always_present, rng=rng)
        self.link = LoopbackLink(self.authenticator, rng=rng)
        self.host = self.link.open()
        self.client = WebAuthnClient(self.host, BENCH_ORIGIN, rng=rng)
        self.rp = RelyingParty(RegistrationPolicy(BENCH_RP_ID, BENCH_ORIGIN, [algorithm]), rng=rng)

    def internal_us(self, *names):
        return sum(e.duration for e in self.authenticator.events if e.name in names) * 1e6

    def register(self):
        options, record = self.rp.begin_registration(BENCH_USER)
        response = self.client.register(options)
        timing = self.host.last_timing
        key = self.rp.finish_registration(record, response.client_data_json, response.attestation_object)
        # each sample re-registers the same user; keep the previous key out of excludeCredentials
        self.rp.credentials.pop(key.credential_id)
        return key, timing.elapsed_us, self.internal_us('keygen', 'sign')

    def authenticate(self, key):
        options, record = self.rp.begin_authentication([key.credential_id])
        response = self.client.authenticate(options)
        timing = self.host.last_timing
        self.rp.finish_authentication(record, key, response.client_data_json, response.authenticator_data,
                                      response.signature)
        return timing.elapsed_us, self.internal_us('sign')

    def close(self):
        self.link.close()


def _store_path(config, tmpdir, algorithm):
    if config.store_path is not None:
        return '%s.%d' % (config.store_path, -algorithm)
    return '%s/bench-%d.bin' % (tmpdir, -algorithm)


def _run(config, function):
    rng = resolve_rng(None if config.seed is None else seeded_rng(config.seed))
    rows = []
    with tempfile.TemporaryDirectory(prefix='qey-bench-') as tmpdir:
        for algorithm in config.algorithms:
            rig = _Rig(config, algorithm, _store_path(config, tmpdir, algorithm), rng)
            rig.authenticator.store.wipe()
            try:
                key = rig.register()[0] if function == 'Authentication' else None
                samples, internal = [], []
                total = config.warmup + config.samples
                desc = ' - %s %s' % (function, cose.algorithm_name(algorithm))
                for i in tqdm(range(total), mininterval=2, desc=desc, leave=False, file=sys.stderr):
                    if function == 'Registration':
                        elapsed, inner = rig.register()[1:]
                    else:
                        elapsed, inner = rig.authenticate(key)
                    if i >= config.warmup:
                        samples.append(elapsed)
                        internal.append(inner)
            finally:
                rig.close()
            row = TimingRow.from_samples(function, algorithm, samples, internal)
            logger.info('%s %s: mean %.1f us over %d samples', function, row.algorithm_name, row.mean_us, row.n)
            rows.append(row)
    return rows


def bench_registration(config):
    """
    time makeCredential ceremonies, one row per configured algorithm

    return:
        list of TimingRow
    """
    return _run(config, 'Registration')


def bench_authentication(config):
    """
    time getAssertion ceremonies against one pre-registered credential per algorithm

    return:
        list of TimingRow
    """
    return _run(config, 'Authentication')


def run_bench(config):
    """both functions, in the reference table order (Authentication rows first)"""
    return TimingReport(bench_authentication(config) + bench_registration(config))
