"""
.. module:: ctaphid
    :synopsis: CTAPHID framing over 64-byte reports, channel multiplexing and transports

Initialization frame::

    CID (4) | CMD | 0x80 (1) | BCNT (2, big-endian) | DATA (57)

Continuation frame::

    CID (4) | SEQ 0..127 (1) | DATA (59)
"""

import logging
import math
import os
import queue
import select
import struct
import threading
import time
from collections import OrderedDict, defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum, unique
from typing import Optional

from qey.utils import EntropySource, resolve_rng

logger = logging.getLogger(__name__)

REPORT_SIZE = 64
INIT_PAYLOAD = REPORT_SIZE - 7
CONT_PAYLOAD = REPORT_SIZE - 5
MAX_SEQUENCE = 128
MAX_PAYLOAD = INIT_PAYLOAD + MAX_SEQUENCE * CONT_PAYLOAD
BROADCAST_CID = 0xFFFFFFFF
TYPE_INIT = 0x80

PROTOCOL_VERSION = 2
DEVICE_VERSION = (0, 3, 0)
CAPABILITY_CBOR = 0x04
CAPABILITY_NMSG = 0x08

DEFAULT_TIMEOUT = 3.0
DEFAULT_KEEPALIVE_INTERVAL = 0.1
DEFAULT_MESSAGE_TIMEOUT = 0.5
DEFAULT_MAX_CHANNELS = 32

#: FIDO usage page 0xF1D0, usage 0x01, 64-byte input and output reports
HID_REPORT_DESCRIPTOR = bytes([
    0x06, 0xD0, 0xF1,  # usage page (FIDO alliance)
    0x09, 0x01,        # usage (CTAPHID)
    0xA1, 0x01,        # collection (application)
    0x09, 0x20,        # usage (input report data)
    0x15, 0x00,        # logical minimum 0
    0x26, 0xFF, 0x00,  # logical maximum 255
    0x75, 0x08,        # report size 8
    0x95, 0x40,        # report count 64
    0x81, 0x02,        # input (data, var, abs)
    0x09, 0x21,        # usage (output report data)
    0x15, 0x00,
    0x26, 0xFF, 0x00,
    0x75, 0x08,
    0x95, 0x40,
    0x91, 0x02,        # output (data, var, abs)
    0xC0,              # end collection
])


@unique
class HidCmd(IntEnum):
    PING = 0x01
    MSG = 0x03
    INIT = 0x06
    CBOR = 0x10
    CANCEL = 0x11
    KEEPALIVE = 0x3B
    ERROR = 0x3F


@unique
class HidErrorCode(IntEnum):
    INVALID_CMD = 0x01
    INVALID_PAR = 0x02
    INVALID_LEN = 0x03
    INVALID_SEQ = 0x04
    MSG_TIMEOUT = 0x05
    CHANNEL_BUSY = 0x06
    INVALID_CHANNEL = 0x0B
    OTHER = 0x7F


class CtapHidError(Exception):
    """base class of CTAPHID failures"""


class InvalidFrame(CtapHidError):
    pass


class PayloadTooLarge(CtapHidError):
    pass


class InvalidSequence(CtapHidError):
    pass


class ChannelMismatch(CtapHidError):
    pass


class SpuriousContinuation(CtapHidError):
    pass


class Timeout(CtapHidError):
    pass


class ChannelBusy(CtapHidError):
    pass


class ErrorFrame(CtapHidError):
    """the device answered with a CTAPHID_ERROR frame"""

    def __init__(self, code):
        self.code = code
        try:
            name = HidErrorCode(code).name
        except ValueError:
            name = 'UNKNOWN'
        super(ErrorFrame, self).__init__('CTAPHID error 0x%02X - %s' % (code, name))


@dataclass(frozen=True)
class CtapHidFrame:
    """one 64-byte HID report"""
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != REPORT_SIZE:
            raise InvalidFrame('HID report must be %d bytes, got %d' % (REPORT_SIZE, len(self.raw)))

    @classmethod
    def init(cls, channel_id, command, total_length, data):
        header = struct.pack('>IBH', channel_id, TYPE_INIT | command, total_length)
        return cls((header + data).ljust(REPORT_SIZE, b'\x00'))

    @classmethod
    def continuation(cls, channel_id, sequence, data):
        return cls((struct.pack('>IB', channel_id, sequence) + data).ljust(REPORT_SIZE, b'\x00'))

    @property
    def channel_id(self):
        return struct.unpack('>I', self.raw[:4])[0]

    @property
    def is_init(self):
        return bool(self.raw[4] & TYPE_INIT)

    @property
    def command(self):
        return self.raw[4] & 0x7F

    @property
    def sequence(self):
        return self.raw[4]

    @property
    def total_length(self):
        return struct.unpack('>H', self.raw[5:7])[0]

    @property
    def data(self):
        return self.raw[7:] if self.is_init else self.raw[5:]

    def __repr__(self):
        if self.is_init:
            return 'CtapHidFrame(cid=%08x, init cmd=0x%02x, bcnt=%d)' % (
                self.channel_id, self.command, self.total_length)
        return 'CtapHidFrame(cid=%08x, seq=%d)' % (self.channel_id, self.sequence)


def frame_count(length):
    if length <= INIT_PAYLOAD:
        return 1
    return 1 + int(math.ceil((length - INIT_PAYLOAD) / float(CONT_PAYLOAD)))


def fragment(channel_id, command, payload):
    """
    split a message into 64-byte frames

    args:
        channel_id: 32-bit channel id
        command: CTAPHID command (without the init bit)
        payload: message body, at most 7609 bytes
    return:
        list of CtapHidFrame, the last one zero padded
    """
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge('payload of %d bytes exceeds %d' % (len(payload), MAX_PAYLOAD))
    frames = [CtapHidFrame.init(channel_id, command, len(payload), payload[:INIT_PAYLOAD])]
    offset = INIT_PAYLOAD
    for seq in range(frame_count(len(payload)) - 1):
        frames.append(CtapHidFrame.continuation(channel_id, seq, payload[offset:offset + CONT_PAYLOAD]))
        offset += CONT_PAYLOAD
    return frames


class Channel:
    """
    per-channel reassembly state: idle, or receiving(expected length, buffer)

    args:
        channel_id: the channel this reassembler accepts frames for
    """

    def __init__(self, channel_id):
        self.channel_id = channel_id
        self.reset()

    def reset(self):
        self.command = None
        self.expected = 0
        self.buffer = bytearray()
        self.next_sequence = 0
        self.started = None

    @property
    def state(self):
        return 'idle' if self.command is None else 'receiving'

    def feed(self, frame):
        """
        add one frame

        return:
            (command, payload) once the message is complete, else None
        """
        if frame.channel_id != self.channel_id:
            raise ChannelMismatch('frame for channel %08x fed to channel %08x'
                                  % (frame.channel_id, self.channel_id))
        if frame.is_init:
            if self.command is not None:
                self.reset()
                raise InvalidSequence('initialization frame while a message is being received')
            if frame.total_length > MAX_PAYLOAD:
                raise PayloadTooLarge('declared length %d exceeds %d' % (frame.total_length, MAX_PAYLOAD))
            self.command = frame.command
            self.expected = frame.total_length
            self.started = time.monotonic()
            self.buffer = bytearray(frame.data[:self.expected])
        else:
            if self.command is None:
                raise SpuriousContinuation('continuation frame seq %d without initialization' % frame.sequence)
            if frame.sequence != self.next_sequence:
                expected = self.next_sequence
                self.reset()
                raise InvalidSequence('sequence %d, expected %d' % (frame.sequence, expected))
            self.next_sequence += 1
            self.buffer += frame.data[:self.expected - len(self.buffer)]
        if len(self.buffer) == self.expected:
            message = self.command, bytes(self.buffer)
            self.reset()
            return message
        return None


def reassemble(frames):
    """
    inverse of fragment

    args:
        frames: the frames of one message, in order
    return:
        (command, payload)
    """
    frames = list(frames)
    if not frames:
        raise InvalidSequence('no frames')
    channel = Channel(frames[0].channel_id)
    for i, frame in enumerate(frames):
        message = channel.feed(frame)
        if message is not None:
            if i != len(frames) - 1:
                raise SpuriousContinuation('%d frames after the message completed' % (len(frames) - 1 - i))
            return message
    raise InvalidSequence('message incomplete: %d of %d bytes' % (len(channel.buffer), channel.expected))


# -- transports --------------------------------------------------------------

class _QueueEndpoint:
    def __init__(self, outbox, inbox):
        self._outbox = outbox
        self._inbox = inbox

    def write(self, report):
        self._outbox.put(CtapHidFrame(bytes(report)).raw)

    def read(self, timeout=None):
        """next 64-byte report, None when nothing arrived within ``timeout``"""
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        pass


class LoopbackTransport:
    """in-memory report queue pair; ``host`` and ``device`` are the two ends"""

    def __init__(self):
        to_device, to_host = queue.Queue(), queue.Queue()
        self.host = _QueueEndpoint(to_device, to_host)
        self.device = _QueueEndpoint(to_host, to_device)


class HidgTransport:
    """
    device end backed by a HID gadget character device such as /dev/hidg0

    args:
        path: character device path
    """

    def __init__(self, path='/dev/hidg0'):
        self.path = path
        self._fd = os.open(path, os.O_RDWR)

    def write(self, report):
        os.write(self._fd, CtapHidFrame(bytes(report)).raw)

    def read(self, timeout=None):
        ready, _, _ = select.select([self._fd], [], [], timeout)
        if not ready:
            return None
        report = os.read(self._fd, REPORT_SIZE)
        if len(report) != REPORT_SIZE:
            logger.warning('dropping %d-byte report from %s', len(report), self.path)
            return None
        return report

    def close(self):
        os.close(self._fd)


# -- authenticator side ------------------------------------------------------

class CtapHidDevice:
    """
    authenticator end of CTAPHID: allocates channels, reassembles requests and
    runs CTAP2 commands on a single worker while emitting keepalives

    args:
        authenticator: ctap2.Authenticator
        endpoint: transport end with write(report) / read(timeout)
        keepalive_interval: seconds between KEEPALIVE frames of a pending command
        message_timeout: seconds a partially received message may stay incomplete
        max_channels: allocated channels kept; the least recently used idle one is dropped first
        rng: entropy source for channel ids
    """

    def __init__(self, authenticator, endpoint, keepalive_interval=DEFAULT_KEEPALIVE_INTERVAL,
                 message_timeout=DEFAULT_MESSAGE_TIMEOUT, max_channels=DEFAULT_MAX_CHANNELS,
                 rng: Optional[EntropySource] = None):
        if max_channels < 2:
            raise ValueError('max_channels must be at least 2')
        self.authenticator = authenticator
        self.endpoint = endpoint
        self.keepalive_interval = keepalive_interval
        self.message_timeout = message_timeout
        self.max_channels = max_channels
        self.rng = resolve_rng(rng)
        self.channels = OrderedDict()
        self._executor = ThreadPoolExecutor(max_workers=1)
        self._pending = None
        self._last_keepalive = 0.0
        self._stop = threading.Event()

    def _send(self, channel_id, command, payload):
        for frame in fragment(channel_id, command, payload):
            self.endpoint.write(frame.raw)

    def send_error(self, channel_id, code):
        logger.debug('channel %08x: error 0x%02x', channel_id, code)
        self._send(channel_id, HidCmd.ERROR, bytes([code]))

    def _evict(self):
        busy = self._pending[0] if self._pending is not None else None
        candidates = [cid for cid in self.channels if cid != busy]
        idle = [cid for cid in candidates if self.channels[cid].state == 'idle']
        channel_id = (idle or candidates)[0]
        del self.channels[channel_id]
        logger.debug('channel %08x evicted', channel_id)

    def _allocate(self):
        while len(self.channels) >= self.max_channels:
            self._evict()
        while True:
            channel_id = struct.unpack('>I', self.rng(4))[0]
            if channel_id not in (0, BROADCAST_CID) and channel_id not in self.channels:
                self.channels[channel_id] = Channel(channel_id)
                return channel_id

    def handle_init(self, nonce, channel_id=BROADCAST_CID):
        """
        answer CTAPHID_INIT

        args:
            nonce: 8-byte nonce to echo
            channel_id: the requesting channel; broadcast allocates a new one,
                an allocated channel is re-synchronized
        return:
            the response frame (sent on ``channel_id``)
        """
        if channel_id == BROADCAST_CID:
            granted = self._allocate()
        else:
            granted = channel_id
            self.channels[channel_id].reset()
            self.channels.move_to_end(channel_id)
        payload = (bytes(nonce) + struct.pack('>I', granted) + bytes([PROTOCOL_VERSION]) + bytes(DEVICE_VERSION)
                   + bytes([CAPABILITY_CBOR | CAPABILITY_NMSG]))
        logger.debug('INIT on %08x -> channel %08x', channel_id, granted)
        return fragment(channel_id, HidCmd.INIT, payload)[0]

    def process_report(self, report):
        """handle one incoming report"""
        try:
            frame = CtapHidFrame(bytes(report))
        except InvalidFrame as e:
            logger.warning('%s', e)
            return
        channel_id = frame.channel_id

        if frame.is_init and frame.command == HidCmd.INIT:
            if frame.total_length != 8:
                self.send_error(channel_id, HidErrorCode.INVALID_LEN)
            elif channel_id != BROADCAST_CID and channel_id not in self.channels:
                self.send_error(channel_id, HidErrorCode.INVALID_CHANNEL)
            else:
                self.endpoint.write(self.handle_init(frame.data[:8], channel_id).raw)
            return

        if channel_id not in self.channels:
            self.send_error(channel_id, HidErrorCode.INVALID_CHANNEL)
            return
        self.channels.move_to_end(channel_id)

        if self._pending is not None and frame.is_init:
            if frame.command == HidCmd.CANCEL and channel_id == self._pending[0]:
                logger.debug('channel %08x: cancel', channel_id)
                self.authenticator.cancel()
            elif frame.command != HidCmd.CANCEL:
                self.send_error(channel_id, HidErrorCode.CHANNEL_BUSY)
            return

        try:
            message = self.channels[channel_id].feed(frame)
        except SpuriousContinuation:
            return
        except InvalidSequence:
            self.send_error(channel_id, HidErrorCode.INVALID_SEQ)
            return
        except PayloadTooLarge:
            self.channels[channel_id].reset()
            self.send_error(channel_id, HidErrorCode.INVALID_LEN)
            return
        if message is not None:
            self._dispatch(channel_id, *message)

    def _dispatch(self, channel_id, command, payload):
        if command == HidCmd.PING:
            self._send(channel_id, HidCmd.PING, payload)
        elif command == HidCmd.CBOR:
            if not payload:
                self.send_error(channel_id, HidErrorCode.INVALID_LEN)
                return
            future = self._executor.submit(self.authenticator.handle_command, payload)
            self._pending = (channel_id, future)
            self._last_keepalive = time.monotonic()
        elif command == HidCmd.CANCEL:
            pass
        else:
            self.send_error(channel_id, HidErrorCode.INVALID_CMD)

    def poll(self):
        """finish or keep alive the pending command and expire stalled messages"""
        now = time.monotonic()
        if self._pending is not None:
            channel_id, future = self._pending
            if future.done():
                self._pending = None
                try:
                    response = future.result()
                except Exception:
                    logger.exception('CTAP2 worker failed')
                    self.send_error(channel_id, HidErrorCode.OTHER)
                else:
                    self._send(channel_id, HidCmd.CBOR, response)
            elif now - self._last_keepalive >= self.keepalive_interval:
                self._send(channel_id, HidCmd.KEEPALIVE, bytes([self.authenticator.keepalive_status]))
                self._last_keepalive = now
        for channel in self.channels.values():
            if channel.started is not None and now - channel.started > self.message_timeout:
                channel.reset()
                self.send_error(channel.channel_id, HidErrorCode.MSG_TIMEOUT)

    def serve(self, stop: Optional[threading.Event] = None):
        """run the report loop until ``stop`` (or stop()) is set"""
        stop = stop or self._stop
        while not stop.is_set():
            report = self.endpoint.read(timeout=self.keepalive_interval / 2)
            if report is not None:
                self.process_report(report)
            self.poll()

    def stop(self):
        self._stop.set()
        self._executor.shutdown(wait=False)


# -- client side -------------------------------------------------------------

@dataclass
class TransactionTiming:
    """transport-edge timing of the last transaction, perf_counter seconds"""
    first_frame_sent: float = 0.0
    last_frame_received: float = 0.0
    frames_out: int = 0
    frames_in: int = 0
    keepalives: int = 0

    @property
    def elapsed_us(self):
        return (self.last_frame_received - self.first_frame_sent) * 1e6


class CtapHidHost:
    """
    platform end of CTAPHID; several channels may share one endpoint

    args:
        endpoint: transport end with write(report) / read(timeout)
        timeout: seconds to wait for the next response frame; keepalives restart it
        rng: entropy source for INIT nonces
    """

    def __init__(self, endpoint, timeout=DEFAULT_TIMEOUT, rng: Optional[EntropySource] = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.rng = resolve_rng(rng)
        self.channel_id = None
        self.last_timing = TransactionTiming()
        self.keepalive_statuses = []
        self._mailbox = defaultdict(deque)
        self._read_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._busy = defaultdict(threading.Lock)
        self._busy_guard = threading.Lock()

    def _write(self, frames):
        with self._write_lock:
            for frame in frames:
                self.endpoint.write(frame.raw)

    def _next_frame(self, channel_id, deadline):
        """next frame addressed to ``channel_id``; frames for other channels are kept for their readers"""
        while True:
            with self._read_lock:
                if self._mailbox[channel_id]:
                    return self._mailbox[channel_id].popleft()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout('no response on channel %08x' % channel_id)
                report = self.endpoint.read(timeout=min(remaining, 0.05))
                if report is None:
                    continue
                frame = CtapHidFrame(bytes(report))
                if frame.channel_id == channel_id:
                    return frame
                self._mailbox[frame.channel_id].append(frame)

    def init_channel(self):
        """
        allocate a channel with CTAPHID_INIT on the broadcast channel

        return:
            the granted channel id
        """
        nonce = self.rng(8)
        self._write(fragment(BROADCAST_CID, HidCmd.INIT, nonce))
        deadline = time.monotonic() + self.timeout
        while True:
            frame = self._next_frame(BROADCAST_CID, deadline)
            if frame.is_init and frame.command == HidCmd.INIT and frame.data[:8] == nonce:
                break
        self.channel_id = struct.unpack('>I', frame.data[8:12])[0]
        self.protocol_version = frame.data[12]
        self.capabilities = frame.data[16]
        logger.debug('allocated channel %08x', self.channel_id)
        return self.channel_id

    def cancel(self, channel_id=None):
        """send CTAPHID_CANCEL for the channel's pending request"""
        self._write(fragment(channel_id or self.channel_id, HidCmd.CANCEL, b''))

    def transact(self, command, payload, channel_id=None):
        """
        send one request and wait for its response

        args:
            command: CTAPHID command
            payload: request body
            channel_id: allocated channel, this host's channel by default
        return:
            response payload
        """
        channel_id = channel_id or self.channel_id
        if channel_id is None:
            raise CtapHidError('no channel allocated, call init_channel first')
        with self._busy_guard:
            busy = self._busy[channel_id]
        if not busy.acquire(blocking=False):
            raise ChannelBusy('transaction already in flight on channel %08x' % channel_id)
        try:
            return self._transact(channel_id, command, payload)
        finally:
            busy.release()

    def _transact(self, channel_id, command, payload):
        frames = fragment(channel_id, command, payload)
        timing = TransactionTiming(frames_out=len(frames))
        timing.first_frame_sent = time.perf_counter()
        self._write(frames)
        channel = Channel(channel_id)
        deadline = time.monotonic() + self.timeout
        while True:
            frame = self._next_frame(channel_id, deadline)
            if frame.is_init and frame.command == HidCmd.KEEPALIVE:
                timing.keepalives += 1
                self.keepalive_statuses.append(frame.data[0])
                deadline = time.monotonic() + self.timeout
                continue
            if frame.is_init and frame.command == HidCmd.ERROR:
                code = frame.data[0]
                if code == HidErrorCode.CHANNEL_BUSY:
                    raise ChannelBusy('device busy with another channel')
                raise ErrorFrame(code)
            timing.frames_in += 1
            message = channel.feed(frame)
            if message is not None:
                timing.last_frame_received = time.perf_counter()
                self.last_timing = timing
                response_command, response = message
                if response_command != command:
                    raise CtapHidError('response command 0x%02x for request 0x%02x' % (response_command, command))
                return response

    def ping(self, data):
        return self.transact(HidCmd.PING, data)

    def send_cbor(self, request):
        """CTAPHID_CBOR transaction: CTAP2 request bytes in, status-prefixed response out"""
        return self.transact(HidCmd.CBOR, request)


class LoopbackLink:
    """
    an authenticator served over a loopback transport on a background thread

    args:
        authenticator: ctap2.Authenticator
        timeout: host response timeout
        keepalive_interval: device keepalive period
        rng: entropy source for channel ids and nonces
    """

    def __init__(self, authenticator, timeout=DEFAULT_TIMEOUT, keepalive_interval=DEFAULT_KEEPALIVE_INTERVAL,
                 rng: Optional[EntropySource] = None):
        self.transport = LoopbackTransport()
        self.device = CtapHidDevice(authenticator, self.transport.device, keepalive_interval, rng=rng)
        self.host = CtapHidHost(self.transport.host, timeout, rng=rng)
        self._thread = threading.Thread(target=self.device.serve, name='ctaphid-device', daemon=True)

    def open(self):
        self._thread.start()
        self.host.init_channel()
        return self.host

    def close(self):
        self.device.stop()
        self._thread.join(timeout=1.0)

    def __enter__(self):
        return self.open()

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()
