"""Split inference over real UDP sockets.

Every datagram is a 16-byte header followed by the elements of one packet, in
shuffled order::

    magic "SI" | version u8 | flags u8 | message_id u32 | packet_index u16 |
    total_packets u16 | permutation_seed u32            (big-endian)

Flag bit 0 marks a quantized payload: integer codes in little-endian cells of
``ceil(n_bits / 8)`` bytes. Otherwise elements are little-endian float32.
Loss is injected at the sender, before the socket write, so runs are
repeatable.
"""

from __future__ import annotations

import csv
import logging
import socket
import struct
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .dipipeline import Deployment, InferenceOutcome, device_encode, server_decode
from .errors import ConfigError

log = logging.getLogger(__name__)

MAGIC = b"SI"
VERSION = 1
FLAG_QUANTIZED = 0x01
HEADER = struct.Struct(">2sBBIHHI")
HEADER_SIZE = HEADER.size
MAX_PACKETS = 1 << 16

LOG_COLUMNS = [
    "message_id",
    "predicted_class",
    "fraction_received",
    "all_lost",
    "latency_ms",
    "packets_received",
    "total_packets",
]


class MessageSizeError(ValueError):
    pass


@dataclass(frozen=True)
class DatagramHeader:
    message_id: int
    packet_index: int
    total_packets: int
    permutation_seed: int
    flags: int = 0
    version: int = VERSION

    @property
    def quantized(self) -> bool:
        return bool(self.flags & FLAG_QUANTIZED)

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC,
            self.version,
            self.flags,
            self.message_id,
            self.packet_index,
            self.total_packets,
            self.permutation_seed,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "DatagramHeader":
        if len(data) < HEADER_SIZE:
            raise ValueError(f"datagram of {len(data)} bytes is shorter than the header")
        magic, version, flags, mid, index, total, seed = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        if index >= total:
            raise ValueError(f"packet index {index} not below total {total}")
        return cls(mid, index, total, seed, flags, version)


def pack_elements(values: np.ndarray, quantized: bool, element_bytes: int) -> bytes:
    if not quantized:
        return np.asarray(values, dtype="<f4").tobytes()
    cells = np.asarray(values, dtype="<u4").view(np.uint8).reshape(-1, 4)
    return cells[:, :element_bytes].tobytes()


def unpack_elements(payload: bytes, quantized: bool, element_bytes: int) -> np.ndarray:
    if len(payload) % element_bytes:
        raise ValueError(f"payload of {len(payload)} bytes is not a whole number of elements")
    if not quantized:
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)
    cells = np.frombuffer(payload, dtype=np.uint8).reshape(-1, element_bytes)
    padded = np.zeros((cells.shape[0], 4), dtype=np.uint8)
    padded[:, :element_bytes] = cells
    return padded.view("<u4").reshape(-1).astype(np.int64)


def encode_datagrams(message, deployment: Deployment, message_id: int, permutation_seed: int | None = None) -> list[bytes]:
    """Shuffle a compressed message into header-prefixed datagrams."""
    seed = deployment.permutation_seed if permutation_seed is None else permutation_seed
    message = np.asarray(message)
    if message.shape != (deployment.message_length,):
        raise ValueError(f"message length {message.shape} != {deployment.message_length}")
    s = deployment.elements_per_packet
    n_t = ch.packet_count(message.size, s)
    if n_t > MAX_PACKETS - 1:
        raise MessageSizeError(f"message needs {n_t} packets; the header allows {MAX_PACKETS - 1}")
    quantized = deployment.quantized
    flags = FLAG_QUANTIZED if quantized else 0
    batch = ch.packetize(message, s, seed, message_id)
    out = []
    for index, values in batch.packets:
        head = DatagramHeader(message_id & 0xFFFFFFFF, index, n_t, seed & 0xFFFFFFFF, flags).pack()
        out.append(head + pack_elements(values, quantized, deployment.element_bytes))
    return out


def decode_datagram(data: bytes, element_bytes: int = 4) -> tuple[DatagramHeader, np.ndarray]:
    header = DatagramHeader.unpack(data)
    width = element_bytes if header.quantized else 4
    return header, unpack_elements(data[HEADER_SIZE:], header.quantized, width)


@dataclass
class ReceivedMessage:
    message_id: int
    values: np.ndarray
    mask: np.ndarray
    packets_received: int
    total_packets: int
    first_arrival: float


@dataclass
class _Pending:
    values: np.ndarray
    mask: np.ndarray
    seen: set
    total: int
    seed: int
    first_arrival: float


@dataclass
class ReassemblyStats:
    datagrams: int = 0
    discarded: int = 0
    duplicates: int = 0
    late: int = 0
    evicted: int = 0
    completed: int = 0
    expired: int = 0


class Reassembler:
    """Collects datagrams per message_id until all arrive or the deadline passes.

    At most ``max_in_flight`` messages are held; the oldest is finalized early
    when a new one would exceed that.
    """

    def __init__(self, deployment: Deployment, deadline_s: float = 0.1, max_in_flight: int = 256, clock=time.monotonic):
        self.deployment = deployment
        self.deadline_s = deadline_s
        self.max_in_flight = max_in_flight
        self.clock = clock
        self.pending: OrderedDict[int, _Pending] = OrderedDict()
        self.finished: deque[int] = deque(maxlen=4 * max_in_flight)
        self._finished_set: set[int] = set()
        self.stats = ReassemblyStats()

    def _finalize(self, mid: int) -> ReceivedMessage:
        entry = self.pending.pop(mid)
        if len(self.finished) == self.finished.maxlen:
            self._finished_set.discard(self.finished[0])
        self.finished.append(mid)
        self._finished_set.add(mid)
        return ReceivedMessage(mid, entry.values, entry.mask, len(entry.seen), entry.total, entry.first_arrival)

    def feed(self, data: bytes) -> list[ReceivedMessage]:
        self.stats.datagrams += 1
        dep = self.deployment
        try:
            header, elements = decode_datagram(data, dep.element_bytes)
        except ValueError:
            self.stats.discarded += 1
            return []
        if header.quantized != dep.quantized:
            self.stats.discarded += 1
            return []
        mid = header.message_id
        if mid in self._finished_set:
            self.stats.late += 1
            return []
        length = dep.message_length
        s = dep.elements_per_packet
        if header.total_packets != ch.packet_count(length, s):
            self.stats.discarded += 1
            return []
        idx = ch.packet_indices(header.permutation_seed, length, s, header.packet_index)
        if len(idx) != len(elements):
            self.stats.discarded += 1
            return []
        done = []
        entry = self.pending.get(mid)
        if entry is None:
            if len(self.pending) >= self.max_in_flight:
                oldest = next(iter(self.pending))
                self.stats.evicted += 1
                done.append(self._finalize(oldest))
            dtype = np.int64 if dep.quantized else np.float64
            entry = _Pending(
                np.zeros(length, dtype=dtype),
                np.zeros(length, dtype=bool),
                set(),
                header.total_packets,
                header.permutation_seed,
                self.clock(),
            )
            self.pending[mid] = entry
        if header.packet_index in entry.seen:
            self.stats.duplicates += 1
        entry.seen.add(header.packet_index)
        entry.values[idx] = elements
        entry.mask[idx] = True
        if len(entry.seen) == entry.total:
            self.stats.completed += 1
            done.append(self._finalize(mid))
        return done

    def expire(self, now: float | None = None) -> list[ReceivedMessage]:
        now = self.clock() if now is None else now
        out = []
        while self.pending:
            mid, entry = next(iter(self.pending.items()))
            if now - entry.first_arrival < self.deadline_s:
                break
            self.stats.expired += 1
            out.append(self._finalize(mid))
        return out

    def flush(self) -> list[ReceivedMessage]:
        return [self._finalize(mid) for mid in list(self.pending)]


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"expected host:port, got {text!r}")
    return host, int(port)


@dataclass
class ServerConfig:
    bind: str = "127.0.0.1:0"
    deadline_ms: float = 100.0
    loss_rate: float = 0.0
    max_in_flight: int = 256
    max_messages: int | None = None
    idle_timeout_s: float | None = None
    log_path: str | None = None
    recv_buffer: int = 1 << 22


@dataclass
class ServerRecord:
    message_id: int
    outcome: InferenceOutcome
    packets_received: int
    total_packets: int

    def row(self) -> list:
        o = self.outcome
        return [
            self.message_id,
            o.predicted_class,
            repr(o.fraction_received),
            int(o.all_lost),
            repr(o.latency_s * 1e3),
            self.packets_received,
            self.total_packets,
        ]


@dataclass
class Server:
    """UDP receive loop feeding a reassembly table and the server-side decoder."""

    deployment: Deployment
    config: ServerConfig = field(default_factory=ServerConfig)

    def __post_init__(self):
        ch.check_loss_rate(self.config.loss_rate)
        self.records: list[ServerRecord] = []
        self.reassembler = Reassembler(self.deployment, self.config.deadline_ms / 1e3, self.config.max_in_flight)
        self.ready = threading.Event()
        self.stop_event = threading.Event()
        self.address: tuple[str, int] | None = None

    def _handle(self, done, writer):
        for msg in done:
            outcome = server_decode(msg.values, msg.mask, self.config.loss_rate, self.deployment)
            rec = ServerRecord(msg.message_id, outcome, msg.packets_received, msg.total_packets)
            self.records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())

    def _finished(self) -> bool:
        cap = self.config.max_messages
        return cap is not None and len(self.records) >= cap

    def serve(self) -> list[ServerRecord]:
        host, port = parse_address(self.config.bind)
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.config.recv_buffer)
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise OSError(f"cannot bind UDP socket to {self.config.bind}: {exc}") from exc
        self.address = sock.getsockname()
        sock.settimeout(0.005)
        fh = open(self.config.log_path, "w", newline="") if self.config.log_path else None
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(LOG_COLUMNS)
        self.ready.set()
        last_packet = time.monotonic()
        try:
            while not self.stop_event.is_set() and not self._finished():
                try:
                    data = sock.recv(65535)
                except socket.timeout:
                    data = None
                if data is not None:
                    last_packet = time.monotonic()
                    self._handle(self.reassembler.feed(data), writer)
                self._handle(self.reassembler.expire(), writer)
                idle = self.config.idle_timeout_s
                if idle is not None and time.monotonic() - last_packet > idle:
                    break
            self._handle(self.reassembler.flush(), writer)
        finally:
            sock.close()
            if fh:
                fh.close()
        return self.records

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve, daemon=True)
        thread.start()
        self.ready.wait(5.0)
        return thread


@dataclass
class SenderConfig:
    target: str = "127.0.0.1:9000"
    loss_inject: float = 0.0
    rate: float = 500.0
    seed: int = 0
    first_message_id: int = 0


@dataclass
class SendStats:
    messages: int = 0
    datagrams: int = 0
    dropped: int = 0


def send(deployment: Deployment, features, config: SenderConfig) -> SendStats:
    """Stream one message per feature row, dropping datagrams with probability ``loss_inject``."""
    p = ch.check_loss_rate(config.loss_inject)
    rng = np.random.default_rng(config.seed)
    target = parse_address(config.target)
    stats = SendStats()
    interval = 1.0 / config.rate if config.rate > 0 else 0.0
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        next_time = time.monotonic()
        for offset, row in enumerate(np.asarray(features, dtype=np.float64)):
            msg = device_encode(row, deployment)
            for dgram in encode_datagrams(msg, deployment, config.first_message_id + offset):
                if p > 0 and rng.random() < p:
                    stats.dropped += 1
                    continue
                sock.sendto(dgram, target)
                stats.datagrams += 1
            stats.messages += 1
            if interval:
                next_time += interval
                delay = next_time - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
    except OSError as exc:
        raise OSError(f"sending to {config.target} failed: {exc}") from exc
    finally:
        sock.close()
    return stats


def fill_missing(records: list[ServerRecord], expected_ids, deployment: Deployment, p: float) -> list[ServerRecord]:
    """Add all-lost records for messages the server never saw a single datagram of."""
    seen = {r.message_id for r in records}
    out = list(records)
    length = deployment.message_length
    dtype = np.int64 if deployment.quantized else np.float64
    for mid in expected_ids:
        if mid not in seen:
            outcome = server_decode(np.zeros(length, dtype=dtype), np.zeros(length, dtype=bool), p, deployment)
            out.append(ServerRecord(mid, outcome, 0, deployment.packet_count))
    return sorted(out, key=lambda r: r.message_id)
