"""Framing, handshake and session driver over a reliable byte stream.

Frame layout (little-endian)::

    magic b"NOTP" | version 0x01 | type | session_id (16) | payload_len (u32) | payload

A session is a HELLO / HELLO_ACK handshake followed by alternating cycles.
On even cycles the initiator sends BATCH and the responder answers
BATCH_ACK with the recovered key's count and a digest.  The digest covers the
recovered key and a running hash of every frame of the session so far, so a
corrupted byte anywhere before the acknowledgement aborts the cycle.  On odd cycles the
initiator hands the turn over with an empty BATCH for that cycle and the
responder sends a batch of the same size as the previous one.  Either side
announces budget exhaustion with REKEY_NEEDED; the initiator ends the
session with CLOSE, which the responder echoes.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from .entropy import EntropyStream
from .keys import KeyBuffer, pack_bits
from .physics import NoiseParams
from .protocol import (Batch, ProtocolError, RekeyNeeded, Role, SessionState, abandon_pending,
                       consume_batch, produce_batch, rotate)

log = logging.getLogger(__name__)

FRAME_MAGIC = b"NOTP"
FRAME_VERSION = 0x01
MAX_PAYLOAD = 1 << 20
MAX_BATCH = 0xFFFF  # BATCH_ACK carries a 16-bit count
WIRE_ADC_BITS = 16
DEFAULT_DEADLINE = 30.0
_HEADER = struct.Struct("<4sBB16sI")
HEADER_SIZE = _HEADER.size


class FrameType(enum.IntEnum):
    HELLO = 0x01
    HELLO_ACK = 0x02
    BATCH = 0x03
    BATCH_ACK = 0x04
    REKEY_NEEDED = 0x05
    CLOSE = 0x06
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    PROTOCOL = 0x01
    HANDSHAKE = 0x02
    INTEGRITY = 0x03
    FRAMING = 0x04
    BUDGET = 0x05


class NetError(Exception):
    pass


class FramingError(NetError, ValueError):
    pass


class BadMagic(FramingError):
    pass


class BadVersion(FramingError):
    pass


class OversizePayload(FramingError):
    pass


class Truncated(FramingError):
    pass


class UnknownType(FramingError):
    pass


class PayloadError(FramingError):
    pass


class HandshakeError(NetError):
    pass


class TransportTimeout(NetError, TimeoutError):
    pass


class TransportClosed(NetError, ConnectionError):
    pass


class PeerError(NetError):
    """The peer reported an error and is closing the session."""

    def __init__(self, code: int, message: str):
        super().__init__(f"peer error {code:#04x}: {message}")
        self.code = code


class DigestMismatch(NetError):
    pass


class UnexpectedFrame(NetError):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    session_id: bytes = bytes(16)
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.session_id) != 16:
        raise ValueError("session_id must be 16 bytes")
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, int(frame.type), frame.session_id,
                        len(frame.payload)) + frame.payload


def decode_frame(buf: bytes) -> tuple[Frame, bytes]:
    """Parse one frame from the front of ``buf``; returns the frame and the rest."""
    if len(buf) >= 4 and buf[:4] != FRAME_MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) >= 5 and buf[4] != FRAME_VERSION:
        raise BadVersion(f"unsupported frame version {buf[4]}")
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    _, _, ftype, sid, plen = _HEADER.unpack_from(buf)
    if plen > MAX_PAYLOAD:
        raise OversizePayload(f"payload length {plen} exceeds {MAX_PAYLOAD}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise UnknownType(f"unknown frame type {ftype:#04x}") from None
    end = HEADER_SIZE + plen
    if len(buf) < end:
        raise Truncated(f"need {end} bytes, have {len(buf)}")
    return Frame(ftype, bytes(sid), bytes(buf[HEADER_SIZE:end])), bytes(buf[end:])


def decode_stream(data: bytes) -> list[Frame]:
    frames = []
    while data:
        frame, data = decode_frame(data)
        frames.append(frame)
    return frames


_DPHI_FREE = 0x80


@dataclass(frozen=True)
class HelloPayload:
    mean_photon_number: float
    delta_phi: float
    adc_bits: int
    n_b: int
    key_id: bytes
    nonce: bytes

    @classmethod
    def for_session(cls, state: SessionState, key_id: bytes, nonce: bytes) -> "HelloPayload":
        n_b = state.shuffle.selector_bits if state.shuffle.enabled else 0
        p = state.params
        return cls(float(p.mean_photon_number), float(p.delta_phi), int(p.adc_bits), n_b, key_id, nonce)

    def encode(self) -> bytes:
        out = struct.pack("<d", self.mean_photon_number)
        m, e = np.frexp(self.delta_phi)
        exponent = 1 - int(e)
        if m == 0.5 and -127 <= exponent <= 127:
            out += struct.pack("<b", exponent)
        else:
            out += bytes([_DPHI_FREE]) + struct.pack("<d", self.delta_phi)
        if len(self.key_id) != 32 or len(self.nonce) != 16:
            raise ValueError("key_id must be 32 bytes and nonce 16 bytes")
        return out + struct.pack("<BB", self.adc_bits, self.n_b) + self.key_id + self.nonce

    @classmethod
    def decode(cls, data: bytes) -> "HelloPayload":
        try:
            (n_mean,) = struct.unpack_from("<d", data, 0)
            pos = 8
            if data[pos] == _DPHI_FREE:
                (dphi,) = struct.unpack_from("<d", data, pos + 1)
                pos += 9
            else:
                (m,) = struct.unpack_from("<b", data, pos)
                dphi = 2.0 ** -m
                pos += 1
            adc, n_b = struct.unpack_from("<BB", data, pos)
            pos += 2
        except (struct.error, IndexError):
            raise PayloadError("HELLO payload truncated") from None
        if len(data) != pos + 48:
            raise PayloadError("HELLO payload has wrong length")
        return cls(n_mean, dphi, adc, n_b, data[pos:pos + 32], data[pos + 32:pos + 48])

    def agrees_with(self, other: "HelloPayload") -> bool:
        return (self.mean_photon_number == other.mean_photon_number
                and self.delta_phi == other.delta_phi
                and self.adc_bits == other.adc_bits
                and self.n_b == other.n_b
                and self.key_id == other.key_id)

    def params(self, guard_ratio: float = 5.0) -> NoiseParams:
        return NoiseParams(self.mean_photon_number, self.delta_phi, self.adc_bits, guard_ratio)


def encode_batch(batch: Batch) -> bytes:
    samples = np.asarray(batch.samples, dtype=np.int64)
    if samples.size and (samples.min() < 0 or samples.max() > 0xFFFF):
        raise ValueError("samples do not fit the 16-bit wire profile")
    return struct.pack("<II", batch.cycle, samples.size) + samples.astype("<u2").tobytes()


def decode_batch(data: bytes, adc_bits: int = WIRE_ADC_BITS) -> Batch:
    if len(data) < 8:
        raise PayloadError("BATCH payload truncated")
    cycle, count = struct.unpack_from("<II", data)
    if len(data) != 8 + 2 * count:
        raise PayloadError(f"BATCH payload length {len(data)} does not match count {count}")
    samples = np.frombuffer(data, dtype="<u2", offset=8).astype(np.int64)
    if samples.size and samples.max() >= 1 << adc_bits:
        raise PayloadError("sample index outside the negotiated grid")
    return Batch(cycle, samples, adc_bits)


def ack_digest(cycle: int, key: KeyBuffer, transcript: bytes = b"") -> bytes:
    """Agreement digest over the recovered key bound to the session transcript hash."""
    h = hashlib.sha256(b"notp-ack\x00")
    h.update(struct.pack("<IQ", cycle, len(key)))
    h.update(pack_bits(key.bits))
    h.update(transcript)
    return h.digest()


def encode_ack(count: int, digest: bytes) -> bytes:
    return struct.pack("<H", count) + digest


def decode_ack(data: bytes) -> tuple[int, bytes]:
    if len(data) != 34:
        raise PayloadError("BATCH_ACK payload must be 34 bytes")
    (count,) = struct.unpack_from("<H", data)
    return count, data[2:]


def encode_error(code: int, message: str) -> bytes:
    return bytes([int(code) & 0xFF]) + message.encode("utf-8", "replace")[:1024]


def decode_error(data: bytes) -> tuple[int, str]:
    if not data:
        return 0, ""
    return data[0], data[1:].decode("utf-8", "replace")


class Capture:
    """Thread-safe sink for verbatim frame bytes."""

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self._lock = threading.Lock()

    def write(self, data: bytes) -> None:
        with self._lock:
            self._fh.write(data)
            self._fh.flush()


class Channel:
    """Frame I/O over a connected socket with a per-frame deadline.

    Parameters
    ----------
    sock : socket.socket
    deadline : float
        Seconds allowed for each frame to arrive.
    capture : Capture, optional
        Receives a copy of every frame sent and, if ``capture_received``,
        every frame received.
    """

    def __init__(self, sock: socket.socket, deadline: float = DEFAULT_DEADLINE,
                 capture: Capture | None = None, capture_received: bool = True):
        self.sock = sock
        self.deadline = deadline
        self.capture = capture
        self.capture_received = capture_received
        self._buf = b""
        self._transcript = hashlib.sha256()

    def transcript_hash(self) -> bytes:
        """SHA-256 over every frame sent or received so far, in order."""
        return self._transcript.copy().digest()

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        self._transcript.update(data)
        if self.capture is not None:
            self.capture.write(data)
        self.sock.settimeout(self.deadline)
        try:
            self.sock.sendall(data)
        except socket.timeout:
            raise TransportTimeout("send deadline exceeded") from None

    def recv(self) -> Frame:
        end = time.monotonic() + self.deadline
        while True:
            try:
                frame, rest = decode_frame(self._buf)
            except Truncated:
                pass
            else:
                raw = self._buf[:len(self._buf) - len(rest)]
                self._buf = rest
                self._transcript.update(raw)
                if self.capture is not None and self.capture_received:
                    self.capture.write(raw)
                return frame
            remaining = end - time.monotonic()
            try:
                if remaining <= 0:
                    raise socket.timeout
                self.sock.settimeout(remaining)
                chunk = self.sock.recv(65536)
            except socket.timeout:
                if self._buf:
                    raise Truncated(f"frame incomplete after {self.deadline} s") from None
                raise TransportTimeout(f"no frame within {self.deadline} s") from None
            if not chunk:
                if self._buf:
                    raise Truncated("connection closed inside a frame")
                raise TransportClosed("peer closed the connection")
            self._buf += chunk

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class SessionResult:
    role: Role
    state: SessionState
    session_id: bytes
    key_id: bytes
    cycles_completed: int = 0
    raw_bits: int = 0
    rekey_needed: bool = False
    batch_sizes: list[int] = field(default_factory=list)

    @property
    def harvested(self) -> list[KeyBuffer]:
        return self.state.harvested


class _Driver:
    """Shared send/expect helpers for one side of a session."""

    def __init__(self, channel: Channel, state: SessionState, session_id: bytes):
        self.ch = channel
        self.state = state
        self.sid = session_id
        self.notified = False

    def send(self, ftype: FrameType, payload: bytes = b"") -> None:
        self.ch.send(Frame(ftype, self.sid, payload))

    def fail(self, code: ErrorCode, exc: Exception) -> Exception:
        """Tell the peer (best effort) and hand back ``exc`` for raising."""
        if not self.notified:
            self.notified = True
            try:
                self.send(FrameType.ERROR, encode_error(code, str(exc)))
            except Exception:  # noqa: BLE001 - the original error matters more
                pass
        return exc

    def expect(self, *types: FrameType) -> Frame:
        try:
            frame = self.ch.recv()
        except FramingError as exc:
            raise self.fail(ErrorCode.FRAMING, exc)
        if frame.type is FrameType.ERROR:
            self.notified = True
            raise PeerError(*decode_error(frame.payload))
        if frame.session_id != self.sid:
            raise self.fail(ErrorCode.PROTOCOL, UnexpectedFrame("session id mismatch"))
        if frame.type not in types:
            raise self.fail(ErrorCode.PROTOCOL,
                            UnexpectedFrame(f"got {frame.type.name}, expected {'/'.join(t.name for t in types)}"))
        return frame

    def send_batch(self, count: int, entropy: EntropyStream) -> KeyBuffer:
        batch, pending = produce_batch(self.state, count, entropy)
        try:
            self.send(FrameType.BATCH, encode_batch(batch))
        except Exception:
            abandon_pending(self.state, refund=True)
            raise
        expected = ack_digest(batch.cycle, pending, self.ch.transcript_hash())
        try:
            frame = self.expect(FrameType.BATCH_ACK)
            ack_count, digest = decode_ack(frame.payload)
        except Exception:
            abandon_pending(self.state, refund=False)
            raise
        if ack_count != count or digest != expected:
            abandon_pending(self.state, refund=False)
            raise self.fail(ErrorCode.INTEGRITY, DigestMismatch(f"cycle {batch.cycle}: peer key digest differs"))
        rotate(self.state, pending)
        return pending

    def receive_batch(self, frame: Frame) -> KeyBuffer:
        try:
            batch = decode_batch(frame.payload, self.state.params.adc_bits)
        except PayloadError as exc:
            raise self.fail(ErrorCode.FRAMING, exc)
        try:
            key = consume_batch(self.state, batch)
        except RekeyNeeded as exc:
            raise self.fail(ErrorCode.BUDGET, exc)
        except (ProtocolError, ValueError) as exc:
            raise self.fail(ErrorCode.PROTOCOL, exc)
        digest = ack_digest(batch.cycle, key, self.ch.transcript_hash())
        self.send(FrameType.BATCH_ACK, encode_ack(len(key), digest))
        rotate(self.state, key)
        return key


def _check_wire_profile(state: SessionState) -> None:
    if state.params.adc_bits > WIRE_ADC_BITS:
        raise ValueError(f"wire profile carries at most {WIRE_ADC_BITS}-bit samples")


def run_initiator(channel: Channel, session: SessionState, key_id: bytes, entropy: EntropyStream,
                  cycles: int, batch: int) -> SessionResult:
    """Drive a session from the initiating side.

    ``cycles`` counts batches in both directions; ``cycles <= 0`` keeps going
    until a party runs out of budget.
    """
    _check_wire_profile(session)
    if not 0 < batch <= MAX_BATCH:
        raise ValueError(f"batch must be in 1..{MAX_BATCH}")
    sid = entropy.random_bytes(16)
    mine = HelloPayload.for_session(session, key_id, entropy.random_bytes(16))
    d = _Driver(channel, session, sid)
    result = SessionResult(Role.INITIATOR, session, sid, key_id)
    d.send(FrameType.HELLO, mine.encode())
    try:
        frame = d.expect(FrameType.HELLO_ACK)
    except PeerError as exc:
        raise HandshakeError(str(exc)) from exc
    theirs = HelloPayload.decode(frame.payload)
    if not theirs.agrees_with(mine):
        raise d.fail(ErrorCode.HANDSHAKE, HandshakeError("peer parameters or key id differ"))

    last = batch
    while cycles <= 0 or session.cycle < cycles:
        t = session.cycle
        if t % 2 == 0:
            try:
                key = d.send_batch(batch, entropy)
            except RekeyNeeded:
                d.send(FrameType.REKEY_NEEDED)
                result.rekey_needed = True
                break
        else:
            d.send(FrameType.BATCH, encode_batch(Batch(t, np.zeros(0, np.int64))))
            frame = d.expect(FrameType.BATCH, FrameType.REKEY_NEEDED)
            if frame.type is FrameType.REKEY_NEEDED:
                result.rekey_needed = True
                break
            key = d.receive_batch(frame)
        last = len(key)
        result.cycles_completed += 1
        result.raw_bits += last
        result.batch_sizes.append(last)
    d.send(FrameType.CLOSE)
    d.expect(FrameType.CLOSE)
    return result


def run_responder(channel: Channel, session, key_id: bytes | None = None,
                  entropy: EntropyStream | None = None) -> SessionResult:
    """Serve one session.

    ``session`` is either a :class:`SessionState` (with its ``key_id``) or a
    callable mapping the peer's key id to ``(state, key_id)`` or ``None``.
    """
    try:
        first = channel.recv()
    except FramingError as exc:
        _best_effort_error(channel, bytes(16), ErrorCode.FRAMING, exc)
        raise
    if first.type is not FrameType.HELLO:
        exc = UnexpectedFrame(f"expected HELLO, got {first.type.name}")
        _best_effort_error(channel, first.session_id, ErrorCode.PROTOCOL, exc)
        raise exc
    sid = first.session_id
    try:
        theirs = HelloPayload.decode(first.payload)
    except PayloadError as exc:
        _best_effort_error(channel, sid, ErrorCode.FRAMING, exc)
        raise
    if callable(session):
        found = session(theirs.key_id)
        if found is None:
            exc = HandshakeError("unknown key id")
            _best_effort_error(channel, sid, ErrorCode.HANDSHAKE, exc)
            raise exc
        session, key_id = found
    _check_wire_profile(session)
    d = _Driver(channel, session, sid)
    mine = HelloPayload.for_session(session, key_id, entropy.random_bytes(16))
    if not theirs.agrees_with(mine):
        raise d.fail(ErrorCode.HANDSHAKE, HandshakeError("peer parameters or key id differ"))
    d.send(FrameType.HELLO_ACK, mine.encode())
    result = SessionResult(Role.RESPONDER, session, sid, key_id)

    last = 0
    while True:
        frame = d.expect(FrameType.BATCH, FrameType.REKEY_NEEDED, FrameType.CLOSE)
        if frame.type is FrameType.CLOSE:
            d.send(FrameType.CLOSE)
            return result
        if frame.type is FrameType.REKEY_NEEDED:
            result.rekey_needed = True
            continue
        try:
            batch = decode_batch(frame.payload, session.params.adc_bits)
        except PayloadError as exc:
            raise d.fail(ErrorCode.FRAMING, exc)
        if batch.cycle != session.cycle:
            raise d.fail(ErrorCode.PROTOCOL, UnexpectedFrame(f"batch for cycle {batch.cycle}, at {session.cycle}"))
        if session.cycle % 2 == 0:
            key = d.receive_batch(frame)
        else:
            if len(batch):
                raise d.fail(ErrorCode.PROTOCOL, UnexpectedFrame("initiator sent samples on the responder's turn"))
            try:
                key = d.send_batch(last, entropy)
            except RekeyNeeded:
                d.send(FrameType.REKEY_NEEDED)
                result.rekey_needed = True
                continue
        last = len(key)
        result.cycles_completed += 1
        result.raw_bits += last
        result.batch_sizes.append(last)


def _best_effort_error(channel: Channel, sid: bytes, code: ErrorCode, exc: Exception) -> None:
    try:
        channel.send(Frame(FrameType.ERROR, sid, encode_error(code, str(exc))))
    except Exception:  # noqa: BLE001
        pass


def connect(address: tuple[str, int], deadline: float = DEFAULT_DEADLINE,
            capture: Capture | None = None) -> Channel:
    try:
        sock = socket.create_connection(address, timeout=deadline)
    except socket.timeout:
        raise TransportTimeout(f"connect to {address} timed out") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Channel(sock, deadline, capture)


class Server:
    """Accepts connections and runs one isolated responder session per connection."""

    def __init__(self, address: tuple[str, int], resolve: Callable, entropy_for: Callable[[int], EntropyStream],
                 deadline: float = DEFAULT_DEADLINE, capture_for: Callable[[int], Capture | None] | None = None):
        self.sock = socket.create_server(address)
        self.address = self.sock.getsockname()[:2]
        self.resolve = resolve
        self.entropy_for = entropy_for
        self.deadline = deadline
        self.capture_for = capture_for
        self.results: list[SessionResult | Exception] = []
        self._lock = threading.Lock()

    def _handle(self, conn: socket.socket, index: int) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        capture = self.capture_for(index) if self.capture_for else None
        channel = Channel(conn, self.deadline, capture)
        try:
            outcome = run_responder(channel, self.resolve, None, self.entropy_for(index))
        except Exception as exc:  # noqa: BLE001 - reported to the caller via results
            log.warning("session %d failed: %s", index, exc)
            outcome = exc
        finally:
            channel.close()
        with self._lock:
            self.results.append(outcome)

    def serve(self, sessions: int, accept_timeout: float | None = None) -> list[SessionResult | Exception]:
        """Handle ``sessions`` connections concurrently, then return their outcomes."""
        threads = []
        self.sock.settimeout(accept_timeout)
        try:
            for i in range(sessions):
                try:
                    conn, _ = self.sock.accept()
                except socket.timeout:
                    raise TransportTimeout("no connection within the accept deadline") from None
                th = threading.Thread(target=self._handle, args=(conn, i), daemon=True)
                th.start()
                threads.append(th)
        finally:
            for th in threads:
                th.join()
            self.sock.close()
        return self.results
