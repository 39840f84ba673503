"""Two-phase detection fabric: streaming device agent, verification server,
and the feature-transport protocol between them.

Every frame is ``b"WUWP"`` + u32 little-endian body length + body, with a
16 MiB body cap. Request body: u8 version, u8 config_id, u8 flags (bit 0 =
obfuscated payload), u64 nonce, f32 device log-odds, u16 n_frames, u16
n_coeffs, then the feature floats row-major. Response body: u8 verdict
(0 reject, 1 accept, 2 error), f32 fused p_pos, u16 member count, member
log-odds floats. Only feature matrices cross the wire; the schema has no
field for raw audio.

The payload obfuscation is a keyed XOR keystream, not cryptography; use a
real transport-security layer in production.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Sequence

import numpy as np

from .audio import WINDOW_S, AudioClip, peak_normalize
from .errors import (
    DataError,
    FrameLengthError,
    FrameMagicError,
    FrameTruncatedError,
    FrameVersionError,
    ModelError,
    ProtocolError,
)
from .features import CLOUD, DEVICE, FeatureMatrix, mfcc, preset
from .fusion import FusionModel, LogOddsVector, fuse, log_odds
from .nnet import Scorer, softmax2

PROTOCOL_MAGIC = b"WUWP"
PROTOCOL_VERSION = 1
MAX_BODY_BYTES = 16 * 1024 * 1024
FLAG_OBFUSCATED = 0x01

_REQ_FIXED = struct.Struct("<BBBQfHH")


class Verdict(IntEnum):
    REJECT = 0
    ACCEPT = 1
    ERROR = 2


@dataclass(eq=False)
class VerifyRequest:
    """Device trigger shipped for verification: score plus cloud features."""

    config_id: int
    device_log_odds: float
    features: np.ndarray
    nonce: int = 0
    flags: int = 0
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ProtocolError("request features must be 2-D")
        # f32 on the wire; keep the in-memory value identical.
        self.device_log_odds = float(np.float32(self.device_log_odds))

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.features.shape[1]


@dataclass(eq=False)
class VerifyResponse:
    """Fused verdict sent back to the device."""

    verdict: Verdict
    fused_p_pos: float
    member_log_odds: np.ndarray

    def __post_init__(self):
        self.verdict = Verdict(self.verdict)
        self.fused_p_pos = float(np.float32(self.fused_p_pos))
        self.member_log_odds = np.ascontiguousarray(
            self.member_log_odds, dtype=np.float32
        )
        if self.member_log_odds.ndim != 1:
            raise ProtocolError("member log-odds must be a flat vector")


@dataclass(frozen=True)
class DetectionEvent:
    """A device trigger: where it fired, how strongly, and the threshold."""

    window_start_sample: int
    device_log_odds: float
    threshold: float


# -- Obfuscation -----------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


def _keystream(seed: int, nbytes: int) -> bytes:
    """splitmix64 keystream: output i is mix(seed + (i+1) * gamma)."""
    n_words = -(-nbytes // 8)
    with np.errstate(over="ignore"):
        idx = np.arange(1, n_words + 1, dtype=np.uint64)
        z = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * np.uint64(_SM_GAMMA)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM_MIX1) & _MASK64
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM_MIX2) & _MASK64
        z = z ^ (z >> np.uint64(31))
    return z.astype("<u8").tobytes()[:nbytes]


def obfuscate(payload: bytes, key: int, nonce: int) -> bytes:
    """XOR with a keystream seeded by key XOR nonce; applying it twice is the
    identity. This hides payloads from casual taps only; it is not encryption."""
    if not payload:
        return payload
    stream = np.frombuffer(_keystream(key ^ nonce, len(payload)), dtype=np.uint8)
    return (np.frombuffer(payload, dtype=np.uint8) ^ stream).tobytes()


# -- Framing ---------------------------------------------------------------

def _frame(body: bytes) -> bytes:
    if len(body) > MAX_BODY_BYTES:
        raise FrameLengthError(f"body of {len(body)} bytes exceeds cap")
    return PROTOCOL_MAGIC + struct.pack("<I", len(body)) + body


def _unframe(frame: bytes) -> bytes:
    if len(frame) < 8:
        raise FrameTruncatedError("frame shorter than header")
    if frame[:4] != PROTOCOL_MAGIC:
        raise FrameMagicError("bad frame magic")
    (body_len,) = struct.unpack_from("<I", frame, 4)
    if body_len > MAX_BODY_BYTES:
        raise FrameLengthError(f"declared body of {body_len} bytes exceeds cap")
    if len(frame) != 8 + body_len:
        raise FrameTruncatedError(
            f"frame has {len(frame) - 8} body bytes, header declares {body_len}"
        )
    return frame[8:]


def encode_request(req: VerifyRequest, key: int | None = None) -> bytes:
    payload = req.features.astype("<f4").tobytes()
    if req.flags & FLAG_OBFUSCATED:
        if key is None:
            raise ProtocolError("obfuscated request needs a key")
        payload = obfuscate(payload, key, req.nonce)
    body = _REQ_FIXED.pack(
        req.version,
        req.config_id,
        req.flags,
        req.nonce,
        req.device_log_odds,
        req.n_frames,
        req.n_coeffs,
    )
    return _frame(body + payload)


def decode_request(frame: bytes, key: int | None = None) -> VerifyRequest:
    body = _unframe(frame)
    if len(body) < _REQ_FIXED.size:
        raise FrameTruncatedError("request body shorter than its fixed fields")
    version, config_id, flags, nonce, dev_lo, n_frames, n_coeffs = _REQ_FIXED.unpack_from(
        body, 0
    )
    if version != PROTOCOL_VERSION:
        raise FrameVersionError(f"unknown protocol version {version}")
    payload = body[_REQ_FIXED.size :]
    expected = 4 * n_frames * n_coeffs
    if len(payload) != expected:
        raise FrameLengthError(
            f"payload of {len(payload)} bytes, header declares {expected}"
        )
    if flags & FLAG_OBFUSCATED:
        if key is None:
            raise ProtocolError("obfuscated request needs a key")
        payload = obfuscate(payload, key, nonce)
    features = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_coeffs)
    return VerifyRequest(
        config_id=config_id,
        device_log_odds=dev_lo,
        features=features.copy(),
        nonce=nonce,
        flags=flags,
        version=version,
    )


def encode_response(resp: VerifyResponse) -> bytes:
    body = struct.pack(
        "<BfH", int(resp.verdict), resp.fused_p_pos, resp.member_log_odds.size
    )
    return _frame(body + resp.member_log_odds.astype("<f4").tobytes())


def decode_response(frame: bytes) -> VerifyResponse:
    body = _unframe(frame)
    if len(body) < 7:
        raise FrameTruncatedError("response body shorter than its fixed fields")
    verdict, p_pos, n_members = struct.unpack_from("<BfH", body, 0)
    if verdict not in (0, 1, 2):
        raise ProtocolError(f"unknown verdict byte {verdict}")
    payload = body[7:]
    if len(payload) != 4 * n_members:
        raise FrameLengthError("member log-odds payload length mismatch")
    values = np.frombuffer(payload, dtype="<f4").copy()
    return VerifyResponse(Verdict(verdict), p_pos, values)


def read_frame(stream: BinaryIO) -> bytes:
    """Read one complete frame from a blocking byte stream.

    Raises EOFError on a clean end-of-stream before any header byte, and
    ProtocolError subclasses on anything malformed.
    """
    header = stream.read(8)
    if not header:
        raise EOFError
    if len(header) < 8:
        raise FrameTruncatedError("stream ended inside the frame header")
    if header[:4] != PROTOCOL_MAGIC:
        raise FrameMagicError("bad frame magic")
    (body_len,) = struct.unpack_from("<I", header, 4)
    if body_len > MAX_BODY_BYTES:
        raise FrameLengthError(f"declared body of {body_len} bytes exceeds cap")
    body = b""
    while len(body) < body_len:
        chunk = stream.read(body_len - len(body))
        if not chunk:
            raise FrameTruncatedError("stream ended inside the frame body")
        body += chunk
    return header + body


# -- Device agent ------------------------------------------------------------

def _prob_to_log_odds(p: float) -> float:
    p = min(max(p, 1e-7), 1.0 - 1e-7)
    return float(np.log(p / (1.0 - p)))


class DeviceAgent:
    """Streaming first-phase detector.

    Scores the trailing analysis window at a fixed stride; when the score
    clears the threshold outside the refractory period, it emits a
    DetectionEvent plus a VerifyRequest carrying verification-resolution
    features of the same window. Audio older than the bounded buffer is
    dropped and counted in ``dropped_windows``.
    """

    def __init__(
        self,
        scorer: Scorer,
        theta_device: float = 0.5,
        refractory_s: float = 1.0,
        stride_hops: int = 2,
        window_s: float = WINDOW_S,
        key: int | None = None,
        max_buffer_s: float = 10.0,
    ):
        device_cfg = preset(scorer.config_id)
        if device_cfg.config_id != DEVICE.config_id:
            raise ModelError("device agent needs a scorer over the device config")
        self.scorer = scorer
        self.theta_device = theta_device
        self.key = key
        self._device_cfg = device_cfg
        self._cloud_cfg = CLOUD
        self._rate = device_cfg.sample_rate_hz
        self._threshold_lo = _prob_to_log_odds(theta_device)
        self._window = int(round(window_s * self._rate))
        self._window_s = window_s
        self._stride = stride_hops * device_cfg.hop_samples
        self._refractory = int(round(refractory_s * self._rate))
        self._capacity = max(int(round(max_buffer_s * self._rate)), self._window)
        self._buf = np.zeros(0, dtype=np.float64)
        self._buf_start = 0  # absolute index of _buf[0]
        self._total = 0  # absolute count of samples consumed
        self._next_eval = self._window  # absolute end index of the next window
        self._last_event_start: int | None = None
        self.dropped_windows = 0

    def feed(self, chunk) -> list[tuple[DetectionEvent, VerifyRequest]]:
        """Consume an audio chunk; return any (event, request) pairs it fired."""
        samples = chunk.samples if isinstance(chunk, AudioClip) else np.asarray(
            chunk, dtype=np.float64
        )
        if isinstance(chunk, AudioClip) and chunk.sample_rate_hz != self._rate:
            raise ModelError(f"agent runs at {self._rate} Hz")
        self._total += samples.size
        self._buf = np.concatenate([self._buf, samples])
        if self._buf.size > self._capacity:
            cut = self._buf.size - self._capacity
            self._buf = self._buf[cut:]
            self._buf_start += cut

        fired = []
        while self._next_eval <= self._total:
            end = self._next_eval
            start = end - self._window
            self._next_eval += self._stride
            if start < self._buf_start:
                self.dropped_windows += 1
                continue
            window = self._buf[start - self._buf_start : end - self._buf_start]
            result = self._score_window(window, start)
            if result is not None:
                fired.append(result)
        return fired

    def _score_window(self, window, start):
        clip = peak_normalize(AudioClip(window, self._rate))
        device_fm = mfcc(clip, self._device_cfg)
        lo = log_odds(*softmax2(self.scorer.fn(device_fm)))
        if lo < self._threshold_lo:
            return None
        if (
            self._last_event_start is not None
            and start - self._last_event_start < self._refractory
        ):
            return None
        self._last_event_start = start
        event = DetectionEvent(start, lo, self.theta_device)
        cloud_fm = mfcc(clip, self._cloud_cfg)
        request = VerifyRequest(
            config_id=self._cloud_cfg.config_id,
            device_log_odds=lo,
            features=cloud_fm.values,
            nonce=start,
            flags=FLAG_OBFUSCATED if self.key is not None else 0,
        )
        return event, request


# -- Verification server -----------------------------------------------------

def verify_request(
    req: VerifyRequest,
    members: Sequence[Scorer],
    fusion: FusionModel,
    theta_cloud: float = 0.5,
    device_member_id: str = "device",
) -> VerifyResponse:
    """Pure second-phase verification: run every member on the shipped
    features, stack the device score first, fuse, and threshold."""
    fm = FeatureMatrix(req.features, req.config_id)
    values = [req.device_log_odds]
    for member in members:
        if member.config_id != req.config_id:
            raise ModelError(
                f"member {member.member_id!r} expects config {member.config_id}, "
                f"request carries {req.config_id}"
            )
        values.append(log_odds(*softmax2(member.fn(fm))))
    ids = (device_member_id,) + tuple(m.member_id for m in members)
    z = LogOddsVector(np.array(values), ids)
    fused = fuse(z, fusion)
    p_pos, _ = softmax2(fused)
    verdict = Verdict.ACCEPT if np.float32(p_pos) >= theta_cloud else Verdict.REJECT
    return VerifyResponse(verdict, p_pos, z.values.astype(np.float32))


class VerificationServer:
    """Stateless per-request verification over a TCP loopback or any stream.

    Scorer and fusion weights are immutable shared state; each connection is
    handled on its own thread and every frame is answered independently.
    """

    def __init__(
        self,
        members: Sequence[Scorer],
        fusion: FusionModel,
        theta_cloud: float = 0.5,
        key: int | None = None,
        device_member_id: str = "device",
    ):
        expected = (device_member_id,) + tuple(m.member_id for m in members)
        if fusion.member_ids != expected:
            raise ModelError(
                f"fusion members {fusion.member_ids} do not match {expected}"
            )
        for member in members:
            if member.config_id != CLOUD.config_id:
                raise ModelError(
                    f"member {member.member_id!r} must consume the cloud config"
                )
        self.members = tuple(members)
        self.fusion = fusion
        self.theta_cloud = theta_cloud
        self.key = key
        self.device_member_id = device_member_id
        self._tcp: socketserver.ThreadingTCPServer | None = None
        self._thread: threading.Thread | None = None

    def handle_frame(self, frame: bytes) -> tuple[bytes, bool]:
        """Answer one frame; returns (response bytes, keep connection open)."""
        try:
            req = decode_request(frame, key=self.key)
            resp = self.verify(req)
        except (ProtocolError, ModelError, DataError):
            error = VerifyResponse(Verdict.ERROR, 0.0, np.zeros(0, dtype=np.float32))
            return encode_response(error), False
        return encode_response(resp), True

    def verify(self, req: VerifyRequest) -> VerifyResponse:
        return verify_request(
            req, self.members, self.fusion, self.theta_cloud, self.device_member_id
        )

    # TCP wiring

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Serve on a background thread; returns the bound (host, port)."""
        if self._tcp is not None:
            raise RuntimeError("server already started")
        logic = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    try:
                        frame = read_frame(self.rfile)
                    except EOFError:
                        return
                    except ProtocolError:
                        error = VerifyResponse(
                            Verdict.ERROR, 0.0, np.zeros(0, dtype=np.float32)
                        )
                        try:
                            self.wfile.write(encode_response(error))
                        except OSError:
                            pass
                        return
                    response, keep = logic.handle_frame(frame)
                    self.wfile.write(response)
                    if not keep:
                        return

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._tcp = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()
        return self._tcp.server_address

    def serve_forever(self, host: str = "127.0.0.1", port: int = 0) -> None:
        addr = self.start(host, port)
        print(f"verification server listening on {addr[0]}:{addr[1]}", flush=True)
        try:
            self._thread.join()
        except KeyboardInterrupt:
            self.shutdown()

    def shutdown(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None
            self._thread = None


def request_verification(
    addr: tuple[str, int],
    req: VerifyRequest,
    key: int | None = None,
    timeout: float = 10.0,
) -> VerifyResponse:
    """Send one request over TCP and wait for the verdict."""
    with socket.create_connection(addr, timeout=timeout) as sock:
        sock.sendall(encode_request(req, key=key))
        with sock.makefile("rb") as reader:
            return decode_response(read_frame(reader))
