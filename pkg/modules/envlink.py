"""Framed request/response protocol that serves an environment over TCP.

Every frame is ``<u32 length><u8 type><payload>`` with length counting the
type byte and the payload, all little-endian:

    HELLO       0x01  u16 protocol version               client -> server
    SPEC        0x02  u32 N, u32 M, u32 max_episode_steps, u8 variant id,
                      7 x f64 target (position, quaternion w x y z),
                      utf-8 environment name (rest of payload)
    RESET       0x03  empty                               -> OBS
    OBS         0x04  N x f64
    STEP        0x05  M x f64                             -> TRANSITION
    TRANSITION  0x06  N x f64 observation, f64 reward, u8 done
    SEED        0x07  u64 seed                            -> SPEC
    CLOSE       0x08  empty; the server closes the connection
    ERROR       0x7F  u16 code, utf-8 message

A connection starts with HELLO answered by SPEC. One environment lives per
connection. Errors are answered with an ERROR frame and the connection
stays open, except for frames longer than ``MAX_FRAME_BYTES`` which cannot be
skipped safely.
"""

import logging
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from modules.envs import VARIANTS, EnvSpec
from modules.errors import (
    ConfigError, ContractError, EnvironmentFault, PolgradError, ProtocolError, RemoteEnvError,
)
from modules.kinematics import Pose

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 20
ENDPOINT_ENV_VAR = "POLGRAD_ENV_ENDPOINT"

HELLO = 0x01
SPEC = 0x02
RESET = 0x03
OBS = 0x04
STEP = 0x05
TRANSITION = 0x06
SEED = 0x07
CLOSE = 0x08
ERROR = 0x7F
FRAME_TYPES = (HELLO, SPEC, RESET, OBS, STEP, TRANSITION, SEED, CLOSE, ERROR)

ERR_MALFORMED = 1
ERR_UNKNOWN_TYPE = 2
ERR_STATE = 3
ERR_PAYLOAD_SIZE = 4
ERR_ENV_FAULT = 5

_HEADER = struct.Struct("<IB")
_SPEC_HEAD = struct.Struct("<IIIB7d")


@dataclass
class Frame:
    type: int
    payload: bytes = b""


def encode_frame(frame_type: int, payload: bytes = b"") -> bytes:
    if not 0 <= frame_type <= 0xFF:
        raise ProtocolError(f"frame type {frame_type} does not fit in a byte", ERR_MALFORMED)
    return _HEADER.pack(len(payload) + 1, frame_type) + payload


def decode_frame(data: bytes) -> Tuple[int, bytes]:
    """Decode exactly one complete frame."""
    if len(data) < _HEADER.size:
        raise ProtocolError(f"frame of {len(data)} bytes is shorter than its header", ERR_MALFORMED)
    length, frame_type = _HEADER.unpack_from(data)
    if length != len(data) - 4:
        raise ProtocolError(f"length field {length} does not match {len(data) - 4} bytes after it", ERR_MALFORMED)
    return frame_type, bytes(data[_HEADER.size:])


class FrameDecoder:
    """Reassembles frames from arbitrary stream chunks."""

    def __init__(self, max_frame: int = MAX_FRAME_BYTES):
        self.max_frame = max_frame
        self.broken = False
        self._buffer = bytearray()

    def feed(self, data: bytes):
        self._buffer.extend(data)

    def next_frame(self) -> Optional[Frame]:
        """The next complete frame, or None if more bytes are needed.

        A zero length field is consumed and reported as ProtocolError; an
        oversize length raises ProtocolError and leaves the stream unusable.
        """
        if len(self._buffer) < 4:
            return None
        (length,) = struct.unpack_from("<I", self._buffer)
        if length == 0:
            del self._buffer[:4]
            raise ProtocolError("frame with zero length has no type byte", ERR_MALFORMED)
        if length > self.max_frame:
            self.broken = True
            raise ProtocolError(f"frame length {length} exceeds limit {self.max_frame}", ERR_MALFORMED)
        if len(self._buffer) < 4 + length:
            return None
        frame = Frame(self._buffer[4], bytes(self._buffer[5:4 + length]))
        del self._buffer[:4 + length]
        return frame


# payload codecs

def encode_f64(values) -> bytes:
    values = np.asarray(values, dtype="<f8").ravel()
    return values.tobytes()


def decode_f64(payload: bytes, count: int) -> np.ndarray:
    if len(payload) != 8 * count:
        raise ProtocolError(f"expected {count} reals ({8 * count} bytes), got {len(payload)} bytes", ERR_PAYLOAD_SIZE)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def encode_spec(spec: EnvSpec) -> bytes:
    target = spec.target.as_array()
    head = _SPEC_HEAD.pack(spec.obs_dim, spec.act_dim, spec.max_episode_steps, spec.variant_id, *target)
    return head + spec.name.encode("utf-8")


def decode_spec(payload: bytes) -> EnvSpec:
    if len(payload) < _SPEC_HEAD.size:
        raise ProtocolError(f"SPEC payload of {len(payload)} bytes is too short", ERR_PAYLOAD_SIZE)
    n, m, max_steps, variant_id, *target = _SPEC_HEAD.unpack_from(payload)
    if variant_id >= len(VARIANTS):
        raise ProtocolError(f"unknown variant id {variant_id}", ERR_MALFORMED)
    name = payload[_SPEC_HEAD.size:].decode("utf-8", errors="replace")
    return EnvSpec(name, n, m, max_steps, VARIANTS[variant_id], Pose(target[:3], target[3:]))


def encode_transition(obs, reward: float, done: bool) -> bytes:
    return encode_f64(obs) + struct.pack("<dB", reward, 1 if done else 0)


def decode_transition(payload: bytes, obs_dim: int) -> Tuple[np.ndarray, float, bool]:
    if len(payload) != 8 * obs_dim + 9:
        raise ProtocolError(f"TRANSITION payload of {len(payload)} bytes, expected {8 * obs_dim + 9}",
                            ERR_PAYLOAD_SIZE)
    obs = decode_f64(payload[:8 * obs_dim], obs_dim)
    reward, done = struct.unpack_from("<dB", payload, 8 * obs_dim)
    return obs, reward, bool(done)


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + message.encode("utf-8")


def decode_error(payload: bytes) -> Tuple[int, str]:
    if len(payload) < 2:
        return ERR_MALFORMED, "ERROR frame without a code"
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode("utf-8", errors="replace")


def parse_endpoint(endpoint: Optional[str]) -> Tuple[str, int]:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR)
    if not endpoint:
        raise ConfigError(f"no endpoint given and {ENDPOINT_ENV_VAR} is not set")
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise ConfigError(f"endpoint '{endpoint}' is not host:port")
    return host or "127.0.0.1", int(port)


# server

class _EnvSession:
    """Protocol state machine for one connection."""

    def __init__(self, env):
        self.env = env
        self.greeted = False
        self.ready = False

    def handle(self, frame: Frame) -> Optional[bytes]:
        spec = self.env.spec
        if frame.type not in FRAME_TYPES:
            return self.error(ERR_UNKNOWN_TYPE, f"unknown frame type 0x{frame.type:02x}")
        if frame.type == HELLO:
            if len(frame.payload) != 2:
                return self.error(ERR_PAYLOAD_SIZE, "HELLO carries a u16 version")
            (version,) = struct.unpack("<H", frame.payload)
            if version != PROTOCOL_VERSION:
                return self.error(ERR_STATE, f"protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}")
            self.greeted = True
            return encode_frame(SPEC, encode_spec(spec))
        if not self.greeted:
            return self.error(ERR_STATE, "HELLO must come first")
        if frame.type == RESET:
            if frame.payload:
                return self.error(ERR_PAYLOAD_SIZE, "RESET carries no payload")
            obs = self.env.reset()
            self.ready = True
            return encode_frame(OBS, encode_f64(obs))
        if frame.type == STEP:
            if not self.ready:
                return self.error(ERR_STATE, "STEP before RESET")
            if len(frame.payload) != 8 * spec.act_dim:
                return self.error(ERR_PAYLOAD_SIZE, f"STEP carries {spec.act_dim} reals")
            obs, reward, done = self.env.step(decode_f64(frame.payload, spec.act_dim))
            if done:
                self.ready = False
            return encode_frame(TRANSITION, encode_transition(obs, reward, done))
        if frame.type == SEED:
            if len(frame.payload) != 8:
                return self.error(ERR_PAYLOAD_SIZE, "SEED carries a u64")
            (seed,) = struct.unpack("<Q", frame.payload)
            self.env.seed(seed)
            return encode_frame(SPEC, encode_spec(self.env.spec))
        return self.error(ERR_STATE, f"frame type 0x{frame.type:02x} is not a request")

    @staticmethod
    def error(code: int, message: str) -> bytes:
        logger.debug(f"Answering with error {code}: {message}")
        return encode_frame(ERROR, encode_error(code, message))


class _EnvRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        peer = self.client_address
        env = self.server.env_factory()
        session = _EnvSession(env)
        decoder = FrameDecoder()
        logger.info(f"Connection from {peer}: serving {env.spec.name}")
        try:
            while True:
                data = self.request.recv(65536)
                if not data:
                    break
                decoder.feed(data)
                if not self._drain(decoder, session):
                    break
        except OSError as e:
            logger.warning(f"Connection {peer} failed: {e}")
        finally:
            env.close()
            logger.info(f"Connection from {peer} closed")

    def _drain(self, decoder: FrameDecoder, session: _EnvSession) -> bool:
        """Answer every complete frame; False once the connection should end."""
        while True:
            try:
                frame = decoder.next_frame()
            except ProtocolError as e:
                self.request.sendall(session.error(e.code, str(e)))
                if decoder.broken:
                    return False
                continue
            if frame is None:
                return True
            if frame.type == CLOSE:
                return False
            try:
                reply = session.handle(frame)
            except EnvironmentFault as e:
                reply = session.error(ERR_ENV_FAULT, str(e))
            except (PolgradError, ValueError, ArithmeticError) as e:
                reply = session.error(ERR_ENV_FAULT, f"{type(e).__name__}: {e}")
            if reply:
                self.request.sendall(reply)


class EnvServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, env_factory: Callable[[], object], address: Tuple[str, int]):
        self.env_factory = env_factory
        super().__init__(address, _EnvRequestHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def make_server(env_factory: Callable[[], object], endpoint: str) -> EnvServer:
    return EnvServer(env_factory, parse_endpoint(endpoint))


def serve(env_factory: Callable[[], object], endpoint: str, stop_event: Optional[threading.Event] = None):
    """Serve connections until interrupted or ``stop_event`` is set."""
    server = make_server(env_factory, endpoint)
    logger.info(f"Serving environments on {server.endpoint}")
    if stop_event is not None:
        threading.Thread(target=lambda: (stop_event.wait(), server.shutdown()), daemon=True).start()
    try:
        server.serve_forever()
    finally:
        server.server_close()


# client

class RemoteEnv:
    """Client side of a connection, with the reset/step/spec contract of a local environment.

    The server owns the environment's randomness; ``reset`` ignores its rng
    argument and ``seed`` reseeds the remote instance.
    """

    def __init__(self, sock: socket.socket, endpoint: str):
        self.endpoint = endpoint
        self._sock = sock
        self._decoder = FrameDecoder()
        try:
            self.spec = decode_spec(self._request(HELLO, struct.pack("<H", PROTOCOL_VERSION), SPEC))
        except BaseException:
            sock.close()
            raise

    def _recv_frame(self) -> Frame:
        while True:
            frame = self._decoder.next_frame()
            if frame is not None:
                return frame
            data = self._sock.recv(65536)
            if not data:
                raise ProtocolError(f"{self.endpoint} closed the connection")
            self._decoder.feed(data)

    def _request(self, frame_type: int, payload: bytes, expect: int) -> bytes:
        self._sock.sendall(encode_frame(frame_type, payload))
        frame = self._recv_frame()
        if frame.type == ERROR:
            raise RemoteEnvError(*decode_error(frame.payload))
        if frame.type != expect:
            raise ProtocolError(f"expected frame 0x{expect:02x}, got 0x{frame.type:02x}", ERR_STATE)
        return frame.payload

    def seed(self, seed: Optional[int]):
        payload = self._request(SEED, struct.pack("<Q", 0 if seed is None else int(seed)), SPEC)
        self.spec = decode_spec(payload)

    def reset(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return decode_f64(self._request(RESET, b"", OBS), self.spec.obs_dim)

    def step(self, action) -> Tuple[np.ndarray, float, bool]:
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != self.spec.act_dim:
            raise ContractError(f"action has {action.size} entries, remote environment expects {self.spec.act_dim}")
        return decode_transition(self._request(STEP, encode_f64(action), TRANSITION), self.spec.obs_dim)

    def close(self):
        try:
            self._sock.sendall(encode_frame(CLOSE))
        except OSError:
            pass
        self._sock.close()


def connect(endpoint: Optional[str] = None, timeout: float = 30.0) -> RemoteEnv:
    host, port = parse_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise EnvironmentFault(f"cannot reach environment server at {host}:{port}: {e}") from e
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return RemoteEnv(sock, f"{host}:{port}")
