"""Target engine: a stateless logits / fused-feature provider with two backends.

Both backends run the same :meth:`InProcessEngine.handle_payload` code path,
so the socket service returns byte-identical payloads.

Wire format (all little-endian)::

    connection hello (both ways)  b"SPEC" u16 version
    frame                         u32 length, payload
    request payload               u64 id, u32 flags, u32 n, u32 tokens[n],
                                  [i32 parents[n] if flags & FLAG_TREE]
    response payload              u64 id, u8 status, u8 blocks,
                                  then per present block: u32 rows, u32 cols, f32 data

``blocks`` has bit 0 set when a logits block follows and bit 1 for fused
features. With ``FLAG_TREE`` the request carries a parent index per token
(-1 for a root); a token attends to itself and its ancestors only and sits
at position ``depth``. A chain ``parents[i] = i - 1`` is a plain causal pass.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .model import TargetModel, load_checkpoint

log = logging.getLogger(__name__)

MAGIC = b"SPEC"
PROTOCOL_VERSION = 1
HELLO = MAGIC + struct.pack("<H", PROTOCOL_VERSION)
MAX_FRAME = 16 * 1024 * 1024
DEFAULT_MAX_TOKENS = 4096

FLAG_LOGITS = 1
FLAG_FUSED = 2
FLAG_TREE = 4
_KNOWN_FLAGS = FLAG_LOGITS | FLAG_FUSED | FLAG_TREE

STATUS_OK = 0
STATUS_BAD_REQUEST = 1
STATUS_OVERLOAD = 2

_REQ_HEAD = struct.Struct("<QII")
_RESP_HEAD = struct.Struct("<QBB")
_BLOCK_HEAD = struct.Struct("<II")
_LEN = struct.Struct("<I")


class ProtocolError(ValueError):
    """Malformed payload. ``request_id`` is set when the id could be read."""

    def __init__(self, msg: str, request_id: Optional[int] = None):
        super().__init__(msg)
        self.request_id = request_id


class EngineError(RuntimeError):
    """A request came back with a non-ok status."""


@dataclass
class EngineRequest:
    request_id: int
    tokens: np.ndarray
    flags: int = FLAG_LOGITS | FLAG_FUSED
    parents: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint32).reshape(-1)
        if self.parents is not None:
            self.parents = np.asarray(self.parents, dtype=np.int32).reshape(-1)
            self.flags |= FLAG_TREE

    def __eq__(self, other):
        if not isinstance(other, EngineRequest):
            return NotImplemented
        same_parents = (self.parents is None and other.parents is None) or (
            self.parents is not None and other.parents is not None and np.array_equal(self.parents, other.parents)
        )
        return (
            self.request_id == other.request_id
            and self.flags == other.flags
            and np.array_equal(self.tokens, other.tokens)
            and same_parents
        )


@dataclass
class EngineResponse:
    request_id: int
    status: int
    logits: Optional[np.ndarray] = None
    fused: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, EngineResponse):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.request_id == other.request_id
            and self.status == other.status
            and same(self.logits, other.logits)
            and same(self.fused, other.fused)
        )


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


def encode_request(req: EngineRequest) -> bytes:
    flags = req.flags | (FLAG_TREE if req.parents is not None else 0)
    out = _REQ_HEAD.pack(req.request_id, flags, len(req.tokens)) + req.tokens.astype("<u4").tobytes()
    if flags & FLAG_TREE:
        if req.parents is None or len(req.parents) != len(req.tokens):
            raise ValueError("tree request needs one parent per token")
        out += req.parents.astype("<i4").tobytes()
    return out


def decode_request(payload: bytes) -> EngineRequest:
    if len(payload) < 8:
        raise ProtocolError("request shorter than its id")
    (rid,) = struct.unpack_from("<Q", payload)
    if len(payload) < _REQ_HEAD.size:
        raise ProtocolError("truncated request header", rid)
    _, flags, n = _REQ_HEAD.unpack_from(payload)
    if flags & ~_KNOWN_FLAGS:
        raise ProtocolError(f"unknown flag bits 0x{flags:x}", rid)
    per_token = 8 if flags & FLAG_TREE else 4
    if len(payload) != _REQ_HEAD.size + per_token * n:
        raise ProtocolError("request length does not match token count", rid)
    off = _REQ_HEAD.size
    tokens = np.frombuffer(payload, dtype="<u4", count=n, offset=off).astype(np.uint32)
    parents = None
    if flags & FLAG_TREE:
        parents = np.frombuffer(payload, dtype="<i4", count=n, offset=off + 4 * n).astype(np.int32)
    return EngineRequest(rid, tokens, flags, parents)


def _encode_block(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("payload blocks are 2-D")
    return _BLOCK_HEAD.pack(*arr.shape) + arr.tobytes()


def encode_response(resp: EngineResponse) -> bytes:
    blocks = (1 if resp.logits is not None else 0) | (2 if resp.fused is not None else 0)
    out = bytearray(_RESP_HEAD.pack(resp.request_id, resp.status, blocks))
    if resp.logits is not None:
        out += _encode_block(resp.logits)
    if resp.fused is not None:
        out += _encode_block(resp.fused)
    return bytes(out)


def decode_response(payload: bytes) -> EngineResponse:
    if len(payload) < _RESP_HEAD.size:
        raise ProtocolError("truncated response header")
    rid, status, blocks = _RESP_HEAD.unpack_from(payload)
    off = _RESP_HEAD.size
    arrays: List[Optional[np.ndarray]] = [None, None]
    for i in range(2):
        if not blocks & (1 << i):
            continue
        if off + _BLOCK_HEAD.size > len(payload):
            raise ProtocolError("truncated block header", rid)
        rows, cols = _BLOCK_HEAD.unpack_from(payload, off)
        off += _BLOCK_HEAD.size
        nbytes = 4 * rows * cols
        if off + nbytes > len(payload):
            raise ProtocolError("truncated block payload", rid)
        arrays[i] = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float32)
        off += nbytes
    if off != len(payload):
        raise ProtocolError("trailing bytes after response", rid)
    return EngineResponse(rid, status, arrays[0], arrays[1])


def frame(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


# ---------------------------------------------------------------------------
# in-process backend
# ---------------------------------------------------------------------------


def tree_layout(parents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ancestor-or-self mask [n, n] and depth-based positions for a parent list."""
    n = len(parents)
    allow = np.zeros((n, n), dtype=bool)
    pos = np.zeros(n, dtype=np.int64)
    for i, p in enumerate(parents):
        if p >= 0:
            allow[i] = allow[p]
            pos[i] = pos[p] + 1
        allow[i, i] = True
    return allow, pos


class InProcessEngine:
    """Runs the target model directly. Stateless: every request is a fresh prefill."""

    def __init__(self, model: TargetModel, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.model = model
        self.max_tokens = max_tokens

    @classmethod
    def from_checkpoint(cls, path, max_tokens: int = DEFAULT_MAX_TOKENS) -> "InProcessEngine":
        model = load_checkpoint(path)
        if not isinstance(model, TargetModel):
            raise ValueError(f"{path} does not hold a target model")
        return cls(model, max_tokens)

    def _check(self, req: EngineRequest) -> Optional[str]:
        n = len(req.tokens)
        if n == 0:
            return "empty token sequence"
        if n > self.max_tokens:
            return f"{n} tokens exceed the limit of {self.max_tokens}"
        if int(req.tokens.max()) >= self.model.cfg.vocab_size:
            return "token id outside the vocabulary"
        if req.flags & FLAG_TREE:
            p = req.parents
            if p is None or len(p) != n:
                return "tree request needs one parent per token"
            if np.any(p < -1) or np.any(p >= np.arange(n)):
                return "each parent must precede its child"
        return None

    def query(self, req: EngineRequest) -> EngineResponse:
        problem = self._check(req)
        if problem is not None:
            log.debug("request %d rejected: %s", req.request_id, problem)
            return EngineResponse(req.request_id, STATUS_BAD_REQUEST)
        if not req.flags & (FLAG_LOGITS | FLAG_FUSED):
            return EngineResponse(req.request_id, STATUS_OK)
        allow = positions = None
        if req.flags & FLAG_TREE:
            allow, positions = tree_layout(req.parents)
        with tn.no_grad():
            logits, fused = self.model.forward(req.tokens.astype(np.int64), allow=allow, positions=positions)
        return EngineResponse(
            req.request_id,
            STATUS_OK,
            logits.data if req.flags & FLAG_LOGITS else None,
            fused.data if req.flags & FLAG_FUSED else None,
        )

    def handle_payload(self, payload: bytes) -> bytes:
        """Decode, run, encode. Raises :class:`ProtocolError` on malformed input."""
        return encode_response(self.query(decode_request(payload)))


# ---------------------------------------------------------------------------
# socket service
# ---------------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class _Handler(socketserver.BaseRequestHandler):
    server: "EngineServer"

    def handle(self):
        sock = self.request
        hello = _recv_exact(sock, len(HELLO))
        if hello != HELLO:
            log.info("bad hello from %s", self.client_address)
            return
        sock.sendall(HELLO)
        if not self.server.slots.acquire(blocking=False):
            sock.sendall(frame(encode_response(EngineResponse(0, STATUS_OVERLOAD))))
            return
        try:
            self._serve(sock)
        finally:
            self.server.slots.release()

    def _serve(self, sock):
        engine = self.server.engine
        while True:
            head = _recv_exact(sock, _LEN.size)
            if head is None:
                return
            (n,) = _LEN.unpack(head)
            if n > self.server.max_frame:
                log.info("frame of %d bytes exceeds limit; closing", n)
                return
            payload = _recv_exact(sock, n)
            if payload is None:
                return
            try:
                out = engine.handle_payload(payload)
            except ProtocolError as e:
                log.info("malformed request: %s", e)
                if e.request_id is not None:
                    sock.sendall(frame(encode_response(EngineResponse(e.request_id, STATUS_BAD_REQUEST))))
                return
            sock.sendall(frame(out))


class EngineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, engine: InProcessEngine, address: Tuple[str, int], max_concurrent: int = 4, max_frame: int = MAX_FRAME):
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.engine = engine
        self.slots = threading.BoundedSemaphore(max_concurrent)
        self.max_frame = max_frame
        super().__init__(address, _Handler)

    @property
    def address(self) -> Tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "EngineServer":
        threading.Thread(target=self.serve_forever, daemon=True, name="engine-server").start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def serve(checkpoint, address, max_concurrent: int = 4, block: bool = True) -> EngineServer:
    """Serve a target checkpoint. With ``block=False`` return a started server."""
    if isinstance(address, str):
        address = parse_address(address)
    server = EngineServer(InProcessEngine.from_checkpoint(checkpoint), address, max_concurrent)
    log.info("serving %s on %s:%d", checkpoint, *server.address)
    if not block:
        return server.start()
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


class SocketEngine:
    """Synchronous client for one connection."""

    def __init__(self, address, timeout: Optional[float] = 30.0):
        if isinstance(address, str):
            address = parse_address(address)
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.sendall(HELLO)
        if _recv_exact(self.sock, len(HELLO)) != HELLO:
            self.sock.close()
            raise EngineError("handshake failed")

    def send_payload(self, payload: bytes) -> Optional[bytes]:
        self.sock.sendall(frame(payload))
        return self.recv_payload()

    def recv_payload(self) -> Optional[bytes]:
        head = _recv_exact(self.sock, _LEN.size)
        if head is None:
            return None
        return _recv_exact(self.sock, _LEN.unpack(head)[0])

    def query(self, req: EngineRequest) -> EngineResponse:
        out = self.send_payload(encode_request(req))
        if out is None:
            raise EngineError("connection closed by server")
        return decode_response(out)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# convenience wrappers used by the trainer and decoder
# ---------------------------------------------------------------------------


def prefill(engine, tokens, flags: int = FLAG_LOGITS | FLAG_FUSED, request_id: int = 0):
    """(logits, fused) for one sequence; raises :class:`EngineError` if not ok."""
    resp = engine.query(EngineRequest(request_id, tokens, flags))
    if resp.status != STATUS_OK:
        raise EngineError(f"request {request_id} failed with status {resp.status}")
    return resp.logits, resp.fused


def prefill_tree(engine, tokens, parents, request_id: int = 0):
    resp = engine.query(EngineRequest(request_id, tokens, FLAG_LOGITS | FLAG_FUSED, parents))
    if resp.status != STATUS_OK:
        raise EngineError(f"tree request {request_id} failed with status {resp.status}")
    return resp.logits, resp.fused


def prefill_many(engine, sequences: Sequence, flags: int = FLAG_LOGITS | FLAG_FUSED):
    return [prefill(engine, s, flags, request_id=i) for i, s in enumerate(sequences)]
