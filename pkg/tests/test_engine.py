import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speclab.engine import (
    FLAG_FUSED,
    FLAG_LOGITS,
    HELLO,
    STATUS_BAD_REQUEST,
    STATUS_OK,
    STATUS_OVERLOAD,
    EngineRequest,
    EngineResponse,
    EngineServer,
    InProcessEngine,
    ProtocolError,
    SocketEngine,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    frame,
    parse_address,
    prefill,
    tree_layout,
)

u32 = st.integers(0, 2**32 - 1)


@st.composite
def requests(draw):
    n = draw(st.integers(0, 40))
    tokens = draw(st.lists(u32, min_size=n, max_size=n))
    flags = draw(st.integers(0, 3))
    parents = None
    if draw(st.booleans()):
        parents = [draw(st.integers(-1, i - 1)) for i in range(n)]
    return EngineRequest(draw(st.integers(0, 2**64 - 1)), tokens, flags, parents)


def _block(draw):
    r, c = draw(st.integers(0, 6)), draw(st.integers(0, 6))
    vals = draw(st.lists(st.floats(width=32, allow_nan=False), min_size=r * c, max_size=r * c))
    return np.array(vals, dtype=np.float32).reshape(r, c)


@st.composite
def responses(draw):
    logits = _block(draw) if draw(st.booleans()) else None
    fused = _block(draw) if draw(st.booleans()) else None
    return EngineResponse(draw(st.integers(0, 2**64 - 1)), draw(st.integers(0, 2)), logits, fused)


class TestCodec:
    @settings(max_examples=300, deadline=None)
    @given(requests())
    def test_request_round_trip(self, req):
        buf = encode_request(req)
        back = decode_request(buf)
        assert back == req and encode_request(back) == buf

    @settings(max_examples=300, deadline=None)
    @given(responses())
    def test_response_round_trip(self, resp):
        buf = encode_response(resp)
        back = decode_response(buf)
        assert back == resp and encode_response(back) == buf

    def test_request_layout(self):
        buf = encode_request(EngineRequest(7, [1, 2], FLAG_LOGITS))
        assert buf == struct.pack("<QIIII", 7, 1, 2, 1, 2)

    def test_response_layout(self):
        buf = encode_response(EngineResponse(3, 0, np.ones((1, 2), np.float32)))
        assert buf == struct.pack("<QBBIIff", 3, 0, 1, 1, 2, 1.0, 1.0)

    def test_frame(self):
        assert frame(b"abc") == b"\x03\x00\x00\x00abc"

    @pytest.mark.parametrize(
        "payload,rid",
        [
            (b"\x01\x02", None),
            (struct.pack("<QI", 5, 1), 5),
            (struct.pack("<QII", 6, 1, 2) + b"\x00" * 4, 6),
            (struct.pack("<QII", 8, 64, 0), 8),
        ],
    )
    def test_malformed_requests(self, payload, rid):
        with pytest.raises(ProtocolError) as e:
            decode_request(payload)
        assert e.value.request_id == rid

    def test_truncated_response(self):
        buf = encode_response(EngineResponse(1, 0, np.ones((2, 2), np.float32)))
        with pytest.raises(ProtocolError):
            decode_response(buf[:-1])
        with pytest.raises(ProtocolError):
            decode_response(buf + b"\x00")

    def test_parse_address(self):
        assert parse_address("localhost:80") == ("localhost", 80)
        assert parse_address(":9") == ("127.0.0.1", 9)
        with pytest.raises(ValueError):
            parse_address("nope")


class TestInProcess:
    def test_empty(self, tiny_engine):
        resp = tiny_engine.query(EngineRequest(1, []))
        assert resp.status == STATUS_BAD_REQUEST and resp.logits is None and resp.fused is None

    def test_too_long(self, tiny_target):
        eng = InProcessEngine(tiny_target, max_tokens=4)
        assert eng.query(EngineRequest(1, [1] * 5)).status == STATUS_BAD_REQUEST

    def test_out_of_vocab(self, tiny_engine):
        assert tiny_engine.query(EngineRequest(1, [32])).status == STATUS_BAD_REQUEST

    def test_bad_parents(self, tiny_engine):
        assert tiny_engine.query(EngineRequest(1, [1, 2], parents=[-1, 1])).status == STATUS_BAD_REQUEST

    def test_flags_zero(self, tiny_engine):
        resp = tiny_engine.query(EngineRequest(4, [1, 2], 0))
        assert resp == EngineResponse(4, STATUS_OK)

    def test_blocks_follow_flags(self, tiny_engine):
        assert tiny_engine.query(EngineRequest(1, [1, 2], FLAG_FUSED)).logits is None
        assert tiny_engine.query(EngineRequest(1, [1, 2], FLAG_LOGITS)).fused is None

    def test_repeatable(self, tiny_engine):
        req = EngineRequest(9, [3, 1, 4, 1, 5])
        assert tiny_engine.handle_payload(encode_request(req)) == tiny_engine.handle_payload(encode_request(req))

    def test_chain_tree_equals_causal(self, tiny_engine):
        toks = [3, 1, 4, 1, 5]
        plain = tiny_engine.query(EngineRequest(0, toks))
        tree = tiny_engine.query(EngineRequest(0, toks, parents=[-1, 0, 1, 2, 3]))
        np.testing.assert_allclose(tree.logits, plain.logits, atol=1e-5)

    def test_tree_branch_matches_own_path(self, tiny_engine):
        # context 3,1 then two siblings 4 and 6 under it, then 5 under 6
        tree = tiny_engine.query(EngineRequest(0, [3, 1, 4, 6, 5], parents=[-1, 0, 1, 1, 3]))
        path, _ = prefill(tiny_engine, [3, 1, 6, 5])
        np.testing.assert_allclose(tree.logits[[0, 1, 3, 4]], path, atol=1e-5)

    def test_tree_layout(self):
        allow, pos = tree_layout(np.array([-1, 0, 0, 2]))
        assert pos.tolist() == [0, 1, 1, 2]
        assert allow[3].tolist() == [True, False, True, True]


@pytest.fixture
def server(tiny_engine):
    srv = EngineServer(tiny_engine, ("127.0.0.1", 0), max_concurrent=2).start()
    yield srv
    srv.stop()


def _raw_connect(addr):
    s = socket.create_connection(addr, timeout=10)
    s.sendall(HELLO)
    assert s.recv(len(HELLO)) == HELLO
    return s


class TestSocket:
    def test_happy_path(self, server, tiny_engine):
        with SocketEngine(server.address) as client:
            req = EngineRequest(11, [1, 2, 3])
            assert client.query(req) == tiny_engine.query(req)

    def test_backends_byte_identical(self, server, tiny_engine, rng):
        with SocketEngine(server.address) as client:
            for i in range(25):
                req = EngineRequest(i, rng.integers(0, 32, int(rng.integers(1, 20))), int(rng.integers(0, 4)))
                payload = encode_request(req)
                assert client.send_payload(payload) == tiny_engine.handle_payload(payload)

    def test_interleaved_connections_keep_order(self, server, tiny_engine):
        results = {}

        def script(cid):
            with SocketEngine(server.address) as client:
                results[cid] = [client.query(EngineRequest(cid * 100 + k, [cid + 1] * (k + 1))).request_id for k in range(15)]

        threads = [threading.Thread(target=script, args=(c,)) for c in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {c: [c * 100 + k for k in range(15)] for c in range(2)}

    def test_overload(self, tiny_engine):
        srv = EngineServer(tiny_engine, ("127.0.0.1", 0), max_concurrent=1).start()
        try:
            with SocketEngine(srv.address) as a:
                assert a.query(EngineRequest(1, [1])).status == STATUS_OK
                with SocketEngine(srv.address) as b:
                    assert decode_response(b.recv_payload()).status == STATUS_OVERLOAD
                    assert b.recv_payload() is None
                assert a.query(EngineRequest(2, [1])).status == STATUS_OK
        finally:
            srv.stop()

    def test_malformed_gets_status_then_close(self, server):
        s = _raw_connect(server.address)
        s.sendall(frame(struct.pack("<QII", 42, 0xF0, 0)))
        head = s.recv(4)
        body = s.recv(struct.unpack("<I", head)[0])
        assert decode_response(body) == EngineResponse(42, STATUS_BAD_REQUEST)
        assert s.recv(1) == b""
        s.close()

    def test_oversized_frame_closes(self, server):
        s = _raw_connect(server.address)
        s.sendall(struct.pack("<I", 16 * 1024 * 1024 + 1))
        assert s.recv(1) == b""
        s.close()

    def test_bad_hello_closes(self, server):
        s = socket.create_connection(server.address, timeout=10)
        s.sendall(b"NOPE\x01\x00")
        assert s.recv(1) == b""
        s.close()
