import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wuw.audio import AudioClip
from wuw.errors import (
    FrameLengthError,
    FrameMagicError,
    FrameTruncatedError,
    FrameVersionError,
    ModelError,
    ProtocolError,
)
from wuw.features import CLOUD, DEVICE, FeatureMatrix
from wuw.fusion import FusionModel
from wuw.nnet import ScorePair, Scorer, WeightStore
from wuw.synth import make_stream
from wuw.wire import (
    FLAG_OBFUSCATED,
    MAX_BODY_BYTES,
    DeviceAgent,
    Verdict,
    VerificationServer,
    VerifyRequest,
    VerifyResponse,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    obfuscate,
    request_verification,
    verify_request,
)


def random_request(rng, obfuscated=False):
    frames = int(rng.integers(1, 20))
    coeffs = int(rng.integers(1, 12))
    return VerifyRequest(
        config_id=int(rng.integers(0, 256)),
        device_log_odds=float(rng.normal()),
        features=rng.normal(size=(frames, coeffs)).astype(np.float32),
        nonce=int(rng.integers(0, 2**63)),
        flags=FLAG_OBFUSCATED if obfuscated else 0,
    )


def zero_weight_member(member_id="m0"):
    """A cloud-config scorer that always answers (0, 0)."""
    return Scorer(member_id, CLOUD.config_id, lambda fm: ScorePair(0.0, 0.0))


def passthrough_fusion(member_ids, weight_on=0):
    """Hand-built fusion whose logit_pos tracks one member's log-odds."""
    n = len(member_ids)
    w1 = np.zeros((2, n))
    w1[0, weight_on] = 1.0
    w1[1, weight_on] = -1.0
    w2 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    ws = WeightStore(
        {"fc1.w": w1, "fc1.b": np.zeros(2), "fc2.w": w2, "fc2.b": np.zeros(2)},
        {"kind": "fusion", "member_ids": list(member_ids)},
    )
    return FusionModel(ws)


class TestRequestCodec:
    def test_roundtrip_minimal(self):
        req = VerifyRequest(config_id=2, device_log_odds=0.0,
                            features=np.array([[1.0]], dtype=np.float32))
        frame = encode_request(req)
        back = decode_request(frame)
        assert encode_request(back) == frame
        assert back.features.tobytes() == req.features.tobytes()

    def test_hand_assembled_frame(self):
        # layout: magic, u32 len, u8 version, u8 config, u8 flags, u64 nonce,
        # f32 log-odds, u16 frames, u16 coeffs, payload floats
        body = struct.pack("<BBBQfHH", 1, 2, 0, 0, 0.0, 1, 1) + struct.pack("<f", 1.0)
        frame = b"WUWP" + struct.pack("<I", len(body)) + body
        assert len(body) == 23
        req = decode_request(frame)
        assert req.version == 1
        assert req.config_id == 2
        assert req.flags == 0
        assert req.nonce == 0
        assert req.device_log_odds == 0.0
        np.testing.assert_array_equal(req.features, [[1.0]])
        assert encode_request(req) == frame

    def test_roundtrip_random_frames(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            req = random_request(rng)
            frame = encode_request(req)
            back = decode_request(frame)
            assert encode_request(back) == frame
            assert back.nonce == req.nonce
            assert back.device_log_odds == req.device_log_odds

    def test_obfuscated_roundtrip(self):
        rng = np.random.default_rng(1)
        req = random_request(rng, obfuscated=True)
        frame = encode_request(req, key=0xC0FFEE)
        with pytest.raises(ProtocolError):
            decode_request(frame)  # key required
        back = decode_request(frame, key=0xC0FFEE)
        assert back.features.tobytes() == req.features.tobytes()
        assert encode_request(back, key=0xC0FFEE) == frame

    def test_wrong_key_scrambles_payload(self):
        rng = np.random.default_rng(2)
        req = random_request(rng, obfuscated=True)
        frame = encode_request(req, key=1)
        try:
            back = decode_request(frame, key=2)
        except Exception:
            return  # scrambled floats may be non-finite; any clean error is fine
        assert back.features.tobytes() != req.features.tobytes()

    def test_giant_declared_length_rejected_before_allocation(self):
        frame = b"WUWP" + struct.pack("<I", 10**9) + b"\x00" * 16
        with pytest.raises(FrameLengthError):
            decode_request(frame)

    def test_bad_magic(self):
        with pytest.raises(FrameMagicError):
            decode_request(b"NOPE" + b"\x00" * 30)

    def test_unknown_version(self):
        body = struct.pack("<BBBQfHH", 9, 2, 0, 0, 0.0, 0, 0)
        frame = b"WUWP" + struct.pack("<I", len(body)) + body
        with pytest.raises(FrameVersionError):
            decode_request(frame)

    def test_payload_length_mismatch(self):
        body = struct.pack("<BBBQfHH", 1, 2, 0, 0, 0.0, 2, 2)  # declares 16 bytes
        frame = b"WUWP" + struct.pack("<I", len(body)) + body
        with pytest.raises(FrameLengthError):
            decode_request(frame)

    def test_truncated_body(self):
        req = VerifyRequest(config_id=2, device_log_odds=0.0,
                            features=np.ones((2, 2), dtype=np.float32))
        frame = encode_request(req)
        with pytest.raises(FrameTruncatedError):
            decode_request(frame[:-1])

    def test_fuzz_random_prefixes_never_crash(self):
        rng = np.random.default_rng(3)
        good = encode_request(random_request(rng))
        for _ in range(100_000):
            n = int(rng.integers(0, 40))
            blob = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            if rng.uniform() < 0.3:
                blob = good[: int(rng.integers(0, len(good)))] + blob
            try:
                decode_request(blob)
            except ProtocolError:
                pass

    def test_no_raw_audio_field_in_schema(self):
        names = {f.name for f in dataclasses.fields(VerifyRequest)}
        assert names == {"config_id", "device_log_odds", "features",
                         "nonce", "flags", "version"}


class TestResponseCodec:
    def test_roundtrip(self):
        resp = VerifyResponse(Verdict.ACCEPT, 0.75,
                              np.array([1.5, -0.5], dtype=np.float32))
        frame = encode_response(resp)
        back = decode_response(frame)
        assert back.verdict is Verdict.ACCEPT
        assert back.fused_p_pos == resp.fused_p_pos
        assert back.member_log_odds.tobytes() == resp.member_log_odds.tobytes()
        assert encode_response(back) == frame

    def test_unknown_verdict_byte(self):
        body = struct.pack("<BfH", 7, 0.0, 0)
        frame = b"WUWP" + struct.pack("<I", len(body)) + body
        with pytest.raises(ProtocolError):
            decode_response(frame)


class TestObfuscate:
    def test_involution(self):
        rng = np.random.default_rng(4)
        payload = rng.integers(0, 256, size=333, dtype=np.uint8).tobytes()
        once = obfuscate(payload, key=123, nonce=456)
        assert obfuscate(once, key=123, nonce=456) == payload
        assert once != payload

    def test_zero_key_and_nonce_nonzero_stream(self):
        out = obfuscate(b"\x00" * 64, key=0, nonce=0)
        assert out == obfuscate(b"\x00" * 64, key=0, nonce=0)
        assert any(b != 0 for b in out)

    def test_nonces_decorrelate_keystreams(self):
        a = obfuscate(b"\x00" * 1024, key=5, nonce=1)
        b = obfuscate(b"\x00" * 1024, key=5, nonce=2)
        differing = sum(x != y for x, y in zip(a, b))
        assert differing > 0.4 * 1024

    @given(st.binary(max_size=200), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    @settings(max_examples=50, deadline=None)
    def test_involution_property(self, payload, key, nonce):
        assert obfuscate(obfuscate(payload, key, nonce), key, nonce) == payload


def oracle_device_scorer(threshold=-4.0):
    """Fires on windows whose mean frame log-energy clears a floor."""

    def fn(fm: FeatureMatrix) -> ScorePair:
        loud = float(np.mean(fm.values[:, 0]))
        return ScorePair(50.0, 0.0) if loud > threshold else ScorePair(-50.0, 0.0)

    return Scorer("oracle", DEVICE.config_id, fn)


class TestDeviceAgent:
    def test_silent_stream_no_events(self):
        quiet = Scorer("zero", DEVICE.config_id, lambda fm: ScorePair(0.0, 0.0))
        agent = DeviceAgent(quiet, theta_device=0.73)  # log-odds ~ 1.0
        fired = agent.feed(np.zeros(16000 * 5))
        assert fired == []

    def test_one_event_per_injection(self):
        rng = np.random.default_rng(5)
        stream, starts = make_stream(rng, n_keywords=20, gap_s=3.0, snr_db=20.0)
        agent = DeviceAgent(oracle_device_scorer(), theta_device=0.5,
                            refractory_s=1.5)
        events = []
        chunk = 1600
        for i in range(0, len(stream), chunk):
            events.extend(e for e, _ in agent.feed(stream.samples[i : i + chunk]))
        assert len(events) == len(starts)
        for event, start in zip(events, starts):
            # the firing window must overlap its keyword
            assert event.window_start_sample <= start + 9600
            assert event.window_start_sample + 24000 >= start

    def test_refractory_spacing(self):
        rng = np.random.default_rng(6)
        stream, _ = make_stream(rng, n_keywords=10, gap_s=3.0, snr_db=30.0)
        agent = DeviceAgent(oracle_device_scorer(), refractory_s=1.5)
        events = [e for e, _ in agent.feed(stream.samples)]
        starts = [e.window_start_sample for e in events]
        for a, b in zip(starts, starts[1:]):
            assert b - a >= int(1.5 * 16000)

    def test_request_payload_shape_is_cloud(self):
        rng = np.random.default_rng(7)
        stream, _ = make_stream(rng, n_keywords=1, gap_s=3.0, snr_db=30.0)
        agent = DeviceAgent(oracle_device_scorer())
        requests = [r for _, r in agent.feed(stream.samples)]
        assert requests
        for req in requests:
            assert req.features.shape == (148, 40)
            assert req.config_id == CLOUD.config_id

    def test_chunking_does_not_change_events(self):
        rng = np.random.default_rng(8)
        stream, _ = make_stream(rng, n_keywords=5, gap_s=3.0, snr_db=25.0)
        results = []
        for chunk in (400, 1600, 7777):
            agent = DeviceAgent(oracle_device_scorer(), refractory_s=1.5)
            events = []
            for i in range(0, len(stream), chunk):
                events.extend(
                    e.window_start_sample
                    for e, _ in agent.feed(stream.samples[i : i + chunk])
                )
            results.append(events)
        assert results[0] == results[1] == results[2]

    def test_oversized_chunk_drops_windows(self):
        quiet = Scorer("zero", DEVICE.config_id, lambda fm: ScorePair(0.0, 0.0))
        agent = DeviceAgent(quiet, theta_device=0.9, max_buffer_s=2.0)
        agent.feed(np.zeros(16000 * 8))
        assert agent.dropped_windows > 0

    def test_wrong_config_scorer_rejected(self):
        cloudy = Scorer("c", CLOUD.config_id, lambda fm: ScorePair(0.0, 0.0))
        with pytest.raises(ModelError):
            DeviceAgent(cloudy)


class TestVerification:
    def make_server(self, key=None, theta=0.5):
        members = [zero_weight_member("m0")]
        fusion = passthrough_fusion(["device", "m0"], weight_on=0)
        return VerificationServer(members, fusion, theta_cloud=theta, key=key)

    def test_device_conditioned_accept(self):
        server = self.make_server()
        req = VerifyRequest(config_id=CLOUD.config_id, device_log_odds=10.0,
                            features=np.zeros((148, 40), dtype=np.float32))
        resp = server.verify(req)
        assert resp.verdict is Verdict.ACCEPT
        assert resp.member_log_odds.shape == (2,)
        assert resp.member_log_odds[0] == np.float32(10.0)

    def test_device_conditioned_reject(self):
        server = self.make_server()
        req = VerifyRequest(config_id=CLOUD.config_id, device_log_odds=-10.0,
                            features=np.zeros((148, 40), dtype=np.float32))
        assert server.verify(req).verdict is Verdict.REJECT

    def test_member_fusion_mismatch_refused_at_startup(self):
        members = [zero_weight_member("m0")]
        wrong = passthrough_fusion(["device", "other"], weight_on=0)
        with pytest.raises(ModelError):
            VerificationServer(members, wrong)

    def test_member_with_non_cloud_config_refused(self):
        bad = Scorer("m0", DEVICE.config_id, lambda fm: ScorePair(0.0, 0.0))
        fusion = passthrough_fusion(["device", "m0"])
        with pytest.raises(ModelError):
            VerificationServer([bad], fusion)

    def test_handle_frame_corrupt_magic_gives_error_response(self):
        server = self.make_server()
        response, keep = server.handle_frame(b"XXXX" + b"\x00" * 30)
        assert not keep
        assert decode_response(response).verdict is Verdict.ERROR

    def test_same_request_same_response(self):
        server = self.make_server()
        req = VerifyRequest(config_id=CLOUD.config_id, device_log_odds=3.0,
                            features=np.zeros((148, 40), dtype=np.float32))
        frame = encode_request(req)
        a, _ = server.handle_frame(frame)
        b, _ = server.handle_frame(frame)
        assert a == b

    def test_tcp_roundtrip_matches_offline(self):
        server = self.make_server(key=0xBEEF)
        addr = server.start()
        try:
            rng = np.random.default_rng(9)
            for _ in range(5):
                req = VerifyRequest(
                    config_id=CLOUD.config_id,
                    device_log_odds=float(rng.normal() * 5),
                    features=rng.normal(size=(148, 40)).astype(np.float32),
                    nonce=int(rng.integers(0, 2**32)),
                    flags=FLAG_OBFUSCATED,
                )
                wire_resp = request_verification(addr, req, key=0xBEEF)
                frame = encode_request(req, key=0xBEEF)
                offline = server.verify(decode_request(frame, key=0xBEEF))
                assert wire_resp.verdict is offline.verdict
                assert wire_resp.fused_p_pos == offline.fused_p_pos
                assert (wire_resp.member_log_odds.tobytes()
                        == offline.member_log_odds.tobytes())
        finally:
            server.shutdown()

    def test_tcp_survives_corrupt_frame(self):
        import socket

        server = self.make_server()
        addr = server.start()
        try:
            with socket.create_connection(addr, timeout=5) as sock:
                sock.sendall(b"GARBAGEGARBAGE")
                data = sock.recv(4096)
                assert decode_response(data).verdict is Verdict.ERROR
            # the server must still answer fresh connections
            req = VerifyRequest(config_id=CLOUD.config_id, device_log_odds=10.0,
                                features=np.zeros((148, 40), dtype=np.float32))
            resp = request_verification(addr, req)
            assert resp.verdict is Verdict.ACCEPT
        finally:
            server.shutdown()

    def test_body_over_cap_never_allocated(self):
        frame = b"WUWP" + struct.pack("<I", MAX_BODY_BYTES + 1)
        with pytest.raises(FrameLengthError):
            decode_request(frame + b"")

    def test_verify_request_function_standalone(self):
        members = [zero_weight_member("m0")]
        fusion = passthrough_fusion(["device", "m0"])
        req = VerifyRequest(config_id=CLOUD.config_id, device_log_odds=2.5,
                            features=np.zeros((148, 40), dtype=np.float32))
        resp = verify_request(req, members, fusion, theta_cloud=0.5)
        assert resp.verdict is Verdict.ACCEPT
