import struct
import threading

import numpy as np
import pytest

from dlora import protocol as P


def frame_of(msg, bits=32):
    return P.encode_frame(msg, P.QuantSpec(bits))


class TestQuantize:
    def test_zero_tensor(self):
        codes, scale = P.quantize(np.zeros(5, dtype=np.float32))
        assert scale == 0
        np.testing.assert_array_equal(codes, 0)
        np.testing.assert_array_equal(P.dequantize(codes, scale), 0)

    def test_hand_computed(self):
        codes, scale = P.quantize(np.array([0.0, 1.0, -2.0], dtype=np.float32))
        assert scale <= 2 / 127 and scale == pytest.approx(2 / 127, rel=1e-4)
        np.testing.assert_array_equal(codes, [0, 64, -127])
        np.testing.assert_allclose(P.dequantize(codes, scale), [0, 1.00787, -2.0], rtol=1e-4)

    def test_round_half_away_from_zero(self):
        np.testing.assert_array_equal(P.round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])), [1, -1, 2, -3, 0])

    def test_error_bound(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            x = (rng.standard_normal(int(rng.integers(1, 200))) * 10 ** rng.uniform(-4, 4)).astype(np.float32)
            err = np.abs(P.dequantize(*P.quantize(x)).astype(np.float64) - x.astype(np.float64))
            assert err.max() <= np.abs(x).max() / 254


class TestFrames:
    def test_shutdown_is_header_only(self):
        f = frame_of(P.Shutdown())
        assert f == b"DLOR" + bytes([1, 11]) + struct.pack("<I", 0)
        assert len(f) == 10

    def test_norm_report_size(self):
        f = frame_of(P.NormReport([0.5] * 8))
        assert len(f) - P.HEADER_SIZE == 8 * 8 + 1

    def test_norms_and_commands_ignore_quantization(self):
        for msg in (P.NormReport([0.123456789] * 3), P.Command([1, 0, 1])):
            assert frame_of(msg, 8) == frame_of(msg, 32)
        assert P.decode_frame(frame_of(P.NormReport([0.123456789]), 8)).norms == [0.123456789]

    def test_fwd_activation_round_trip_bit_exact(self):
        t = np.random.default_rng(0).standard_normal((2, 5, 8)).astype(np.float32)
        msg = P.decode_frame(frame_of(P.FwdActivation(3, P.Site.QKV_INPUT, t)))
        assert msg.layer_id == 3 and msg.site is P.Site.QKV_INPUT
        np.testing.assert_array_equal(msg.tensor, t)
        assert msg.tensor.dtype == np.float32

    def test_float64_round_trip(self):
        t = np.random.default_rng(1).standard_normal((3, 4))
        np.testing.assert_array_equal(P.decode_frame(frame_of(P.LogitsToEdge(t))).tensor, t)

    def test_tensor_layout_by_hand(self):
        t = np.array([[1.0, 2.0]], dtype=np.float32)
        payload = frame_of(P.BwdDeltaGrad(7, t))[P.HEADER_SIZE:]
        assert payload == struct.pack("<I", 7) + bytes([0, 2]) + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1, 2)

    def test_quantized_payload_is_about_a_quarter(self):
        t = np.random.default_rng(2).standard_normal((16, 31, 64)).astype(np.float32)
        full = len(frame_of(P.FwdActivation(0, P.Site.QKV_INPUT, t), 32))
        small = len(frame_of(P.FwdActivation(0, P.Site.QKV_INPUT, t), 8))
        assert full / small >= 3.99

    @pytest.mark.parametrize("msg", [
        P.Config(P.SessionConfig(64, 64, 4, 128, 8, 32, 32, 0, 0, 4, 16, 1.0, 2, 4, 32, 0)),
        P.FwdDelta(1, [np.ones((1, 2, 3), np.float32)] * 3),
        P.LossGradToCloud(np.zeros((1, 2), np.float32), 1.25),
        P.BwdGrad(2, P.Site.MLP_INPUT, [np.ones((2, 2), np.float32)]),
        P.Command([0, 1, 1]),
        P.EpochEnd(4),
        P.EpochStats({"epoch": 1, "scores": [0.5, "inf"]}),
    ])
    def test_round_trips(self, msg):
        back = P.decode_frame(frame_of(msg))
        assert type(back) is type(msg)
        assert frame_of(back) == frame_of(msg)

    def test_bad_magic(self):
        f = bytearray(frame_of(P.EpochEnd(1)))
        f[0] ^= 0xFF
        with pytest.raises(P.ProtocolError):
            P.decode_frame(bytes(f))

    def test_truncated(self):
        f = frame_of(P.LogitsToEdge(np.ones((2, 3), np.float32)))
        for cut in (3, 10, len(f) - 1):
            with pytest.raises(P.ProtocolError):
                P.decode_frame(f[:cut])

    def test_invalid_fields(self):
        with pytest.raises(P.ProtocolError):
            P.decode_payload(99, b"")
        with pytest.raises(P.ProtocolError):
            P.decode_payload(P.MsgType.COMMAND, bytes([1, 2]))
        with pytest.raises(P.ProtocolError):
            P.decode_payload(P.MsgType.EPOCH_END, struct.pack("<I", 1) + b"x")


class TestTransports:
    def test_queue_fifo(self):
        cloud, edge = P.local_pair(timeout=1)
        frames = [frame_of(P.EpochEnd(i)) for i in range(50)]
        for f in frames:
            edge.send(f)
        assert [cloud.recv() for _ in frames] == frames

    def test_queue_close_and_timeout(self):
        cloud, edge = P.local_pair(timeout=0.05)
        with pytest.raises(P.TransportError):
            cloud.recv()
        edge.close()
        with pytest.raises(P.TransportError):
            cloud.recv()

    def test_tcp_echo(self):
        srv = P.tcp_listen("127.0.0.1", 0)
        port = srv.getsockname()[1]
        frames = [frame_of(P.FwdActivation(i, P.Site.MLP_INPUT, np.full((2, 2), i, np.float32))) for i in range(20)]
        got = []

        def serve():
            end = P.tcp_accept(srv, 5)
            for _ in frames:
                end.send(end.recv())
            end.close()

        t = threading.Thread(target=serve)
        t.start()
        client = P.tcp_connect("127.0.0.1", port, 5)
        for f in frames:
            client.send(f)
        for _ in frames:
            got.append(client.recv())
        t.join(5)
        client.close()
        srv.close()
        assert got == frames

    def test_tcp_rejects_garbage(self):
        srv = P.tcp_listen("127.0.0.1", 0)
        port = srv.getsockname()[1]
        err = []

        def serve():
            end = P.tcp_accept(srv, 5)
            try:
                end.recv()
            except P.ProtocolError as exc:
                err.append(exc)
            end.close()

        t = threading.Thread(target=serve)
        t.start()
        client = P.tcp_connect("127.0.0.1", port, 5)
        client.send(b"HTTP/1.1 200 OK\r\n")
        t.join(5)
        client.close()
        srv.close()
        assert err


class TestChannel:
    def test_expect_checks_type_and_layer(self):
        a, b = P.local_pair(timeout=1)
        ca, cb = P.Channel(a, "cloud"), P.Channel(b, "edge")
        ca.send(P.BwdDeltaGrad(2, np.zeros(1, np.float32)))
        with pytest.raises(P.ProtocolError):
            cb.expect(P.BwdDeltaGrad, 3)
        ca.send(P.EpochEnd(0))
        with pytest.raises(P.ProtocolError):
            cb.expect(P.Command)

    def test_traffic_classes(self):
        t = np.zeros(1, np.float32)
        assert P.traffic_class(P.FwdActivation(0, P.Site.QKV_INPUT, t)) == "module"
        assert P.traffic_class(P.FwdActivation(0, P.Site.EMBED_TRAIN, t)) == "base"
        assert P.traffic_class(P.LogitsToEdge(t)) == "base"
        assert P.traffic_class(P.NormReport([1.0])) == "control"
