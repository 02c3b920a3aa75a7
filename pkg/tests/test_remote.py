import random

import pytest

from quboplan.errors import ProtocolError, TransportError
from quboplan.remote import (
    LoopbackAnnealerServer,
    ProtocolWarning,
    parse_response,
    params_from_wire,
    params_to_wire,
    qubo_from_wire,
    qubo_to_wire,
    remote_roundtrip,
)
from quboplan.sampler import SamplerParams, sa_sample

from test_qubo import random_qubo


@pytest.fixture(scope="module")
def qubo():
    return random_qubo(random.Random(31), 8)


def make_response(qubo, *, timing=None, **overrides):
    base = {
        "samples": [[0] * qubo.n],
        "energies": [qubo.offset],
        "occurrences": [1],
        "timing": timing
        or {
            "created": 0.0,
            "received": 1.0,
            "solved": 2.0,
            "resolved": 3.0,
            "qpu_programming_ms": 0.5,
            "qpu_sampling_ms": 0.25,
        },
    }
    base.update(overrides)
    return base


class TestWireFormat:
    def test_qubo_round_trip(self, qubo):
        assert qubo_from_wire(qubo_to_wire(qubo)).linear == qubo.linear
        assert qubo_from_wire(qubo_to_wire(qubo)).quadratic == qubo.quadratic

    def test_params_round_trip(self):
        params = SamplerParams(num_reads=7, sweeps=123, t_start=4.0, t_end=0.5, seed=9)
        assert params_from_wire(params_to_wire(params)) == params

    def test_sweeps_map_to_annealing_time(self):
        wire = params_to_wire(SamplerParams(num_reads=1, sweeps=250))
        assert wire["annealing_time_us"] == 250


class TestParseResponse:
    def test_paper_timing_breakdown(self, qubo):
        # Iteration-one service timestamps: created at 0, received 87.896,
        # solved 449.110, resolved 571.274.
        response = make_response(
            qubo,
            timing={
                "created": 0.0,
                "received": 87.896,
                "solved": 449.110,
                "resolved": 571.274,
                "qpu_programming_ms": 15.760,
                "qpu_sampling_ms": 26.356,
            },
        )
        t = parse_response(qubo, response).timing
        assert t.ingress_ms == pytest.approx(87.896, abs=1e-9)
        assert t.solve_ms == pytest.approx(361.214, abs=1e-9)
        assert t.egress_ms == pytest.approx(122.164, abs=1e-9)
        assert t.end_to_end_ms == pytest.approx(571.274, abs=1e-6)
        assert t.qpu_access_ms == pytest.approx(42.116, abs=1e-9)

    def test_missing_field_rejected(self, qubo):
        bad = make_response(qubo)
        del bad["energies"]
        with pytest.raises(ProtocolError, match="malformed"):
            parse_response(qubo, bad)

    def test_wrong_sample_length_rejected(self, qubo):
        bad = make_response(qubo, samples=[[0, 1]])
        with pytest.raises(ProtocolError, match="does not fit"):
            parse_response(qubo, bad)

    def test_empty_rows_rejected(self, qubo):
        bad = make_response(qubo, samples=[], energies=[], occurrences=[])
        with pytest.raises(ProtocolError, match="non-empty"):
            parse_response(qubo, bad)

    def test_negative_leg_rejected(self, qubo):
        bad = make_response(
            qubo,
            timing={
                "created": 10.0,
                "received": 5.0,
                "solved": 20.0,
                "resolved": 30.0,
                "qpu_programming_ms": 0.0,
                "qpu_sampling_ms": 0.0,
            },
        )
        with pytest.raises(ProtocolError, match="timestamps"):
            parse_response(qubo, bad)

    def test_energy_mismatch_warns_and_local_wins(self, qubo):
        bad = make_response(qubo, energies=[qubo.offset + 5.0])
        with pytest.warns(ProtocolWarning, match="keeping local"):
            result = parse_response(qubo, bad)
        assert result.rows[0].energy == pytest.approx(qubo.offset)


class TestRoundtrip:
    def test_loopback_matches_direct_sampling(self, qubo):
        params = SamplerParams(num_reads=8, sweeps=100, seed=77)
        direct = sa_sample(qubo, params)
        with LoopbackAnnealerServer() as server:
            via_wire = remote_roundtrip(qubo, params, server.endpoint)
        assert via_wire.best().energy == pytest.approx(direct.best().energy, abs=1e-9)
        assert via_wire.canonical() == direct.canonical()

    def test_transport_timing_populated(self, qubo):
        params = SamplerParams(num_reads=2, sweeps=20, seed=1)
        with LoopbackAnnealerServer() as server:
            result = remote_roundtrip(qubo, params, server.endpoint)
        t = result.timing
        assert t.end_to_end_ms == pytest.approx(t.ingress_ms + t.solve_ms + t.egress_ms, abs=1e-6)
        assert t.solve_ms >= 0.0

    def test_malformed_response(self, qubo):
        params = SamplerParams(num_reads=1, sweeps=5, seed=0)
        with LoopbackAnnealerServer(mode="malformed") as server:
            with pytest.raises(ProtocolError):
                remote_roundtrip(qubo, params, server.endpoint)

    def test_wrong_energy_warns(self, qubo):
        params = SamplerParams(num_reads=2, sweeps=20, seed=3)
        with LoopbackAnnealerServer(mode="wrong_energy") as server:
            with pytest.warns(ProtocolWarning):
                remote_roundtrip(qubo, params, server.endpoint)

    def test_unreachable_endpoint(self, qubo):
        params = SamplerParams(num_reads=1, sweeps=5, seed=0)
        with pytest.raises(TransportError):
            remote_roundtrip(qubo, params, "http://127.0.0.1:9/sample", timeout=0.5)
