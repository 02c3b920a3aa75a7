"""HTTP client for a remote annealing service, plus a loopback stub.

The wire format is JSON over a single POST endpoint ``/sample``. Requests
carry the sparse QUBO interchange (``{n, linear: [[i, h]], quadratic:
[[i, j, J]], offset}`` with i < j) and the sampling parameters; responses
carry samples, energies, occurrences, and service-side timestamps in
epoch milliseconds. The client derives the transport breakdown from the
timestamps: ingress = received - created, solve = solved - received,
egress = resolved - solved.

Remote energies are advisory: the client re-evaluates every sample
locally and keeps the local values, warning when they disagree.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import ProtocolError, TransportError
from .qubo import Qubo, energy
from .sampler import SamplerParams, SamplerTiming, SampleRow, SampleSet, sa_sample

__all__ = [
    "ProtocolWarning",
    "qubo_to_wire",
    "qubo_from_wire",
    "params_to_wire",
    "params_from_wire",
    "parse_response",
    "remote_roundtrip",
    "LoopbackAnnealerServer",
]

ENERGY_MISMATCH_TOLERANCE = 1e-6


class ProtocolWarning(UserWarning):
    """Remote response was usable but inconsistent with local evaluation."""


def qubo_to_wire(qubo: Qubo) -> dict:
    return {
        "n": qubo.n,
        "linear": [[i, v] for i, v in sorted(qubo.linear.items())],
        "quadratic": [[i, j, v] for (i, j), v in sorted(qubo.quadratic.items())],
        "offset": qubo.offset,
    }


def qubo_from_wire(payload: dict) -> Qubo:
    try:
        return Qubo.build(
            n=int(payload["n"]),
            linear={int(i): float(v) for i, v in payload.get("linear", [])},
            quadratic={(int(i), int(j)): float(v) for i, j, v in payload.get("quadratic", [])},
            offset=float(payload.get("offset", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed QUBO interchange: {exc}") from exc


def params_to_wire(params: SamplerParams) -> dict:
    # one sweep maps to one microsecond of annealing time
    return {
        "num_reads": params.num_reads,
        "annealing_time_us": params.sweeps,
        "seed": params.seed,
        "t_start": params.t_start,
        "t_end": params.t_end,
    }


def params_from_wire(payload: dict) -> SamplerParams:
    try:
        return SamplerParams(
            num_reads=int(payload["num_reads"]),
            sweeps=int(payload["annealing_time_us"]),
            t_start=None if payload.get("t_start") is None else float(payload["t_start"]),
            t_end=float(payload.get("t_end", 1e-2)),
            seed=int(payload.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed sampler params: {exc}") from exc


def parse_response(qubo: Qubo, payload: dict) -> SampleSet:
    """Validate a service response and rebuild a locally-trusted SampleSet."""
    import warnings

    try:
        samples = payload["samples"]
        energies = payload["energies"]
        occurrences = payload["occurrences"]
        timing = payload["timing"]
        created = float(timing["created"])
        received = float(timing["received"])
        solved = float(timing["solved"])
        resolved = float(timing["resolved"])
        programming = float(timing["qpu_programming_ms"])
        sampling = float(timing["qpu_sampling_ms"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed sampler response: {exc}") from exc
    if not (len(samples) == len(energies) == len(occurrences)) or not samples:
        raise ProtocolError("samples, energies, and occurrences must be equal-length and non-empty")

    ingress = received - created
    solve = solved - received
    egress = resolved - solved
    try:
        sampler_timing = SamplerTiming(
            ingress_ms=ingress,
            solve_ms=solve,
            egress_ms=egress,
            end_to_end_ms=ingress + solve + egress,
            qpu_programming_ms=programming,
            qpu_sampling_ms=sampling,
            qpu_access_ms=programming + sampling,
        )
    except ValueError as exc:
        raise ProtocolError(f"inconsistent response timestamps: {exc}") from exc

    rows = []
    for bits, remote_e, occ in zip(samples, energies, occurrences):
        try:
            assignment = tuple(int(b) for b in bits)
            occ = int(occ)
            remote_e = float(remote_e)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed sample row: {exc}") from exc
        if len(assignment) != qubo.n or any(b not in (0, 1) for b in assignment):
            raise ProtocolError(f"sample of length {len(assignment)} does not fit n={qubo.n}")
        if occ < 1:
            raise ProtocolError("occurrences must be >= 1")
        local_e = energy(qubo, assignment)
        if abs(local_e - remote_e) > ENERGY_MISMATCH_TOLERANCE * (1 + abs(local_e)):
            warnings.warn(
                f"remote energy {remote_e} disagrees with local {local_e}; keeping local",
                ProtocolWarning,
                stacklevel=2,
            )
        rows.append(SampleRow(assignment=assignment, energy=local_e, occurrences=occ))
    rows.sort(key=lambda r: (r.energy, r.assignment))
    return SampleSet(rows=tuple(rows), timing=sampler_timing)


def remote_roundtrip(qubo: Qubo, params: SamplerParams, endpoint: str, timeout: float = 30.0) -> SampleSet:
    """Submit a QUBO to a remote annealing endpoint and parse the reply."""
    url = endpoint if endpoint.rstrip("/").endswith("/sample") else endpoint.rstrip("/") + "/sample"
    body = json.dumps({"qubo": qubo_to_wire(qubo), "params": params_to_wire(params)}).encode()
    request = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=timeout) as reply:
            raw = reply.read()
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"remote sampler unreachable at {url}: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not valid JSON: {exc}") from exc
    return parse_response(qubo, payload)


class LoopbackAnnealerServer:
    """In-process HTTP service that answers ``/sample`` with the local annealer.

    Context-managed; binds an ephemeral 127.0.0.1 port. `mode` lets tests
    exercise failure paths: "malformed" returns an incomplete body,
    "wrong_energy" shifts all reported energies by one.
    """

    def __init__(self, mode: str = "ok"):
        if mode not in ("ok", "malformed", "wrong_energy"):
            raise ValueError(f"unknown loopback mode {mode!r}")
        self.mode = mode
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        if self._server is None:
            raise RuntimeError("server not started")
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/sample"

    def __enter__(self) -> "LoopbackAnnealerServer":
        mode = self.mode

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # quiet
                pass

            def do_POST(self):
                created = time.time() * 1000.0
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if mode == "malformed":
                    self._reply({"unexpected": True})
                    return
                try:
                    body = json.loads(raw)
                    qubo = qubo_from_wire(body["qubo"])
                    params = params_from_wire(body["params"])
                except (ProtocolError, KeyError, json.JSONDecodeError) as exc:
                    self.send_error(400, str(exc))
                    return
                received = time.time() * 1000.0
                result = sa_sample(qubo, params)
                solved = time.time() * 1000.0
                shift = 1.0 if mode == "wrong_energy" else 0.0
                payload = {
                    "samples": [list(r.assignment) for r in result.rows],
                    "energies": [r.energy + shift for r in result.rows],
                    "occurrences": [r.occurrences for r in result.rows],
                    "timing": {
                        "created": created,
                        "received": received,
                        "solved": solved,
                        "resolved": time.time() * 1000.0,
                        "qpu_programming_ms": result.timing.qpu_programming_ms,
                        "qpu_sampling_ms": result.timing.qpu_sampling_ms,
                    },
                }
                self._reply(payload)

            def _reply(self, payload):
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc_info):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        return False
