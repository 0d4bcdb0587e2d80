"""In-situ particle simulation, rendering, compositing and steering.

Run specs and rank summaries cross the binding as JSON; the helpers here
turn them into dicts.
"""

import json

from ._insitu import (
    ArgumentError,
    CameraPose,
    ConfigError,
    InSituError,
    InstabilityError,
    PeerLostError,
    ProtocolError,
    SimConfig,
    Simulation,
    Vdi,
    build_vdi,
    decode_message,
    default_camera,
    encode_echo,
    encode_frame,
    encode_stats,
    encode_steer,
    encode_vdi_frame,
    message_length,
    render_spheres,
    rle_decode,
    rle_encode,
)
from . import _insitu


def default_run_spec():
    return json.loads(_insitu.default_run_spec())


def validate_run_spec(spec):
    _insitu.validate_run_spec(json.dumps(spec))


def run_spec_checksum(spec):
    return _insitu.run_spec_checksum(json.dumps(spec))


def launch(spec):
    """Run every rank as a child process. Returns exit codes, leaked segment
    names, the completed spec and one summary dict per rank."""
    res = _insitu.launch(json.dumps(spec))
    res["spec"] = json.loads(res["spec"])
    res["summaries"] = [json.loads(s) for s in res["summaries"]]
    return res


def run_benchmark(spec):
    return json.loads(_insitu.run_benchmark(json.dumps(spec)))


def split_messages(buffer):
    """Split a byte stream into whole messages; returns (messages, rest)."""
    out = []
    while True:
        n = message_length(buffer)
        if n is None or n > len(buffer):
            return out, buffer
        out.append(buffer[:n])
        buffer = buffer[n:]
