"""Binary persistence for memory states.

Layout: a fixed header (magic "BPCN", u32 version, activation code, layer
widths, particle count, write count, rng seed, noise hyperparameters)
followed by little-endian float64 payloads per particle: each hidden
layer's posterior mean (row-major) and row covariance (row-major), then
the top-layer mean, variance and the particle's log weight.  Priors are
not stored; they are replayed deterministically from the rng seed.
Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .gaussian import HiddenLayerPosterior, TopLayerPosterior
from .network import MemoryState, NetworkShape, Particle, init_particle, particle_prior

MAGIC = b"BPCN"
FORMAT_VERSION = 1

_ACT_CODE = {"relu": 0, "gelu": 1}
_ACT_NAME = {code: name for name, code in _ACT_CODE.items()}


class ModelFormatError(ValueError):
    """The file is not a valid memory snapshot."""


def save_memory(m: MemoryState, path) -> None:
    """Serialize a memory state to the binary model format."""
    dims = m.shape.dims
    header = struct.pack("<4sIII", MAGIC, FORMAT_VERSION, _ACT_CODE[m.shape.activation], len(dims))
    header += struct.pack(
        f"<{len(dims)}IIIqdd",
        *dims,
        m.n_particles,
        m.write_count,
        m.rng_seed,
        m.sigma_x2,
        m.sigma_w2,
    )
    parts = [header]
    for p in m.particles:
        for layer in p.layers:
            parts.append(np.ascontiguousarray(layer.mean, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.row_cov, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.top.mean, dtype="<f8").tobytes())
        parts.append(struct.pack("<dd", p.top.var, p.log_weight))
    Path(path).write_bytes(b"".join(parts))


def read_header(path) -> dict:
    """Parse just the fixed header of a model file."""
    blob = Path(path).read_bytes()
    return _parse_header(blob)[0]


def _parse_header(blob: bytes):
    if len(blob) < 16:
        raise ModelFormatError("file too short to hold a model header")
    magic, version, act_code, n_dims = struct.unpack_from("<4sIII", blob, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if act_code not in _ACT_NAME:
        raise ModelFormatError(f"unknown activation code {act_code}")
    offset = 16
    tail = f"<{n_dims}IIIqdd"
    try:
        fields = struct.unpack_from(tail, blob, offset)
    except struct.error as exc:
        raise ModelFormatError("truncated model header") from exc
    offset += struct.calcsize(tail)
    dims = fields[:n_dims]
    n_particles, write_count, rng_seed, sigma_x2, sigma_w2 = fields[n_dims:]
    header = {
        "activation": _ACT_NAME[act_code],
        "dims": tuple(int(d) for d in dims),
        "n_particles": int(n_particles),
        "write_count": int(write_count),
        "rng_seed": int(rng_seed),
        "sigma_x2": float(sigma_x2),
        "sigma_w2": float(sigma_w2),
    }
    return header, offset


def load_memory(path) -> MemoryState:
    """Load a memory state, replaying the seeded priors from the header."""
    blob = Path(path).read_bytes()
    header, offset = _parse_header(blob)
    dims = header["dims"]
    shape = NetworkShape(dims=dims, activation=header["activation"])
    n = header["n_particles"]

    per_particle = sum(
        dims[l + 1] * dims[l] + dims[l + 1] * dims[l + 1] for l in range(len(dims) - 1)
    )
    per_particle += dims[-1] + 2
    expected = offset + 8 * per_particle * n
    if len(blob) != expected:
        raise ModelFormatError(f"model payload is {len(blob)} bytes, expected {expected}")

    particles = []
    for _ in range(n):
        layers = []
        for l in range(shape.n_weight_layers):
            d_up, d_down = dims[l + 1], dims[l]
            mean = np.frombuffer(blob, dtype="<f8", count=d_up * d_down, offset=offset)
            offset += 8 * d_up * d_down
            cov = np.frombuffer(blob, dtype="<f8", count=d_up * d_up, offset=offset)
            offset += 8 * d_up * d_up
            layers.append(
                HiddenLayerPosterior(
                    mean=mean.reshape(d_up, d_down).copy(),
                    row_cov=cov.reshape(d_up, d_up).copy(),
                )
            )
        top_mean = np.frombuffer(blob, dtype="<f8", count=dims[-1], offset=offset).copy()
        offset += 8 * dims[-1]
        var, log_weight = struct.unpack_from("<dd", blob, offset)
        offset += 16
        particles.append(
            Particle(layers=layers, top=TopLayerPosterior(mean=top_mean, var=var),
                     log_weight=log_weight)
        )

    priors = [
        particle_prior(
            init_particle(shape, header["sigma_w2"], seed=[header["rng_seed"], i], n_particles=n),
            header["sigma_w2"],
        )
        for i in range(n)
    ]
    return MemoryState(
        shape=shape,
        particles=particles,
        priors=priors,
        sigma_x2=header["sigma_x2"],
        sigma_w2=header["sigma_w2"],
        rng_seed=header["rng_seed"],
        write_count=header["write_count"],
    )
