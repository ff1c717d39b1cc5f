"""
MRCS measurement files

Layout (little-endian):
    magic "MRCS" | version u16 | reserved u16 | m u32 | beta numerator u32 |
    beta denominator u32 | k u32 | N u32 | channels u32 | seed u64 | length u32
followed by channels x length float32 values (channel-major). `length` is the
number of final-stage entries kept per channel; lower stages are its prefixes.
The sensing matrix itself is never stored, it is regenerated from the header.
"""

import struct
from typing import Optional, Tuple

import numpy as np
import torch

from src.sensing import MeasurementSet, SensingConfig
from src.utils.errors import ConfigError, MeasurementFormatError

MAGIC = b"MRCS"
VERSION = 1
HEADER = struct.Struct("<4sHHIIIIIIQI")
LENGTH_OFFSET = HEADER.size - 4


def encode_header(config: SensingConfig, length: int) -> bytes:
    beta = config.beta
    return HEADER.pack(
        MAGIC, VERSION, 0,
        config.base_dim, beta.numerator, beta.denominator,
        config.stages, config.signal_dim, config.channels,
        config.seed, length,
    )


def write_measurements(path: str, measurements: MeasurementSet, config: Optional[SensingConfig] = None,
                       length: Optional[int] = None) -> int:
    """
    Write a measurement set to an MRCS file

    Args:
        path: Output file
        measurements: Measurements to store
        config: Sensing config; defaults to the one attached to the set
        length: Keep only the first `length` entries per channel (reduced budget)

    Returns:
        Number of bytes written
    """
    config = config or measurements.config
    if config is None:
        raise ConfigError("A sensing config is required to write measurements")

    data = measurements.final
    if data.dim() != 2 or data.shape[0] != config.channels:
        raise ConfigError(f"Expected ({config.channels}, L) measurements, got {tuple(data.shape)}")

    length = data.shape[1] if length is None else length
    if not 1 <= length <= data.shape[1]:
        raise ConfigError(f"Cannot store {length} of {data.shape[1]} measurements per channel")

    payload = np.ascontiguousarray(data[:, :length].detach().cpu().numpy().astype("<f4")).tobytes()
    blob = encode_header(config, length) + payload
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_measurements(path: str) -> Tuple[SensingConfig, MeasurementSet]:
    """
    Read an MRCS file

    Args:
        path: Input file

    Returns:
        (SensingConfig, MeasurementSet); the set may hold fewer entries than the final stage
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise MeasurementFormatError(f"Cannot read measurement file: {e}", 0, path) from e

    if len(blob) < HEADER.size:
        raise MeasurementFormatError(f"Header truncated: {len(blob)} of {HEADER.size} bytes", len(blob), path)

    magic, version, _, m, beta_num, beta_den, k, n, channels, seed, length = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MeasurementFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0, path)
    if version != VERSION:
        raise MeasurementFormatError(f"Unsupported version {version}", 4, path)
    if beta_den == 0:
        raise MeasurementFormatError("beta denominator is zero", 16, path)

    try:
        config = SensingConfig(base_dim=m, beta=f"{beta_num}/{beta_den}", stages=k,
                               signal_dim=n, channels=channels, seed=seed)
        side = config.side
    except ConfigError as e:
        raise MeasurementFormatError(f"Invalid sensing header: {e}", 8, path) from e

    stage_dims = tuple(config.stage_dims)
    if not 1 <= length <= stage_dims[-1]:
        raise MeasurementFormatError(
            f"Payload length {length} outside 1..{stage_dims[-1]}", LENGTH_OFFSET, path
        )

    expected = HEADER.size + channels * length * 4
    if len(blob) != expected:
        offset = min(len(blob), expected)
        raise MeasurementFormatError(f"Payload size mismatch: file has {len(blob)} bytes, expected {expected}",
                                     offset, path)

    values = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(channels, length)
    final = torch.from_numpy(values.astype(np.float32))
    measurements = MeasurementSet(final, stage_dims, (channels, side, side), config)
    return config, measurements
