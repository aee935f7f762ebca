"""Communication-size accounting: 4 bytes per float32 parameter, MiB = 2**20 bytes."""

from __future__ import annotations

from ..models import ModelConfig, count_parameters

BYTES_PER_PARAM = 4
MIB = 2**20


def size_of_count(param_count: int) -> tuple[int, int, float]:
    payload = BYTES_PER_PARAM * param_count
    return param_count, payload, payload / MIB


def communication_size(config: ModelConfig) -> tuple[int, int, float]:
    """``(param_count, payload_bytes, mib)`` for one transfer of ``config``'s weights."""
    total, _ = count_parameters(config)
    return size_of_count(total)


def reduction_ratio(config_a: ModelConfig, config_b: ModelConfig) -> float:
    """Percent saved by sending ``config_a`` instead of ``config_b``."""
    _, size_a, _ = communication_size(config_a)
    _, size_b, _ = communication_size(config_b)
    if size_b == 0:
        raise ZeroDivisionError("reference model has zero communication size")
    return 100.0 * (1.0 - size_a / size_b)
