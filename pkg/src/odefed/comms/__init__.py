"""Parameter containers, size accounting and the TCP transport.

The transport lives in :mod:`odefed.comms.transport` and is imported on demand
because it depends on the federated driver.
"""

from .checkpoint import (
    BadMagicError,
    CheckpointError,
    DigestMismatchError,
    TruncatedError,
    VersionMismatchError,
    config_digest,
    deserialize_params,
    load_checkpoint,
    load_params,
    save_checkpoint,
    serialize_params,
    serialized_size,
)
from .sizes import communication_size, reduction_ratio, size_of_count
from .wire import FRAME_OVERHEAD, MsgType, ProtocolError, WireMessage
