"""Training-loop client SDK for a gridfleet data server."""

from .dataloader import BatchedState, DataloaderHandle
from .policies import Policy, RandomPolicy, ScriptedPolicy, solved_header_row_script
from .rollout import rollout
from .sampling import noop_calculation, noop_update, sample_batch
from .transport import HttpTransport, RecordingTransport, Transport
from .wire import (
    EngineError,
    ServerUnreachable,
    ValidationError,
    canonical_dumps,
    decode_message,
    encode_message,
    validate_action,
)

__all__ = [
    "BatchedState",
    "DataloaderHandle",
    "EngineError",
    "HttpTransport",
    "Policy",
    "RandomPolicy",
    "RecordingTransport",
    "ScriptedPolicy",
    "ServerUnreachable",
    "Transport",
    "ValidationError",
    "canonical_dumps",
    "decode_message",
    "encode_message",
    "noop_calculation",
    "noop_update",
    "rollout",
    "sample_batch",
    "solved_header_row_script",
    "validate_action",
]

__version__ = "0.1.0"
