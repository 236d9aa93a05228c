from .protocol import (
    KINDS, PROTOCOL_VERSION, MessageReader, ProtocolMessage, SequenceChecker,
    WsReader, decode_body, decode_frame, encode_frame, encode_message,
    websocket_accept_key, ws_encode_text,
)
from .server import ConsoleServer
from .session import (
    DONE_TOKEN, RunResult, RuntimeConfig, RuntimeSession, SubgoalEvent,
    obs_history_input, policy_chunk_fn,
)
from .slots import ProducerSlot

__all__ = [
    "KINDS", "PROTOCOL_VERSION", "MessageReader", "ProtocolMessage",
    "SequenceChecker", "WsReader", "decode_body", "decode_frame",
    "encode_frame", "encode_message", "websocket_accept_key", "ws_encode_text",
    "ConsoleServer", "DONE_TOKEN", "RunResult", "RuntimeConfig",
    "RuntimeSession", "SubgoalEvent", "obs_history_input", "policy_chunk_fn",
    "ProducerSlot",
]
