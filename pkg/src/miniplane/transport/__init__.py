from miniplane.transport.wire import MessageKind, encode_frame, decode_frame

__all__ = ["MessageKind", "encode_frame", "decode_frame"]
