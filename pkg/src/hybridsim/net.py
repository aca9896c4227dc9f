"""Framed message connections over asyncio streams."""

from __future__ import annotations

import asyncio
import collections
import time

from .proto import Frame, FrameParser, encode_message

READ_CHUNK = 1 << 16


def now_us() -> int:
    """Host monotonic clock in microseconds; the shared timestamp domain."""
    return time.monotonic_ns() // 1000


def parse_addr(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return (host or default_host), int(port)


class Connection:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.parser = FrameParser()
        self._pending: collections.deque[Frame] = collections.deque()
        self.closed = False

    @classmethod
    async def open(cls, addr: str, retries: int = 0, delay: float = 0.1) -> "Connection":
        host, port = parse_addr(addr)
        for attempt in range(retries + 1):
            try:
                reader, writer = await asyncio.open_connection(host, port)
                return cls(reader, writer)
            except OSError:
                if attempt == retries:
                    raise
                await asyncio.sleep(delay)
        raise AssertionError("unreachable")

    async def recv_frame(self) -> Frame | None:
        """Next frame, or None on EOF. Raises ProtocolError on a corrupt stream."""
        while not self._pending:
            data = await self.reader.read(READ_CHUNK)
            if not data:
                return None
            self._pending.extend(self.parser.feed(data))
        return self._pending.popleft()

    async def recv(self):
        frame = await self.recv_frame()
        return None if frame is None else frame.decode()

    def send(self, msg) -> None:
        if not self.closed:
            self.writer.write(encode_message(msg))

    def send_raw(self, data: bytes) -> None:
        if not self.closed:
            self.writer.write(data)

    @property
    def write_buffer_size(self) -> int:
        transport = self.writer.transport
        return 0 if transport is None else transport.get_write_buffer_size()

    async def drain(self) -> None:
        await self.writer.drain()

    async def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.writer.close()
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass
