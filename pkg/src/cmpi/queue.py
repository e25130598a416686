"""Two-sided messaging over a matrix of single-producer/single-consumer rings.

Every ordered (sender, receiver) pair owns one ring, so enqueue and
dequeue never race and need no atomic read-modify-write.  A ring is a
128-byte control block (``head`` and ``tail`` on separate lines) followed
by ``depth`` fixed-size cells.  A cell is a 64-byte header plus payload;
longer messages are cut into cell-sized chunks sent back to back.

Ring ``(s -> r)`` sits at ``base + (r * nranks + s) * queue_bytes``.
"""

from __future__ import annotations

import struct
import zlib
from collections import deque
from typing import NamedTuple

from ._spin import Backoff
from .device import CACHELINE
from .errors import BufferTooSmall, CorruptMessage, QueueError

HEADER_SIZE = 64
CONTROL_SIZE = 2 * CACHELINE
DEFAULT_CELL_SIZE = 16 * 1024
DEFAULT_DEPTH = 64
MIN_CELL_SIZE = 4 * 1024

# src, dst, tag, total_len, chunk_index, chunk_count, payload_len, crc32
_HDR = struct.Struct("<iiqQIIII")


class MessageHeader(NamedTuple):
    src: int
    dst: int
    tag: int
    total_len: int
    chunk_index: int
    chunk_count: int
    payload_len: int


class Status(NamedTuple):
    source: int
    tag: int
    count: int
    chunks: int


def payload_capacity(cell_size: int) -> int:
    return cell_size - HEADER_SIZE


def chunk_count(total_len: int, cell_size: int) -> int:
    """Cells needed for a message; zero-length messages still take one."""
    cap = payload_capacity(cell_size)
    return max(1, -(-total_len // cap))


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


def check_shape(cell_size, depth):
    if not _is_pow2(cell_size) or cell_size < MIN_CELL_SIZE:
        raise QueueError(f"cell size {cell_size} must be a power of two >= {MIN_CELL_SIZE}")
    if not _is_pow2(depth) or depth < 2:
        raise QueueError(f"depth {depth} must be a power of two >= 2")


def queue_bytes(cell_size, depth):
    return CONTROL_SIZE + depth * cell_size


def matrix_bytes(nranks, cell_size, depth):
    return nranks * nranks * queue_bytes(cell_size, depth)


class RingQueue:
    """One SPSC ring.  The producer owns ``tail``, the consumer owns ``head``.

    Indices are kept modulo ``depth``; the ring is full when advancing the
    tail would make it equal to the head, so it holds ``depth - 1`` cells.
    """

    def __init__(self, region, base, cell_size, depth):
        self.region = region
        self.base = base
        self.head_off = base
        self.tail_off = base + CACHELINE
        self.cells_off = base + CONTROL_SIZE
        self.cell_size = cell_size
        self.depth = depth
        self.capacity = cell_size - HEADER_SIZE
        self._mask = depth - 1
        # each side only trusts its own cached index
        self._head = region.nt_load_u64(self.head_off)
        self._tail = region.nt_load_u64(self.tail_off)
        self._peeked = None

    def __len__(self):
        return (self.region.nt_load_u64(self.tail_off) - self.region.nt_load_u64(self.head_off)) & self._mask

    def enqueue(self, header: MessageHeader, payload) -> bool:
        """Publish one cell; False when the ring is full."""
        region = self.region
        tail = self._tail
        nxt = (tail + 1) & self._mask
        if nxt == region.nt_load_u64(self.head_off):
            return False
        plen = len(payload)
        if plen > self.capacity or plen != header.payload_len:
            raise QueueError(f"payload of {plen} bytes does not fit cell capacity {self.capacity}")
        cell = self.cells_off + tail * self.cell_size
        region.write_bytes(cell, _HDR.pack(*header, zlib.crc32(payload)))
        if plen:
            region.write_bytes(cell + HEADER_SIZE, payload)
        region.flush_range(cell, HEADER_SIZE + plen)
        region.fence()
        region.nt_store_u64(self.tail_off, nxt)
        self._tail = nxt
        return True

    def peek(self):
        """Header of the oldest unconsumed cell, or None when empty."""
        if self._peeked is not None:
            return self._peeked[0]
        region = self.region
        head = self._head
        if head == region.nt_load_u64(self.tail_off):
            return None
        region.fence()
        cell = self.cells_off + head * self.cell_size
        fields = _HDR.unpack_from(region.read_bytes(cell, HEADER_SIZE, invalidate_first=True))
        header = MessageHeader(*fields[:7])
        if (
            header.chunk_index >= header.chunk_count
            or header.payload_len > self.capacity
            or header.payload_len > header.total_len
        ):
            raise CorruptMessage(f"inconsistent cell header {header}")
        self._peeked = (header, fields[7])
        return header

    def pop(self, out=None):
        """Consume the peeked cell.  Copies the payload into ``out`` when given, else returns bytes."""
        if self._peeked is None and self.peek() is None:
            raise QueueError("pop from an empty ring")
        header, crc = self._peeked
        region = self.region
        cell = self.cells_off + self._head * self.cell_size + HEADER_SIZE
        n = header.payload_len
        if out is None:
            data = region.read_bytes(cell, n, invalidate_first=True)
            check = data
        else:
            region.read_into(cell, out[:n], invalidate_first=True)
            data = n
            check = out[:n]
        if zlib.crc32(check) != crc:
            raise CorruptMessage(f"payload checksum mismatch in {header}")
        region.fence()
        self._head = (self._head + 1) & self._mask
        self._peeked = None
        region.nt_store_u64(self.head_off, self._head)
        return data

    def dequeue(self):
        """(header, payload) of the oldest cell, or None when empty."""
        header = self.peek()
        if header is None:
            return None
        return header, self.pop()


class QueueMatrix:
    def __init__(self, region, base, nranks, cell_size=DEFAULT_CELL_SIZE, depth=DEFAULT_DEPTH):
        check_shape(cell_size, depth)
        self.region = region
        self.base = base
        self.nranks = nranks
        self.cell_size = cell_size
        self.depth = depth
        self.queue_bytes = queue_bytes(cell_size, depth)

    @property
    def nbytes(self):
        return self.nranks * self.nranks * self.queue_bytes

    def queue_offset(self, src, dst):
        return self.base + (dst * self.nranks + src) * self.queue_bytes

    def ring(self, src, dst) -> RingQueue:
        return RingQueue(self.region, self.queue_offset(src, dst), self.cell_size, self.depth)


def matrix_create(arena, comm_name, nranks, cell_size=DEFAULT_CELL_SIZE, depth=DEFAULT_DEPTH,
                  rank=0, timeout=30.0) -> QueueMatrix:
    """Collective: rank 0 creates ``qm.<comm_name>``, the rest open it."""
    check_shape(cell_size, depth)
    name = f"qm.{comm_name}"
    size = matrix_bytes(nranks, cell_size, depth)
    if rank == 0:
        handle = arena.create(name, size)
    else:
        handle = arena.open_wait(name, timeout)
    if handle.size != size:
        raise QueueError(
            f"{name} holds {handle.size} bytes but {nranks} ranks with cell {cell_size} "
            f"and depth {depth} need {size}"
        )
    return QueueMatrix(arena.region, arena.address(handle), nranks, cell_size, depth)


def _byte_view(data):
    mv = memoryview(data)
    if mv.format != "B" or mv.ndim != 1:
        mv = mv.cast("B")
    return mv


class _Message:
    __slots__ = ("tag", "data", "chunks", "filled")

    def __init__(self, tag, data, chunks, filled):
        self.tag = tag
        self.data = data
        self.chunks = chunks
        self.filled = filled


class Channel:
    """A rank's send/receive endpoint on a queue matrix.

    Messages arriving with a tag nobody asked for yet are parked in a
    private per-source unexpected list.  A blocked sender keeps draining
    its inbound rings, so symmetric large exchanges cannot deadlock.
    """

    def __init__(self, matrix: QueueMatrix, rank: int, timeout=None):
        self.matrix = matrix
        self.rank = rank
        self.nranks = matrix.nranks
        self.cell_size = matrix.cell_size
        self.payload_capacity = payload_capacity(matrix.cell_size)
        self.timeout = timeout
        self._out = [matrix.ring(rank, d) for d in range(self.nranks)]
        self._in = [matrix.ring(s, rank) for s in range(self.nranks)]
        if self.nranks:
            self._in[rank] = self._out[rank]
        self._unexpected = [deque() for _ in range(self.nranks)]
        self._partial = [None] * self.nranks
        self.status = None

    def _check_rank(self, r, what):
        if not 0 <= r < self.nranks:
            raise QueueError(f"invalid {what} rank {r} for {self.nranks} ranks")

    # -- send ------------------------------------------------------------

    def send(self, dst: int, tag: int, data=b"") -> int:
        """Blocking send; returns the number of chunks used."""
        self._check_rank(dst, "destination")
        mv = _byte_view(data)
        total = mv.nbytes
        cap = self.payload_capacity
        count = max(1, -(-total // cap))
        ring = self._out[dst]
        for i in range(count):
            chunk = mv[i * cap : (i + 1) * cap]
            header = MessageHeader(self.rank, dst, tag, total, i, count, len(chunk))
            if not ring.enqueue(header, chunk):
                backoff = Backoff(self.timeout, f"space in ring {self.rank}->{dst}")
                while not ring.enqueue(header, chunk):
                    if not self.progress():
                        backoff.pause()
        return count

    # -- progress --------------------------------------------------------

    def progress(self) -> bool:
        """Drain every inbound ring into the unexpected lists; True if anything moved."""
        moved = False
        for src in range(self.nranks):
            ring = self._in[src]
            while ring.peek() is not None:
                self._absorb(src, ring)
                moved = True
        return moved

    def _absorb(self, src, ring):
        header = ring.peek()
        part = self._partial[src]
        if part is None:
            if header.chunk_index != 0:
                raise CorruptMessage(f"chunk {header.chunk_index} from {src} without a message start")
            if header.chunk_count == 1:
                self._unexpected[src].append(_Message(header.tag, ring.pop(), 1, header.total_len))
                return
            part = _Message(header.tag, bytearray(header.total_len), header.chunk_count, 0)
            self._partial[src] = part
        elif header.chunk_index == 0 or header.tag != part.tag:
            raise CorruptMessage(f"interleaved message chunks from rank {src}")
        n = header.payload_len
        ring.pop(memoryview(part.data)[part.filled : part.filled + n])
        part.filled += n
        if header.chunk_index + 1 == header.chunk_count:
            self._partial[src] = None
            part.data = bytes(part.data)
            self._unexpected[src].append(part)

    # -- receive ---------------------------------------------------------

    def _take_unexpected(self, src, tag):
        pending = self._unexpected[src]
        for i, msg in enumerate(pending):
            if msg.tag == tag:
                del pending[i]
                return msg
        return None

    def _deliver(self, src, tag, msg, out):
        n = len(msg.data)
        self.status = Status(src, tag, n, msg.chunks)
        if out is None:
            return msg.data
        if n > out.nbytes:
            raise BufferTooSmall(n, out.nbytes)
        out[:n] = msg.data
        return n

    def _recv(self, src, tag, out):
        self._check_rank(src, "source")
        msg = self._take_unexpected(src, tag)
        if msg is not None:
            return self._deliver(src, tag, msg, out)
        ring = self._in[src]
        backoff = Backoff(self.timeout, f"message from rank {src} tag {tag}")
        while True:
            header = ring.peek()
            if header is None:
                backoff.pause()
                continue
            backoff.reset()
            if (
                out is not None
                and self._partial[src] is None
                and header.chunk_index == 0
                and header.tag == tag
                and header.total_len <= out.nbytes
            ):
                return self._recv_direct(src, ring, header, out, backoff)
            self._absorb(src, ring)
            msg = self._take_unexpected(src, tag)
            if msg is not None:
                return self._deliver(src, tag, msg, out)

    def _recv_direct(self, src, ring, header, out, backoff):
        """Stream the chunks of a matching message straight into the caller's buffer."""
        total, count = header.total_len, header.chunk_count
        filled = 0
        for i in range(count):
            if i:
                header = ring.peek()
                while header is None:
                    backoff.pause()
                    header = ring.peek()
                if header.chunk_index != i or header.total_len != total:
                    raise CorruptMessage(f"expected chunk {i} of {count} from rank {src}, got {header}")
            n = header.payload_len
            ring.pop(out[filled : filled + n])
            filled += n
        if filled != total:
            raise CorruptMessage(f"reassembled {filled} of {total} bytes from rank {src}")
        self.status = Status(src, header.tag, total, count)
        return total

    def recv(self, src: int, tag: int, buf) -> int:
        """Receive into ``buf``; returns the message length (see also ``status``)."""
        return self._recv(src, tag, _byte_view(buf))

    def recv_bytes(self, src: int, tag: int) -> bytes:
        return self._recv(src, tag, None)

    def iprobe(self, src: int, tag: int) -> bool:
        """True if a complete message from ``src`` with ``tag`` is ready locally."""
        self.progress()
        return any(m.tag == tag for m in self._unexpected[src])
