from __future__ import annotations

import enum
import struct

from .region import LINE, LINE_SHIFT, PersistentRegion

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")


class Mode(enum.Enum):
    FULL = "full"
    PARTLY = "partly"
    PARTLY_CKPT = "partly-ckpt"

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> Mode:
        for mode, c in _CODES.items():
            if c == code:
                return mode
        raise ValueError(f"unknown mode code {code}")

    @property
    def partly(self) -> bool:
        return self is not Mode.FULL


_CODES = {Mode.FULL: 1, Mode.PARTLY: 2, Mode.PARTLY_CKPT: 3}


def pack_payload(value: int | bytes, size: int) -> bytes:
    """Payload of ``size`` bytes: an int fills the first word, the rest is zero padding."""
    if isinstance(value, int):
        return _I64.pack(value) + bytes(size - 8)
    if len(value) > size:
        raise ValueError(f"payload of {len(value)} bytes exceeds {size}")
    return bytes(value) + bytes(size - len(value))


def payload_word(payload: bytes) -> int:
    return _I64.unpack_from(payload, 0)[0]


class StagedView:
    """Checkpoint-on-flush access to a region.

    Writes land in a volatile copy of the touched lines; a flush copies the
    covered staged lines into the region and then flushes them there. Anything
    never flushed never reaches the region.
    """

    def __init__(self, region: PersistentRegion):
        self.region = region
        self.staged: dict[int, bytearray] = {}

    def read(self, offset: int, n: int) -> bytes:
        staged = self.staged
        if not staged:
            return self.region.read(offset, n)
        first, last = offset >> LINE_SHIFT, (offset + n - 1) >> LINE_SHIFT
        if not any(line in staged for line in range(first, last + 1)):
            return self.region.read(offset, n)
        base = first << LINE_SHIFT
        raw = bytearray(self.region.read(base, (last + 1 - first) << LINE_SHIFT))
        for line in range(first, last + 1):
            if line in staged:
                rel = (line - first) << LINE_SHIFT
                raw[rel:rel + LINE] = staged[line]
        rel = offset - base
        return bytes(raw[rel:rel + n])

    def read_u64(self, offset: int) -> int:
        if self.staged and (offset >> LINE_SHIFT) in self.staged:
            return _U64.unpack(self.read(offset, 8))[0]
        return self.region.read_u64(offset)

    def read_i64(self, offset: int) -> int:
        if self.staged and (offset >> LINE_SHIFT) in self.staged:
            return _I64.unpack(self.read(offset, 8))[0]
        return self.region.read_i64(offset)

    def write(self, offset: int, payload: bytes) -> None:
        end = offset + len(payload)
        region = self.region
        if offset < region._lo or end > region._hi or not payload:
            # let the region raise the same fault a direct write would
            region.write(offset, payload)
        staged = self.staged
        pos = offset
        while pos < end:
            line = pos >> LINE_SHIFT
            base = line << LINE_SHIFT
            buf = staged.get(line)
            if buf is None:
                buf = staged[line] = bytearray(region.read(base, LINE))
            stop = min(end, base + LINE)
            buf[pos - base:stop - base] = payload[pos - offset:stop - offset]
            pos = stop

    def write_u64(self, offset: int, value: int) -> None:
        self.write(offset, _U64.pack(value))

    def flush(self, offset: int, n: int) -> None:
        staged = self.staged
        region = self.region
        if staged:
            for line in range((offset >> LINE_SHIFT), ((offset + n - 1) >> LINE_SHIFT) + 1):
                buf = staged.pop(line, None)
                if buf is not None:
                    region.write(line << LINE_SHIFT, bytes(buf))
        region.flush(offset, n)

    def fence(self) -> None:
        self.region.fence()

    def end_op(self) -> None:
        self.region.end_op()


def io_for(region: PersistentRegion, mode: Mode):
    """Region accessor for ``mode``: the region itself, or a staging view in checkpoint mode."""
    return StagedView(region) if mode is Mode.PARTLY_CKPT else region
