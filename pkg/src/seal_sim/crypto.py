"""Bit-exact functional model of direct, counter-mode and colocation-mode line encryption.

This is a *model* cipher with the structural properties memory encryption
relies on (pad uniqueness per address/counter, ECB-style repetition for
direct mode); it is not cryptographically strong and must not be used as one.

Mixing recipe, all arithmetic mod 2**64, little-endian byte order:

    mix64(z)   = splitmix64 finaliser (xor-shift 30/27/31, two odd multipliers)
    k0, k1     = key[0:8], key[8:16]
    h          = mix64(k0 ^ address)
    h          = mix64(h ^ counter)
    h          = mix64(h ^ (block_index + PAD_DOMAIN))
    h          = mix64(h ^ k1)
    block j    = mix64(h + GAMMA) || mix64(h + 2*GAMMA)          (16 bytes)
    otp        = block 0 || ... || block 7                        (128 bytes)

Direct mode is a 4-round Feistel network over each 16-byte block, halves
``(L, R)``, round function ``mix64(R ^ round_key[i])`` with
``round_key[i] = mix64(k0 ^ mix64(k1 + (i + 1) * GAMMA))``.
"""

from __future__ import annotations

import enum
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

LINE_BYTES = 128
BLOCK_BYTES = 16
BLOCKS_PER_LINE = LINE_BYTES // BLOCK_BYTES
COUNTER_BITS = 56
COUNTER_MAX = (1 << COUNTER_BITS) - 1
FLAG_ENCRYPTED = 0x01

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
PAD_DOMAIN = 0x5EA1_0000_0000_0000
FEISTEL_ROUNDS = 4

_LINE_WORDS = struct.Struct("<16Q")
_BLOCK_WORDS = struct.Struct("<2Q")


class CipherMode(enum.Enum):
    NONE = "none"
    DIRECT = "direct"
    COUNTER = "counter"
    COLOE = "coloe"

    @classmethod
    def parse(cls, text: str) -> "CipherMode":
        aliases = {"none": cls.NONE, "baseline": cls.NONE, "direct": cls.DIRECT,
                   "counter": cls.COUNTER, "countermode": cls.COUNTER, "ctr": cls.COUNTER,
                   "coloe": cls.COLOE}
        try:
            return aliases[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown cipher mode {text!r}") from None


class CounterExhausted(RuntimeError):
    pass


class PlaintextRegion(ValueError):
    pass


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_halves(key: bytes) -> tuple[int, int]:
    if len(key) != 16:
        raise ValueError(f"key must be 16 bytes, got {len(key)}")
    return struct.unpack("<2Q", key)


def otp_words(key: bytes, address: int, counter: int) -> list[int]:
    """The pad as sixteen 64-bit words (two per 16-byte block)."""
    k0, k1 = _key_halves(key)
    base = mix64(mix64(k0 ^ (address & MASK64)) ^ (counter & MASK64))
    words = []
    for j in range(BLOCKS_PER_LINE):
        h = mix64(mix64(base ^ (j + PAD_DOMAIN)) ^ k1)
        words.append(mix64(h + GAMMA))
        words.append(mix64(h + 2 * GAMMA))
    return words


def otp(key: bytes, address: int, counter: int) -> bytes:
    """128-byte one-time pad for one memory line."""
    return _LINE_WORDS.pack(*otp_words(key, address, counter))


def _check_line(data: bytes) -> None:
    if len(data) != LINE_BYTES:
        raise ValueError(f"memory line must be {LINE_BYTES} bytes, got {len(data)}")


def encrypt_ctr(line: bytes, key: bytes, address: int, counter: int) -> bytes:
    _check_line(line)
    pad = otp_words(key, address, counter)
    data = _LINE_WORDS.unpack(line)
    return _LINE_WORDS.pack(*(d ^ p for d, p in zip(data, pad)))


decrypt_ctr = encrypt_ctr


def _round_keys(key: bytes) -> list[int]:
    k0, k1 = _key_halves(key)
    return [mix64(k0 ^ mix64((k1 + (i + 1) * GAMMA) & MASK64)) for i in range(FEISTEL_ROUNDS)]


def _feistel(words: tuple[int, ...], rks: list[int], inverse: bool) -> list[int]:
    out = []
    for b in range(0, len(words), 2):
        left, right = words[b], words[b + 1]
        if not inverse:
            for rk in rks:
                left, right = right, left ^ mix64(right ^ rk)
        else:
            for rk in reversed(rks):
                left, right = right ^ mix64(left ^ rk), left
        out.extend((left, right))
    return out


def encrypt_direct(line: bytes, key: bytes) -> bytes:
    """Address-independent block encryption: equal plaintext blocks give equal ciphertext."""
    _check_line(line)
    return _LINE_WORDS.pack(*_feistel(_LINE_WORDS.unpack(line), _round_keys(key), False))


def decrypt_direct(line: bytes, key: bytes) -> bytes:
    _check_line(line)
    return _LINE_WORDS.pack(*_feistel(_LINE_WORDS.unpack(line), _round_keys(key), True))


@dataclass
class MemoryLine:
    """128 data bytes plus the 8-byte counter area stored beside them.

    The counter area packs the 56-bit counter into the low bits and the flag
    byte into the top byte of a little-endian 64-bit word.  Flag bit 0 marks an
    encrypted (``emalloc``) allocation; bits 1-7 are reserved and kept zero.
    """

    data: bytes = bytes(LINE_BYTES)
    counter: int = 0
    flags: int = 0

    def __post_init__(self):
        _check_line(self.data)
        if not 0 <= self.counter <= COUNTER_MAX:
            raise ValueError("counter must fit in 56 bits")
        if self.flags & ~FLAG_ENCRYPTED:
            raise ValueError("reserved flag bits must be zero")

    @classmethod
    def allocate(cls, encrypted: bool) -> "MemoryLine":
        return cls(flags=FLAG_ENCRYPTED if encrypted else 0)

    @property
    def encrypted_region(self) -> bool:
        return bool(self.flags & FLAG_ENCRYPTED)

    @property
    def counter_area(self) -> bytes:
        return struct.pack("<Q", self.counter | (self.flags << COUNTER_BITS))

    def to_bytes(self) -> bytes:
        return self.data + self.counter_area

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MemoryLine":
        if len(raw) != LINE_BYTES + 8:
            raise ValueError("a colocated line is 136 bytes")
        (area,) = struct.unpack("<Q", raw[LINE_BYTES:])
        return cls(bytes(raw[:LINE_BYTES]), area & COUNTER_MAX, area >> COUNTER_BITS)


def coloe_write(line: MemoryLine, key: bytes, address: int, plaintext: bytes) -> MemoryLine:
    """Bump the colocated counter and store ``plaintext`` encrypted under it."""
    if not line.encrypted_region:
        raise PlaintextRegion("plaintext region: line was not allocated for encryption")
    if line.counter >= COUNTER_MAX:
        raise CounterExhausted(f"counter exhausted at address {address:#x}")
    counter = line.counter + 1
    return MemoryLine(encrypt_ctr(plaintext, key, address, counter), counter, line.flags)


def coloe_read(line: MemoryLine, key: bytes, address: int) -> bytes:
    if not line.encrypted_region:
        return line.data
    return decrypt_ctr(line.data, key, address, line.counter)


def distinctness_probe(mode: CipherMode, workload: Iterable[tuple[int, bytes]],
                       key: bytes) -> dict[str, int]:
    """Count unordered pairs of identical ciphertexts produced by a write workload.

    Counter modes keep one counter per address, starting at zero and bumped
    before every write.
    """
    mode = CipherMode.parse(mode) if isinstance(mode, str) else mode
    counters: dict[int, int] = {}
    seen: Counter[bytes] = Counter()
    for address, plaintext in workload:
        if mode is CipherMode.NONE:
            ct = bytes(plaintext)
        elif mode is CipherMode.DIRECT:
            ct = encrypt_direct(plaintext, key)
        else:
            c = counters.get(address, 0) + 1
            if c > COUNTER_MAX:
                raise CounterExhausted(f"counter exhausted at address {address:#x}")
            counters[address] = c
            ct = encrypt_ctr(plaintext, key, address, c)
        seen[ct] += 1
    return {"repeated_ciphertext_pairs": sum(n * (n - 1) // 2 for n in seen.values())}
