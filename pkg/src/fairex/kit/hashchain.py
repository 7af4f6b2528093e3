import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence, TypeAlias

BLOCK_SIZE = 64
DIGEST_SIZE = 32

Block: TypeAlias = bytes
BlockRange: TypeAlias = tuple[int, int]

_MASK = 0xFFFFFFFF

# fmt: off
_IV_WORDS = (
    0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A, 0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19,
)

_ROUND_CONSTANTS = (
    0x428A2F98, 0x71374491, 0xB5C0FBCF, 0xE9B5DBA5, 0x3956C25B, 0x59F111F1, 0x923F82A4, 0xAB1C5ED5,
    0xD807AA98, 0x12835B01, 0x243185BE, 0x550C7DC3, 0x72BE5D74, 0x80DEB1FE, 0x9BDC06A7, 0xC19BF174,
    0xE49B69C1, 0xEFBE4786, 0x0FC19DC6, 0x240CA1CC, 0x2DE92C6F, 0x4A7484AA, 0x5CB0A9DC, 0x76F988DA,
    0x983E5152, 0xA831C66D, 0xB00327C8, 0xBF597FC7, 0xC6E00BF3, 0xD5A79147, 0x06CA6351, 0x14292967,
    0x27B70A85, 0x2E1B2138, 0x4D2C6DFC, 0x53380D13, 0x650A7354, 0x766A0ABB, 0x81C2C92E, 0x92722C85,
    0xA2BFE8A1, 0xA81A664B, 0xC24B8B70, 0xC76C51A3, 0xD192E819, 0xD6990624, 0xF40E3585, 0x106AA070,
    0x19A4C116, 0x1E376C08, 0x2748774C, 0x34B0BCB5, 0x391C0CB3, 0x4ED8AA4A, 0x5B9CCA4F, 0x682E6FF3,
    0x748F82EE, 0x78A5636F, 0x84C87814, 0x8CC70208, 0x90BEFFFA, 0xA4506CEB, 0xBEF9A3F7, 0xC67178F2,
)
# fmt: on


@dataclass(frozen=True)
class ChainingValue:
    """Merkle-Damgård state after absorbing a prefix of blocks.

    Attributes:
    -----------
    state : bytes
        the 256-bit state as eight big-endian 32-bit words
    """

    state: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.state, bytes) or len(self.state) != DIGEST_SIZE:
            raise ValueError(f"Chaining value must be {DIGEST_SIZE} bytes")

    @classmethod
    def from_words(cls, words: Sequence[int]) -> "ChainingValue":
        return cls(struct.pack(">8I", *words))

    @classmethod
    def from_hex(cls, value: str) -> "ChainingValue":
        try:
            raw = bytes.fromhex(value.strip())
        except ValueError as e:
            raise ValueError(f"Not a hex fingerprint: {value!r}") from e
        return cls(raw)

    @property
    def words(self) -> tuple[int, ...]:
        return struct.unpack(">8I", self.state)

    def hex(self) -> str:
        return self.state.hex()

    def __str__(self) -> str:
        return self.hex()


IV = ChainingValue.from_words(_IV_WORDS)


@dataclass(frozen=True)
class PaddedFile:
    """A byte string padded to whole SHA-256 blocks."""

    blocks: tuple[Block, ...]
    original_len: int

    @property
    def m(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class ChunkPlan:
    """Partition of ``m`` blocks into ``n`` chunks.

    ``boundaries[k - 1]`` holds the 1-based inclusive block range of chunk ``k``. Chunk 1 is the
    short one: it carries ``m - (n - 1) * chunk_len`` blocks, every other chunk ``chunk_len``.
    """

    m: int
    chunk_len: int
    n: int
    boundaries: tuple[BlockRange, ...]

    def size(self, k: int) -> int:
        first, last = self.range(k)
        return last - first + 1

    def range(self, k: int) -> BlockRange:
        if not 1 <= k <= self.n:
            raise ValueError(f"Chunk index {k} outside 1..{self.n}")
        return self.boundaries[k - 1]


@dataclass(frozen=True)
class Chunk:
    k: int
    blocks: tuple[Block, ...]


def _check_block(block: Block) -> None:
    if len(block) != BLOCK_SIZE:
        raise ValueError(f"Block must be {BLOCK_SIZE} bytes, got {len(block)}")


def pad_message(data: bytes) -> PaddedFile:
    """Applies standard SHA-256 padding and splits the result into blocks.

    Parameters:
    -----------
    data : bytes
        the unpadded file content, may be empty

    Returns:
    --------
    A PaddedFile whose blocks digest to the standard SHA-256 of ``data``.
    """
    length = len(data)
    padding = b"\x80" + b"\x00" * ((55 - length) % BLOCK_SIZE) + struct.pack(">Q", 8 * length)
    padded = bytes(data) + padding
    blocks = tuple(padded[i : i + BLOCK_SIZE] for i in range(0, len(padded), BLOCK_SIZE))
    return PaddedFile(blocks=blocks, original_len=length)


def unpad_message(blocks: Sequence[Block]) -> bytes:
    """Inverse of pad_message. Raises ValueError on malformed padding."""
    if not blocks:
        raise ValueError("No blocks to unpad")
    for block in blocks:
        _check_block(block)
    padded = b"".join(blocks)
    (bit_length,) = struct.unpack(">Q", padded[-8:])
    if bit_length % 8:
        raise ValueError("Embedded length is not a whole number of bytes")
    length = bit_length // 8
    if len(pad_message(b"\x00" * length).blocks) != len(blocks):
        raise ValueError("Embedded length does not match the block count")
    if padded[length] != 0x80 or any(padded[length + 1 : -8]):
        raise ValueError("Malformed padding")
    return padded[:length]


def compress(cv: ChainingValue, block: Block) -> ChainingValue:
    """One application of the SHA-256 compression function from an arbitrary chaining value."""
    _check_block(block)
    w = list(struct.unpack(">16I", block))
    for i in range(16, 64):
        x = w[i - 15]
        y = w[i - 2]
        s0 = ((x >> 7 | x << 25) ^ (x >> 18 | x << 14) ^ (x >> 3)) & _MASK
        s1 = ((y >> 17 | y << 15) ^ (y >> 19 | y << 13) ^ (y >> 10)) & _MASK
        w.append((w[i - 16] + s0 + w[i - 7] + s1) & _MASK)

    state = cv.words
    a, b, c, d, e, f, g, h = state
    for i in range(64):
        s1 = ((e >> 6 | e << 26) ^ (e >> 11 | e << 21) ^ (e >> 25 | e << 7)) & _MASK
        ch = (e & f) ^ (~e & g)
        t1 = (h + s1 + ch + _ROUND_CONSTANTS[i] + w[i]) & _MASK
        s0 = ((a >> 2 | a << 30) ^ (a >> 13 | a << 19) ^ (a >> 22 | a << 10)) & _MASK
        maj = (a & b) ^ (a & c) ^ (b & c)
        h, g, f, e = g, f, e, (d + t1) & _MASK
        d, c, b, a = c, b, a, (t1 + s0 + maj) & _MASK

    return ChainingValue.from_words(
        (x + y) & _MASK for x, y in zip(state, (a, b, c, d, e, f, g, h))
    )


def digest_blocks(cv: ChainingValue, blocks: Iterable[Block]) -> ChainingValue:
    """Left fold of compress over ``blocks`` in file order."""
    return reduce(compress, blocks, cv)


def partition_chunks(m: int, chunk_len: int) -> ChunkPlan:
    """Splits ``m`` blocks into ``ceil(m / chunk_len)`` chunks, the short chunk first.

    Parameters:
    -----------
    m : int
        number of padded blocks
    chunk_len : int
        blocks per chunk (CL)
    """
    if m < 1:
        raise ValueError("A chunk plan needs at least one block")
    if chunk_len < 1:
        raise ValueError("Chunk length must be positive")
    n = -(-m // chunk_len)
    boundaries = [(1, m - (n - 1) * chunk_len)]
    for k in range(2, n + 1):
        boundaries.append((m - (n - k + 1) * chunk_len + 1, m - (n - k) * chunk_len))
    return ChunkPlan(m=m, chunk_len=chunk_len, n=n, boundaries=tuple(boundaries))


def chunk_blocks(pf: PaddedFile, plan: ChunkPlan, k: int) -> Chunk:
    _check_geometry(pf, plan)
    first, last = plan.range(k)
    return Chunk(k=k, blocks=pf.blocks[first - 1 : last])


def _check_geometry(pf: PaddedFile, plan: ChunkPlan) -> None:
    if plan.m != pf.m:
        raise ValueError(f"Chunk plan covers {plan.m} blocks but the file has {pf.m}")


def compute_intermediate_hashes(
    pf: PaddedFile, plan: ChunkPlan, start: ChainingValue = IV
) -> tuple[ChainingValue, ...]:
    """Returns H_0..H_n where H_0 is ``start`` and H_k chains chunk k onto H_(k-1)."""
    _check_geometry(pf, plan)
    hashes = [start]
    for first, last in plan.boundaries:
        hashes.append(digest_blocks(hashes[-1], pf.blocks[first - 1 : last]))
    logging.debug("Computed %d intermediate hashes for %d blocks", len(hashes), pf.m)
    return tuple(hashes)


def verify_chunk(h_prev: ChainingValue, chunk: Chunk, h_expected: ChainingValue) -> bool:
    """True iff chaining ``chunk`` from ``h_prev`` lands on ``h_expected``."""
    try:
        if not chunk.blocks:
            return False
        return digest_blocks(h_prev, chunk.blocks) == h_expected
    except (TypeError, ValueError):
        logging.debug("Malformed chunk %s rejected", chunk.k, exc_info=True)
        return False


def last_block_proof(h_prev: ChainingValue, chunk: Chunk) -> tuple[ChainingValue, Block]:
    """Cleartext possession proof: the state before the last block of ``chunk`` and that block."""
    if not chunk.blocks:
        raise ValueError("Empty chunk has no last block")
    return digest_blocks(h_prev, chunk.blocks[:-1]), chunk.blocks[-1]


def fingerprint(data: bytes) -> ChainingValue:
    return ChainingValue(hashlib.sha256(data).digest())


def segment_plan(m: int, z: int, chunk_len: int = 1) -> tuple[BlockRange, ...]:
    """Block ranges of ``z`` segments, each but the last a whole number of chunks long.

    Segments 1..z-1 hold ceil(n/z) chunks, or floor(n/z) when that would leave the last
    segment empty.
    """
    if z < 1:
        raise ValueError("Segment count must be positive")
    if chunk_len < 1:
        raise ValueError("Chunk length must be positive")
    if z > m:
        raise ValueError(f"Cannot split {m} blocks into {z} segments")
    n = -(-m // chunk_len)
    if z > n:
        raise ValueError(f"Cannot split {n} chunks into {z} segments")
    size = chunk_len * -(-n // z)
    if m - (z - 1) * size < 1:
        size = chunk_len * (n // z)
    ranges = [((q - 1) * size + 1, q * size) for q in range(1, z)]
    ranges.append(((z - 1) * size + 1, m))
    return tuple(ranges)


def segment_fingerprint(
    pf: PaddedFile, z: int, chunk_len: int = 1
) -> tuple[ChainingValue, ...]:
    """Segment hashes H_1..H_z; H_(q-1) is the chaining start of segment q and H_z is H(F)."""
    hashes = []
    cv = IV
    for first, last in segment_plan(pf.m, z, chunk_len):
        cv = digest_blocks(cv, pf.blocks[first - 1 : last])
        hashes.append(cv)
    return tuple(hashes)
