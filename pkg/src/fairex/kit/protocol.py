"""Off-chain buyer and seller state machines of the chunk-wise exchange.

Both parties are pure step functions ``(state, event) -> (state, actions)``. The seller transmits
chunks from ``n`` down to ``1``, each together with the chaining value of the preceding chunk, and
waits for the buyer's signed acknowledgment before sending the next one.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TypeAlias

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .hashchain import (
    DIGEST_SIZE,
    IV,
    Block,
    ChainingValue,
    Chunk,
    PaddedFile,
    chunk_blocks,
    compute_intermediate_hashes,
    last_block_proof,
    partition_chunks,
    unpad_message,
    verify_chunk,
)

DEFAULT_MAX_TIMEOUT = 24 * 60 * 60
ACK_LABEL = b"FileBountyAck".ljust(16, b"\x00")
ACK_PAYLOAD_SIZE = len(ACK_LABEL) + 3 * DIGEST_SIZE

PublicKey: TypeAlias = bytes


class ProtocolViolation(RuntimeError):
    """An event arrived that is not legal in the current phase."""


class Role(str, Enum):
    BUYER = "buyer"
    SELLER = "seller"


class Phase(str, Enum):
    IDLE = "idle"
    TRANSFERRING = "transferring"
    AWAITING_ACK = "awaiting_ack"
    DISPUTED = "disputed"
    DONE = "done"
    ABORTED = "aborted"


class DisputeKind(str, Enum):
    """What a report claims.

    BUYER_REPORT: the seller did not deliver a valid chunk; the seller must prove possession.
    FALSE_ACK: the buyer acknowledged an undelivered chunk; the buyer must prove possession.
    NO_ACK: the buyer stopped acknowledging; settles by timeout only.
    """

    BUYER_REPORT = "buyer_report"
    FALSE_ACK = "false_ack"
    NO_ACK = "no_ack"


@dataclass(frozen=True)
class ExchangeParams:
    """Public terms of a single-seller trade.

    Parameters:
    -----------
    fingerprint : ChainingValue
        target hash of the transfer, H(F) or a segment hash
    m : int
        number of padded blocks
    chunk_len : int
        blocks per chunk (CL)
    price : int
        F_p in integer monetary units
    seller_pub, buyer_pub : bytes
        raw public keys of the parties
    seller_deposit, buyer_deposit : int
        D_S and D_B, both default to ``price``
    max_timeout : int
        dispute window in logical ticks, defaults to 24 hours of seconds
    start : ChainingValue
        chaining value the first chunk is absorbed from (IV unless a segment)
    """

    fingerprint: ChainingValue
    m: int
    chunk_len: int
    price: int
    seller_pub: PublicKey
    buyer_pub: PublicKey
    seller_deposit: int | None = None
    buyer_deposit: int | None = None
    max_timeout: int = DEFAULT_MAX_TIMEOUT
    start: ChainingValue = IV

    def __post_init__(self) -> None:
        if self.seller_deposit is None:
            object.__setattr__(self, "seller_deposit", self.price)
        if self.buyer_deposit is None:
            object.__setattr__(self, "buyer_deposit", self.price)
        if self.price <= 0:
            raise ValueError("File price must be positive")
        if self.seller_deposit < 0 or self.buyer_deposit < 0:
            raise ValueError("Deposits cannot be negative")
        if self.max_timeout <= 0:
            raise ValueError("MAX_TIMEOUT must be positive")
        if self.m < 1 or self.chunk_len < 1:
            raise ValueError("Geometry needs at least one block and a positive chunk length")

    @property
    def n(self) -> int:
        return -(-self.m // self.chunk_len)

    @property
    def escrow(self) -> int:
        return self.price + self.seller_deposit + self.buyer_deposit


@dataclass(frozen=True)
class TransferMsg:
    k: int
    blocks: tuple[Block, ...]
    h_prev: ChainingValue


@dataclass(frozen=True)
class Acknowledgment:
    k: int
    payload: bytes
    signature: bytes


# Events


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class AckReceived:
    ack: Acknowledgment


@dataclass(frozen=True)
class TransferReceived:
    msg: TransferMsg


@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class ArbiterUpdate:
    """Arbiter status as seen by a party: an open dispute at ``k`` or the final settlement."""

    k: int | None = None
    respondent: Role | None = None
    settled: bool = False


Event: TypeAlias = Start | AckReceived | TransferReceived | Timeout | ArbiterUpdate


# Actions


@dataclass(frozen=True)
class SendTransfer:
    msg: TransferMsg


@dataclass(frozen=True)
class SendAck:
    ack: Acknowledgment


@dataclass(frozen=True)
class Report:
    k: int
    kind: DisputeKind
    evidence: Acknowledgment | None = None


@dataclass(frozen=True)
class Prove:
    k: int
    digest: ChainingValue
    block: Block


@dataclass(frozen=True)
class Finalize:
    ack: Acknowledgment


Action: TypeAlias = SendTransfer | SendAck | Report | Prove | Finalize


@dataclass(frozen=True)
class PartyState:
    """State of one party.

    The seller holds every chunk and the intermediate hashes; the buyer holds the chunks it
    accepted (``chunks``), the seller-supplied predecessor hashes (``prev_hashes``) and the
    expectation for the next chunk.
    """

    role: Role
    params: ExchangeParams
    phase: Phase
    next_k: int
    chunks: dict[int, Chunk] = field(default_factory=dict)
    prev_hashes: dict[int, ChainingValue] = field(default_factory=dict)
    acks: tuple[Acknowledgment, ...] = ()
    expected: ChainingValue | None = None
    commitment: tuple[ChainingValue, ...] | None = None
    signing_key: Ed25519PrivateKey | None = field(default=None, repr=False, compare=False)


# Keys and acknowledgments


def generate_keypair(seed: bytes | str) -> tuple[Ed25519PrivateKey, PublicKey]:
    """Deterministic Ed25519 key pair derived from ``seed``."""
    if isinstance(seed, str):
        seed = seed.encode()
    key = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
    return key, public_bytes(key)


def public_bytes(key: Ed25519PrivateKey) -> PublicKey:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public_key: PublicKey, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def encode_ack_payload(fingerprint: ChainingValue, k: int, seller_pub: PublicKey) -> bytes:
    """label (16) | H(F) (32) | k big-endian (32) | seller key left-padded (32)"""
    if k < 0 or k.bit_length() > 8 * DIGEST_SIZE:
        raise ValueError(f"Chunk index {k} does not fit the payload")
    if len(seller_pub) > DIGEST_SIZE:
        raise ValueError(f"Seller key longer than {DIGEST_SIZE} bytes")
    return (
        ACK_LABEL
        + fingerprint.state
        + k.to_bytes(DIGEST_SIZE, "big")
        + seller_pub.rjust(DIGEST_SIZE, b"\x00")
    )


def make_ack(
    signing_key: Ed25519PrivateKey,
    fingerprint: ChainingValue,
    k: int,
    seller_pub: PublicKey,
    n: int,
) -> Acknowledgment:
    if not 1 <= k <= n:
        raise ValueError(f"Chunk index {k} outside 1..{n}")
    payload = encode_ack_payload(fingerprint, k, seller_pub)
    return Acknowledgment(k=k, payload=payload, signature=signing_key.sign(payload))


def verify_ack(
    buyer_pub: PublicKey,
    ack: Acknowledgment,
    fingerprint: ChainingValue,
    k: int,
    seller_pub: PublicKey,
) -> bool:
    try:
        expected = encode_ack_payload(fingerprint, k, seller_pub)
    except ValueError:
        return False
    if ack.k != k or ack.payload != expected:
        return False
    return verify_signature(buyer_pub, ack.signature, ack.payload)


# State machines


def new_seller_state(params: ExchangeParams, pf: PaddedFile) -> PartyState:
    plan = partition_chunks(pf.m, params.chunk_len)
    if plan.m != params.m:
        raise ValueError(f"File has {pf.m} blocks, parameters announce {params.m}")
    hashes = compute_intermediate_hashes(pf, plan, params.start)
    if hashes[-1] != params.fingerprint:
        raise ValueError("File does not match the announced fingerprint")
    chunks = {k: chunk_blocks(pf, plan, k) for k in range(1, plan.n + 1)}
    return PartyState(
        role=Role.SELLER,
        params=params,
        phase=Phase.IDLE,
        next_k=plan.n,
        chunks=chunks,
        commitment=hashes,
    )


def new_buyer_state(
    params: ExchangeParams,
    signing_key: Ed25519PrivateKey,
    commitment: tuple[ChainingValue, ...] | None = None,
) -> PartyState:
    if commitment is not None:
        if len(commitment) != params.n + 1 or commitment[-1] != params.fingerprint:
            raise ValueError("Commitment does not end in the announced fingerprint")
    return PartyState(
        role=Role.BUYER,
        params=params,
        phase=Phase.TRANSFERRING,
        next_k=params.n,
        expected=params.fingerprint,
        commitment=commitment,
        signing_key=signing_key,
    )


def _transfer(state: PartyState, k: int) -> TransferMsg:
    return TransferMsg(k=k, blocks=state.chunks[k].blocks, h_prev=state.commitment[k - 1])


def _after_settlement(state: PartyState) -> tuple[PartyState, list[Action]]:
    phase = Phase.DONE if state.phase == Phase.DONE else Phase.ABORTED
    return replace(state, phase=phase), []


def seller_step(state: PartyState, event: Event) -> tuple[PartyState, list[Action]]:
    """Honest seller policy."""
    params = state.params
    k = state.next_k

    if isinstance(event, Start):
        if state.phase != Phase.IDLE:
            raise ProtocolViolation(f"Seller already started ({state.phase.value})")
        logging.debug("Seller starts transfer at chunk %d", k)
        return replace(state, phase=Phase.AWAITING_ACK), [SendTransfer(_transfer(state, k))]

    if isinstance(event, AckReceived):
        if state.phase != Phase.AWAITING_ACK:
            raise ProtocolViolation(f"Acknowledgment not expected in phase {state.phase.value}")
        ack = event.ack
        valid = 1 <= ack.k <= params.n and verify_ack(
            params.buyer_pub, ack, params.fingerprint, ack.k, params.seller_pub
        )
        if valid and ack.k == k:
            state = replace(state, acks=state.acks + (ack,))
            if k == 1:
                return replace(state, phase=Phase.DONE), [Finalize(ack)]
            return replace(state, next_k=k - 1), [SendTransfer(_transfer(state, k - 1))]
        if valid and ack.k > k:
            logging.debug("Seller ignores stale acknowledgment %d", ack.k)
            return state, []
        if valid:
            logging.debug("Buyer acknowledged unsent chunk %d", ack.k)
            return replace(state, phase=Phase.DISPUTED), [
                Report(ack.k, DisputeKind.FALSE_ACK, ack)
            ]
        logging.debug("Invalid acknowledgment for chunk %d", k)
        return replace(state, phase=Phase.DISPUTED), [_no_ack_report(state)]

    if isinstance(event, Timeout):
        if state.phase != Phase.AWAITING_ACK:
            raise ProtocolViolation(f"Seller has nothing pending in phase {state.phase.value}")
        return replace(state, phase=Phase.DISPUTED), [_no_ack_report(state)]

    if isinstance(event, ArbiterUpdate):
        if event.settled:
            return _after_settlement(state)
        state = replace(state, phase=Phase.DISPUTED)
        if event.respondent == Role.SELLER:
            digest, block = last_block_proof(
                state.commitment[event.k - 1], state.chunks[event.k]
            )
            return state, [Prove(event.k, digest, block)]
        return state, []

    raise ProtocolViolation(f"Seller cannot handle {type(event).__name__}")


def _no_ack_report(state: PartyState) -> Report:
    last = state.acks[-1] if state.acks else None
    return Report(state.next_k, DisputeKind.NO_ACK, last)


def _accepts(state: PartyState, msg: TransferMsg) -> bool:
    params = state.params
    k = state.next_k
    if msg.k != k:
        logging.debug("Buyer expected chunk %d, got %d", k, msg.k)
        return False
    plan = partition_chunks(params.m, params.chunk_len)
    if len(msg.blocks) != plan.size(k):
        return False
    if k == 1 and msg.h_prev != params.start:
        return False
    if state.commitment is not None and msg.h_prev != state.commitment[k - 1]:
        return False
    return verify_chunk(msg.h_prev, Chunk(k, msg.blocks), state.expected)


def buyer_step(state: PartyState, event: Event) -> tuple[PartyState, list[Action]]:
    """Honest buyer policy."""
    params = state.params
    k = state.next_k

    if isinstance(event, TransferReceived):
        if state.phase != Phase.TRANSFERRING:
            raise ProtocolViolation(f"Chunk not expected in phase {state.phase.value}")
        msg = event.msg
        if not _accepts(state, msg):
            return replace(state, phase=Phase.DISPUTED), [Report(k, DisputeKind.BUYER_REPORT)]
        ack = make_ack(state.signing_key, params.fingerprint, k, params.seller_pub, params.n)
        state = replace(
            state,
            chunks={**state.chunks, k: Chunk(k, msg.blocks)},
            prev_hashes={**state.prev_hashes, k: msg.h_prev},
            expected=msg.h_prev,
            acks=state.acks + (ack,),
        )
        if k == 1:
            return replace(state, phase=Phase.DONE), [SendAck(ack)]
        return replace(state, next_k=k - 1), [SendAck(ack)]

    if isinstance(event, Timeout):
        if state.phase != Phase.TRANSFERRING:
            raise ProtocolViolation(f"Buyer has nothing pending in phase {state.phase.value}")
        return replace(state, phase=Phase.DISPUTED), [Report(k, DisputeKind.BUYER_REPORT)]

    if isinstance(event, ArbiterUpdate):
        if event.settled:
            return _after_settlement(state)
        state = replace(state, phase=Phase.DISPUTED)
        if event.respondent == Role.BUYER and event.k in state.chunks:
            digest, block = last_block_proof(
                state.prev_hashes[event.k], state.chunks[event.k]
            )
            return state, [Prove(event.k, digest, block)]
        return state, []

    raise ProtocolViolation(f"Buyer cannot handle {type(event).__name__}")


def reassemble(state: PartyState) -> bytes:
    """Original file bytes from a buyer holding every chunk."""
    n = state.params.n
    missing = [k for k in range(1, n + 1) if k not in state.chunks]
    if missing:
        raise ValueError(f"Missing chunks {missing}")
    return unpad_message([b for k in range(1, n + 1) for b in state.chunks[k].blocks])
