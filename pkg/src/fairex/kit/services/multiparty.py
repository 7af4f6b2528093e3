import hashlib
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Mapping, Sequence

from py_ecc.bls import G2ProofOfPossession as bls

from ..hashchain import (
    IV,
    BlockRange,
    ChainingValue,
    PaddedFile,
    segment_fingerprint,
    segment_plan,
)
from ..protocol import Acknowledgment, PublicKey, generate_keypair, verify_signature
from ._default import ConfigDict, ServiceBase, config_value
from .arbiter import ArbiterError, ArbiterService, Session, Status, TransitionKind

BLS_SIGNATURE_SIZE = 96
ED25519_SIGNATURE_SIZE = 64


@dataclass(frozen=True)
class SegmentFingerprint:
    """Public identity of a file sold in ``z`` segments.

    Attributes:
    -----------
    hashes : tuple[ChainingValue]
        H_1..H_z, the chaining value at the end of each segment; H_z is H(F)
    ranges : tuple[tuple[int, int]]
        1-based inclusive block range of each segment
    chunk_len : int
        blocks per chunk inside every segment
    """

    hashes: tuple[ChainingValue, ...]
    ranges: tuple[BlockRange, ...]
    chunk_len: int = 1

    @classmethod
    def from_padded(cls, pf: PaddedFile, z: int, chunk_len: int = 1) -> "SegmentFingerprint":
        return cls(
            segment_fingerprint(pf, z, chunk_len), segment_plan(pf.m, z, chunk_len), chunk_len
        )

    @property
    def z(self) -> int:
        return len(self.hashes)

    @property
    def segment_size(self) -> int:
        first, last = self.ranges[0]
        return last - first + 1

    def blocks_in(self, q: int) -> int:
        first, last = self.ranges[q - 1]
        return last - first + 1

    def start(self, q: int) -> ChainingValue:
        """Chaining start of segment ``q``: IV, or the hash of the preceding segment."""
        if not 1 <= q <= self.z:
            raise ValueError(f"Segment index {q} outside 1..{self.z}")
        return IV if q == 1 else self.hashes[q - 2]

    def encode(self) -> bytes:
        return b"".join(h.state for h in self.hashes)


# request fields are tag (1 byte) | length (4 bytes, big-endian) | value, in tag order
_TAG_BUYER, _TAG_SELLER, _TAG_FINGERPRINT, _TAG_SEGMENT, _TAG_ID, _TAG_VALID = range(1, 7)


@dataclass(frozen=True)
class SegmentRequest:
    buyer: PublicKey
    seller: PublicKey
    fingerprint: tuple[ChainingValue, ...]
    segment: ChainingValue
    request_id: bytes | None = None
    valid_period: int | None = None

    def __post_init__(self) -> None:
        if self.segment not in self.fingerprint:
            raise ValueError("Segment hash is not part of the fingerprint")

    @property
    def q(self) -> int:
        return self.fingerprint.index(self.segment) + 1

    def encode(self) -> bytes:
        fields = [
            (_TAG_BUYER, self.buyer),
            (_TAG_SELLER, self.seller),
            (_TAG_FINGERPRINT, b"".join(h.state for h in self.fingerprint)),
            (_TAG_SEGMENT, self.segment.state),
        ]
        if self.request_id is not None:
            fields.append((_TAG_ID, self.request_id))
        if self.valid_period is not None:
            fields.append((_TAG_VALID, struct.pack(">Q", self.valid_period)))
        return b"".join(struct.pack(">BI", tag, len(value)) + value for tag, value in fields)

    @classmethod
    def decode(cls, data: bytes) -> "SegmentRequest":
        values: dict[int, bytes] = {}
        offset = 0
        last_tag = 0
        while offset < len(data):
            if offset + 5 > len(data):
                raise ValueError("Truncated request field header")
            tag, length = struct.unpack_from(">BI", data, offset)
            offset += 5
            if tag <= last_tag or tag > _TAG_VALID:
                raise ValueError(f"Unexpected request field tag {tag}")
            if offset + length > len(data):
                raise ValueError("Truncated request field")
            values[tag] = data[offset : offset + length]
            offset += length
            last_tag = tag
        missing = {_TAG_BUYER, _TAG_SELLER, _TAG_FINGERPRINT, _TAG_SEGMENT} - values.keys()
        if missing:
            raise ValueError(f"Request lacks fields {sorted(missing)}")
        raw = values[_TAG_FINGERPRINT]
        if not raw or len(raw) % 32:
            raise ValueError("Fingerprint field is not a list of 32-byte hashes")
        valid = values.get(_TAG_VALID)
        return cls(
            buyer=values[_TAG_BUYER],
            seller=values[_TAG_SELLER],
            fingerprint=tuple(ChainingValue(raw[i : i + 32]) for i in range(0, len(raw), 32)),
            segment=ChainingValue(values[_TAG_SEGMENT]),
            request_id=values.get(_TAG_ID),
            valid_period=struct.unpack(">Q", valid)[0] if valid is not None else None,
        )


def make_segment_request(
    buyer_pub: PublicKey,
    seller_pub: PublicKey,
    fingerprint: SegmentFingerprint,
    q: int,
    request_id: bytes | None = None,
    valid_period: int | None = None,
) -> SegmentRequest:
    if not 1 <= q <= fingerprint.z:
        raise ValueError(f"Segment index {q} outside 1..{fingerprint.z}")
    return SegmentRequest(
        buyer=buyer_pub,
        seller=seller_pub,
        fingerprint=fingerprint.hashes,
        segment=fingerprint.hashes[q - 1],
        request_id=request_id,
        valid_period=valid_period,
    )


class AggregateScheme(ABC):
    """Signatures by distinct signers over distinct messages, verifiable as one."""

    name: str

    @abstractmethod
    def keygen(self, seed: bytes) -> tuple[Any, bytes]:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def sign(self, secret: Any, message: bytes) -> bytes:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def aggregate(self, signatures: Sequence[bytes]) -> bytes:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def verify_aggregate(
        self, publics: Sequence[bytes], messages: Sequence[bytes], signature: bytes
    ) -> bool:
        raise NotImplementedError  # pragma: no cover


class BlsScheme(AggregateScheme):
    """BLS12-381 aggregation (proof-of-possession ciphersuite)."""

    name = "bls"

    def keygen(self, seed: bytes) -> tuple[int, bytes]:
        secret = bls.KeyGen(hashlib.sha256(seed).digest())
        return secret, bls.SkToPk(secret)

    def sign(self, secret: int, message: bytes) -> bytes:
        return bls.Sign(secret, message)

    def aggregate(self, signatures: Sequence[bytes]) -> bytes:
        if not signatures:
            raise ValueError("Nothing to aggregate")
        for signature in signatures:
            if len(signature) != BLS_SIGNATURE_SIZE:
                raise ValueError(f"BLS signatures are {BLS_SIGNATURE_SIZE} bytes")
        try:
            return bls.Aggregate(list(signatures))
        except Exception as e:
            raise ValueError("Malformed BLS signature") from e

    def verify_aggregate(self, publics, messages, signature) -> bool:
        if len(publics) != len(messages) or not publics:
            return False
        try:
            return bls.AggregateVerify(list(publics), list(messages), signature)
        except Exception:
            logging.debug("BLS aggregate verification failed", exc_info=True)
            return False


class ConcatScheme(AggregateScheme):
    """Concatenated Ed25519 signatures; same verify semantics without pairings."""

    name = "concat"

    def keygen(self, seed: bytes):
        return generate_keypair(seed)

    def sign(self, secret, message: bytes) -> bytes:
        return secret.sign(message)

    def aggregate(self, signatures: Sequence[bytes]) -> bytes:
        if not signatures:
            raise ValueError("Nothing to aggregate")
        for signature in signatures:
            if len(signature) != ED25519_SIGNATURE_SIZE:
                raise ValueError(f"Ed25519 signatures are {ED25519_SIGNATURE_SIZE} bytes")
        return b"".join(signatures)

    def verify_aggregate(self, publics, messages, signature) -> bool:
        size = ED25519_SIGNATURE_SIZE
        if len(publics) != len(messages) or not publics or len(signature) != size * len(publics):
            return False
        return all(
            verify_signature(public, signature[i * size : (i + 1) * size], message)
            for i, (public, message) in enumerate(zip(publics, messages))
        )


SCHEMES: dict[str, type[AggregateScheme]] = {"bls": BlsScheme, "concat": ConcatScheme}


def get_scheme(name: str) -> AggregateScheme:
    try:
        return SCHEMES[name]()
    except KeyError:
        raise ValueError(f"Unknown aggregate signature scheme {name!r}") from None


@dataclass(frozen=True)
class AggregateHandshake:
    requests: tuple[SegmentRequest, ...]
    signature: bytes


def sign_request(scheme: AggregateScheme, secret: Any, request: SegmentRequest) -> bytes:
    return scheme.sign(secret, request.encode())


def aggregate(
    scheme: AggregateScheme, requests: Sequence[SegmentRequest], signatures: Sequence[bytes]
) -> AggregateHandshake:
    if len(requests) != len(signatures):
        raise ValueError("One signature per request is required")
    sellers = [r.seller for r in requests]
    if len(set(sellers)) != len(sellers):
        raise ValueError("Every request must come from a distinct seller")
    return AggregateHandshake(tuple(requests), scheme.aggregate(signatures))


def verify_aggregate(
    scheme: AggregateScheme, handshake: AggregateHandshake, signing_keys: Sequence[bytes]
) -> bool:
    """True iff every seller signed its own request; ``signing_keys`` follow request order."""
    return scheme.verify_aggregate(
        list(signing_keys), [r.encode() for r in handshake.requests], handshake.signature
    )


def check_multiparty_deposits(
    utilities, z: int, price: int, seller_deposit: int, buyer_deposit: int | None = None
) -> bool:
    """Per-segment deposit conditions of a z-seller trade.

    ``utilities`` is a profile over segments (n = z); the drop of the seller curve at segment q is
    the share of the file value that segment carries. Each seller must stake at least what its
    segment is worth (share * price <= D_S / z) and the buyer at least the segment price.
    """
    if utilities.n != z:
        raise ValueError(f"Utility profile covers {utilities.n} segments, trade has {z}")
    if buyer_deposit is None:
        buyer_deposit = price
    per_seller = Fraction(seller_deposit, z)
    if Fraction(buyer_deposit, z) < Fraction(price, z):
        return False
    g = utilities.gS
    return all((g[q - 1] - g[q]) * price <= per_seller for q in range(1, z + 1))


@dataclass
class SellerPool:
    """Recyclable deposit of one seller and the segments it committed to serve."""

    seller: PublicKey
    signing_key: bytes
    total: int = 0
    locked: int = 0
    commitments: dict[ChainingValue, tuple[ChainingValue, ...]] = field(default_factory=dict)

    @property
    def unlocked(self) -> int:
        return self.total - self.locked


@dataclass(frozen=True)
class MultipartyTrade:
    id: str
    buyer: PublicKey
    sessions: tuple[str, ...]
    sellers: tuple[PublicKey, ...]
    tx_count: int = 1


class MultipartyService(ServiceBase):
    """Multi-seller extension: one buyer buys z segments from z sellers in a single handshake.

    Parameters:
    -----------
    config : dict or configparser.SectionProxy
        profile variables; ``aggregate_scheme`` selects ``bls`` (default) or ``concat``
    connect : bool
        opens the ledgers right away
    arbiter : ArbiterService
        arbiter holding the per-segment sessions, a private one is created when omitted
    """

    def __init__(
        self,
        config: ConfigDict | None = None,
        connect: bool = True,
        arbiter: ArbiterService | None = None,
    ) -> None:
        logging.info("Initializing multiparty...")
        self.scheme = get_scheme(config_value(config, "aggregate_scheme", "bls"))
        self.arbiter = arbiter or ArbiterService(config, connect=connect)
        self._pools: dict[PublicKey, SellerPool] | None = None
        self._trades: dict[str, MultipartyTrade] = {}
        self._released: set[str] = set()
        self.funding_tx_count = 0
        if connect:
            self.connect()

    def connect(self) -> "MultipartyService":
        self.arbiter.connect()
        if self._pools is None:
            self._pools = {}
        return self

    def info(self) -> str:
        pools = len(self._pools) if self._pools is not None else 0
        trades = len(self._trades)
        return f"multiparty: scheme={self.scheme.name}, {pools} sellers, {trades} trades"

    def get_profile(self) -> str:
        return self.arbiter.get_profile()

    def set_profile(self, profile_name: str) -> str:
        return self.arbiter.set_profile(profile_name)

    def close(self) -> None:
        self._pools = None
        self._trades = {}
        self._released = set()
        self.arbiter.close()

    def attach(self, arbiter: ArbiterService) -> None:
        """Keeps segment sessions on ``arbiter``; only allowed before the first trade."""
        if self._trades:
            raise RuntimeError("Cannot switch arbiters with trades in flight")
        self.arbiter = arbiter

    def _require_pools(self) -> dict[PublicKey, SellerPool]:
        if self._pools is None:
            raise RuntimeError("Multiparty service is not connected")
        return self._pools

    def pool(self, seller: PublicKey) -> SellerPool:
        try:
            return replace(self._require_pools()[seller])
        except KeyError:
            raise ArbiterError("Seller has no deposit pool") from None

    def trade(self, trade_id: str) -> MultipartyTrade:
        return self._trades[trade_id]

    def serve(
        self,
        seller: PublicKey,
        signing_key: bytes,
        deposit: int,
        commitments: Mapping[ChainingValue, Sequence[ChainingValue]] | None = None,
    ) -> SellerPool:
        """Seller funds its deposit pool and registers intermediate hashes per segment it serves.

        ``commitments`` maps a segment hash to H_0..H_n of that segment's chunks.
        """
        if deposit < 0:
            raise ValueError("Deposit cannot be negative")
        pools = self._require_pools()
        pool = pools.setdefault(seller, SellerPool(seller, signing_key))
        if pool.signing_key != signing_key:
            raise ArbiterError("Seller is registered with a different signing key")
        pool.total += deposit
        for segment, hashes in (commitments or {}).items():
            pool.commitments[segment] = tuple(hashes)
        self.funding_tx_count += 1
        logging.info("Seller pool funded: total=%d locked=%d", pool.total, pool.locked)
        return replace(pool)

    def open_multiparty(
        self,
        handshake: AggregateHandshake,
        fingerprint: SegmentFingerprint,
        price: int,
        buyer_deposit: int,
        seller_deposit: int,
        now: int = 0,
    ) -> MultipartyTrade:
        """Opens one arbiter session per segment, all or none.

        Each session trades one segment at ``price / z`` with deposits ``seller_deposit / z``
        and ``buyer_deposit / z``; the amounts must divide evenly.
        """
        pools = self._require_pools()
        z = fingerprint.z
        requests = handshake.requests
        if len(requests) != z:
            raise ValueError(f"Handshake carries {len(requests)} requests for {z} segments")
        if any(v % z for v in (price, buyer_deposit, seller_deposit)):
            raise ValueError(f"Price and deposits must be divisible by {z}")
        buyer = requests[0].buyer
        for q, request in enumerate(requests, start=1):
            if request.buyer != buyer or request.fingerprint != fingerprint.hashes:
                raise ValueError("Requests disagree on buyer or fingerprint")
            if request.q != q:
                raise ValueError(f"Request {q} asks for segment {request.q}")

        unknown = [r for r in requests if r.seller not in pools]
        if unknown:
            raise ArbiterError("Handshake names a seller without a deposit pool")
        signing_keys = [pools[r.seller].signing_key for r in requests]
        if not verify_aggregate(self.scheme, handshake, signing_keys):
            logging.warning("Aggregate signature rejected, no session opened")
            raise ArbiterError("Aggregate signature does not verify")

        share, deposit_s, deposit_b = price // z, seller_deposit // z, buyer_deposit // z
        plans = []
        for q, request in enumerate(requests, start=1):
            pool = pools[request.seller]
            if pool.unlocked < deposit_s:
                raise ArbiterError(f"Seller of segment {q} is underfunded")
            commitment = pool.commitments.get(request.segment)
            if commitment is None:
                raise ArbiterError(f"Seller of segment {q} has not committed to it")
            params = self.arbiter.make_params(
                fingerprint=request.segment,
                m=fingerprint.blocks_in(q),
                price=share,
                seller_pub=request.seller,
                buyer_pub=buyer,
                chunk_len=fingerprint.chunk_len,
                seller_deposit=deposit_s,
                buyer_deposit=deposit_b,
                start=fingerprint.start(q),
            )
            if (
                len(commitment) != params.n + 1
                or commitment[0] != params.start
                or commitment[-1] != params.fingerprint
            ):
                raise ArbiterError(f"Commitment for segment {q} does not match its geometry")
            if self.arbiter.is_open(buyer, request.seller, request.segment):
                raise ArbiterError(f"Segment {q} is already being traded")
            plans.append((params, commitment))

        sessions = []
        for (params, commitment), request in zip(plans, requests):
            pools[request.seller].locked += params.seller_deposit
            sessions.append(self.arbiter.open_funded(params, commitment, now).id)
        trade = MultipartyTrade(
            id=hashlib.sha256("".join(sessions).encode()).hexdigest()[:16],
            buyer=buyer,
            sessions=tuple(sessions),
            sellers=tuple(r.seller for r in requests),
        )
        self._trades[trade.id] = trade
        logging.info("Multiparty trade %s opened with %d sessions", trade.id, z)
        return trade

    def finalize_multiparty(
        self, trade: MultipartyTrade | str, acks: Mapping[int, Acknowledgment], now: int = 0
    ) -> MultipartyTrade:
        """Buyer settles every still-active segment with its final acknowledgment in one call.

        ``acks`` maps a segment index to the buyer's A_1 for that segment.
        """
        trade = self._trades[trade if isinstance(trade, str) else trade.id]
        for q, session_id in enumerate(trade.sessions, start=1):
            session = self.arbiter.get_session(session_id)
            if session.status == Status.ACTIVE and q in acks:
                self.arbiter.finalize(session_id, acks[q], now)
        trade = replace(trade, tx_count=trade.tx_count + 1)
        self._trades[trade.id] = trade
        self.sync(trade)
        return trade

    def sessions(self, trade: MultipartyTrade | str) -> list[Session]:
        trade = self._trades[trade if isinstance(trade, str) else trade.id]
        return [self.arbiter.get_session(s) for s in trade.sessions]

    def sync(self, trade: MultipartyTrade | str) -> None:
        """Releases deposits of settled sessions; honest ones return to the seller's pool."""
        pools = self._require_pools()
        for session in self.sessions(trade):
            if session.status != Status.SETTLED or session.id in self._released:
                continue
            pool = pools[session.params.seller_pub]
            deposit = session.params.seller_deposit
            pool.locked -= deposit
            if session.transition.kind != TransitionKind.HONEST_COMPLETE:
                pool.total -= deposit
            self._released.add(session.id)
            logging.debug("Released deposit of session %s", session.id)
