import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from math import floor
from typing import Protocol

from ..hashchain import Block, ChainingValue, compress
from ..protocol import (
    Acknowledgment,
    DisputeKind,
    ExchangeParams,
    PublicKey,
    Role,
    verify_ack,
)
from ._default import ConfigDict, ServiceBase, config_value


class ArbiterError(RuntimeError):
    """An on-chain call was rejected; the session is unchanged."""


class Status(str, Enum):
    AWAIT_SELLER = "await_seller"
    AWAIT_BUYER = "await_buyer"
    ACTIVE = "active"
    DISPUTE_OPEN = "dispute_open"
    SETTLED = "settled"


class TransitionKind(str, Enum):
    HONEST_COMPLETE = "HonestComplete"
    SENT_REPORTED_PROVED = "SentReportedProved"
    SENT_REPORTED_TIMEOUT = "SentReportedTimeout"
    SENT_BUYER_TIMEOUT = "SentBuyerTimeout"
    UNSENT_REPORTED_PROVED = "UnsentReportedProved"
    UNSENT_REPORTED_TIMEOUT = "UnsentReportedTimeout"
    UNSENT_BUYER_TIMEOUT = "UnsentBuyerTimeout"
    FALSE_ACK_BUYER_TIMEOUT = "FalseAckBuyerTimeout"
    FALSE_ACK_BUYER_PROVED = "FalseAckBuyerProved"


@dataclass(frozen=True)
class Transition:
    """A terminal row of the payout table; ``k`` is the disputed chunk (1 when honest)."""

    kind: TransitionKind
    k: int = 1

    def __str__(self) -> str:
        if self.kind == TransitionKind.HONEST_COMPLETE:
            return self.kind.value
        return f"{self.kind.value}({self.k})"


@dataclass(frozen=True)
class Payout:
    to_buyer: int
    to_seller: int
    burned: int

    @property
    def total(self) -> int:
        return self.to_buyer + self.to_seller + self.burned


@dataclass(frozen=True)
class Dispute:
    by: Role
    k: int
    deadline: int
    kind: DisputeKind
    delivered: bool

    @property
    def respondent(self) -> Role | None:
        if self.kind == DisputeKind.BUYER_REPORT:
            return Role.SELLER
        if self.kind == DisputeKind.FALSE_ACK:
            return Role.BUYER
        return None


@dataclass(frozen=True)
class Session:
    """Escrow state of one trade as held by the arbiter.

    ``commitment`` is the seller-registered list H_0..H_n of intermediate hashes; disputes are
    judged against it. ``obligated`` is the party that owes the next call; ``clock`` is the time
    of the last accepted one.
    """

    id: str
    params: ExchangeParams
    commitment: tuple[ChainingValue, ...]
    status: Status
    escrow: int
    tx_count: int
    clock: int
    dispute: Dispute | None = None
    transition: Transition | None = None
    payout: Payout | None = None
    obligated: Role | None = None

    def to_text(self) -> str:
        """Canonical ``key=value`` rendering, one field per line in a fixed order."""
        dispute = "-"
        if self.dispute is not None:
            d = self.dispute
            dispute = f"{d.by.value}:{d.kind.value}:{d.k}:{d.deadline}"
        payout = "-"
        if self.payout is not None:
            p = self.payout
            payout = f"{p.to_buyer}/{p.to_seller}/{p.burned}"
        fields = [
            ("session", self.id),
            ("fingerprint", self.params.fingerprint.hex()),
            ("status", self.status.value),
            ("escrow", self.escrow),
            ("tx_count", self.tx_count),
            ("clock", self.clock),
            ("dispute", dispute),
            ("transition", self.transition or "-"),
            ("payout", payout),
        ]
        return "\n".join(f"{key}={value}" for key, value in fields)


class Terms(Protocol):
    """Anything carrying the monetary terms of a trade (ExchangeParams, GameConfig)."""

    n: int
    price: int
    seller_deposit: int
    buyer_deposit: int
    escrow: int


class PossessionProof(ABC):
    """Evidence that the prover knows the data behind one committed chaining value."""

    @abstractmethod
    def verify(self, expected: ChainingValue) -> bool:
        raise NotImplementedError  # pragma: no cover


@dataclass(frozen=True)
class CleartextProof(PossessionProof):
    """The chaining value before the last block of a chunk together with that block."""

    digest: ChainingValue
    block: Block

    def verify(self, expected: ChainingValue) -> bool:
        try:
            return compress(self.digest, self.block) == expected
        except (TypeError, ValueError):
            return False


def payout_formula(transition: Transition, params: Terms) -> tuple[Fraction, Fraction]:
    """Exact (buyer, seller) amounts of a payout-table row before rounding."""
    n = params.n
    k = transition.k
    if not 1 <= k <= n:
        raise ValueError(f"Chunk index {k} outside 1..{n}")
    price = Fraction(params.price)
    d_s = Fraction(params.seller_deposit)
    d_b = Fraction(params.buyer_deposit)
    kind = transition.kind

    if kind == TransitionKind.HONEST_COMPLETE:
        return d_b, d_s + price
    if kind in (TransitionKind.SENT_REPORTED_PROVED, TransitionKind.UNSENT_REPORTED_PROVED):
        return Fraction(k - 1, n) * price, Fraction(n - k + 1, n) * price
    if kind in (TransitionKind.SENT_REPORTED_TIMEOUT, TransitionKind.UNSENT_REPORTED_TIMEOUT):
        return price + d_b, Fraction(0)
    if kind in (TransitionKind.SENT_BUYER_TIMEOUT, TransitionKind.UNSENT_BUYER_TIMEOUT):
        return Fraction(0), Fraction(n - k, n) * price + d_s
    if kind == TransitionKind.FALSE_ACK_BUYER_TIMEOUT:
        return Fraction(0), d_s + d_b + price
    if kind == TransitionKind.FALSE_ACK_BUYER_PROVED:
        return Fraction(k, n) * price, Fraction(n - k, n) * price
    raise ValueError(f"Unknown transition {kind}")


def settle_table(transition: Transition, params: Terms) -> Payout:
    """Payout of a terminal row, rounded down to whole units; the remainder is burned."""
    buyer, seller = payout_formula(transition, params)
    to_buyer, to_seller = floor(buyer), floor(seller)
    return Payout(to_buyer, to_seller, params.escrow - to_buyer - to_seller)


def _proved_row(dispute: Dispute) -> TransitionKind:
    if dispute.kind == DisputeKind.FALSE_ACK:
        return TransitionKind.FALSE_ACK_BUYER_PROVED
    if dispute.delivered:
        return TransitionKind.SENT_REPORTED_PROVED
    return TransitionKind.UNSENT_REPORTED_PROVED


def _timeout_row(dispute: Dispute) -> TransitionKind:
    if dispute.kind == DisputeKind.FALSE_ACK:
        return TransitionKind.FALSE_ACK_BUYER_TIMEOUT
    if dispute.kind == DisputeKind.BUYER_REPORT:
        if dispute.delivered:
            return TransitionKind.SENT_REPORTED_TIMEOUT
        return TransitionKind.UNSENT_REPORTED_TIMEOUT
    if dispute.delivered:
        return TransitionKind.SENT_BUYER_TIMEOUT
    return TransitionKind.UNSENT_BUYER_TIMEOUT


class ArbiterService(ServiceBase):
    """Simulated escrow contract judging single-seller trades.

    Every successful call is one on-chain transaction and increments the session's
    ``tx_count``. Rejected calls raise ArbiterError and leave the session untouched.

    Parameters:
    -----------
    config : dict or configparser.SectionProxy
        profile variables; ``max_timeout`` and ``chunk_len`` are used as defaults by
        make_params(), FAIREX_MAX_TIMEOUT / FAIREX_CHUNK_LEN override them
    connect : bool
        opens the ledger right away
    """

    def __init__(self, config: ConfigDict | None = None, connect: bool = True) -> None:
        logging.info("Initializing arbiter...")
        self._profile = "default"
        if config is not None and getattr(config, "name", None):
            self._profile = config.name
        self.max_timeout = int(config_value(config, "max_timeout", 24 * 60 * 60))
        self.chunk_len = int(config_value(config, "chunk_len", 1))
        if self.max_timeout <= 0 or self.chunk_len <= 0:
            raise ValueError("max_timeout and chunk_len must be positive")
        self._ledger: dict[str, Session] | None = None
        self._opened = 0
        if connect:
            self.connect()

    def connect(self) -> "ArbiterService":
        """Opens an empty ledger (no-op when already open)."""
        if self._ledger is None:
            self._ledger = {}
            logging.debug("Arbiter ledger opened")
        return self

    def info(self) -> str:
        count = len(self._ledger) if self._ledger is not None else 0
        return f"arbiter: {count} sessions, max_timeout={self.max_timeout}"

    def get_profile(self) -> str:
        return self._profile

    def set_profile(self, profile_name: str) -> str:
        self._profile = profile_name
        return self._profile

    def close(self) -> None:
        self._ledger = None

    @property
    def sessions(self) -> dict[str, Session]:
        return dict(self._require_ledger())

    def get_session(self, session_id: str) -> Session:
        try:
            return self._require_ledger()[session_id]
        except KeyError:
            raise ArbiterError(f"Unknown session {session_id}") from None

    def make_params(
        self,
        fingerprint: ChainingValue,
        m: int,
        price: int,
        seller_pub: PublicKey,
        buyer_pub: PublicKey,
        **kwargs,
    ) -> ExchangeParams:
        """ExchangeParams with chunk length and timeout taken from the profile unless given."""
        kwargs.setdefault("chunk_len", self.chunk_len)
        kwargs.setdefault("max_timeout", self.max_timeout)
        return ExchangeParams(
            fingerprint=fingerprint,
            m=m,
            price=price,
            seller_pub=seller_pub,
            buyer_pub=buyer_pub,
            **kwargs,
        )

    def is_open(
        self, buyer_pub: PublicKey, seller_pub: PublicKey, fingerprint: ChainingValue
    ) -> bool:
        """True while a non-settled session exists for the triple."""
        return any(
            s.status != Status.SETTLED
            and s.params.buyer_pub == buyer_pub
            and s.params.seller_pub == seller_pub
            and s.params.fingerprint == fingerprint
            for s in self._require_ledger().values()
        )

    # contract calls

    def set_parameters_and_pay(
        self,
        params: ExchangeParams,
        deposit: int,
        commitment: tuple[ChainingValue, ...],
        now: int = 0,
    ) -> Session:
        """Seller opens a session with the agreed terms and pays D_S.

        Parameters:
        -----------
        params : ExchangeParams
            agreed terms
        deposit : int
            seller payment; at least the agreed D_S, any excess is not taken
        commitment : tuple[ChainingValue]
            intermediate hashes H_0..H_n, ending in the fingerprint
        now : int
            logical time of the call
        """
        self._check_new(params, commitment)
        if deposit < params.seller_deposit:
            raise self._reject(f"Seller deposit {deposit} below agreed {params.seller_deposit}")
        session = Session(
            id=self._next_id(params),
            params=params,
            commitment=tuple(commitment),
            status=Status.AWAIT_BUYER,
            escrow=params.seller_deposit,
            tx_count=1,
            clock=now,
            obligated=Role.BUYER,
        )
        return self._store(session)

    def accept_parameters_and_pay(
        self, session: Session | str, payment: int, now: int = 0
    ) -> Session:
        """Buyer accepts the terms and pays F_p + D_B."""
        session = self._current(session, now)
        if session.status != Status.AWAIT_BUYER:
            raise self._reject(f"Session {session.id} is {session.status.value}")
        params = session.params
        if payment != params.price + params.buyer_deposit:
            raise self._reject(f"Buyer must pay {params.price + params.buyer_deposit}")
        return self._store(
            replace(
                session,
                status=Status.ACTIVE,
                escrow=params.escrow,
                tx_count=session.tx_count + 1,
                clock=now,
                obligated=Role.SELLER,
            )
        )

    def open_funded(
        self, params: ExchangeParams, commitment: tuple[ChainingValue, ...], now: int = 0
    ) -> Session:
        """Creates an Active session whose escrow was paid by a shared handshake call."""
        self._check_new(params, commitment)
        session = Session(
            id=self._next_id(params),
            params=params,
            commitment=tuple(commitment),
            status=Status.ACTIVE,
            escrow=params.escrow,
            tx_count=1,
            clock=now,
            obligated=Role.SELLER,
        )
        return self._store(session)

    def report(
        self,
        session: Session | str,
        by: Role,
        k: int,
        evidence: Acknowledgment | None = None,
        now: int = 0,
        delivered: bool | None = None,
    ) -> Session:
        """Opens a dispute at chunk ``k``.

        A buyer report needs no evidence. A seller report is a false-ack claim when ``evidence``
        is a valid A_k, and a no-ack claim when it is the last received A_(k+1) (or absent for
        k = n). ``delivered`` records whether chunk k reached the buyer; it only selects the
        Sent/Unsent label of the resulting row.
        """
        session = self._current(session, now)
        if session.status == Status.DISPUTE_OPEN:
            raise self._reject(f"Session {session.id} already has an open dispute")
        if session.status != Status.ACTIVE:
            raise self._reject(f"Session {session.id} is {session.status.value}")
        params = session.params
        if not 1 <= k <= params.n:
            raise self._reject(f"Chunk index {k} outside 1..{params.n}")

        if by == Role.BUYER:
            kind = DisputeKind.BUYER_REPORT
            delivered = bool(delivered)
        elif evidence is None and k == params.n:
            kind = DisputeKind.NO_ACK
        elif evidence is not None and evidence.k in (k, k + 1) and self._valid_ack(
            session, evidence
        ):
            kind = DisputeKind.FALSE_ACK if evidence.k == k else DisputeKind.NO_ACK
        else:
            raise self._reject("Invalid acknowledgment evidence")
        if delivered is None:
            delivered = kind == DisputeKind.NO_ACK

        dispute = Dispute(
            by=by, k=k, deadline=now + params.max_timeout, kind=kind, delivered=delivered
        )
        return self._store(
            replace(
                session,
                status=Status.DISPUTE_OPEN,
                dispute=dispute,
                tx_count=session.tx_count + 1,
                clock=now,
                obligated=dispute.respondent,
            )
        )

    def prove(
        self,
        session: Session | str,
        by: Role,
        block: Block,
        digest: ChainingValue,
        now: int = 0,
    ) -> Session:
        """Answers an open dispute with a cleartext proof for the disputed chunk."""
        session = self._current(session, now)
        dispute = session.dispute
        if session.status != Status.DISPUTE_OPEN or dispute is None:
            raise self._reject(f"Session {session.id} has no open dispute")
        if dispute.respondent != by:
            raise self._reject(f"{by.value} is not the party challenged in {session.id}")
        if now >= dispute.deadline:
            raise self._reject(f"Dispute deadline {dispute.deadline} has passed")
        if not CleartextProof(digest, block).verify(session.commitment[dispute.k]):
            raise self._reject(f"Proof for chunk {dispute.k} does not match the commitment")
        return self._settle(session, Transition(_proved_row(dispute), dispute.k), now)

    def timeout(self, session: Session | str, now: int) -> Session:
        """Settles a session whose obligated party stayed silent for MAX_TIMEOUT.

        In a dispute the respondent had until the deadline. On an Active session the seller owes
        the next call (finalize or report) within MAX_TIMEOUT of the buyer's funding call; the
        arbiter has no record of chunk n, so the silence settles as UnsentReportedTimeout(n).
        """
        session = self._current(session, now)
        dispute = session.dispute
        if session.status == Status.DISPUTE_OPEN and dispute is not None:
            if now >= dispute.deadline:
                return self._settle(session, Transition(_timeout_row(dispute), dispute.k), now)
        elif session.status == Status.ACTIVE and session.obligated == Role.SELLER:
            if now >= session.clock + session.params.max_timeout:
                row = Transition(TransitionKind.UNSENT_REPORTED_TIMEOUT, session.params.n)
                return self._settle(session, row, now)
        raise self._reject(f"Nothing due on session {session.id} at {now}")

    def finalize(self, session: Session | str, ack: Acknowledgment, now: int = 0) -> Session:
        """Seller closes the trade with the buyer's acknowledgment of chunk 1."""
        session = self._current(session, now)
        if session.status != Status.ACTIVE:
            raise self._reject(f"Session {session.id} is {session.status.value}")
        if ack.k != 1 or not self._valid_ack(session, ack):
            raise self._reject("Invalid final acknowledgment")
        return self._settle(session, Transition(TransitionKind.HONEST_COMPLETE), now)

    # helpers

    def _require_ledger(self) -> dict[str, Session]:
        if self._ledger is None:
            raise RuntimeError("Arbiter is not connected")
        return self._ledger

    def _reject(self, message: str) -> ArbiterError:
        logging.warning("Arbiter rejected call: %s", message)
        return ArbiterError(message)

    def _next_id(self, params: ExchangeParams) -> str:
        self._opened += 1
        h = hashlib.sha256(
            params.buyer_pub
            + params.seller_pub
            + params.fingerprint.state
            + self._opened.to_bytes(8, "big")
        )
        return h.hexdigest()[:16]

    def _check_new(self, params: ExchangeParams, commitment: tuple[ChainingValue, ...]) -> None:
        if self.is_open(params.buyer_pub, params.seller_pub, params.fingerprint):
            raise self._reject("A session for this buyer, seller and fingerprint is open")
        if (
            len(commitment) != params.n + 1
            or commitment[0] != params.start
            or commitment[-1] != params.fingerprint
        ):
            raise self._reject("Commitment does not match the announced geometry")

    def _current(self, session: Session | str, now: int) -> Session:
        session_id = session if isinstance(session, str) else session.id
        current = self.get_session(session_id)
        if current.status == Status.SETTLED:
            raise self._reject(f"Session {session_id} is settled")
        if now < current.clock:
            raise self._reject(f"Call at {now} precedes session clock {current.clock}")
        return current

    def _valid_ack(self, session: Session, ack: Acknowledgment) -> bool:
        params = session.params
        return verify_ack(params.buyer_pub, ack, params.fingerprint, ack.k, params.seller_pub)

    def _settle(self, session: Session, transition: Transition, now: int) -> Session:
        payout = settle_table(transition, session.params)
        return self._store(
            replace(
                session,
                status=Status.SETTLED,
                transition=transition,
                payout=payout,
                tx_count=session.tx_count + 1,
                clock=now,
                obligated=None,
            )
        )

    def _store(self, session: Session) -> Session:
        self._require_ledger()[session.id] = session
        logging.info(
            "Session %s: %s (tx %d, t=%d)",
            session.id,
            session.transition or session.status.value,
            session.tx_count,
            session.clock,
        )
        return session
