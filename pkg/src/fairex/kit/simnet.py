import hashlib
import heapq
import json
import logging
import os
import random
import re
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable, Sequence

from .game import UtilityProfile
from .hashchain import (
    Chunk,
    PaddedFile,
    digest_blocks,
    fingerprint,
    pad_message,
    unpad_message,
    verify_chunk,
)
from .protocol import (
    AckReceived,
    ArbiterUpdate,
    DisputeKind,
    Event,
    ExchangeParams,
    Finalize,
    PartyState,
    Phase,
    ProtocolViolation,
    Prove,
    Report,
    Role,
    SendAck,
    SendTransfer,
    Start,
    Timeout,
    TransferMsg,
    TransferReceived,
    buyer_step,
    generate_keypair,
    make_ack,
    new_buyer_state,
    new_seller_state,
    reassemble,
    seller_step,
)
from .services._default import ConfigDict
from .services.arbiter import ArbiterError, ArbiterService, Payout, Session, Status, Transition
from .services.multiparty import (
    MultipartyService,
    SegmentFingerprint,
    aggregate,
    make_segment_request,
    sign_request,
)

HONEST = "Honest"
SELLER_STRATEGIES = {
    HONEST,
    "AbortAtChunk",
    "WrongChunkAt",
    "OutOfOrderAt",
    "SellerFalseReportAt",
    "OfflineAt",
    "NoFileKnowledge",
}
BUYER_STRATEGIES = {HONEST, "FalseReportAt", "NoAckAt", "FalseAckAt", "OfflineAt", "ExtortAt"}
_TIMED = {"OfflineAt"}
_UNPARAMETERIZED = {HONEST, "NoFileKnowledge"}
_STRATEGY_RE = re.compile(r"^\s*(\w+)\s*(?:\(\s*(\d+)\s*\))?\s*$")


@dataclass(frozen=True)
class Strategy:
    """Behaviour of one party: honest, or a single deviation at chunk ``k`` / from ``time``."""

    kind: str = HONEST
    k: int | None = None
    time: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        match = _STRATEGY_RE.match(text or "")
        if not match:
            raise ValueError(f"Cannot parse strategy {text!r}")
        kind, arg = match.group(1), match.group(2)
        if kind in _UNPARAMETERIZED:
            if arg is not None:
                raise ValueError(f"{kind} takes no argument")
            return cls(kind)
        if arg is None:
            raise ValueError(f"{kind} needs an argument")
        if kind in _TIMED:
            return cls(kind, time=int(arg))
        return cls(kind, k=int(arg))

    @property
    def honest(self) -> bool:
        return self.kind == HONEST

    def validate(self, role: Role, n: int) -> None:
        allowed = SELLER_STRATEGIES if role == Role.SELLER else BUYER_STRATEGIES
        if self.kind not in allowed:
            raise ValueError(f"{self.kind} is not a {role.value} strategy")
        if self.kind in _TIMED:
            if self.time is None or self.time < 0:
                raise ValueError(f"{self.kind} needs a non-negative time")
            return
        if self.kind in _UNPARAMETERIZED:
            return
        if self.k is None:
            raise ValueError(f"{self.kind} needs a chunk index")
        upper = n - 1 if self.kind == "FalseAckAt" else n
        if self.kind == "OutOfOrderAt" and n < 2:
            raise ValueError("OutOfOrderAt needs at least two chunks")
        if not 1 <= self.k <= upper:
            raise ValueError(f"{self} needs 1 <= k <= {upper}")

    def __str__(self) -> str:
        if self.k is not None:
            return f"{self.kind}({self.k})"
        if self.time is not None:
            return f"{self.kind}({self.time})"
        return self.kind


@dataclass(frozen=True)
class Scenario:
    """Input of one deterministic run.

    ``sellers`` holds one strategy per segment. ``strict`` enforces cost <= price <= value.
    """

    name: str
    data: bytes
    price: int
    value: int
    cost: int
    seller_deposit: int | None = None
    buyer_deposit: int | None = None
    chunk_len: int = 1
    segments: int = 1
    max_timeout: int | None = None
    utilities: str = "linear"
    buyer: Strategy = Strategy()
    sellers: tuple[Strategy, ...] = (Strategy(),)
    seed: int = 0
    strict: bool = True

    def __post_init__(self) -> None:
        if self.seller_deposit is None:
            object.__setattr__(self, "seller_deposit", self.price)
        if self.buyer_deposit is None:
            object.__setattr__(self, "buyer_deposit", self.price)
        if len(self.sellers) == 1 and self.segments > 1:
            object.__setattr__(self, "sellers", self.sellers * self.segments)
        if len(self.sellers) != self.segments:
            raise ValueError(f"{len(self.sellers)} seller strategies for {self.segments} segments")
        if self.strict and not self.cost <= self.price <= self.value:
            raise ValueError("Scenario economics need cost <= price <= value")
        if self.price <= 0 or self.chunk_len < 1 or self.segments < 1:
            raise ValueError("Price, chunk length and segment count must be positive")

    @property
    def padded(self) -> PaddedFile:
        return pad_message(self.data)

    def chunk_counts(self) -> list[int]:
        """Chunk count of every segment (a single entry for a one-seller trade)."""
        pf = self.padded
        if self.segments == 1:
            return [-(-pf.m // self.chunk_len)]
        segments = SegmentFingerprint.from_padded(pf, self.segments, self.chunk_len)
        return [-(-segments.blocks_in(q) // self.chunk_len) for q in range(1, self.segments + 1)]

    def validate(self) -> None:
        counts = self.chunk_counts()
        z = self.segments
        if z > 1 and any(v % z for v in (self.price, self.seller_deposit, self.buyer_deposit)):
            raise ValueError(f"Price and deposits must be divisible by {z} segments")
        for strategy, n in zip(self.sellers, counts):
            strategy.validate(Role.SELLER, n)
        self.buyer.validate(Role.BUYER, min(counts))

    def honest_twin(self) -> "Scenario":
        return replace(self, name=f"{self.name}/honest", buyer=Strategy(), sellers=(Strategy(),))

    @classmethod
    def from_config(cls, config: ConfigParser, base_dir: str | None = None) -> "Scenario":
        """Builds a scenario from the INI schema documented in the README."""
        try:
            head = config["scenario"]
            economics = config["economics"]
        except KeyError as e:
            raise ValueError(f"Scenario lacks section {e}") from None
        missing = [key for key in ("price", "value") if key not in economics]
        if missing:
            raise ValueError(f"Scenario economics lack {', '.join(missing)}")
        seed = head.getint("seed", 0)
        file_section = config["file"] if config.has_section("file") else {}
        path = file_section.get("path")
        if path:
            if base_dir and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            with open(path, "rb") as f:
                data = f.read()
        else:
            length = int(file_section.get("length", 1024))
            data = random.Random(seed).randbytes(length)
        geometry = config["geometry"] if config.has_section("geometry") else {}
        strategies = config["strategies"] if config.has_section("strategies") else {}
        segments = int(geometry.get("segments", 1))
        default_seller = strategies.get("seller", HONEST)
        sellers = tuple(
            Strategy.parse(strategies.get(f"seller.{q}", default_seller))
            for q in range(1, segments + 1)
        )
        max_timeout = economics.get("max_timeout")
        deposits = {
            name: economics.getint(name) for name in ("seller_deposit", "buyer_deposit")
        }
        scenario = cls(
            name=head.get("name", "scenario"),
            data=data,
            price=economics.getint("price"),
            value=economics.getint("value"),
            cost=economics.getint("cost", 0),
            chunk_len=int(geometry.get("chunk_len", 1)),
            segments=segments,
            max_timeout=int(max_timeout) if max_timeout else None,
            utilities=economics.get("utilities", "linear"),
            buyer=Strategy.parse(strategies.get("buyer", HONEST)),
            sellers=sellers,
            seed=seed,
            strict=economics.getboolean("strict", True),
            **deposits,
        )
        scenario.validate()
        return scenario


def load_scenario(path: str) -> Scenario:
    config = ConfigParser()
    if not config.read(path):
        raise ValueError(f"Cannot read scenario file {path}")
    return Scenario.from_config(config, os.path.dirname(os.path.abspath(path)))


def _jsonl(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


@dataclass(frozen=True)
class TraceEvent:
    time: int
    actor: str
    action: str
    detail: str
    status: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "actor": self.actor,
            "action": self.action,
            "detail": self.detail,
            "status": self.status,
        }


@dataclass
class Trace:
    """Event log of one exchange plus its outcome."""

    scenario: str
    events: list[TraceEvent] = field(default_factory=list)
    session: Session | None = None
    transferred: int = 0
    checksum: str | None = None
    file_ok: bool = False
    utilities: tuple[Fraction, Fraction] | None = None

    @property
    def transition(self) -> Transition | None:
        return self.session.transition if self.session else None

    @property
    def payout(self) -> Payout | None:
        return self.session.payout if self.session else None

    @property
    def tx_count(self) -> int:
        return self.session.tx_count if self.session else 0

    @property
    def rounds(self) -> int:
        return sum(1 for e in self.events if e.action == "send_chunk")

    def summary(self) -> dict[str, Any]:
        payout = self.payout
        return {
            "type": "summary",
            "scenario": self.scenario,
            "transition": str(self.transition) if self.transition else None,
            "payout": (
                {"buyer": payout.to_buyer, "seller": payout.to_seller, "burned": payout.burned}
                if payout
                else None
            ),
            "tx_count": self.tx_count,
            "rounds": self.rounds,
            "transferred": self.transferred,
            "checksum": self.checksum,
            "file_ok": self.file_ok,
            "utilities": (
                {"buyer": str(self.utilities[0]), "seller": str(self.utilities[1])}
                if self.utilities
                else None
            ),
        }

    def to_jsonl(self) -> str:
        records = [dict(type="event", **e.to_dict()) for e in self.events]
        records.append(self.summary())
        return "".join(_jsonl(r) for r in records)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


@dataclass
class _Party:
    role: Role
    state: PartyState
    strategy: Strategy
    step: Callable[[PartyState, Event], tuple[PartyState, list]]
    generation: int = 0
    offline_from: int | None = None
    mute: bool = False

    def offline(self, now: int) -> bool:
        return self.offline_from is not None and now >= self.offline_from

    def waiting(self) -> bool:
        if self.role == Role.BUYER:
            return self.state.phase == Phase.TRANSFERRING
        return self.state.phase == Phase.AWAITING_ACK


def _corrupt(blocks: tuple[bytes, ...]) -> tuple[bytes, ...]:
    first = bytes([blocks[0][0] ^ 0x01]) + blocks[0][1:]
    return (first,) + blocks[1:]


class _Exchange:
    """Event loop of one two-party session already registered with the arbiter."""

    def __init__(
        self,
        arbiter: ArbiterService,
        session: Session,
        seller: PartyState,
        buyer: PartyState,
        seller_strategy: Strategy,
        buyer_strategy: Strategy,
        trace: Trace,
        actor_suffix: str = "",
        settle_offchain: bool = False,
    ) -> None:
        self.arbiter = arbiter
        self.session_id = session.id
        self.params = session.params
        self.parties = {
            Role.SELLER: _Party(Role.SELLER, seller, seller_strategy, seller_step),
            Role.BUYER: _Party(Role.BUYER, buyer, buyer_strategy, buyer_step),
        }
        for party in self.parties.values():
            if party.strategy.kind == "OfflineAt":
                party.offline_from = party.strategy.time
        self.trace = trace
        self.suffix = actor_suffix
        self.settle_offchain = settle_offchain
        self.final_ack = None
        self.delivered: set[int] = set()
        self.queue: list[tuple[int, int, str, Any, int]] = []
        self._seq = 0
        self.now = session.clock

    # bookkeeping

    def _status(self) -> str:
        return self.arbiter.get_session(self.session_id).status.value

    def _log(self, actor: str, action: str, detail: str = "") -> None:
        name = actor if actor == "arbiter" else f"{actor}{self.suffix}"
        self.trace.events.append(TraceEvent(self.now, name, action, detail, self._status()))

    def _push(self, time: int, target: str, event: Any, generation: int = -1) -> None:
        self._seq += 1
        heapq.heappush(self.queue, (time, self._seq, target, event, generation))

    def _arm_timer(self, party: _Party) -> None:
        if party.waiting():
            self._push(
                self.now + self.params.max_timeout, party.role.value, Timeout(), party.generation
            )

    # main loop

    def run(self) -> None:
        self._push(self.now, Role.SELLER.value, Start())
        self._arm_timer(self.parties[Role.BUYER])
        while self.queue:
            time, _, target, event, generation = heapq.heappop(self.queue)
            self.now = time
            if target == "deadline":
                self._deadline(event)
            else:
                self._deliver(self.parties[Role(target)], event, generation)

    def _deliver(self, party: _Party, event: Event, generation: int) -> None:
        if isinstance(event, Timeout):
            if generation != party.generation or not party.waiting() or party.mute:
                return
            if party.offline(self.now):
                return
        elif party.offline(self.now):
            self._log(party.role.value, "drop", type(event).__name__)
            if party.role == Role.BUYER and isinstance(event, TransferReceived):
                self._record_delivery(event.msg)
            return
        else:
            party.generation += 1

        try:
            state, actions = party.step(party.state, event)
        except ProtocolViolation as e:
            logging.warning("%s ignored event: %s", party.role.value, e)
            self._log(party.role.value, "violation", str(e))
            return

        if (
            party.role == Role.BUYER
            and isinstance(event, TransferReceived)
            and any(isinstance(a, SendAck) for a in actions)
        ):
            self.delivered.add(event.msg.k)

        state, actions = self._apply_strategy(party, event, state, actions)
        party.state = state
        if not isinstance(event, Timeout):
            self._arm_timer(party)
        self._perform(party, actions)

    def _record_delivery(self, msg: TransferMsg) -> None:
        """Counts chunk k as delivered once a correct copy reaches the buyer, read or not."""
        commitment = self.arbiter.get_session(self.session_id).commitment
        chunk = Chunk(msg.k, msg.blocks)
        if msg.h_prev == commitment[msg.k - 1] and verify_chunk(
            msg.h_prev, chunk, commitment[msg.k]
        ):
            self.delivered.add(msg.k)

    def _apply_strategy(self, party: _Party, event: Event, state: PartyState, actions: list):
        strategy = party.strategy
        kind, k = strategy.kind, strategy.k
        if strategy.honest or kind in ("OfflineAt", "NoFileKnowledge"):
            return state, actions

        if party.role == Role.SELLER:
            if kind == "SellerFalseReportAt" and isinstance(event, AckReceived):
                ack = event.ack
                if ack.k == k and any(isinstance(a, (SendTransfer, Finalize)) for a in actions):
                    self._log("seller", "deviate", str(strategy))
                    return replace(state, phase=Phase.DISPUTED), [
                        Report(k, DisputeKind.FALSE_ACK, ack)
                    ]
                return state, actions
            result = []
            for action in actions:
                if isinstance(action, SendTransfer) and action.msg.k == k:
                    self._log("seller", "deviate", str(strategy))
                    if kind == "AbortAtChunk":
                        party.mute = True
                        continue
                    if kind == "WrongChunkAt":
                        msg = replace(action.msg, blocks=_corrupt(action.msg.blocks))
                        action = SendTransfer(msg)
                    elif kind == "OutOfOrderAt":
                        j = k - 1 if k > 1 else 2
                        action = SendTransfer(
                            TransferMsg(j, state.chunks[j].blocks, state.commitment[j - 1])
                        )
                result.append(action)
            return state, result

        if not isinstance(event, TransferReceived) or not any(
            isinstance(a, SendAck) for a in actions
        ):
            return state, actions
        received = event.msg.k
        if kind in ("FalseReportAt", "ExtortAt") and received == k:
            if kind == "ExtortAt":
                self._log("buyer", "threat", f"chunk {k}")
            self._log("buyer", "deviate", str(strategy))
            return replace(state, phase=Phase.DISPUTED), [Report(k, DisputeKind.BUYER_REPORT)]
        if kind == "NoAckAt" and received == k:
            self._log("buyer", "deviate", str(strategy))
            party.offline_from = self.now
            return state, []
        if kind == "FalseAckAt" and received == k + 1:
            self._log("buyer", "deviate", str(strategy))
            params = self.params
            ack = make_ack(state.signing_key, params.fingerprint, k, params.seller_pub, params.n)
            return state, [SendAck(ack)]
        return state, actions

    def _perform(self, party: _Party, actions: list) -> None:
        role = party.role
        peer = Role.BUYER if role == Role.SELLER else Role.SELLER
        for action in actions:
            if isinstance(action, SendTransfer):
                self._log(role.value, "send_chunk", f"k={action.msg.k}")
                self._push(self.now + 1, peer.value, TransferReceived(action.msg))
            elif isinstance(action, SendAck):
                self._log(role.value, "ack", f"k={action.ack.k}")
                self._push(self.now + 1, peer.value, AckReceived(action.ack))
            elif isinstance(action, Report):
                self._report(role, action)
            elif isinstance(action, Prove):
                self._prove(role, action)
            elif isinstance(action, Finalize):
                self._finalize(role, action)

    # on-chain calls

    def _notify(self, update: ArbiterUpdate) -> None:
        for party in self.parties.values():
            self._push(self.now + 1, party.role.value, update)

    def _report(self, role: Role, action: Report) -> None:
        try:
            session = self.arbiter.report(
                self.session_id,
                role,
                action.k,
                action.evidence,
                now=self.now,
                delivered=action.k in self.delivered,
            )
        except ArbiterError as e:
            self._log(role.value, "rejected", str(e))
            return
        dispute = session.dispute
        self._log(role.value, "report", f"{dispute.kind.value} k={dispute.k}")
        self._push(dispute.deadline, "deadline", dispute.deadline)
        self._notify(ArbiterUpdate(k=dispute.k, respondent=dispute.respondent))

    def _prove(self, role: Role, action: Prove) -> None:
        try:
            self.arbiter.prove(self.session_id, role, action.block, action.digest, now=self.now)
        except ArbiterError as e:
            self._log(role.value, "proof_rejected", str(e))
            return
        self._log(role.value, "prove", f"k={action.k}")
        self._settled()

    def _finalize(self, role: Role, action: Finalize) -> None:
        if self.settle_offchain:
            self.final_ack = action.ack
            self._log(role.value, "final_ack", "k=1")
            return
        try:
            self.arbiter.finalize(self.session_id, action.ack, now=self.now)
        except ArbiterError as e:
            self._log(role.value, "rejected", str(e))
            return
        self._log(role.value, "finalize", "k=1")
        self._settled()

    def _deadline(self, deadline: int) -> None:
        session = self.arbiter.get_session(self.session_id)
        if session.status != Status.DISPUTE_OPEN or session.dispute.deadline != deadline:
            return
        self.arbiter.timeout(self.session_id, self.now)
        self._log(session.dispute.by.value, "timeout", f"k={session.dispute.k}")
        self._settled()

    def _settled(self) -> None:
        session = self.arbiter.get_session(self.session_id)
        self._log("arbiter", "settled", str(session.transition))
        self._notify(ArbiterUpdate(settled=True))


def _profile(scenario: Scenario, n: int) -> UtilityProfile:
    return UtilityProfile.from_name(scenario.utilities, n, scenario.seed)


def _seller_state(
    scenario: Scenario, strategy: Strategy, params: ExchangeParams, pf: PaddedFile, salt: str
) -> PartyState:
    if strategy.kind != "NoFileKnowledge":
        return new_seller_state(params, pf)
    # a seller without the data serves random bytes and commits to made-up hashes
    rng = random.Random(f"{scenario.seed}:{salt}:garbage")
    garbage = PaddedFile(
        tuple(rng.randbytes(len(b)) for b in pf.blocks), original_len=pf.original_len
    )
    fake_params = replace(params, fingerprint=digest_blocks(params.start, garbage.blocks))
    fake = new_seller_state(fake_params, garbage)
    commitment = fake.commitment[:-1] + (params.fingerprint,)
    return replace(fake, params=params, commitment=commitment)


class SimNet:
    """
    Deterministic discrete-event harness for exchanges between simulated parties.

    Every run gets a fresh arbiter built from ``config`` so that identical scenarios produce
    identical traces.

    Parameters:
    -----------
    config : dict or configparser.SectionProxy
        profile variables handed to the arbiter and multiparty services

    Methods:
    --------
    run_scenario(scenario) -> Trace
        Runs a single-seller exchange.
    run_matrix(scenarios) -> list[MatrixRow]
        Runs scenarios next to their honest twins and flags profitable deviations.
    run_multiparty(scenario) -> MultipartyTrace
        Runs a z-seller trade with one exchange per segment.
    """

    def __init__(self, config: ConfigDict | None = None) -> None:
        self.config = config

    def _arbiter(self, scenario: Scenario) -> ArbiterService:
        arbiter = ArbiterService(self.config, connect=True)
        arbiter.chunk_len = scenario.chunk_len
        if scenario.max_timeout is not None:
            arbiter.max_timeout = scenario.max_timeout
        return arbiter

    def run_scenario(self, scenario: Scenario) -> Trace:
        if scenario.segments != 1:
            raise ValueError("Use run_multiparty for scenarios with several segments")
        scenario.validate()
        logging.info("Running scenario %s", scenario.name)
        arbiter = self._arbiter(scenario)
        pf = scenario.padded
        buyer_key, buyer_pub = generate_keypair(f"{scenario.seed}:buyer")
        _, seller_pub = generate_keypair(f"{scenario.seed}:seller:1")
        params = arbiter.make_params(
            fingerprint=fingerprint(scenario.data),
            m=pf.m,
            price=scenario.price,
            seller_pub=seller_pub,
            buyer_pub=buyer_pub,
            seller_deposit=scenario.seller_deposit,
            buyer_deposit=scenario.buyer_deposit,
        )
        seller = _seller_state(scenario, scenario.sellers[0], params, pf, "1")
        trace = Trace(scenario.name)

        session = arbiter.set_parameters_and_pay(params, params.seller_deposit, seller.commitment)
        trace.events.append(TraceEvent(0, "seller", "open", session.id, session.status.value))
        session = arbiter.accept_parameters_and_pay(session, params.price + params.buyer_deposit)
        trace.events.append(TraceEvent(0, "buyer", "accept", session.id, session.status.value))

        buyer = new_buyer_state(params, buyer_key, session.commitment)
        exchange = _Exchange(
            arbiter, session, seller, buyer, scenario.sellers[0], scenario.buyer, trace
        )
        exchange.run()
        self._conclude(trace, exchange, scenario, params.n)
        return trace

    def _conclude(self, trace: Trace, exchange: _Exchange, scenario: Scenario, n: int) -> None:
        trace.session = exchange.arbiter.get_session(exchange.session_id)
        trace.transferred = len(exchange.delivered)
        buyer = exchange.parties[Role.BUYER].state
        if len(buyer.chunks) == n and all(k in buyer.chunks for k in range(1, n + 1)):
            try:
                data = reassemble(buyer)
            except ValueError:
                logging.warning("Buyer holds all chunks but padding is malformed")
            else:
                trace.checksum = hashlib.sha256(data).hexdigest()
                trace.file_ok = data == scenario.data
        payout = trace.payout
        if payout is not None:
            g = _profile(scenario, n)
            t = trace.transferred
            trace.utilities = (
                payout.to_buyer + g.gB[t] * scenario.value,
                payout.to_seller + g.gS[t] * scenario.cost,
            )
        else:
            logging.warning("Scenario %s ended without settlement", scenario.name)

    def run_matrix(self, scenarios: Sequence[Scenario]) -> list["MatrixRow"]:
        rows = []
        honest_cache: dict[Scenario, Trace] = {}
        for scenario in scenarios:
            trace = self.run_scenario(scenario)
            twin = scenario.honest_twin()
            key = replace(twin, name="")
            if key not in honest_cache:
                honest_cache[key] = self.run_scenario(twin)
            honest = honest_cache[key]
            rows.append(MatrixRow.compare(scenario, trace, honest))
        return rows

    def run_multiparty(self, scenario: Scenario) -> "MultipartyTrace":
        """z segments, z sellers, one aggregate handshake and one closing buyer call."""
        scenario.validate()
        arbiter = self._arbiter(scenario)
        service = MultipartyService(self.config, connect=True, arbiter=arbiter)
        z = scenario.segments
        pf = scenario.padded
        segments = SegmentFingerprint.from_padded(pf, z, scenario.chunk_len)
        buyer_key, buyer_pub = generate_keypair(f"{scenario.seed}:buyer")
        deposit_s = scenario.seller_deposit // z
        deposit_b = scenario.buyer_deposit // z

        sellers, requests, signatures = [], [], []
        for q in range(1, z + 1):
            _, seller_pub = generate_keypair(f"{scenario.seed}:seller:{q}")
            secret, signing_pub = service.scheme.keygen(f"{scenario.seed}:signer:{q}".encode())
            first, last = segments.ranges[q - 1]
            view = PaddedFile(pf.blocks[first - 1 : last], original_len=pf.original_len)
            params = arbiter.make_params(
                fingerprint=segments.hashes[q - 1],
                m=segments.blocks_in(q),
                price=scenario.price // z,
                seller_pub=seller_pub,
                buyer_pub=buyer_pub,
                seller_deposit=deposit_s,
                buyer_deposit=deposit_b,
                start=segments.start(q),
            )
            state = _seller_state(scenario, scenario.sellers[q - 1], params, view, str(q))
            service.serve(
                seller_pub, signing_pub, deposit_s, {segments.hashes[q - 1]: state.commitment}
            )
            request = make_segment_request(buyer_pub, seller_pub, segments, q)
            requests.append(request)
            signatures.append(sign_request(service.scheme, secret, request))
            sellers.append(state)

        handshake = aggregate(service.scheme, requests, signatures)
        trade = service.open_multiparty(
            handshake, segments, scenario.price, scenario.buyer_deposit, scenario.seller_deposit
        )
        result = MultipartyTrace(scenario.name, trade_id=trade.id)
        acks, end = {}, 0
        for q, (session_id, seller) in enumerate(zip(trade.sessions, sellers), start=1):
            session = arbiter.get_session(session_id)
            trace = Trace(f"{scenario.name}/segment-{q}")
            buyer = new_buyer_state(session.params, buyer_key, session.commitment)
            exchange = _Exchange(
                arbiter,
                session,
                seller,
                buyer,
                scenario.sellers[q - 1],
                scenario.buyer,
                trace,
                actor_suffix=f"{q}",
                settle_offchain=True,
            )
            exchange.run()
            if exchange.final_ack is not None:
                acks[q] = exchange.final_ack
            trace.transferred = len(exchange.delivered)
            end = max(end, exchange.now)
            result.segments.append(trace)
            result.buyer_states.append(exchange.parties[Role.BUYER].state)

        trade = service.finalize_multiparty(trade, acks, now=end)
        result.tx_count = trade.tx_count
        result.funding_tx_count = service.funding_tx_count
        for trace, session in zip(result.segments, service.sessions(trade)):
            trace.session = session
        result.pools = {q: service.pool(s) for q, s in enumerate(trade.sellers, start=1)}
        result.conclude(scenario.data)
        return result


@dataclass
class MultipartyTrace:
    scenario: str
    trade_id: str
    segments: list[Trace] = field(default_factory=list)
    buyer_states: list[PartyState] = field(default_factory=list)
    tx_count: int = 0
    funding_tx_count: int = 0
    pools: dict = field(default_factory=dict)
    checksum: str | None = None
    file_ok: bool = False

    @property
    def payouts(self) -> list[Payout | None]:
        return [t.payout for t in self.segments]

    def conclude(self, data: bytes) -> None:
        blocks = []
        for state in self.buyer_states:
            n = state.params.n
            if any(k not in state.chunks for k in range(1, n + 1)):
                return
            blocks.extend(b for k in range(1, n + 1) for b in state.chunks[k].blocks)
        try:
            assembled = unpad_message(blocks)
        except ValueError:
            return
        self.checksum = hashlib.sha256(assembled).hexdigest()
        self.file_ok = assembled == data

    def summary(self) -> dict[str, Any]:
        return {
            "type": "summary",
            "scenario": self.scenario,
            "trade": self.trade_id,
            "tx_count": self.tx_count,
            "funding_tx_count": self.funding_tx_count,
            "segments": [t.summary() for t in self.segments],
            "checksum": self.checksum,
            "file_ok": self.file_ok,
        }

    def to_jsonl(self) -> str:
        records = [dict(type="event", **e.to_dict()) for t in self.segments for e in t.events]
        records.append(self.summary())
        return "".join(_jsonl(r) for r in records)


@dataclass(frozen=True)
class MatrixRow:
    scenario: str
    deviator: Role | None
    transition: Transition | None
    payout: Payout | None
    utilities: tuple[Fraction, Fraction] | None
    honest_utility: Fraction | None
    deviation_utility: Fraction | None

    @property
    def profitable(self) -> bool:
        """The deviator ends up better off than playing honestly."""
        if self.deviation_utility is None or self.honest_utility is None:
            return False
        return self.deviation_utility > self.honest_utility

    @classmethod
    def compare(cls, scenario: Scenario, trace: Trace, honest: Trace) -> "MatrixRow":
        deviators = []
        if not scenario.buyer.honest:
            deviators.append(Role.BUYER)
        if any(not s.honest for s in scenario.sellers):
            deviators.append(Role.SELLER)
        deviator = deviators[0] if len(deviators) == 1 else None
        honest_utility = deviation_utility = None
        if deviator is not None and trace.utilities and honest.utilities:
            i = 0 if deviator == Role.BUYER else 1
            honest_utility = honest.utilities[i]
            deviation_utility = trace.utilities[i]
        return cls(
            scenario=scenario.name,
            deviator=deviator,
            transition=trace.transition,
            payout=trace.payout,
            utilities=trace.utilities,
            honest_utility=honest_utility,
            deviation_utility=deviation_utility,
        )


def run_scenario(scenario: Scenario, config: ConfigDict | None = None) -> Trace:
    return SimNet(config).run_scenario(scenario)


def run_matrix(scenarios: Sequence[Scenario], config: ConfigDict | None = None) -> list[MatrixRow]:
    return SimNet(config).run_matrix(scenarios)


def deviation_scenarios(base: Scenario) -> list[Scenario]:
    """Every single-party deviation the geometry allows, for use with run_matrix."""
    n = base.chunk_counts()[0]
    out = []
    seller_kinds = ["AbortAtChunk", "WrongChunkAt", "SellerFalseReportAt"]
    if n >= 2:
        seller_kinds.append("OutOfOrderAt")
    for kind in seller_kinds:
        for k in range(1, n + 1):
            out.append(replace(base, name=f"seller {kind}({k})", sellers=(Strategy(kind, k),)))
    no_file = Strategy("NoFileKnowledge")
    out.append(replace(base, name="seller NoFileKnowledge", sellers=(no_file,)))
    out.append(replace(base, name="seller OfflineAt(0)", sellers=(Strategy("OfflineAt", time=0),)))
    for kind in ("FalseReportAt", "NoAckAt", "ExtortAt"):
        for k in range(1, n + 1):
            out.append(replace(base, name=f"buyer {kind}({k})", buyer=Strategy(kind, k)))
    for k in range(1, n):
        out.append(replace(base, name=f"buyer FalseAckAt({k})", buyer=Strategy("FalseAckAt", k)))
    out.append(replace(base, name="buyer OfflineAt(0)", buyer=Strategy("OfflineAt", time=0)))
    return out


def format_matrix(rows: Sequence[MatrixRow]) -> str:
    head = ("scenario", "terminal", "payout b/s/burn", "dev", "honest")
    lines = [f"{head[0]:<30} {head[1]:<26} {head[2]:<18} {head[3]:>10} {head[4]:>10}"]
    for row in rows:
        payout = row.payout
        cells = f"{payout.to_buyer}/{payout.to_seller}/{payout.burned}" if payout else "-"
        dev = f"{float(row.deviation_utility):.2f}" if row.deviation_utility is not None else "-"
        hon = f"{float(row.honest_utility):.2f}" if row.honest_utility is not None else "-"
        flag = "  PROFITABLE" if row.profitable else ""
        lines.append(
            f"{row.scenario:<30} {str(row.transition or '-'):<26} {cells:<18} {dev:>10} {hon:>10}"
            + flag
        )
    return "\n".join(lines)
