import logging
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairex.kit.hashchain import IV, compress, fingerprint, last_block_proof
from fairex.kit.protocol import ExchangeParams, Role, make_ack, new_seller_state
from fairex.kit.services.arbiter import (
    ArbiterError,
    ArbiterService,
    CleartextProof,
    Status,
    Transition,
    TransitionKind,
    payout_formula,
    settle_table,
)

TK = TransitionKind


@pytest.fixture
def params(arbiter, data, padded, seller_keys, buyer_keys):
    return arbiter.make_params(
        fingerprint=fingerprint(data),
        m=padded.m,
        price=100,
        seller_pub=seller_keys[1],
        buyer_pub=buyer_keys[1],
    )


@pytest.fixture
def seller_state(params, padded):
    return new_seller_state(params, padded)


@pytest.fixture
def session(arbiter, params, seller_state):
    opened = arbiter.set_parameters_and_pay(params, 100, seller_state.commitment)
    return arbiter.accept_parameters_and_pay(opened, 200)


@pytest.fixture
def ack(params, buyer_keys):
    def make(k):
        return make_ack(buyer_keys[0], params.fingerprint, k, params.seller_pub, params.n)

    return make


def proof_for(state, k):
    return last_block_proof(state.commitment[k - 1], state.chunks[k])


ROWS_N4_K2 = [
    (TK.HONEST_COMPLETE, 100, 200, 0),
    (TK.SENT_REPORTED_PROVED, 25, 75, 200),
    (TK.UNSENT_REPORTED_PROVED, 25, 75, 200),
    (TK.SENT_REPORTED_TIMEOUT, 200, 0, 100),
    (TK.UNSENT_REPORTED_TIMEOUT, 200, 0, 100),
    (TK.SENT_BUYER_TIMEOUT, 0, 150, 150),
    (TK.UNSENT_BUYER_TIMEOUT, 0, 150, 150),
    (TK.FALSE_ACK_BUYER_TIMEOUT, 0, 300, 0),
    (TK.FALSE_ACK_BUYER_PROVED, 50, 50, 200),
]


@pytest.mark.parametrize("kind, buyer, seller, burned", ROWS_N4_K2)
def test_payout_rows(params, kind, buyer, seller, burned):
    payout = settle_table(Transition(kind, 2), params)
    assert (payout.to_buyer, payout.to_seller, payout.burned) == (buyer, seller, burned)


def test_amounts_round_down(params):
    terms = ExchangeParams(
        fingerprint=params.fingerprint,
        m=3,
        chunk_len=1,
        price=100,
        seller_pub=params.seller_pub,
        buyer_pub=params.buyer_pub,
    )
    transition = Transition(TK.UNSENT_REPORTED_PROVED, 2)
    assert payout_formula(transition, terms) == (Fraction(100, 3), Fraction(200, 3))
    payout = settle_table(transition, terms)
    assert (payout.to_buyer, payout.to_seller, payout.burned) == (33, 66, 201)


ROW_FORMULAS = {
    TK.HONEST_COMPLETE: lambda n, k, F, S, B: (B, S + F),
    TK.SENT_REPORTED_PROVED: lambda n, k, F, S, B: (
        Fraction(k - 1, n) * F,
        Fraction(n - k + 1, n) * F,
    ),
    TK.SENT_REPORTED_TIMEOUT: lambda n, k, F, S, B: (F + B, 0),
    TK.SENT_BUYER_TIMEOUT: lambda n, k, F, S, B: (0, Fraction(n - k, n) * F + S),
    TK.FALSE_ACK_BUYER_TIMEOUT: lambda n, k, F, S, B: (0, S + B + F),
    TK.FALSE_ACK_BUYER_PROVED: lambda n, k, F, S, B: (Fraction(k, n) * F, Fraction(n - k, n) * F),
}
ROW_FORMULAS[TK.UNSENT_REPORTED_PROVED] = ROW_FORMULAS[TK.SENT_REPORTED_PROVED]
ROW_FORMULAS[TK.UNSENT_REPORTED_TIMEOUT] = ROW_FORMULAS[TK.SENT_REPORTED_TIMEOUT]
ROW_FORMULAS[TK.UNSENT_BUYER_TIMEOUT] = ROW_FORMULAS[TK.SENT_BUYER_TIMEOUT]


@pytest.mark.parametrize("n", range(1, 9))
def test_rows_match_formulas(n):
    for k in range(1, n + 1):
        terms = ExchangeParams(
            fingerprint=IV,
            m=n,
            chunk_len=1,
            price=100,
            seller_pub=b"\x01" * 32,
            buyer_pub=b"\x02" * 32,
            seller_deposit=70,
            buyer_deposit=130,
        )
        for kind, formula in ROW_FORMULAS.items():
            assert payout_formula(Transition(kind, k), terms) == formula(n, k, 100, 70, 130)


def test_row_index_out_of_range(params):
    with pytest.raises(ValueError):
        settle_table(Transition(TK.SENT_REPORTED_PROVED, 5), params)


@settings(max_examples=10_000, deadline=None)
@given(
    n=st.integers(1, 50),
    k_seed=st.integers(0, 10_000),
    price=st.integers(1, 10**9),
    seller_deposit=st.integers(0, 10**9),
    buyer_deposit=st.integers(0, 10**9),
    kind=st.sampled_from(list(TK)),
)
def test_escrow_is_conserved(n, k_seed, price, seller_deposit, buyer_deposit, kind):
    terms = ExchangeParams(
        fingerprint=IV,
        m=n,
        chunk_len=1,
        price=price,
        seller_pub=b"\x01" * 32,
        buyer_pub=b"\x02" * 32,
        seller_deposit=seller_deposit,
        buyer_deposit=buyer_deposit,
    )
    payout = settle_table(Transition(kind, 1 + k_seed % n), terms)
    assert payout.total == terms.escrow
    assert min(payout.to_buyer, payout.to_seller, payout.burned) >= 0


def test_honest_session_takes_three_calls(arbiter, session, ack):
    assert session.status == Status.ACTIVE
    assert session.escrow == 300
    assert session.tx_count == 2
    final = arbiter.finalize(session, ack(1), now=8)
    assert final.status == Status.SETTLED
    assert final.transition == Transition(TK.HONEST_COMPLETE)
    assert final.tx_count == 3
    assert (final.payout.to_buyer, final.payout.to_seller) == (100, 200)


def test_buyer_report_answered_by_proof(arbiter, session, seller_state):
    disputed = arbiter.report(session, Role.BUYER, 3, now=10)
    assert disputed.status == Status.DISPUTE_OPEN
    assert disputed.dispute.deadline == 10 + arbiter.max_timeout
    assert disputed.dispute.respondent == Role.SELLER
    digest, block = proof_for(seller_state, 3)
    settled = arbiter.prove(session, Role.SELLER, block, digest, now=11)
    assert settled.transition == Transition(TK.UNSENT_REPORTED_PROVED, 3)
    assert settled.tx_count == 4


def test_false_buyer_report_is_labelled_sent(arbiter, session, seller_state):
    arbiter.report(session, Role.BUYER, 3, now=10, delivered=True)
    digest, block = proof_for(seller_state, 3)
    settled = arbiter.prove(session, Role.SELLER, block, digest, now=11)
    assert settled.transition.kind == TK.SENT_REPORTED_PROVED


def test_buyer_report_times_out(arbiter, session):
    arbiter.report(session, Role.BUYER, 2, now=0)
    with pytest.raises(ArbiterError):
        arbiter.timeout(session, now=arbiter.max_timeout - 1)
    settled = arbiter.timeout(session, now=arbiter.max_timeout)
    assert settled.transition == Transition(TK.UNSENT_REPORTED_TIMEOUT, 2)
    assert (settled.payout.to_buyer, settled.payout.to_seller) == (200, 0)


def test_silent_seller_times_out_while_active(arbiter, session, params):
    assert session.obligated == Role.SELLER
    with pytest.raises(ArbiterError):
        arbiter.timeout(session, now=arbiter.max_timeout - 1)
    assert arbiter.get_session(session.id).tx_count == 2
    settled = arbiter.timeout(session, now=arbiter.max_timeout)
    assert settled.transition == Transition(TK.UNSENT_REPORTED_TIMEOUT, params.n)
    payout = settled.payout
    assert (payout.to_buyer, payout.to_seller, payout.burned) == (200, 0, 100)
    assert settled.obligated is None
    assert settled.tx_count == 3


def test_inactivity_window_starts_at_funding(arbiter, params, seller_state):
    opened = arbiter.set_parameters_and_pay(params, 100, seller_state.commitment, now=3)
    assert opened.obligated == Role.BUYER
    # no inactivity row before the buyer has paid
    with pytest.raises(ArbiterError):
        arbiter.timeout(opened, now=10**6)
    active = arbiter.accept_parameters_and_pay(opened, 200, now=10)
    with pytest.raises(ArbiterError):
        arbiter.timeout(active, now=9 + arbiter.max_timeout)
    assert arbiter.timeout(active, now=10 + arbiter.max_timeout).status == Status.SETTLED


def test_false_ack_claim(arbiter, session, seller_state, ack):
    arbiter.report(session, Role.SELLER, 2, evidence=ack(2), now=5)
    settled = arbiter.timeout(session, now=5 + arbiter.max_timeout)
    assert settled.transition == Transition(TK.FALSE_ACK_BUYER_TIMEOUT, 2)


def test_false_ack_claim_answered_by_buyer(arbiter, session, seller_state, ack):
    arbiter.report(session, Role.SELLER, 2, evidence=ack(2), now=5)
    digest, block = proof_for(seller_state, 2)
    with pytest.raises(ArbiterError):
        arbiter.prove(session, Role.SELLER, block, digest, now=6)
    settled = arbiter.prove(session, Role.BUYER, block, digest, now=6)
    assert settled.transition == Transition(TK.FALSE_ACK_BUYER_PROVED, 2)


@pytest.mark.parametrize(
    "delivered, kind", [(None, TK.SENT_BUYER_TIMEOUT), (False, TK.UNSENT_BUYER_TIMEOUT)]
)
def test_no_ack_claim(arbiter, session, ack, delivered, kind):
    disputed = arbiter.report(
        session, Role.SELLER, 2, evidence=ack(3), now=5, delivered=delivered
    )
    assert disputed.dispute.respondent is None
    settled = arbiter.timeout(session, now=5 + arbiter.max_timeout)
    assert settled.transition == Transition(kind, 2)


def test_no_ack_for_first_transfer(arbiter, session):
    disputed = arbiter.report(session, Role.SELLER, 4, now=3)
    assert disputed.dispute.kind.value == "no_ack"


def test_rejected_calls_leave_session_unchanged(arbiter, session, seller_state, ack, caplog):
    with caplog.at_level(logging.WARNING):
        with pytest.raises(ArbiterError):
            arbiter.finalize(session, ack(2))
    assert "rejected" in caplog.text
    with pytest.raises(ArbiterError):
        arbiter.report(session, Role.SELLER, 2, evidence=ack(1))
    with pytest.raises(ArbiterError):
        arbiter.report(session, Role.BUYER, 0)
    with pytest.raises(ArbiterError):
        arbiter.timeout(session, now=arbiter.max_timeout - 1)
    with pytest.raises(ArbiterError):
        arbiter.prove(session, Role.SELLER, *reversed(proof_for(seller_state, 4)))
    assert arbiter.get_session(session.id) == session


def test_bad_proof_and_late_proof(arbiter, session, seller_state):
    arbiter.report(session, Role.BUYER, 3, now=0)
    digest, block = proof_for(seller_state, 2)
    with pytest.raises(ArbiterError):
        arbiter.prove(session, Role.SELLER, block, digest, now=1)
    digest, block = proof_for(seller_state, 3)
    with pytest.raises(ArbiterError):
        arbiter.prove(session, Role.SELLER, block, digest, now=arbiter.max_timeout)
    with pytest.raises(ArbiterError):
        arbiter.report(session, Role.BUYER, 3, now=1)
    assert arbiter.get_session(session.id).tx_count == 3


def test_settled_session_is_closed(arbiter, session, ack):
    arbiter.finalize(session, ack(1), now=4)
    with pytest.raises(ArbiterError):
        arbiter.report(session, Role.BUYER, 1, now=5)
    with pytest.raises(ArbiterError):
        arbiter.finalize(session, ack(1), now=5)


def test_clock_cannot_go_back(arbiter, session):
    arbiter.report(session, Role.BUYER, 1, now=20)
    with pytest.raises(ArbiterError):
        arbiter.timeout(session, now=19)


def test_opening_checks(arbiter, params, seller_state, session):
    # one open session per (buyer, seller, fingerprint)
    with pytest.raises(ArbiterError):
        arbiter.set_parameters_and_pay(params, 100, seller_state.commitment)
    other = ArbiterService({"max_timeout": "50"})
    with pytest.raises(ArbiterError):
        other.set_parameters_and_pay(params, 99, seller_state.commitment)
    with pytest.raises(ArbiterError):
        other.set_parameters_and_pay(params, 100, seller_state.commitment[1:])
    opened = other.set_parameters_and_pay(params, 150, seller_state.commitment)
    assert opened.escrow == 100
    with pytest.raises(ArbiterError):
        other.accept_parameters_and_pay(opened, 199)
    assert other.get_session(opened.id).tx_count == 1


def test_is_open(arbiter, params, session, ack):
    assert arbiter.is_open(params.buyer_pub, params.seller_pub, params.fingerprint)
    arbiter.finalize(session, ack(1))
    assert not arbiter.is_open(params.buyer_pub, params.seller_pub, params.fingerprint)


def test_cleartext_proof(seller_state):
    digest, block = proof_for(seller_state, 2)
    assert CleartextProof(digest, block).verify(seller_state.commitment[2])
    assert not CleartextProof(digest, block).verify(seller_state.commitment[3])
    assert not CleartextProof(digest, b"short").verify(seller_state.commitment[2])
    assert compress(digest, block) == seller_state.commitment[2]


def test_session_text(arbiter, session, ack):
    final = arbiter.finalize(session, ack(1), now=9)
    text = final.to_text()
    assert f"session={final.id}" in text
    assert "status=settled" in text
    assert "transition=HonestComplete" in text
    assert "payout=100/200/0" in text
    assert "tx_count=3" in text


def test_service_surface(arbiter, session):
    assert arbiter.get_profile() == "default"
    assert arbiter.set_profile("prod") == "prod"
    assert "1 sessions" in arbiter.info()
    assert list(arbiter.sessions) == [session.id]
    arbiter.close()
    with pytest.raises(RuntimeError):
        arbiter.get_session(session.id)
    arbiter.connect()
    with pytest.raises(ArbiterError):
        arbiter.get_session(session.id)


def test_profile_and_env(monkeypatch):
    arbiter = ArbiterService({"max_timeout": "30", "chunk_len": "4"})
    assert (arbiter.max_timeout, arbiter.chunk_len) == (30, 4)
    monkeypatch.setenv("FAIREX_CHUNK_LEN", "8")
    assert ArbiterService({"chunk_len": "4"}).chunk_len == 8
    with pytest.raises(ValueError):
        ArbiterService({"max_timeout": "0"})
