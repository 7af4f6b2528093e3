"""Extensive-form model of the exchange and its backwards-induction solver.

Terminal payoffs are (buyer total, seller total): the arbiter's payout for the terminal row plus
the relative utility of the chunks transferred so far, ``gB(t) * value`` for the buyer and
``gS(t) * cost`` for the seller. All arithmetic is exact.
"""
import logging
import random
from configparser import ConfigParser
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

from .protocol import Role
from .services.arbiter import Transition, TransitionKind, payout_formula

FULL_TREE_MAX_N = 6

Payoff = tuple[Fraction, Fraction]

# honest action per node kind
SEND, WITHHOLD = "send", "withhold"
ACK, REPORT, TIMEOUT = "ack", "report", "timeout"
PROVE, CONTINUE, CLAIM = "prove", "continue", "claim"


def _fractions(values: Sequence) -> tuple[Fraction, ...]:
    return tuple(Fraction(v) for v in values)


@dataclass(frozen=True)
class UtilityProfile:
    """Relative utilities indexed by the number of chunks transferred (0..n).

    Attributes:
    -----------
    gB : tuple[Fraction]
        buyer share of the file value, non-decreasing from 0 to 1
    gS : tuple[Fraction]
        seller share of the production cost kept, non-increasing from 1 to 0
    """

    gB: tuple[Fraction, ...]
    gS: tuple[Fraction, ...]
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "gB", _fractions(self.gB))
        object.__setattr__(self, "gS", _fractions(self.gS))
        if len(self.gB) < 2 or len(self.gB) != len(self.gS):
            raise ValueError("Utility curves need n + 1 values each, n >= 1")
        if self.gB[0] != 0 or self.gB[-1] != 1 or self.gS[0] != 1 or self.gS[-1] != 0:
            raise ValueError("Utility endpoints must be gB(0)=0, gB(n)=1, gS(0)=1, gS(n)=0")
        if any(b > a for a, b in zip(self.gB[1:], self.gB)):
            raise ValueError("gB must be non-decreasing")
        if any(b < a for a, b in zip(self.gS[1:], self.gS)):
            raise ValueError("gS must be non-increasing")

    @property
    def n(self) -> int:
        return len(self.gB) - 1

    @classmethod
    def linear(cls, n: int) -> "UtilityProfile":
        return cls(
            [Fraction(t, n) for t in range(n + 1)],
            [1 - Fraction(t, n) for t in range(n + 1)],
            "linear",
        )

    @classmethod
    def entire_file(cls, n: int) -> "UtilityProfile":
        """Only the complete file has value (e.g. an encrypted archive)."""
        return cls([0] * n + [1], [1] * n + [0], "entire_file")

    @classmethod
    def first_chunk(cls, n: int) -> "UtilityProfile":
        """The first chunk already carries the whole value."""
        return cls([0] + [1] * n, [1] + [0] * n, "first_chunk")

    @classmethod
    def random(cls, n: int, rng: random.Random, resolution: int = 1000) -> "UtilityProfile":
        """Random monotone profile with interior values on a ``1/resolution`` grid."""
        inner_b = sorted(Fraction(rng.randint(0, resolution), resolution) for _ in range(n - 1))
        inner_s = sorted(
            (Fraction(rng.randint(0, resolution), resolution) for _ in range(n - 1)),
            reverse=True,
        )
        return cls([0, *inner_b, 1], [1, *inner_s, 0], "random")

    @classmethod
    def from_name(cls, name: str, n: int, seed: int = 0) -> "UtilityProfile":
        if name == "random":
            return cls.random(n, random.Random(seed))
        try:
            return {
                "linear": cls.linear,
                "entire_file": cls.entire_file,
                "first_chunk": cls.first_chunk,
            }[name](n)
        except KeyError:
            raise ValueError(f"Unknown utility profile {name!r}") from None


@dataclass(frozen=True)
class GameConfig:
    """Economic parameters of one game.

    ``strict`` enforces cost <= price <= value; counterexample runs switch it off.
    """

    n: int
    price: int
    value: int
    cost: int
    seller_deposit: int
    buyer_deposit: int
    utilities: UtilityProfile
    strict: bool = True

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("A game needs at least one chunk")
        if self.utilities.n != self.n:
            raise ValueError(f"Utility profile is for n={self.utilities.n}, game has n={self.n}")
        if min(self.price, self.value, self.cost, self.seller_deposit, self.buyer_deposit) < 0:
            raise ValueError("Monetary parameters cannot be negative")
        if self.price <= 0:
            raise ValueError("File price must be positive")
        if self.strict and not self.cost <= self.price <= self.value:
            raise ValueError("The trade requires cost <= price <= value")

    @property
    def escrow(self) -> int:
        return self.price + self.seller_deposit + self.buyer_deposit

    @classmethod
    def from_config(cls, config: ConfigParser) -> "GameConfig":
        """Reads the [game] section: n, price, value, cost, deposits, utilities, seed, strict."""
        if not config.has_section("game"):
            raise ValueError("Game config lacks a [game] section")
        section = config["game"]
        try:
            n = section.getint("n")
            price = section.getint("price")
            value = section.getint("value")
        except ValueError as e:
            raise ValueError(f"Malformed game config: {e}") from None
        if n is None or price is None or value is None:
            raise ValueError("Game config needs n, price and value")
        utilities = UtilityProfile.from_name(
            section.get("utilities", "linear"), n, section.getint("seed", 0)
        )
        return cls(
            n=n,
            price=price,
            value=value,
            cost=section.getint("cost", 0),
            seller_deposit=section.getint("seller_deposit", price),
            buyer_deposit=section.getint("buyer_deposit", price),
            utilities=utilities,
            strict=section.getboolean("strict", True),
        )


def load_game_config(path: str) -> GameConfig:
    config = ConfigParser()
    if not config.read(path):
        raise ValueError(f"Cannot read game config {path}")
    return GameConfig.from_config(config)


@dataclass(frozen=True)
class Node:
    """Decision node (``actor`` set) or leaf (``transition`` and ``payoff`` set)."""

    label: str
    k: int
    transferred: int
    actor: Role | None = None
    honest: str | None = None
    children: tuple[tuple[str, "Node"], ...] = ()
    transition: Transition | None = None
    payoff: Payoff | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class GameTree:
    config: GameConfig
    root: Node
    full: bool = False
    buyer_can_prove: bool = False

    def nodes(self) -> Iterator[Node]:
        """Pre-order traversal."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(child for _, child in reversed(node.children))

    def __len__(self) -> int:
        return sum(1 for _ in self.nodes())

    def find(self, label: str) -> Node:
        for node in self.nodes():
            if node.label == label:
                return node
        raise KeyError(label)


@dataclass(frozen=True)
class EquilibriumResult:
    """Outcome of backwards induction.

    ``honest_is_spe`` holds when no decision node, on or off the equilibrium path, prefers a
    dishonest action. ``honest_path`` is the weaker reading: the induced play is send and ack for
    every chunk, ending in HonestComplete.
    """

    honest_is_spe: bool
    honest_path: bool
    root_value: Payoff
    best_actions: dict[str, str] = field(default_factory=dict)
    values: dict[str, Payoff] = field(default_factory=dict)
    deviations: tuple[str, ...] = ()
    path: tuple[tuple[str, str], ...] = ()

    @property
    def first_deviation(self) -> str | None:
        return self.deviations[0] if self.deviations else None


def leaf_payoff(config: GameConfig, transition: Transition, transferred: int) -> Payoff:
    """Arbiter payout of ``transition`` plus the utility of ``transferred`` chunks."""
    buyer, seller = payout_formula(transition, config)
    g = config.utilities
    return (
        buyer + g.gB[transferred] * config.value,
        seller + g.gS[transferred] * config.cost,
    )


class _Builder:
    def __init__(self, config: GameConfig, full: bool, buyer_can_prove: bool) -> None:
        self.config = config
        self.full = full
        self.buyer_can_prove = buyer_can_prove

    @staticmethod
    def _label(name: str, skipped: tuple[int, ...]) -> str:
        if not skipped:
            return name
        return f"{name}~{'.'.join(map(str, skipped))}"

    def leaf(self, kind: TransitionKind, k: int, t: int, skipped: tuple[int, ...]) -> Node:
        transition = Transition(kind, k)
        return Node(
            label=self._label(f"{transition}@{t}", skipped),
            k=k,
            transferred=t,
            transition=transition,
            payoff=leaf_payoff(self.config, transition, t),
        )

    def decision(
        self,
        name: str,
        k: int,
        t: int,
        skipped: tuple[int, ...],
        actor: Role,
        honest: str,
        children: list[tuple[str, Node]],
    ) -> Node:
        return Node(
            label=self._label(name, skipped),
            k=k,
            transferred=t,
            actor=actor,
            honest=honest,
            children=tuple(children),
        )

    def next_round(self, k: int, t: int, skipped: tuple[int, ...]) -> Node:
        if k == 1:
            return self.leaf(TransitionKind.HONEST_COMPLETE, 1, t, skipped)
        return self.seller_node(k - 1, t, skipped)

    def seller_node(self, k: int, t: int, skipped: tuple[int, ...] = ()) -> Node:
        return self.decision(
            f"S{k}",
            k,
            t,
            skipped,
            Role.SELLER,
            SEND,
            [
                (SEND, self.after_send(k, t + 1, skipped)),
                (WITHHOLD, self.after_withhold(k, t, skipped)),
            ],
        )

    def prove_node(
        self,
        name: str,
        k: int,
        t: int,
        skipped: tuple[int, ...],
        actor: Role,
        proved: TransitionKind,
        timed_out: TransitionKind,
    ) -> Node:
        return self.decision(
            name,
            k,
            t,
            skipped,
            actor,
            PROVE,
            [
                (PROVE, self.leaf(proved, k, t, skipped)),
                (TIMEOUT, self.leaf(timed_out, k, t, skipped)),
            ],
        )

    def after_send(self, k: int, t: int, skipped: tuple[int, ...]) -> Node:
        acked = self.next_round(k, t, skipped)
        if self.full:
            acked = self.decision(
                f"C{k}",
                k,
                t,
                skipped,
                Role.SELLER,
                CONTINUE,
                [
                    (CONTINUE, acked),
                    (
                        CLAIM,
                        self.prove_node(
                            f"D{k}",
                            k,
                            t,
                            skipped,
                            Role.BUYER,
                            TransitionKind.FALSE_ACK_BUYER_PROVED,
                            TransitionKind.FALSE_ACK_BUYER_TIMEOUT,
                        ),
                    ),
                ],
            )
        reported = self.prove_node(
            f"P{k}'",
            k,
            t,
            skipped,
            Role.SELLER,
            TransitionKind.SENT_REPORTED_PROVED,
            TransitionKind.SENT_REPORTED_TIMEOUT,
        )
        return self.decision(
            f"B{k}'",
            k,
            t,
            skipped,
            Role.BUYER,
            ACK,
            [
                (ACK, acked),
                (REPORT, reported),
                (TIMEOUT, self.leaf(TransitionKind.SENT_BUYER_TIMEOUT, k, t, skipped)),
            ],
        )

    def after_withhold(self, k: int, t: int, skipped: tuple[int, ...]) -> Node:
        reported = self.prove_node(
            f"P{k}''",
            k,
            t,
            skipped,
            Role.SELLER,
            TransitionKind.UNSENT_REPORTED_PROVED,
            TransitionKind.UNSENT_REPORTED_TIMEOUT,
        )
        children = [
            (REPORT, reported),
            (TIMEOUT, self.leaf(TransitionKind.UNSENT_BUYER_TIMEOUT, k, t, skipped)),
        ]
        if self.full:
            children.append((ACK, self.after_false_ack(k, t, skipped)))
        return self.decision(f"B{k}''", k, t, skipped, Role.BUYER, REPORT, children)

    def after_false_ack(self, k: int, t: int, skipped: tuple[int, ...]) -> Node:
        if self.buyer_can_prove:
            claimed = self.prove_node(
                f"D{k}*",
                k,
                t,
                skipped,
                Role.BUYER,
                TransitionKind.FALSE_ACK_BUYER_PROVED,
                TransitionKind.FALSE_ACK_BUYER_TIMEOUT,
            )
        else:
            claimed = self.leaf(TransitionKind.FALSE_ACK_BUYER_TIMEOUT, k, t, skipped)
        return self.decision(
            f"C{k}*",
            k,
            t,
            skipped,
            Role.SELLER,
            CLAIM,
            [(CLAIM, claimed), (CONTINUE, self.next_round(k, t, skipped + (k,)))],
        )


def build_pruned_tree(config: GameConfig) -> GameTree:
    """Linear-size tree without the false-acknowledgment branches (11n + 1 nodes)."""
    root = _Builder(config, full=False, buyer_can_prove=False).seller_node(config.n, 0)
    return GameTree(config=config, root=root)


def build_full_tree(config: GameConfig, buyer_can_prove: bool = False) -> GameTree:
    """Complete tree including false acknowledgments and the seller's claims.

    Parameters:
    -----------
    config : GameConfig
        game parameters, ``n`` at most FULL_TREE_MAX_N
    buyer_can_prove : bool
        models a buyer who already holds the data of a falsely acknowledged chunk
    """
    if config.n > FULL_TREE_MAX_N:
        raise ValueError(f"Full tree is exponential; n={config.n} exceeds {FULL_TREE_MAX_N}")
    builder = _Builder(config, full=True, buyer_can_prove=buyer_can_prove)
    return GameTree(
        config=config,
        root=builder.seller_node(config.n, 0),
        full=True,
        buyer_can_prove=buyer_can_prove,
    )


def _actor_index(role: Role) -> int:
    return 0 if role == Role.BUYER else 1


def backwards_induction(tree: GameTree) -> EquilibriumResult:
    """Solves the tree bottom-up; ties go to the honest action."""
    values: dict[str, Payoff] = {}
    best: dict[str, str] = {}

    # iterative post-order, deep pruned trees exceed the recursion limit
    stack: list[tuple[Node, bool]] = [(tree.root, False)]
    while stack:
        node, expanded = stack.pop()
        if node.is_leaf:
            values[node.label] = node.payoff
            continue
        if not expanded:
            stack.append((node, True))
            stack.extend((child, False) for _, child in node.children)
            continue
        i = _actor_index(node.actor)
        options = {action: values[child.label] for action, child in node.children}
        top = max(v[i] for v in options.values())
        if options[node.honest][i] == top:
            choice = node.honest
        else:
            choice = next(a for a, v in options.items() if v[i] == top)
        best[node.label] = choice
        values[node.label] = options[choice]

    deviations = tuple(
        node.label
        for node in tree.nodes()
        if not node.is_leaf and best[node.label] != node.honest
    )

    path = []
    honest_path = True
    node = tree.root
    while not node.is_leaf:
        action = best[node.label]
        path.append((node.label, action))
        honest_path = honest_path and action == node.honest
        node = dict(node.children)[action]

    result = EquilibriumResult(
        honest_is_spe=not deviations,
        honest_path=honest_path and node.transition.kind == TransitionKind.HONEST_COMPLETE,
        root_value=values[tree.root.label],
        best_actions=best,
        values=values,
        deviations=deviations,
        path=tuple(path),
    )
    logging.debug(
        "Solved %s tree n=%d: spe=%s, deviations=%d",
        "full" if tree.full else "pruned",
        tree.config.n,
        result.honest_is_spe,
        len(deviations),
    )
    return result


def find_leaf(tree: GameTree, transition: Transition, transferred: int) -> Node:
    """First leaf in pre-order ending in ``transition`` after ``transferred`` chunks."""
    for node in tree.nodes():
        if node.is_leaf and node.transition == transition and node.transferred == transferred:
            return node
    raise KeyError(f"No leaf {transition} with {transferred} chunks transferred")


def seller_deviation_bound(config: GameConfig, k: int) -> Fraction:
    """Upper bound on what withholding chunk k can earn the seller.

    ``k`` is the file-order index and chunks go out from n down to 1, so the bound is
    (n - k + 1)/n * price + cost. Indexing by the chunks still to send turns it into k/n.
    """
    return Fraction(config.n - k + 1, config.n) * config.price + config.cost


def check_honest_spe(
    n: int,
    price: int,
    value: int,
    cost: int,
    trials: int,
    seed: int = 0,
    full: bool = False,
) -> bool:
    """Honest play is subgame perfect for deposits D_S = D_B = price.

    Checks the two extreme profiles, the linear one and ``trials`` random monotone profiles.
    """
    if not cost <= price <= value:
        raise ValueError("The trade requires cost <= price <= value")
    rng = random.Random(seed)
    profiles = [
        UtilityProfile.linear(n),
        UtilityProfile.entire_file(n),
        UtilityProfile.first_chunk(n),
    ]
    profiles.extend(UtilityProfile.random(n, rng) for _ in range(trials))
    build = build_full_tree if full else build_pruned_tree
    for profile in profiles:
        config = GameConfig(n, price, value, cost, price, price, profile)
        result = backwards_induction(build(config))
        if not result.honest_is_spe:
            logging.info(
                "Honest play is not subgame perfect for %s profile %s: first deviation at %s",
                profile.name,
                profile.gB,
                result.first_deviation,
            )
            return False
    return True


def economic_security(cost_preimg, price, w_f, cost) -> tuple[bool, bool]:
    """Whether second preimages are too expensive to cheat with.

    Returns:
    --------
    (single_chunk_safe, corrupt_chunk_safe): the first holds when a preimage costs more than the
    file price, the second when it costs more than price, the wasted value ``w_f`` and the
    production cost together.
    """
    if min(cost_preimg, price, w_f, cost) < 0:
        raise ValueError("Inputs must be non-negative")
    return cost_preimg > price, cost_preimg > price + w_f + cost


def deposit_lower_bounds(config: GameConfig) -> dict[str, Fraction]:
    return {
        "seller": Fraction(config.price),
        "buyer": Fraction(config.price),
        "seller_withhold_last": Fraction(config.cost) - Fraction(config.price, config.n),
    }


def _fmt(value: Fraction) -> str:
    return str(value.numerator) if value.denominator == 1 else f"{float(value):.4f}"


def format_report(tree: GameTree, result: EquilibriumResult) -> str:
    """Per-node listing of the chosen action and continuation values (buyer, seller)."""
    config = tree.config
    lines = [
        f"game: n={config.n} price={config.price} value={config.value} cost={config.cost} "
        f"D_S={config.seller_deposit} D_B={config.buyer_deposit} "
        f"utilities={config.utilities.name} tree={'full' if tree.full else 'pruned'}",
        f"honest is SPE: {'yes' if result.honest_is_spe else 'no'}",
        f"root value: buyer={_fmt(result.root_value[0])} seller={_fmt(result.root_value[1])}",
    ]
    if result.first_deviation:
        node = tree.find(result.first_deviation)
        lines.append(
            f"first deviation: {node.label} ({node.actor.value}) plays "
            f"{result.best_actions[node.label]} instead of {node.honest}"
        )
    lines.append("equilibrium path: " + " ".join(f"{lbl}:{a}" for lbl, a in result.path))
    lines.append("")
    for node in tree.nodes():
        if node.is_leaf:
            continue
        b, s = result.values[node.label]
        action = result.best_actions[node.label]
        mark = "  <- deviates" if action != node.honest else ""
        lines.append(
            f"{node.label:<14} {node.actor.value:<6} {action:<9} "
            f"buyer={_fmt(b):>12} seller={_fmt(s):>12}{mark}"
        )
    return "\n".join(lines)
