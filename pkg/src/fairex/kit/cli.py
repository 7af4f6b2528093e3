import argparse
import logging
import sys
from dataclasses import dataclass
from typing import Sequence

from .client import ExchangeClient
from .game import (
    backwards_induction,
    build_full_tree,
    build_pruned_tree,
    check_honest_spe,
    format_report,
    load_game_config,
)
from .hashchain import (
    ChainingValue,
    compute_intermediate_hashes,
    pad_message,
    partition_chunks,
)
from .services.arbiter import Transition, TransitionKind, payout_formula, settle_table
from .simnet import SimNet, deviation_scenarios, format_matrix, load_scenario

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


@dataclass(frozen=True)
class _Terms:
    n: int
    price: int
    seller_deposit: int
    buyer_deposit: int

    @property
    def escrow(self) -> int:
        return self.price + self.seller_deposit + self.buyer_deposit


def _simnet(args: argparse.Namespace) -> SimNet:
    if args.config:
        return ExchangeClient(args.config, connect=False).simnet()
    return SimNet()


def _print_summary(summary: dict) -> None:
    payout = summary["payout"]
    print(f"scenario:   {summary['scenario']}")
    print(f"terminal:   {summary['transition'] or 'unsettled'}")
    if payout:
        print(
            f"payout:     buyer={payout['buyer']} seller={payout['seller']} "
            f"burned={payout['burned']}"
        )
    print(f"tx_count:   {summary['tx_count']}")
    print(f"rounds:     {summary['rounds']}")
    print(f"chunks:     {summary['transferred']} delivered")
    if summary["utilities"]:
        utilities = summary["utilities"]
        print(f"utilities:  buyer={utilities['buyer']} seller={utilities['seller']}")
    print(f"checksum:   {summary['checksum'] or '-'}")


def cmd_exchange(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    net = _simnet(args)
    if args.matrix:
        rows = net.run_matrix(deviation_scenarios(scenario))
        print(format_matrix(rows))
        return EXIT_FAILURE if any(r.profitable for r in rows) else EXIT_OK
    trace = net.run_scenario(scenario)
    if args.trace:
        trace.write(args.trace)
    _print_summary(trace.summary())
    return EXIT_OK if trace.session and trace.session.payout else EXIT_FAILURE


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        expected = ChainingValue.from_hex(args.fingerprint)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    with open(args.file, "rb") as f:
        data = f.read()
    pf = pad_message(data)
    plan = partition_chunks(pf.m, args.chunk_len)
    hashes = compute_intermediate_hashes(pf, plan)
    print(f"blocks: {pf.m}  chunks: {plan.n}  chunk_len: {plan.chunk_len}")
    for k in range(1, plan.n + 1):
        first, last = plan.range(k)
        print(f"H_{k:<6} blocks {first}-{last:<8} {hashes[k].hex()}")
    if hashes[-1] == expected:
        print("fingerprint matches")
        return EXIT_OK
    print(f"fingerprint mismatch: file hashes to {hashes[-1].hex()}")
    return EXIT_FAILURE


def cmd_analyze(args: argparse.Namespace) -> int:
    config = load_game_config(args.game)
    if args.full:
        tree = build_full_tree(config, buyer_can_prove=args.buyer_can_prove)
    else:
        tree = build_pruned_tree(config)
    result = backwards_induction(tree)
    print(format_report(tree, result))
    ok = result.honest_is_spe
    if args.trials:
        holds = check_honest_spe(
            config.n,
            config.price,
            config.value,
            config.cost,
            args.trials,
            seed=args.seed,
            full=args.full,
        )
        print(f"honest play over {args.trials} random profiles: {'holds' if holds else 'fails'}")
        ok = ok and holds
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_multiparty(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    result = _simnet(args).run_multiparty(scenario)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            f.write(result.to_jsonl())
    summary = result.summary()
    print(f"trade:      {summary['trade']}  tx_count={summary['tx_count']}")
    print(f"funding:    {summary['funding_tx_count']} pool calls")
    for q, segment in enumerate(summary["segments"], start=1):
        payout = segment["payout"]
        cells = (
            f"buyer={payout['buyer']} seller={payout['seller']} burned={payout['burned']}"
            if payout
            else "unsettled"
        )
        print(f"segment {q}:  {segment['transition'] or '-'}  {cells}")
    print(f"checksum:   {summary['checksum'] or '-'}")
    return EXIT_OK if result.file_ok else EXIT_FAILURE


def cmd_payout_table(args: argparse.Namespace) -> int:
    terms = _Terms(args.n, args.fp, args.ds, args.db)
    if not 1 <= args.k <= args.n:
        print(f"error: k must be within 1..{args.n}", file=sys.stderr)
        return EXIT_USAGE
    print(
        f"n={terms.n} k={args.k} F_p={terms.price} D_S={terms.seller_deposit} "
        f"D_B={terms.buyer_deposit} escrow={terms.escrow}"
    )
    for kind in TransitionKind:
        k = 1 if kind == TransitionKind.HONEST_COMPLETE else args.k
        transition = Transition(kind, k)
        exact = payout_formula(transition, terms)
        payout = settle_table(transition, terms)
        print(
            f"{str(transition):<26} buyer={payout.to_buyer:<8} seller={payout.to_seller:<8} "
            f"burned={payout.burned:<6} exact=({exact[0]}, {exact[1]})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairex", description="Fair file exchange with a simulated escrow arbiter"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="profile INI file ([global] default_profile)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exchange", help="run a scenario through the simulator")
    p.add_argument("scenario")
    p.add_argument("--trace", help="write the JSON-lines trace to this path")
    p.add_argument(
        "--matrix", action="store_true", help="run every single deviation against honest play"
    )
    p.set_defaults(func=cmd_exchange)

    p = sub.add_parser("verify", help="print intermediate hashes and check a fingerprint")
    p.add_argument("file")
    p.add_argument("fingerprint", help="lowercase hex SHA-256")
    p.add_argument("--chunk-len", type=int, default=1)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="solve the exchange game by backwards induction")
    p.add_argument("game")
    p.add_argument("--full", action="store_true", help="unpruned tree (small n only)")
    p.add_argument("--buyer-can-prove", action="store_true")
    p.add_argument("--trials", type=int, default=0, help="random utility profiles to check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("multiparty", help="run a multi-seller scenario")
    p.add_argument("scenario")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_multiparty)

    p = sub.add_parser("payout-table", help="instantiate the nine settlement rows")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--fp", type=int, required=True)
    p.add_argument("--ds", type=int, required=True)
    p.add_argument("--db", type=int, required=True)
    p.set_defaults(func=cmd_payout_table)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
