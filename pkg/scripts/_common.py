"""Argument handling shared by the experiment scripts."""
import argparse
import logging

from tr2.experiments import SEEDS, protocol


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one protocol key (repeatable)")
    p.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    p.add_argument("--out", default="results")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args, *extra: str):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    return protocol(*extra, *args.set), seeds
