"""Reference augmentation service speaking the JSON-lines port protocol on stdin/stdout.

    python -m advqa.portstub [--drop WORD ...] [--rewrite OLD NEW ...] [--corpus FILE]

Translation is the identity except for the requested rewrites and dropped
words (handy for exercising the skip paths). Perplexity comes from a unigram
model over ``--corpus`` (constant 1.0 without one). Neighbours come from
``--neighbors FILE``, a JSON object ``{"word": [["other", 0.9], ...]}``.
"""

from __future__ import annotations

import argparse
import json
import sys

from .augmentation import ConstantPerplexity, RewriteTranslator, TableNeighbors, UnigramPerplexity


def build_handler(args: argparse.Namespace):
    rewrites = [tuple(pair) for pair in args.rewrite or []] + [(w, "") for w in args.drop or []]
    translator = RewriteTranslator(rewrites)
    if args.corpus:
        with open(args.corpus, encoding="utf-8") as fh:
            scorer = UnigramPerplexity(fh)
    else:
        scorer = ConstantPerplexity(1.0)
    table = {}
    if args.neighbors:
        with open(args.neighbors, encoding="utf-8") as fh:
            table = json.load(fh)
    embedder = TableNeighbors(table)

    def handle(req: dict):
        op = req.get("op")
        if op == "translate":
            return translator.translate(req["text"], req["direction"])
        if op == "perplexity":
            return scorer.perplexity(req["text"])
        if op == "neighbors":
            return embedder.neighbors(req["word"], int(req["k"]))
        raise ValueError(f"unknown op {op!r}")

    return handle


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="advqa.portstub")
    ap.add_argument("--drop", nargs="*", metavar="WORD")
    ap.add_argument("--rewrite", nargs=2, action="append", metavar=("OLD", "NEW"))
    ap.add_argument("--corpus")
    ap.add_argument("--neighbors")
    handle = build_handler(ap.parse_args(argv))
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            reply = {"result": handle(json.loads(line))}
        except Exception as err:  # report to the client, keep serving
            reply = {"error": f"{type(err).__name__}: {err}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
